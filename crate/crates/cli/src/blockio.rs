//! Transformer blocks on disk: a directory holding `block.json` (the
//! dimensions), the two norm scale vectors and one set of SLRT files per
//! projection. A dense projection is `<layer>.slrt`; a decomposed one is
//! `<layer>.s.slrt`, `<layer>.mask.slrt` (0/1), `<layer>.a.slrt` and
//! `<layer>.b.slrt`.

use std::fs;
use std::path::Path;

use slr_core::tensor_io::{read_matrix, read_tensor, write_matrix, write_tensor, Dtype, Tensor};
use slr_core::tm::{BlockParams, BlockSpec, DecomposedLayer, Layer, LayerWeights};
use slr_core::{DenseMatrix, Error, Support};

use crate::error::CliError;

const SPEC_FILE: &str = "block.json";

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

pub fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn write_block(dir: &Path, spec: &BlockSpec, params: &BlockParams) -> Result<(), CliError> {
    create_dir(dir)?;
    let spec_json = serde_json::to_value(spec).expect("spec serializes");
    write_json(&dir.join(SPEC_FILE), &spec_json)?;
    write_tensor(
        dir.join("norm_attn.slrt"),
        &Tensor::vector(params.norm_attn.clone()),
        Dtype::F64,
    )?;
    write_tensor(
        dir.join("norm_mlp.slrt"),
        &Tensor::vector(params.norm_mlp.clone()),
        Dtype::F64,
    )?;
    for layer in Layer::ALL {
        let name = layer.name();
        match params.layer(layer) {
            LayerWeights::Dense(w) => write_matrix(dir.join(format!("{name}.slrt")), w)?,
            LayerWeights::Decomposed(d) => {
                write_matrix(dir.join(format!("{name}.s.slrt")), &d.s)?;
                write_matrix(dir.join(format!("{name}.mask.slrt")), &d.mask.to_matrix())?;
                write_matrix(dir.join(format!("{name}.a.slrt")), &d.a)?;
                write_matrix(dir.join(format!("{name}.b.slrt")), &d.b)?;
            }
        }
    }
    Ok(())
}

pub fn read_block(dir: &Path) -> Result<(BlockSpec, BlockParams), CliError> {
    let spec_path = dir.join(SPEC_FILE);
    let text = fs::read_to_string(&spec_path).map_err(|e| io_error(&spec_path, e))?;
    let spec: BlockSpec = serde_json::from_str(&text).map_err(|e| {
        CliError::Core(Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", spec_path.display()),
        })
    })?;
    spec.validate()?;
    let norm_attn = read_tensor(dir.join("norm_attn.slrt"))?.to_vector()?;
    let norm_mlp = read_tensor(dir.join("norm_mlp.slrt"))?.to_vector()?;
    let mut layers = Vec::with_capacity(Layer::ALL.len());
    for layer in Layer::ALL {
        let name = layer.name();
        let dense = dir.join(format!("{name}.slrt"));
        layers.push(if dense.exists() {
            LayerWeights::Dense(read_matrix(dense)?)
        } else {
            let s = read_matrix(dir.join(format!("{name}.s.slrt")))?;
            let mask = read_matrix(dir.join(format!("{name}.mask.slrt")))?;
            let (rows, cols) = mask.shape();
            let mask = Support::new(
                rows,
                cols,
                mask.as_slice().iter().map(|&v| v != 0.0).collect(),
            );
            let a = read_matrix(dir.join(format!("{name}.a.slrt")))?;
            let b = read_matrix(dir.join(format!("{name}.b.slrt")))?;
            LayerWeights::Decomposed(DecomposedLayer::new(s, mask, a, b)?)
        });
    }
    let params = BlockParams {
        norm_attn,
        norm_mlp,
        layers,
    };
    params.validate(&spec)?;
    Ok((spec, params))
}

/// Calibration stack `count × tokens × n`.
pub fn read_stack(path: &Path) -> Result<Vec<DenseMatrix>, CliError> {
    Ok(read_tensor(path)?.to_stack()?)
}

pub fn write_stack(path: &Path, items: &[DenseMatrix]) -> Result<(), CliError> {
    write_tensor(path, &Tensor::from_stack(items)?, Dtype::F64)?;
    Ok(())
}
