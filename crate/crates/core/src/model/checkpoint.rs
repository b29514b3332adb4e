//! Parameter dumps: one JSON header line, then every weight and bias as
//! little-endian `f64`, layer by layer (weights row-major, then biases).

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Mlp, ModelError};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layer_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub num_values: usize,
}

pub fn save_checkpoint(model: &Mlp, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        layer_dims: model.dims().to_vec(),
        dropout_rate: model.dropout_rate(),
        num_values: model.num_parameters(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    out.push(b'\n');
    out.reserve(header.num_values * 8);
    for (w, b) in model.weights().iter().zip(model.biases()) {
        for v in w.iter().chain(b.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Restore a model. The dropout stream of the restored model is reseeded
/// from `dropout_seed`; it is not part of the file.
pub fn load_checkpoint(path: impl AsRef<Path>, dropout_seed: u64) -> Result<Mlp, ModelError> {
    let bytes = fs::read(path)?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ModelError::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let body = &bytes[split + 1..];
    if body.len() != header.num_values * 8 {
        return Err(ModelError::Checkpoint(format!(
            "expected {} values, found {} bytes",
            header.num_values,
            body.len()
        )));
    }
    let mut model = Mlp::new(&header.layer_dims, header.dropout_rate, &mut seeded(dropout_seed))?;
    if model.num_parameters() != header.num_values {
        return Err(ModelError::Checkpoint("value count does not match layer dims".into()));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let dims = header.layer_dims.clone();
    for (l, pair) in dims.windows(2).enumerate() {
        let w: Vec<f64> = values.by_ref().take(pair[0] * pair[1]).collect();
        let b: Vec<f64> = values.by_ref().take(pair[1]).collect();
        model.weights_mut()[l] = Array2::from_shape_vec((pair[0], pair[1]), w).expect("sized");
        model.biases_mut()[l] = Array1::from(b);
    }
    Ok(model)
}
