//! Model files: a JSON header next to one matrix file per weight and bias.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Dense, FeatureMode, Mlp, MlpConfig, MlpError};
use crate::embed_store::{read_matrix, write_matrix};

pub const MODEL_FORMAT: &str = "omiprobe-mlp/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFiles {
    pub weight: String,
    pub bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub config: MlpConfig,
    pub seed: u64,
    pub n_inputs: usize,
    pub feature_mode: FeatureMode,
    pub encoder_tag: String,
    pub layers: Vec<LayerFiles>,
}

fn sibling(header: &Path, name: &str) -> PathBuf {
    header.parent().unwrap_or(Path::new(".")).join(name)
}

/// Writes `<stem>.json` plus `<stem>.l<i>.{weight,bias}.embx`. Values are
/// stored as f32.
pub fn save_model(
    path: &Path,
    model: &Mlp,
    config: &MlpConfig,
    feature_mode: FeatureMode,
    encoder_tag: &str,
) -> Result<(), MlpError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| MlpError::Model(format!("bad model path {}", path.display())))?;
    let mut layers = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        let files = LayerFiles { weight: format!("{stem}.l{i}.weight.embx"), bias: format!("{stem}.l{i}.bias.embx") };
        write_matrix(&sibling(path, &files.weight), &l.weight.mapv(|v| v as f32))?;
        let bias = Array2::from_shape_fn((1, l.bias.len()), |(_, j)| l.bias[j] as f32);
        write_matrix(&sibling(path, &files.bias), &bias)?;
        layers.push(files);
    }
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        config: config.clone(),
        seed: config.seed,
        n_inputs: model.n_inputs(),
        feature_mode,
        encoder_tag: encoder_tag.to_string(),
        layers,
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(path, json).map_err(|e| MlpError::Model(format!("{}: {e}", path.display())))
}

pub fn load_model(path: &Path) -> Result<(Mlp, ModelHeader), MlpError> {
    let text = fs::read_to_string(path).map_err(|e| MlpError::Model(format!("{}: {e}", path.display())))?;
    let header: ModelHeader =
        serde_json::from_str(&text).map_err(|e| MlpError::Model(format!("{}: {e}", path.display())))?;
    if header.format != MODEL_FORMAT {
        return Err(MlpError::Model(format!("unsupported format `{}`", header.format)));
    }
    let mut layers = Vec::new();
    let mut width = header.n_inputs;
    for (i, files) in header.layers.iter().enumerate() {
        let weight = read_matrix(&sibling(path, &files.weight))?.mapv(f64::from);
        let bias = read_matrix(&sibling(path, &files.bias))?;
        if weight.ncols() != width || bias.nrows() != 1 || bias.ncols() != weight.nrows() {
            return Err(MlpError::Model(format!("layer {i} has inconsistent shapes")));
        }
        width = weight.nrows();
        layers.push(Dense { weight, bias: Array1::from_iter(bias.iter().map(|v| f64::from(*v))) });
    }
    if layers.is_empty() || width != 1 {
        return Err(MlpError::Model("network must end in a single output".into()));
    }
    Ok((Mlp { layers }, header))
}
