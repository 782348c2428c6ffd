//! Model files: JSON with every parameter written as an exact hex float.
//!
//! ```json
//! { "format_version": 1, "activation": "softplus",
//!   "layers": [ { "rows": 26, "cols": 2, "weights": ["0x1.2p-3", ...], "bias": [...] } ] }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, Mlp};
use crate::error::{Error, Result};
use crate::hexfloat;
use crate::math::{ActivationKind, Matrix};
use crate::util::write_atomic;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    activation: String,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weights: Vec<String>,
    bias: Vec<String>,
}

pub fn model_to_json(net: &Mlp) -> String {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        activation: net.activation().name().to_string(),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerFile {
                rows: l.out_dim(),
                cols: l.in_dim(),
                weights: l.weights.as_slice().iter().map(|&w| hexfloat::encode(w)).collect(),
                bias: l.bias.iter().map(|&b| hexfloat::encode(b)).collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("model serialisation cannot fail")
}

pub fn model_from_json(text: &str) -> Result<Mlp> {
    let file: ModelFile = serde_json::from_str(text)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "model format version {} (expected {MODEL_FORMAT_VERSION})",
            file.format_version
        )));
    }
    let activation = ActivationKind::from_name(&file.activation)
        .ok_or_else(|| Error::Format(format!("unknown activation {:?}", file.activation)))?;
    let decode_all = |v: &[String]| v.iter().map(|s| hexfloat::decode(s)).collect::<Result<Vec<_>>>();
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, lf) in file.layers.iter().enumerate() {
        let weights = decode_all(&lf.weights)?;
        let bias = decode_all(&lf.bias)?;
        if weights.len() != lf.rows * lf.cols || bias.len() != lf.rows {
            return Err(Error::Format(format!(
                "layer {i} declares {}x{} but holds {} weights and {} biases",
                lf.rows,
                lf.cols,
                weights.len(),
                bias.len()
            )));
        }
        let weights = Matrix::new(lf.rows, lf.cols, weights)?;
        layers.push(Layer::new(weights, bias)?);
    }
    Mlp::new(layers, activation).map_err(|e| Error::Format(format!("inconsistent model: {e}")))
}

pub fn save_model(net: &Mlp, path: &Path) -> Result<()> {
    write_atomic(path, model_to_json(net).as_bytes())
}

pub fn load_model(path: &Path) -> Result<Mlp> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let net = Mlp::default_surrogate(3, 77);
        let back = model_from_json(&model_to_json(&net)).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.checksum(), net.checksum());
    }

    #[test]
    fn file_round_trip_evaluates_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let net = Mlp::default_surrogate(3, 78);
        save_model(&net, &path).unwrap();
        let back = load_model(&path).unwrap();
        let x = [0.3, -1.7, 2.2];
        assert_eq!(back.forward(&x).unwrap().to_bits(), net.forward(&x).unwrap().to_bits());
    }

    #[test]
    fn corrupted_dimension_is_a_format_error() {
        let net = Mlp::default_surrogate(2, 1);
        let text = model_to_json(&net).replacen("\"rows\": 26", "\"rows\": 25", 1);
        assert!(matches!(model_from_json(&text), Err(Error::Format(_))));
    }

    #[test]
    fn broken_layer_chain_is_a_format_error() {
        let net = Mlp::default_surrogate(2, 1);
        let mut v: serde_json::Value = serde_json::from_str(&model_to_json(&net)).unwrap();
        v["layers"].as_array_mut().unwrap().swap(1, 2);
        assert!(matches!(model_from_json(&v.to_string()), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let net = Mlp::default_surrogate(2, 1);
        let text = model_to_json(&net).replacen("\"format_version\": 1", "\"format_version\": 9", 1);
        assert!(matches!(model_from_json(&text), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_model(Path::new("/nonexistent/model.json")),
            Err(Error::Io { .. })
        ));
    }
}
