use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{weights_fingerprint, ModelBundle, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::tensor_file::{self, TensorRef};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const KIND: &str = "model";

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    config: ModelConfig,
    fingerprint: String,
    tensor_count: usize,
}

pub fn save_model(model: &ModelBundle, path: &Path) -> Result<()> {
    let w = model.weights();
    let names = w.names();
    let shapes = w.shapes();
    let header = ModelHeader {
        format_version: MODEL_FORMAT_VERSION,
        config: *model.config(),
        fingerprint: model.fingerprint().to_string(),
        tensor_count: names.len(),
    };
    let tensors = names
        .iter()
        .zip(&shapes)
        .zip(w.slices())
        .map(|((name, shape), data)| TensorRef { name, shape, data });
    tensor_file::write_file(path, KIND, MODEL_FORMAT_VERSION, &header, tensors)
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let mut decoded = tensor_file::read_file::<ModelHeader>(path, KIND, MODEL_FORMAT_VERSION)?;
    let config = decoded.header.config;
    config
        .validate()
        .map_err(|e| Error::corrupt(path, format!("invalid config: {e}")))?;
    if decoded.tensors.len() != decoded.header.tensor_count {
        return Err(Error::corrupt(path, "tensor count does not match header"));
    }

    let mut weights = Weights::zeros(&config);
    let names = weights.names();
    let shapes = weights.shapes();
    for ((name, shape), dst) in names.iter().zip(&shapes).zip(weights.slices_mut()) {
        let data = decoded.take(name, shape, path)?;
        dst.copy_from_slice(&data);
    }

    let computed = weights_fingerprint(&weights);
    if computed != decoded.header.fingerprint {
        return Err(Error::Fingerprint {
            path: path.to_path_buf(),
            stored: decoded.header.fingerprint,
            computed,
        });
    }
    Ok(ModelBundle::new(config, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_with_capture;

    fn model() -> ModelBundle {
        let cfg = ModelConfig::new(2, 2, 8, 16, 10).unwrap();
        ModelBundle::new(cfg, Weights::random(&cfg, 42, 0.1))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = model();
        save_model(&m, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.fingerprint(), m.fingerprint());
        assert_eq!(loaded, m);

        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let before = forward_with_capture(&m, &tokens, false).unwrap();
        let after = forward_with_capture(&loaded, &tokens, false).unwrap();
        let bits = |r: &crate::model::ForwardResult| {
            r.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&before), bits(&after));

        let path2 = dir.path().join("m2.bin");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn distinct_failure_modes() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.bin");
        assert!(matches!(load_model(&missing), Err(Error::MissingFile(_))));

        let path = dir.path().join("m.bin");
        save_model(&model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("t.bin");
        std::fs::write(&truncated, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(load_model(&truncated), Err(Error::CorruptFile { .. })));

        // flip one payload bit near the end of the file (inside the unembedding)
        let mut tampered = bytes.clone();
        let i = tampered.len() - 20;
        tampered[i] ^= 0x01;
        let tampered_path = dir.path().join("x.bin");
        std::fs::write(&tampered_path, &tampered).unwrap();
        assert!(matches!(load_model(&tampered_path), Err(Error::Fingerprint { .. })));
    }
}
