use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LossRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::lens::{Lens, TrainMeta};
use crate::model::{ModelBundle, ModelConfig};
use crate::tensor_file::{self, NamedTensor, TensorRef};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const KIND: &str = "lens-checkpoint";

/// Adam first and second moments, stored as `f32` alongside the lens.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub m_bias: Option<Vec<f32>>,
    pub v_bias: Option<Vec<f32>>,
}

impl OptimizerState {
    pub fn zeros(lens: &Lens) -> Self {
        let n = lens.matrix().len();
        let nb = lens.bias().map(<[f32]>::len);
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            m_bias: nb.map(|n| vec![0.0; n]),
            v_bias: nb.map(|n| vec![0.0; n]),
        }
    }

    pub(crate) fn bias_moments_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (
            self.m_bias.as_deref_mut().expect("bias moments present"),
            self.v_bias.as_deref_mut().expect("bias moments present"),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LensCheckpoint {
    pub model_config: ModelConfig,
    pub lens: Lens,
    pub optimizer: OptimizerState,
    pub step: usize,
    pub train_config: TrainConfig,
    pub history: Vec<LossRecord>,
    /// Sum and count of losses since the last history record.
    pub pending: (f64, usize),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    layer: usize,
    head: usize,
    step: usize,
    seed: u64,
    model_fingerprint: String,
    content_hash: String,
    train_config: TrainConfig,
    meta: TrainMeta,
    history: Vec<LossRecord>,
    pending_sum: f64,
    pending_count: usize,
}

impl LensCheckpoint {
    fn tensors(&self) -> Vec<NamedTensor> {
        let d = self.lens.d_model();
        let v = self.lens.vocab_size();
        let mut out = vec![
            NamedTensor::new("lens.matrix", vec![d, v], self.lens.matrix().to_vec()),
            NamedTensor::new("adam.m", vec![d, v], self.optimizer.m.clone()),
            NamedTensor::new("adam.v", vec![d, v], self.optimizer.v.clone()),
        ];
        if let (Some(b), Some(mb), Some(vb)) = (
            self.lens.bias(),
            self.optimizer.m_bias.as_ref(),
            self.optimizer.v_bias.as_ref(),
        ) {
            out.push(NamedTensor::new("lens.bias", vec![v], b.to_vec()));
            out.push(NamedTensor::new("adam.m_bias", vec![v], mb.clone()));
            out.push(NamedTensor::new("adam.v_bias", vec![v], vb.clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config: self.model_config,
            layer: self.lens.layer,
            head: self.lens.head,
            step: self.step,
            seed: self.train_config.seed,
            model_fingerprint: self.lens.model_fingerprint().to_string(),
            content_hash: tensor_file::fingerprint(tensors.iter().map(TensorRef::from)),
            train_config: self.train_config.clone(),
            meta: self.lens.meta.clone(),
            history: self.history.clone(),
            pending_sum: self.pending.0,
            pending_count: self.pending.1,
        };
        tensor_file::encode(
            KIND,
            CHECKPOINT_FORMAT_VERSION,
            &header,
            tensors.iter().map(TensorRef::from),
        )
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut decoded = tensor_file::decode::<Header>(bytes, path, KIND, CHECKPOINT_FORMAT_VERSION)?;
        let computed = tensor_file::fingerprint(decoded.tensors.iter().map(TensorRef::from));
        if computed != decoded.header.content_hash {
            return Err(Error::Fingerprint {
                path: path.to_path_buf(),
                stored: decoded.header.content_hash.clone(),
                computed,
            });
        }
        let h = &decoded.header;
        let (d, v) = (h.model_config.d_model, h.model_config.vocab_size);
        let has_bias = decoded.tensors.iter().any(|t| t.name == "lens.bias");
        let matrix = decoded.take("lens.matrix", &[d, v], path)?;
        let m = decoded.take("adam.m", &[d, v], path)?;
        let vv = decoded.take("adam.v", &[d, v], path)?;
        let (bias, m_bias, v_bias) = if has_bias {
            (
                Some(decoded.take("lens.bias", &[v], path)?),
                Some(decoded.take("adam.m_bias", &[v], path)?),
                Some(decoded.take("adam.v_bias", &[v], path)?),
            )
        } else {
            (None, None, None)
        };
        if !decoded.tensors.is_empty() {
            return Err(Error::corrupt(path, "unexpected extra tensors"));
        }
        let h = decoded.header;
        let mut lens = Lens::from_parts(h.layer, h.head, d, v, matrix, bias, h.model_fingerprint)
            .map_err(|e| Error::corrupt(path, e.to_string()))?;
        lens.meta = h.meta;
        Ok(LensCheckpoint {
            model_config: h.model_config,
            lens,
            optimizer: OptimizerState {
                m,
                v: vv,
                m_bias,
                v_bias,
            },
            step: h.step,
            train_config: h.train_config,
            history: h.history,
            pending: (h.pending_sum, h.pending_count),
        })
    }
}

pub fn save_checkpoint(ckpt: &LensCheckpoint, path: &Path) -> Result<()> {
    crate::tensor_file::write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<LensCheckpoint> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    LensCheckpoint::from_bytes(&bytes, path)
}

/// Loads a checkpoint and verifies it was trained against `model`.
pub fn load_checkpoint_for(path: &Path, model: &ModelBundle) -> Result<LensCheckpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.lens.check_binding(model)?;
    Ok(ckpt)
}

/// Appends `step=<n> mean_loss=<x>` lines to a loss log.
pub fn append_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "step={} mean_loss={}", r.step, r.mean_loss)?;
    }
    Ok(())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut step = None;
            let mut loss = None;
            for field in line.split_whitespace() {
                match field.split_once('=') {
                    Some(("step", v)) => step = v.parse().ok(),
                    Some(("mean_loss", v)) => loss = v.parse().ok(),
                    _ => {}
                }
            }
            match (step, loss) {
                (Some(step), Some(mean_loss)) => Ok(LossRecord { step, mean_loss }),
                _ => Err(Error::corrupt(path, format!("bad loss record {line:?}"))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic, Corpus, Tokenizer};
    use crate::model::{ModelBundle, ModelConfig};
    use crate::trainer::{LensTrainer, TrainConfig};

    fn setup() -> (ModelBundle, Corpus) {
        let text = synthetic::book_text(4, 8_000);
        let tok = Tokenizer::build(&[&text], 270).unwrap();
        let corpus = Corpus::from_text("s", &text, &tok).unwrap();
        let cfg = ModelConfig::new(1, 2, 8, tok.vocab_size(), 16).unwrap();
        (ModelBundle::random(cfg, 3), corpus)
    }

    fn cfg(bias: bool) -> TrainConfig {
        TrainConfig {
            steps: 7,
            batch_size: 3,
            seq_len: 8,
            learning_rate: 1e-2,
            checkpoint_every: 3,
            lens_bias: bias,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (model, corpus) = setup();
        let dir = tempfile::tempdir().unwrap();
        for bias in [false, true] {
            let mut t = LensTrainer::new(&model, 0, 1, &corpus, &cfg(bias)).unwrap();
            for _ in 0..4 {
                t.step().unwrap();
            }
            let ckpt = t.checkpoint();
            let p = dir.path().join("a.ckpt");
            save_checkpoint(&ckpt, &p).unwrap();
            let loaded = load_checkpoint(&p).unwrap();
            assert_eq!(loaded, ckpt);
            assert_eq!(loaded.to_bytes(), std::fs::read(&p).unwrap());
        }
    }

    #[test]
    fn resume_mid_interval_matches_uninterrupted() {
        let (model, corpus) = setup();
        let full = LensTrainer::new(&model, 0, 0, &corpus, &cfg(true)).unwrap().run().unwrap();
        let mut t = LensTrainer::new(&model, 0, 0, &corpus, &cfg(true)).unwrap();
        for _ in 0..4 {
            t.step().unwrap();
        }
        let bytes = t.checkpoint().to_bytes();
        let ckpt = LensCheckpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let resumed = LensTrainer::resume(&model, &corpus, ckpt, 7).unwrap().run().unwrap();
        assert_eq!(resumed.lens, full.lens);
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.step_losses, full.step_losses[4..]);
    }

    #[test]
    fn error_cases_are_distinct() {
        let (model, corpus) = setup();
        let dir = tempfile::tempdir().unwrap();
        let t = LensTrainer::new(&model, 0, 0, &corpus, &cfg(false)).unwrap();
        let bytes = t.checkpoint().to_bytes();

        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::MissingFile(_))
        ));

        let err = LensCheckpoint::from_bytes(&bytes[..bytes.len() - 9], Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::CorruptFile { .. }), "{err}");

        let text = String::from_utf8_lossy(&bytes[..40]).to_string();
        let bumped = text.replacen("lens-checkpoint 1", "lens-checkpoint 9", 1);
        let mut v2 = bumped.into_bytes();
        v2.extend_from_slice(&bytes[40..]);
        assert!(matches!(
            LensCheckpoint::from_bytes(&v2, Path::new("m")),
            Err(Error::Version { found: 9, .. })
        ));

        let mut flipped = bytes.clone();
        let i = flipped.len() - 12;
        flipped[i] ^= 0x40;
        assert!(matches!(
            LensCheckpoint::from_bytes(&flipped, Path::new("m")),
            Err(Error::Fingerprint { .. })
        ));

        let p = dir.path().join("c.ckpt");
        std::fs::write(&p, &bytes).unwrap();
        let other = ModelBundle::random(*model.config(), 4);
        assert!(matches!(load_checkpoint_for(&p, &other), Err(Error::Binding { .. })));
        let ckpt = load_checkpoint(&p).unwrap();
        assert!(matches!(
            LensTrainer::resume(&other, &corpus, ckpt, 10),
            Err(Error::Binding { .. })
        ));
    }

    #[test]
    fn loss_log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.log");
        let a = [LossRecord { step: 100, mean_loss: 1.25 }];
        let b = [LossRecord { step: 200, mean_loss: 0.1 + 0.2 }];
        append_loss_log(&p, &a).unwrap();
        append_loss_log(&p, &b).unwrap();
        assert_eq!(read_loss_log(&p).unwrap(), vec![a[0], b[0]]);
    }
}
