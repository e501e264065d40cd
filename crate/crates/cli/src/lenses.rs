//! Lens directory layout and discovery.
//!
//! A trained head `(l, h)` lives in `lens_L{l}_H{h}.ckpt` with its loss
//! history next to it in `lens_L{l}_H{h}.log`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use attention_lens::lens::Lens;
use attention_lens::model::ModelBundle;
use attention_lens::trainer::load_checkpoint;
use serde::Serialize;

pub fn checkpoint_path(dir: &Path, layer: usize, head: usize) -> PathBuf {
    dir.join(format!("lens_L{layer}_H{head}.ckpt"))
}

pub fn loss_log_path(dir: &Path, layer: usize, head: usize) -> PathBuf {
    dir.join(format!("lens_L{layer}_H{head}.log"))
}

#[derive(Debug, Clone, Serialize)]
pub struct LensInfo {
    pub layer: usize,
    pub head: usize,
    pub file: String,
    pub steps_completed: usize,
    pub final_loss: Option<f64>,
    pub corpus_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Rejected {
    pub file: String,
    pub reason: String,
}

/// Lenses bound to one model, keyed by `(layer, head)`.
#[derive(Debug, Clone, Default)]
pub struct LensSet {
    lenses: BTreeMap<(usize, usize), (Lens, LensInfo)>,
    rejected: Vec<Rejected>,
}

impl LensSet {
    /// Loads every `*.ckpt` in `dir` that was trained against `model`.
    /// Unreadable files and other models' lenses are recorded, not served.
    pub fn discover(dir: &Path, model: &ModelBundle) -> std::io::Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        files.sort();

        let mut set = LensSet::default();
        for path in files {
            let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let ckpt = match load_checkpoint(&path) {
                Ok(c) => c,
                Err(e) => {
                    set.rejected.push(Rejected { file, reason: e.to_string() });
                    continue;
                }
            };
            if let Err(e) = ckpt.lens.check_binding(model) {
                set.rejected.push(Rejected { file, reason: e.to_string() });
                continue;
            }
            let key = (ckpt.lens.layer, ckpt.lens.head);
            if let Some((_, prev)) = set.lenses.get(&key) {
                set.rejected.push(Rejected {
                    file,
                    reason: format!("duplicate of {} for layer {} head {}", prev.file, key.0, key.1),
                });
                continue;
            }
            let meta = &ckpt.lens.meta;
            let info = LensInfo {
                layer: key.0,
                head: key.1,
                file,
                steps_completed: meta.steps_completed,
                final_loss: meta.final_loss,
                corpus_id: meta.corpus_id.clone(),
                seed: meta.seed,
            };
            set.lenses.insert(key, (ckpt.lens, info));
        }
        Ok(set)
    }

    pub fn from_lenses(lenses: impl IntoIterator<Item = Lens>) -> Self {
        let mut set = LensSet::default();
        for lens in lenses {
            let info = LensInfo {
                layer: lens.layer,
                head: lens.head,
                file: String::new(),
                steps_completed: lens.meta.steps_completed,
                final_loss: lens.meta.final_loss,
                corpus_id: lens.meta.corpus_id.clone(),
                seed: lens.meta.seed,
            };
            set.lenses.insert((lens.layer, lens.head), (lens, info));
        }
        set
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&Lens> {
        self.lenses.get(&(layer, head)).map(|(l, _)| l)
    }

    pub fn lenses(&self) -> Vec<Lens> {
        self.lenses.values().map(|(l, _)| l.clone()).collect()
    }

    pub fn infos(&self) -> Vec<&LensInfo> {
        self.lenses.values().map(|(_, i)| i).collect()
    }

    pub fn available(&self) -> Vec<(usize, usize)> {
        self.lenses.keys().copied().collect()
    }

    pub fn rejected(&self) -> &[Rejected] {
        &self.rejected
    }

    pub fn is_empty(&self) -> bool {
        self.lenses.is_empty()
    }

    pub fn len(&self) -> usize {
        self.lenses.len()
    }
}
