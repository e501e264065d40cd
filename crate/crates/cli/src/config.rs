//! Run configuration: a TOML file mirroring the command-line flags.
//!
//! ```toml
//! [paths]
//! model = "run/model.bin"
//! tokenizer = "run/tokenizer.txt"
//! corpus = "run/book.txt"
//! lens_dir = "run/lenses"
//!
//! [train]
//! steps = 2000
//! learning_rate = 0.05
//!
//! [serve]
//! bind = "127.0.0.1"
//! port = 8080
//! ```
//!
//! Flags given on the command line take precedence over the file.

use std::path::{Path, PathBuf};

use anyhow::bail;
use attention_lens::lens::{InitMode, PositionPolicy};
use attention_lens::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub model: Option<PathBuf>,
    pub lens_dir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub seq_len: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub position_policy: Option<PositionPolicy>,
    pub init_mode: Option<InitMode>,
    pub checkpoint_every: Option<usize>,
    pub lens_bias: Option<bool>,
}

impl TrainOverrides {
    /// Fields set in `self` win over those in `base`.
    pub fn or(self, base: TrainOverrides) -> TrainOverrides {
        TrainOverrides {
            steps: self.steps.or(base.steps),
            batch_size: self.batch_size.or(base.batch_size),
            seq_len: self.seq_len.or(base.seq_len),
            learning_rate: self.learning_rate.or(base.learning_rate),
            seed: self.seed.or(base.seed),
            position_policy: self.position_policy.or(base.position_policy),
            init_mode: self.init_mode.or(base.init_mode),
            checkpoint_every: self.checkpoint_every.or(base.checkpoint_every),
            lens_bias: self.lens_bias.or(base.lens_bias),
        }
    }

    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(steps, batch_size, seq_len, learning_rate, seed, position_policy, init_mode, checkpoint_every, lens_bias);
        cfg
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeOptions {
    pub bind: Option<String>,
    pub port: Option<u16>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub serve: ServeOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| InvalidConfig(format!("invalid config {}: {e}", path.display())).into())
    }

    /// Overlays command-line values onto the file values.
    pub fn merge(self, flags: RunConfig) -> RunConfig {
        RunConfig {
            paths: Paths {
                model: flags.paths.model.or(self.paths.model),
                lens_dir: flags.paths.lens_dir.or(self.paths.lens_dir),
                corpus: flags.paths.corpus.or(self.paths.corpus),
                tokenizer: flags.paths.tokenizer.or(self.paths.tokenizer),
            },
            train: flags.train.or(self.train),
            serve: ServeOptions {
                bind: flags.serve.bind.or(self.serve.bind),
                port: flags.serve.port.or(self.serve.port),
            },
        }
    }
}

/// Which paths a command reads, checked before any work starts.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub model: bool,
    pub tokenizer: bool,
    pub corpus: bool,
    pub lens_dir: bool,
}

#[derive(Debug, Clone)]
pub struct ResolvedPaths {
    pub model: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub lens_dir: Option<PathBuf>,
}

impl Paths {
    pub fn resolve(&self, needs: Needs) -> anyhow::Result<ResolvedPaths> {
        fn check(name: &str, path: &Option<PathBuf>, needed: bool, dir: bool) -> anyhow::Result<Option<PathBuf>> {
            match path {
                None if needed => bail!(InvalidConfig(format!("--{name} is required"))),
                None => Ok(None),
                Some(p) if needed && dir && !p.is_dir() => {
                    bail!(InvalidConfig(format!("{name} {} is not a directory", p.display())))
                }
                Some(p) if needed && !dir && !p.is_file() => {
                    bail!(InvalidConfig(format!("{name} {} does not exist", p.display())))
                }
                Some(p) => Ok(Some(p.clone())),
            }
        }
        Ok(ResolvedPaths {
            model: check("model", &self.model, needs.model, false)?,
            tokenizer: check("tokenizer", &self.tokenizer, needs.tokenizer, false)?,
            corpus: check("corpus", &self.corpus, needs.corpus, false)?,
            lens_dir: check("lens-dir", &self.lens_dir, needs.lens_dir, true)?,
        })
    }
}

/// Configuration error detected before any work began.
#[derive(Debug)]
pub struct InvalidConfig(pub String);

impl std::fmt::Display for InvalidConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidConfig {}
