use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use attention_lens::analysis::{evaluate_lenses, inspect_head, scan_prompt, transfer_matrix, Report, DEFAULT_K};
use attention_lens::corpus::{synthetic, Corpus, Tokenizer};
use attention_lens::lens::{BaselineMode, InitMode, PositionPolicy};
use attention_lens::model::{heldout_cross_entropy, load_model, pretrain, save_model, ModelBundle, ModelConfig, PretrainOptions};
use attention_lens::trainer::{append_loss_log, load_checkpoint_for, save_checkpoint, LensTrainer, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use crate::config::{InvalidConfig, Needs, Paths, ResolvedPaths, RunConfig, ServeOptions, TrainOverrides};
use crate::lenses::{checkpoint_path, loss_log_path, LensSet};
use crate::server::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "attnlens", version, about = "Train and query per-attention-head lenses")]
pub struct Cli {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the bundled training text (or a synthetic book) to a file.
    Fixture(FixtureArgs),
    /// Build a tokenizer and pretrain a base model on a corpus.
    Pretrain(PretrainArgs),
    /// Train the lens for one head, or for every head of a layer.
    Train(TrainArgs),
    /// Lens and baseline top-k tokens for one head.
    Inspect(InspectArgs),
    /// Look for flagged tokens in every lens's top-k.
    Scan(ScanArgs),
    /// Pairwise divergence between all trained lenses.
    Transfer(TransferArgs),
    /// Held-out KL of each lens against the unembedding baseline.
    Eval(EvalArgs),
    /// Serve the JSON API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct PathArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub lens_dir: Option<PathBuf>,
}

impl PathArgs {
    fn to_paths(&self) -> Paths {
        Paths {
            model: self.model.clone(),
            lens_dir: self.lens_dir.clone(),
            corpus: self.corpus.clone(),
            tokenizer: self.tokenizer.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Jsonl,
}

fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generate a templated synthetic book instead of the bundled text.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimum length in characters of the synthetic book.
    #[arg(long, default_value_t = 600_000)]
    pub chars: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 128)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = kebab::<PositionPolicy>)]
    pub position_policy: Option<PositionPolicy>,
    #[arg(long, value_parser = kebab::<InitMode>)]
    pub init_mode: Option<InitMode>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub lens_bias: bool,
}

impl TrainFlags {
    fn to_overrides(&self) -> TrainOverrides {
        TrainOverrides {
            steps: self.steps,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            learning_rate: self.learning_rate,
            seed: self.seed,
            position_policy: self.position_policy,
            init_mode: self.init_mode,
            checkpoint_every: self.checkpoint_every,
            lens_bias: self.lens_bias.then_some(true),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[arg(long)]
    pub layer: usize,
    /// Omit to train every head of the layer concurrently.
    #[arg(long)]
    pub head: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Continue from existing checkpoints instead of starting over.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Token position; defaults to the last one.
    #[arg(long)]
    pub position: Option<usize>,
    #[arg(long, value_parser = kebab::<BaselineMode>, default_value = "final-layer-norm")]
    pub baseline: BaselineMode,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[arg(long)]
    pub prompt: String,
    /// Flagged token strings, comma separated or repeated.
    #[arg(long = "flagged", value_delimiter = ',')]
    pub flagged: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[arg(long, default_value_t = 100)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[arg(long, default_value_t = 200)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = kebab::<BaselineMode>, default_value = "final-layer-norm")]
    pub baseline: BaselineMode,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

/// Maps an error to the stable kind used in `error kind=...` lines.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<attention_lens::Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<InvalidConfig>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

/// One line: `error kind=<kind> message=<json string>`.
pub fn error_line(err: &anyhow::Error) -> String {
    let message = format!("{err:#}");
    format!("error kind={} message={}", error_kind(err), serde_json::Value::String(message))
}

fn load_run_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

struct Loaded {
    model: ModelBundle,
    tokenizer: Tokenizer,
}

fn load_model_and_tokenizer(paths: &ResolvedPaths) -> anyhow::Result<Loaded> {
    let model = load_model(paths.model.as_deref().expect("model path resolved"))?;
    let tokenizer = Tokenizer::load(paths.tokenizer.as_deref().expect("tokenizer path resolved"))?;
    if tokenizer.vocab_size() > model.config().vocab_size {
        return Err(InvalidConfig(format!(
            "tokenizer has {} tokens but the model vocabulary is {}",
            tokenizer.vocab_size(),
            model.config().vocab_size
        ))
        .into());
    }
    Ok(Loaded { model, tokenizer })
}

fn load_corpus(paths: &ResolvedPaths, tokenizer: &Tokenizer) -> anyhow::Result<Corpus> {
    Ok(Corpus::from_file(paths.corpus.as_deref().expect("corpus path resolved"), tokenizer)?)
}

fn load_lenses(paths: &ResolvedPaths, model: &ModelBundle) -> anyhow::Result<LensSet> {
    let dir = paths.lens_dir.as_deref().expect("lens dir resolved");
    let set = LensSet::discover(dir, model).with_context(|| format!("cannot read lens directory {}", dir.display()))?;
    for r in set.rejected() {
        eprintln!("warning: skipped {}: {}", r.file, r.reason);
    }
    Ok(set)
}

fn emit(out: &mut dyn Write, report: &dyn Report, format: Format) -> anyhow::Result<()> {
    match format {
        Format::Table => write!(out, "{}", report.to_table())?,
        Format::Jsonl => write!(out, "{}", report.to_jsonl())?,
    }
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let file = load_run_config(cli.config.as_deref())?;
    match cli.command {
        Command::Fixture(a) => {
            let text = if a.synthetic {
                synthetic::book_text(a.seed, a.chars)
            } else {
                crate::fixture::desk_book()
            };
            std::fs::write(&a.out, &text).with_context(|| format!("cannot write {}", a.out.display()))?;
            writeln!(out, "wrote {} chars to {}", text.chars().count(), a.out.display())?;
            Ok(())
        }
        Command::Pretrain(a) => cmd_pretrain(file, a, out),
        Command::Train(a) => cmd_train(file, a, out),
        Command::Inspect(a) => {
            let cfg = file.merge(RunConfig { paths: a.paths.to_paths(), ..RunConfig::default() });
            let paths = cfg.paths.resolve(Needs { model: true, tokenizer: true, lens_dir: true, ..Needs::default() })?;
            let l = load_model_and_tokenizer(&paths)?;
            l.model.config().check_head(a.layer, a.head)?;
            let lenses = load_lenses(&paths, &l.model)?;
            let lens = lenses.get(a.layer, a.head).ok_or_else(|| missing_lens(&lenses, a.layer, a.head))?;
            let r = inspect_head(&l.model, &l.tokenizer, lens, &a.prompt, a.position, a.k, a.baseline)?;
            emit(out, &r, a.format)
        }
        Command::Scan(a) => {
            let cfg = file.merge(RunConfig { paths: a.paths.to_paths(), ..RunConfig::default() });
            let paths = cfg.paths.resolve(Needs { model: true, tokenizer: true, lens_dir: true, ..Needs::default() })?;
            let l = load_model_and_tokenizer(&paths)?;
            let lenses = load_lenses(&paths, &l.model)?;
            let r = scan_prompt(&l.model, &l.tokenizer, &lenses.lenses(), &a.prompt, &a.flagged, a.k)?;
            emit(out, &r, a.format)
        }
        Command::Transfer(a) => {
            let cfg = file.merge(RunConfig { paths: a.paths.to_paths(), ..RunConfig::default() });
            let paths = cfg.paths.resolve(Needs { model: true, tokenizer: true, corpus: true, lens_dir: true })?;
            let l = load_model_and_tokenizer(&paths)?;
            let corpus = load_corpus(&paths, &l.tokenizer)?;
            let lenses = load_lenses(&paths, &l.model)?;
            if lenses.is_empty() {
                return Err(InvalidConfig("lens directory has no lenses for this model".into()).into());
            }
            let windows = corpus.heldout_windows(eval_seq_len(&l.model), a.n_eval, a.seed)?;
            let r = transfer_matrix(&l.model, &lenses.lenses(), &windows)?;
            emit(out, &r, a.format)
        }
        Command::Eval(a) => {
            let cfg = file.merge(RunConfig { paths: a.paths.to_paths(), ..RunConfig::default() });
            let paths = cfg.paths.resolve(Needs { model: true, tokenizer: true, corpus: true, lens_dir: true })?;
            let l = load_model_and_tokenizer(&paths)?;
            let corpus = load_corpus(&paths, &l.tokenizer)?;
            let lenses = load_lenses(&paths, &l.model)?;
            if lenses.is_empty() {
                return Err(InvalidConfig("lens directory has no lenses for this model".into()).into());
            }
            let windows = corpus.heldout_windows(eval_seq_len(&l.model), a.n_eval, a.seed)?;
            let r = evaluate_lenses(&l.model, &lenses.lenses(), &windows, a.baseline)?;
            emit(out, &r, a.format)
        }
        Command::Serve(a) => cmd_serve(file, a, out),
    }
}

fn eval_seq_len(model: &ModelBundle) -> usize {
    model.config().max_seq_len.min(64)
}

fn missing_lens(set: &LensSet, layer: usize, head: usize) -> anyhow::Error {
    let available: Vec<String> = set.available().iter().map(|(l, h)| format!("L{l}H{h}")).collect();
    anyhow!(attention_lens::Error::State(format!(
        "no trained lens for layer {layer} head {head}; available: [{}]",
        available.join(", ")
    )))
}

fn cmd_pretrain(file: RunConfig, a: PretrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = file.merge(RunConfig { paths: a.paths.to_paths(), ..RunConfig::default() });
    let paths = cfg.paths.resolve(Needs { corpus: true, ..Needs::default() })?;
    let model_path = paths.model.clone().ok_or_else(|| InvalidConfig("--model (output path) is required".into()))?;
    let tok_path = paths.tokenizer.clone().ok_or_else(|| InvalidConfig("--tokenizer (output path) is required".into()))?;
    for p in [&model_path, &tok_path] {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !parent.is_dir() {
                return Err(InvalidConfig(format!("directory {} does not exist", parent.display())).into());
            }
        }
    }

    let text = attention_lens::corpus::read_text(paths.corpus.as_deref().expect("corpus path resolved"))?;
    let tokenizer = Tokenizer::build(&[&text], a.vocab_size)?;
    let corpus = Corpus::from_file(paths.corpus.as_deref().expect("corpus path resolved"), &tokenizer)?;
    let config = ModelConfig::new(a.layers, a.heads, a.d_model, a.vocab_size, a.max_seq_len)?;
    let opts = PretrainOptions {
        steps: a.steps,
        batch_size: a.batch_size,
        seq_len: a.seq_len,
        learning_rate: a.lr,
        seed: a.seed,
        ..PretrainOptions::desk_scale(&config, a.steps, a.seed)
    };
    let outcome = pretrain(config, &corpus, &opts)?;
    tokenizer.save(&tok_path)?;
    save_model(&outcome.model, &model_path)?;

    let seq = a.seq_len.min(config.max_seq_len - 1).max(1) + 1;
    let heldout = corpus
        .heldout_windows(seq, 100, a.seed)
        .and_then(|w| heldout_cross_entropy(&outcome.model, &w))
        .ok();
    writeln!(
        out,
        "pretrained steps={} final_loss={} heldout_ce={} fingerprint={}",
        a.steps,
        outcome.losses.last().map_or("n/a".into(), |l| format!("{l:.4}")),
        heldout.map_or("n/a".into(), |l| format!("{l:.4}")),
        outcome.model.fingerprint()
    )?;
    Ok(())
}

struct HeadSummary {
    head: usize,
    initial: Option<f64>,
    final_loss: Option<f64>,
    steps: usize,
    path: PathBuf,
}

fn train_one(
    model: &ModelBundle,
    corpus: &Corpus,
    cfg: &TrainConfig,
    dir: &Path,
    layer: usize,
    head: usize,
    resume: bool,
) -> anyhow::Result<HeadSummary> {
    let ckpt_path = checkpoint_path(dir, layer, head);
    let log_path = loss_log_path(dir, layer, head);
    let mut trainer = if resume && ckpt_path.exists() {
        let ckpt = load_checkpoint_for(&ckpt_path, model)?;
        LensTrainer::resume(model, corpus, ckpt, cfg.steps)?
    } else {
        if log_path.exists() {
            std::fs::remove_file(&log_path)?;
        }
        LensTrainer::new(model, layer, head, corpus, cfg)?
    };

    let mut logged = trainer.history().len();
    let mut initial = None;
    let sync = |t: &LensTrainer, logged: &mut usize| -> anyhow::Result<()> {
        if t.history().len() > *logged {
            append_loss_log(&log_path, &t.history()[*logged..])?;
            *logged = t.history().len();
            save_checkpoint(&t.checkpoint(), &ckpt_path)?;
        }
        Ok(())
    };
    while !trainer.is_done() {
        let loss = trainer.step()?;
        initial.get_or_insert(loss);
        sync(&trainer, &mut logged)?;
    }
    trainer.finish();
    sync(&trainer, &mut logged)?;
    save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    Ok(HeadSummary {
        head,
        initial,
        final_loss: trainer.lens().meta.final_loss,
        steps: trainer.step_index(),
        path: ckpt_path,
    })
}

fn cmd_train(file: RunConfig, a: TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = file.merge(RunConfig {
        paths: a.paths.to_paths(),
        train: a.train.to_overrides(),
        ..RunConfig::default()
    });
    let paths = cfg.paths.resolve(Needs { model: true, tokenizer: true, corpus: true, ..Needs::default() })?;
    let dir = paths.lens_dir.clone().ok_or_else(|| InvalidConfig("--lens-dir is required".into()))?;
    let train_cfg = cfg.train.apply(TrainConfig::default());
    train_cfg.validate()?;

    let l = load_model_and_tokenizer(&paths)?;
    let mc = l.model.config();
    mc.check_layer(a.layer)?;
    let heads: Vec<usize> = match a.head {
        Some(h) => {
            mc.check_head(a.layer, h)?;
            vec![h]
        }
        None => (0..mc.n_heads).collect(),
    };
    let corpus = load_corpus(&paths, &l.tokenizer)?;
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;

    let results: Vec<anyhow::Result<HeadSummary>> = std::thread::scope(|s| {
        let handles: Vec<_> = heads
            .iter()
            .map(|&h| {
                let (model, corpus, cfg, dir) = (&l.model, &corpus, &train_cfg, dir.as_path());
                s.spawn(move || train_one(model, corpus, cfg, dir, a.layer, h, a.resume))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("training thread panicked"))))
            .collect()
    });
    for r in results {
        let s = r?;
        writeln!(
            out,
            "trained layer={} head={} steps={} initial_loss={} final_loss={} checkpoint={}",
            a.layer,
            s.head,
            s.steps,
            s.initial.map_or("n/a".into(), |v| format!("{v:.4}")),
            s.final_loss.map_or("n/a".into(), |v| format!("{v:.4}")),
            s.path.display()
        )?;
    }
    Ok(())
}

fn cmd_serve(file: RunConfig, a: ServeArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = file.merge(RunConfig {
        paths: a.paths.to_paths(),
        serve: ServeOptions { bind: a.bind, port: a.port },
        ..RunConfig::default()
    });
    let paths = cfg.paths.resolve(Needs { model: true, tokenizer: true, lens_dir: true, corpus: false })?;
    if let Some(c) = &paths.corpus {
        if !c.is_file() {
            return Err(InvalidConfig(format!("corpus {} does not exist", c.display())).into());
        }
    }
    let bind = cfg.serve.bind.unwrap_or_else(|| "127.0.0.1".into());
    let port = cfg.serve.port.unwrap_or(8080);
    let addr: SocketAddr = format!("{bind}:{port}")
        .parse()
        .map_err(|_| InvalidConfig(format!("invalid bind address {bind}:{port}")))?;

    let l = load_model_and_tokenizer(&paths)?;
    let corpus = paths.corpus.is_some().then(|| load_corpus(&paths, &l.tokenizer)).transpose()?;
    let lenses = load_lenses(&paths, &l.model)?;
    let state = Arc::new(AppState {
        model: l.model,
        tokenizer: l.tokenizer,
        lenses,
        corpus,
    });

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("cannot bind {addr}"))?;
        writeln!(
            out,
            "serving {} lenses for model {} on http://{}",
            state.lenses.len(),
            state.model.fingerprint(),
            listener.local_addr()?
        )?;
        out.flush()?;
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
