//! `bvae` command line: corpus generation, training, evaluation, single-slice
//! scoring and map export.
//!
//! Precedence for every setting is flag, then `--config` file, then default;
//! the seed additionally falls back to `BVAE_SEED` before the default.

mod config;
pub mod maps;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::anomaly::{mc_infer, score};
use crate::data::{generate_corpus, make_splits, read_corpus, read_slice, write_corpus, CorpusSpec, Label, SliceRecord};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, ablation_run_with, evaluate, parse_grid, score_records, write_eval_outputs, AblationSettings,
};
use crate::model::{Model, ModelKind};
use crate::data::record_rng;
use crate::trainer::{epoch_logs_csv, fit_with, Checkpoint};

pub use config::{RunConfig, SEED_ENV};

pub const CHECKPOINT_FILE: &str = "model.bvck";
pub const EPOCHS_FILE: &str = "epochs.csv";

#[derive(Parser, Debug)]
#[command(name = "bvae", version, about = "Uncertainty-aware anomaly detection with a Bayesian attention VAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom corpus with a manifest.
    GenerateData(GenerateArgs),
    /// Train a model on a corpus; writes a checkpoint and per-epoch CSV.
    Train(TrainArgs),
    /// Score the test split; writes metric, curve and ablation CSVs.
    Eval(EvalArgs),
    /// Score one slice; prints `score=<float>` and writes its six maps.
    Score(ScoreArgs),
    /// Write original, reconstruction, uncertainty and error maps.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file; flags override it [default: none].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed [default: $BVAE_SEED, else 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Output corpus directory.
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
    /// Number of normal slices.
    #[arg(long, default_value_t = 2000)]
    normals: usize,
    /// Number of abnormal slices.
    #[arg(long, default_value_t = 500)]
    abnormals: usize,
    /// Side of the preprocessed slices.
    #[arg(long, default_value_t = 32)]
    size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory written by generate-data (required).
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for the checkpoint and epoch log.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Maximum number of epochs.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Adam step size.
    #[arg(long, default_value_t = 1e-5)]
    learning_rate: f64,
    /// Slices per optimizer step.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// bayesian, fixed_variance or deterministic.
    #[arg(long, default_value = "bayesian")]
    kind: String,
    /// Enable the attention blocks.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    attention: bool,
    /// Final KL weight.
    #[arg(long, default_value_t = 0.1)]
    beta_max: f64,
    /// Epochs of linear KL warm-up.
    #[arg(long, default_value_t = 10)]
    warmup_epochs: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by train (required).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory (required); the test split is rebuilt from the
    /// checkpoint's seed.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for the CSVs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Monte-Carlo samples per slice.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Weight of the raw error in the combined score.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Comma-separated subset of full, no_attention, no_aleatoric,
    /// no_epistemic, deterministic; each entry is trained with the run's
    /// training settings (a checkpoint with matching architecture is reused).
    #[arg(long, default_value = "")]
    ablation: String,
    /// Maximum epochs for ablation training.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Learning rate for ablation training.
    #[arg(long, default_value_t = 1e-5)]
    learning_rate: f64,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by train (required).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Slice file (.bvsl, required).
    #[arg(long)]
    input: PathBuf,
    /// Output directory for the maps.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Monte-Carlo samples.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Weight of the raw error in the combined score.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by train (required).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Slice files to render; may be repeated [default: none].
    #[arg(long)]
    input: Vec<PathBuf>,
    /// Corpus directory; renders test-split slices of each class [default: none].
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Test slices per class taken from --corpus.
    #[arg(long, default_value_t = 2)]
    count: usize,
    /// Output directory; one subdirectory per slice.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Monte-Carlo samples.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Weight of the raw error in the combined score.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

/// Flags given explicitly on the command line (as opposed to clap defaults).
struct Given<'a>(&'a ArgMatches);

impl Given<'_> {
    fn has(&self, id: &str) -> bool {
        self.0.value_source(id) == Some(ValueSource::CommandLine)
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let env = std::env::var(SEED_ENV).ok();
    let mut config = RunConfig::load(common.config.as_deref(), env.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 ok, 1 usage error, 2 data/model error.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let given = Given(sub);
    let result = match &cli.command {
        Command::GenerateData(a) => generate(a, &given),
        Command::Train(a) => train(a, &given),
        Command::Eval(a) => eval(a, &given),
        Command::Score(a) => score_one(a, &given),
        Command::Visualize(a) => visualize(a, &given),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn generate(a: &GenerateArgs, given: &Given) -> Result<()> {
    let mut c = load_config(&a.common)?;
    if given.has("normals") {
        c.normals = a.normals;
    }
    if given.has("abnormals") {
        c.abnormals = a.abnormals;
    }
    if given.has("size") {
        c.size = a.size;
    }
    let c = c.finish()?;
    let spec = CorpusSpec {
        normals: c.normals,
        abnormals: c.abnormals,
        size: c.size,
        phantom: c.phantom.clone(),
    };
    let records = generate_corpus(&spec)?;
    write_corpus(&a.out, &records)?;
    println!("wrote {} slices to {}", records.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs, given: &Given) -> Result<()> {
    let mut c = load_config(&a.common)?;
    if given.has("epochs") {
        c.train.max_epochs = a.epochs;
    }
    if given.has("learning_rate") {
        c.train.learning_rate = a.learning_rate;
    }
    if given.has("batch_size") {
        c.train.batch_size = a.batch_size;
    }
    if given.has("patience") {
        c.train.early_stop_patience = a.patience;
    }
    if given.has("kind") {
        c.set("model.kind", &a.kind)?;
    }
    if given.has("attention") {
        c.model.attention = a.attention;
    }
    if given.has("beta_max") {
        c.train.beta.beta_max = a.beta_max;
    }
    if given.has("warmup_epochs") {
        c.train.beta.warmup_epochs = a.warmup_epochs;
    }
    let corpus = read_corpus(&a.corpus)?;
    check_sizes(&corpus, &mut c)?;
    let c = c.finish()?;
    let splits = make_splits(&corpus, &c.split)?;
    let model = Model::new(c.model.clone())?;
    let init = model.init_params::<f32>(c.seed)?;
    let max_epochs = c.train.max_epochs;
    let outcome = fit_with(&model, init, &splits.train, &splits.val, &c.train, |log, _| {
        eprintln!(
            "epoch {}/{max_epochs} train_total={} val_total={} val_mean_uncertainty={}",
            log.epoch, log.train.total, log.val_total, log.val_mean_uncertainty
        );
    })?;
    fs::create_dir_all(&a.out)?;
    outcome.best.save(&a.out.join(CHECKPOINT_FILE))?;
    fs::write(a.out.join(EPOCHS_FILE), epoch_logs_csv(&outcome.logs))?;
    println!(
        "best epoch {} val_total={} -> {}",
        outcome.best.epoch,
        outcome.best.best_val_loss,
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

/// The model input size follows the corpus unless the config pins it.
fn check_sizes(corpus: &[SliceRecord], c: &mut RunConfig) -> Result<()> {
    let Some(first) = corpus.first() else {
        return Err(Error::Data("corpus is empty".into()));
    };
    c.model.input_size = first.image.height;
    if corpus.iter().any(|r| r.image.height != first.image.height || r.image.width != first.image.height) {
        return Err(Error::Data("corpus slices must share one square size".into()));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Model, Checkpoint<f32>)> {
    let ck = Checkpoint::<f32>::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })?;
    let model = Model::new(ck.model.clone())?;
    model.check_params(&ck.params)?;
    Ok((model, ck))
}

fn eval(a: &EvalArgs, given: &Given) -> Result<()> {
    let mut c = load_config(&a.common)?;
    if given.has("k") {
        c.score.samples = a.k;
    }
    if given.has("alpha") {
        c.score.alpha = a.alpha;
    }
    if given.has("epochs") {
        c.train.max_epochs = a.epochs;
    }
    if given.has("learning_rate") {
        c.train.learning_rate = a.learning_rate;
    }
    let grid = if a.ablation.trim().is_empty() { Vec::new() } else { parse_grid(&a.ablation)? };
    let (model, ck) = load_checkpoint(&a.checkpoint)?;
    let corpus = read_corpus(&a.corpus)?;
    let mut c = c.finish()?;
    // the split must match the one the checkpoint was trained on
    c.split.seed = ck.rng_seed;
    c.model = ck.model.clone();
    let splits = make_splits(&corpus, &c.split)?;

    let samples = score_records(&model, &ck.params, &splits.test, &c.score)?;
    let report = evaluate(samples)?;
    write_eval_outputs(&a.out, &report)?;
    println!(
        "roc_auc={} pr_auc={} threshold={} f1={}",
        report.roc.auc,
        report.pr.auc,
        report.roc.optimal_threshold.unwrap_or(f64::NAN),
        report.roc.f1_at_optimal.unwrap_or(f64::NAN)
    );

    if !grid.is_empty() {
        let settings = AblationSettings {
            model: c.model.clone(),
            train: c.train.clone(),
            score: c.score,
        };
        let pretrained = vec![(ck.model.clone(), ck.params.clone(), ck.epoch)];
        let rows = ablation_run_with(&splits, &grid, &settings, pretrained, |mc, epochs| {
            eprintln!("trained {} model for {epochs} epochs", mc.kind.name());
        })?;
        fs::write(a.out.join("ablation.csv"), ablation_csv(&rows))?;
        for r in &rows {
            println!("{} roc_auc={} pr_auc={}", r.config.name(), r.roc_auc, r.pr_auc);
        }
    }
    Ok(())
}

fn score_settings(common: &Common, given: &Given, k: usize, alpha: f64) -> Result<RunConfig> {
    let mut c = load_config(common)?;
    if given.has("k") {
        c.score.samples = k;
    }
    if given.has("alpha") {
        c.score.alpha = alpha;
    }
    c.finish()
}

/// Runs inference on one slice and writes its maps under `dir`.
fn render_slice(model: &Model, ck: &Checkpoint<f32>, record: &SliceRecord, c: &RunConfig, dir: &Path) -> Result<f64> {
    let side = model.config().input_size;
    if record.image.height != side || record.image.width != side {
        return Err(Error::Data(format!(
            "slice {} is {}x{}, model expects {side}x{side}",
            record.id, record.image.height, record.image.width
        )));
    }
    let k = if model.config().kind == ModelKind::Deterministic { 1 } else { c.score.samples };
    let mut rng = record_rng(c.score.seed, &record.id);
    let u = mc_infer(model, &ck.params, &record.image, k, &mut rng)?;
    let result = score(&record.image, &u, c.score.alpha)?;
    maps::write_maps(dir, &maps::slice_maps(&record.image, &u)?)?;
    Ok(result.score)
}

fn score_one(a: &ScoreArgs, given: &Given) -> Result<()> {
    let c = score_settings(&a.common, given, a.k, a.alpha)?;
    let (model, ck) = load_checkpoint(&a.checkpoint)?;
    let record = read_slice(&a.input)?;
    let s = render_slice(&model, &ck, &record, &c, &a.out)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "score={s}")?;
    Ok(())
}

fn visualize(a: &VisualizeArgs, given: &Given) -> Result<()> {
    let c = score_settings(&a.common, given, a.k, a.alpha)?;
    let (model, ck) = load_checkpoint(&a.checkpoint)?;
    let mut records: Vec<SliceRecord> = a.input.iter().map(|p| read_slice(p)).collect::<Result<_>>()?;
    if let Some(dir) = &a.corpus {
        let corpus = read_corpus(dir)?;
        let mut split = c.split.clone();
        split.seed = ck.rng_seed;
        let test = make_splits(&corpus, &split)?.test;
        for label in [Label::Normal, Label::Abnormal] {
            records.extend(test.iter().filter(|r| r.label == label).take(a.count).cloned());
        }
    }
    if records.is_empty() {
        return Err(Error::Config("nothing to visualize: pass --input or --corpus".into()));
    }
    for r in &records {
        let s = render_slice(&model, &ck, r, &c, &a.out.join(&r.id))?;
        println!("{} {} score={s}", r.id, r.label.as_str());
    }
    Ok(())
}
