use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use disentangle::config::{InitName, RunConfig};
use disentangle::data::{read_archive, write_archive, Dataset, SynthDataset};
use disentangle::eval::{accuracy, emit_reconstruction_grid, reconstruction_report, EvalReport};
use disentangle::model::{load_checkpoint, Autoencoder, Classifier, DisentangleModel, ModelKind};
use disentangle::training::{
    self, finetune_classifier, initial_classifier, params_digest, pretrain, pretrain_autoencoder, read_metrics,
    RunOutcome,
};
use disentangle::Error;
use serde_json::json;

/// Disentangled foreground/background/motion pretraining for video encoders.
///
/// Settings come from a flat `key = value` file and `--set` overrides;
/// environment variables are not consulted.
#[derive(Parser, Debug)]
#[command(name = "disentangle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (flat TOML keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set epochs=2`. Repeatable; later wins.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory; created if missing, locked for the run.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic moving-shapes archive.
    SynthData,
    /// Disentangling pretraining on the `data` archive.
    Pretrain,
    /// Autoencoder-baseline pretraining on the `data` archive.
    PretrainAe,
    /// Fine-tune a classifier; the encoder comes from `init`.
    Finetune {
        /// Shorthand for `--set init=...`.
        #[arg(long, value_enum)]
        init: Option<InitArg>,
    },
    /// Score the `checkpoint` on the `data` archive.
    Eval,
    /// Render the reconstruction grid of item `clip_index`.
    Reconstruct,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Random,
    Autoencoder,
    Disentangle,
}

/// Error tagged with the pipeline stage it came from.
struct StageError {
    stage: &'static str,
    error: Error,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T> Stage<T> for disentangle::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

/// Lock file held for the duration of a run.
struct OutLock(PathBuf);

impl OutLock {
    fn acquire(dir: &Path) -> disentangle::Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Validation(format!(
                "{} is in use by another invocation (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> disentangle::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> disentangle::Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("this command needs the `{key}` key")))
}

fn load_data(cfg: &RunConfig) -> disentangle::Result<Arc<dyn Dataset>> {
    let (ds, _) = read_archive(required(&cfg.data, "data")?)?;
    Ok(Arc::new(ds))
}

/// Re-reads what a training run wrote so a zero exit means usable artifacts.
fn verify_run(outcome: &RunOutcome) -> disentangle::Result<()> {
    load_checkpoint(&outcome.best_checkpoint)?;
    load_checkpoint(&outcome.final_checkpoint)?;
    read_metrics(&outcome.metrics)?;
    Ok(())
}

fn run_summary(outcome: &RunOutcome) -> serde_json::Value {
    json!({
        "best_checkpoint": outcome.best_checkpoint,
        "final_checkpoint": outcome.final_checkpoint,
        "metrics": outcome.metrics,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.epochs_run,
        "steps": outcome.steps,
        "best_val": outcome.best_val(),
    })
}

fn run(cli: Cli) -> Result<(), StageError> {
    let mut overrides = cli.overrides.clone();
    if let Command::Finetune { init: Some(init) } = &cli.command {
        let name = match init {
            InitArg::Random => "random",
            InitArg::Autoencoder => "autoencoder",
            InitArg::Disentangle => "disentangle",
        };
        overrides.push(format!("init={name}"));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides).stage("config")?;
    let _lock = OutLock::acquire(&cli.out).stage("output directory")?;
    let out = cli.out.as_path();
    let echo = cfg.echo();
    let echo_path = out.join("config.toml");
    std::fs::write(&echo_path, &echo)
        .map_err(|e| Error::io(&echo_path, e))
        .stage("config echo")?;
    let model_cfg = cfg.model_config();
    let train_cfg = cfg.train();

    match cli.command {
        Command::SynthData => {
            let ds = SynthDataset::new(cfg.synth_spec(), cfg.clips_per_class).stage("synth-data")?;
            let path = out.join("data.dsa");
            write_archive(&path, &echo, &ds).stage("synth-data")?;
            let (back, _) = read_archive(&path).stage("synth-data verify")?;
            eprintln!("wrote {} clips to {}", back.len(), path.display());
        }
        Command::Pretrain => {
            let ds = load_data(&cfg).stage("data")?;
            let (_, outcome) = pretrain(ds, &model_cfg, &train_cfg, out, &echo).stage("pretrain")?;
            verify_run(&outcome).stage("pretrain verify")?;
            write_json(&out.join("summary.json"), &run_summary(&outcome)).stage("summary")?;
            eprintln!("best epoch {} of {}", outcome.best_epoch, outcome.epochs_run);
        }
        Command::PretrainAe => {
            let ds = load_data(&cfg).stage("data")?;
            let (_, outcome) =
                pretrain_autoencoder(ds, &model_cfg, &train_cfg, out, &echo).stage("pretrain-ae")?;
            verify_run(&outcome).stage("pretrain-ae verify")?;
            write_json(&out.join("summary.json"), &run_summary(&outcome)).stage("summary")?;
            eprintln!("best epoch {} of {}", outcome.best_epoch, outcome.epochs_run);
        }
        Command::Finetune { .. } => {
            let init = cfg.init_mode().stage("config")?;
            let ds = load_data(&cfg).stage("data")?;
            let start = initial_classifier(&model_cfg, &init, cfg.seed).stage("finetune init")?;
            write_json(
                &out.join("init.json"),
                &json!({
                    "init": init.name(),
                    "checkpoint": if cfg.init == InitName::Random { None } else { cfg.checkpoint.clone() },
                    "encoder_sha256": params_digest(&start.params.with_prefix("encoder")),
                    "head_sha256": params_digest(&start.params.with_prefix("head")),
                }),
            )
            .stage("finetune init")?;
            let (_, outcome) =
                finetune_classifier(ds, &model_cfg, &init, &train_cfg, cfg.finetune_augment, out, &echo)
                    .stage("finetune")?;
            verify_run(&outcome).stage("finetune verify")?;
            write_json(&out.join("summary.json"), &run_summary(&outcome)).stage("summary")?;
            eprintln!(
                "best validation accuracy {:.4} at epoch {}",
                outcome.best_val().accuracy.unwrap_or(0.0),
                outcome.best_epoch
            );
        }
        Command::Eval => {
            let ckpt = load_checkpoint(required(&cfg.checkpoint, "checkpoint").stage("eval")?).stage("checkpoint")?;
            let ds = load_data(&cfg).stage("data")?;
            let report = match ckpt.kind {
                ModelKind::Disentangle => {
                    let m = DisentangleModel::from_params(ckpt.model, ckpt.params).stage("checkpoint")?;
                    reconstruction_report(&m, ds.as_ref(), cfg.iou_threshold).stage("eval")?
                }
                ModelKind::Classifier => {
                    let m = Classifier::from_params(ckpt.model, ckpt.params).stage("checkpoint")?;
                    EvalReport {
                        n_items: ds.len(),
                        losses: None,
                        fg_iou: None,
                        iou_frames: 0,
                        accuracy: Some(accuracy(&m, ds.as_ref()).stage("eval")?),
                        l1: None,
                    }
                }
                ModelKind::Autoencoder => {
                    let m = Autoencoder::from_params(ckpt.model, ckpt.params).stage("checkpoint")?;
                    let stats = training::evaluate(&m, ds.as_ref()).stage("eval")?;
                    EvalReport {
                        n_items: ds.len(),
                        losses: None,
                        fg_iou: None,
                        iou_frames: 0,
                        accuracy: None,
                        l1: Some(stats.total),
                    }
                }
            };
            let value = serde_json::to_value(&report).expect("report serializes");
            write_json(&out.join("eval.json"), &value).stage("eval")?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Reconstruct => {
            let ckpt = load_checkpoint(required(&cfg.checkpoint, "checkpoint").stage("reconstruct")?)
                .stage("checkpoint")?;
            if ckpt.kind != ModelKind::Disentangle {
                return Err(Error::Validation(format!(
                    "reconstruct needs a disentangle checkpoint, got {}",
                    ckpt.kind.name()
                )))
                .stage("checkpoint");
            }
            let m = DisentangleModel::from_params(ckpt.model, ckpt.params).stage("checkpoint")?;
            let ds = load_data(&cfg).stage("data")?;
            if cfg.clip_index >= ds.len() {
                return Err(Error::Range(format!(
                    "clip_index {} is outside a dataset of {} clips",
                    cfg.clip_index,
                    ds.len()
                )))
                .stage("data");
            }
            let item = ds.get(cfg.clip_index).stage("data")?;
            let mask = item.require_mask().stage("data")?;
            let path = out.join("reconstruction.png");
            emit_reconstruction_grid(&m, &item.clip, mask, &path).stage("reconstruct")?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(StageError { stage, error }) => {
            eprintln!("error: {stage}: {error}");
            ExitCode::from(if error.is_validation() { 1 } else { 2 })
        }
    }
}
