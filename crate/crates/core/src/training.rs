//! Optimization loops: disentangling pretraining, autoencoder pretraining and
//! classifier fine-tuning, all sharing one Adam step, one epoch loop with
//! validation-based early stopping, and one metrics stream.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, split_dataset, AnnotatedClip, Dataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::{
    load_checkpoint, save_checkpoint, Autoencoder, Checkpoint, Classifier, DisentangleModel, ModelConfig,
    ModelKind, Parameters,
};
use crate::tensor::Tensor;

/// Sub-stream ids for [`derive_seed`].
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const HEAD: u64 = 5;
    pub const DATA: u64 = 6;
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Coefficient of the L2 term added to every gradient.
    pub weight_decay: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub val_fraction: f64,
    /// Random temporal/horizontal flips of training clips.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 40,
            epochs: 125,
            weight_decay: 1e-3,
            seed: 0,
            early_stop_patience: 10,
            grad_clip: 0.0,
            val_fraction: 0.1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        Ok(())
    }
}

/// Where the classifier's encoder comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitMode {
    Random,
    AutoencoderPretrained(PathBuf),
    DisentanglePretrained(PathBuf),
}

impl InitMode {
    pub fn name(&self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::AutoencoderPretrained(_) => "autoencoder",
            InitMode::DisentanglePretrained(_) => "disentangle",
        }
    }
}

/// Adam moments for every parameter, kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &Parameters<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter. The weight-decay term is added to the
    /// gradient before the moments see it.
    pub fn update(&mut self, params: &mut Parameters<f32>, grads: &Parameters<f32>, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let clip_scale = clip_factor(grads, cfg.grad_clip);
        for (i, ((_, p), (_, g))) in params.iter_mut().zip(grads.iter()).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = gj as f64 * clip_scale + cfg.weight_decay * *w as f64;
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let step = cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                *w = (*w as f64 - step) as f32;
            }
        }
    }
}

fn clip_factor(grads: &Parameters<f32>, max_norm: f64) -> f64 {
    if max_norm <= 0.0 {
        return 1.0;
    }
    let sq: f64 = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// Loss components of one clip or the mean over several. Components that a
/// model does not have are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub fg_first: Option<f64>,
    pub bg_first: Option<f64>,
    pub fg_last: Option<f64>,
    pub feat: Option<f64>,
    pub rec: Option<f64>,
    pub total: f64,
    pub accuracy: Option<f64>,
}

impl StepStats {
    pub fn from_report(r: &LossReport) -> Self {
        StepStats {
            fg_first: Some(r.fg_first),
            bg_first: Some(r.bg_first),
            fg_last: Some(r.fg_last),
            feat: Some(r.feat),
            rec: Some(r.rec),
            total: r.total,
            accuracy: None,
        }
    }

    pub fn mean(items: &[StepStats]) -> StepStats {
        let n = items.len().max(1) as f64;
        let opt = |f: fn(&StepStats) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = items.iter().map(f).collect();
            vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / n)
        };
        StepStats {
            fg_first: opt(|s| s.fg_first),
            bg_first: opt(|s| s.bg_first),
            fg_last: opt(|s| s.fg_last),
            feat: opt(|s| s.feat),
            rec: opt(|s| s.rec),
            total: items.iter().map(|s| s.total).sum::<f64>() / n,
            accuracy: opt(|s| s.accuracy),
        }
    }

    fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("fg_first", self.fg_first),
            ("bg_first", self.bg_first),
            ("fg_last", self.fg_last),
            ("feat", self.feat),
            ("rec", self.rec),
            ("total", Some(self.total)),
        ]
        .into_iter()
        .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
        .map(|(n, _)| n)
    }
}

/// A network the generic loop can optimize.
pub trait Trainable: Clone {
    const KIND: ModelKind;
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &Parameters<f32>;
    fn params_mut(&mut self) -> &mut Parameters<f32>;
    fn item_gradients(&self, item: &AnnotatedClip) -> Result<(StepStats, Parameters<f32>)>;
    fn item_stats(&self, item: &AnnotatedClip) -> Result<StepStats>;
}

impl Trainable for DisentangleModel<f32> {
    const KIND: ModelKind = ModelKind::Disentangle;
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn params(&self) -> &Parameters<f32> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut Parameters<f32> {
        &mut self.params
    }
    fn item_gradients(&self, item: &AnnotatedClip) -> Result<(StepStats, Parameters<f32>)> {
        let (report, grads) = self.gradients(&item.clip, item.require_mask()?)?;
        Ok((StepStats::from_report(&report), grads))
    }
    fn item_stats(&self, item: &AnnotatedClip) -> Result<StepStats> {
        Ok(StepStats::from_report(&self.loss(&item.clip, item.require_mask()?)?))
    }
}

impl Trainable for Autoencoder<f32> {
    const KIND: ModelKind = ModelKind::Autoencoder;
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn params(&self) -> &Parameters<f32> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut Parameters<f32> {
        &mut self.params
    }
    fn item_gradients(&self, item: &AnnotatedClip) -> Result<(StepStats, Parameters<f32>)> {
        let (loss, grads) = self.gradients(&item.clip)?;
        Ok((ae_stats(loss), grads))
    }
    fn item_stats(&self, item: &AnnotatedClip) -> Result<StepStats> {
        Ok(ae_stats(self.loss(&item.clip)?))
    }
}

fn ae_stats(loss: f64) -> StepStats {
    StepStats {
        rec: Some(loss),
        total: loss,
        ..StepStats::default()
    }
}

fn require_label(item: &AnnotatedClip) -> Result<usize> {
    item.label
        .ok_or_else(|| Error::Validation(format!("clip {} has no class label", item.source_id)))
}

impl Trainable for Classifier<f32> {
    const KIND: ModelKind = ModelKind::Classifier;
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn params(&self) -> &Parameters<f32> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut Parameters<f32> {
        &mut self.params
    }
    fn item_gradients(&self, item: &AnnotatedClip) -> Result<(StepStats, Parameters<f32>)> {
        let (loss, grads) = self.gradients(&item.clip, require_label(item)?)?;
        Ok((
            StepStats {
                total: loss,
                ..StepStats::default()
            },
            grads,
        ))
    }
    fn item_stats(&self, item: &AnnotatedClip) -> Result<StepStats> {
        let label = require_label(item)?;
        let logits = self.logits(&item.clip)?;
        let probs = crate::autograd::softmax(&logits);
        let p = (probs[label] as f64).max(f64::MIN_POSITIVE);
        let hit = crate::model::argmax(&logits) == label;
        Ok(StepStats {
            total: -p.ln(),
            accuracy: Some(if hit { 1.0 } else { 0.0 }),
            ..StepStats::default()
        })
    }
}

/// One optimizer update on a batch: per-clip gradients are averaged, the
/// update is applied, and the pre-update mean statistics are returned.
pub fn training_step<M: Trainable>(
    model: &mut M,
    batch: &[AnnotatedClip],
    adam: &mut Adam,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut sum: Option<Parameters<f32>> = None;
    let mut stats = Vec::with_capacity(batch.len());
    for item in batch {
        let (s, g) = model.item_gradients(item)?;
        if let Some(name) = s.non_finite_component() {
            return Err(Error::NonFinite(format!(
                "loss component {name} is not finite on clip {}",
                item.source_id
            )));
        }
        stats.push(s);
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for ((_, a), (_, b)) in acc.iter_mut().zip(g.iter()) {
                    a.add_assign(b);
                }
            }
        }
    }
    let mut grads = sum.expect("non-empty batch");
    let inv = 1.0 / batch.len() as f32;
    for (name, g) in grads.iter_mut() {
        g.scale(inv);
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name} is not finite")));
        }
    }
    adam.update(model.params_mut(), &grads, cfg);
    Ok(StepStats::mean(&stats))
}

/// Mean statistics of a model over a whole dataset, without updates.
pub fn evaluate<M: Trainable>(model: &M, ds: &dyn Dataset) -> Result<StepStats> {
    if ds.is_empty() {
        return Err(Error::Eval("cannot evaluate on an empty dataset".into()));
    }
    let stats = (0..ds.len())
        .map(|i| model.item_stats(&ds.get(i)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(StepStats::mean(&stats))
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    #[serde(flatten)]
    pub stats: StepStats,
}

/// Append-only JSON-lines writer.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    last_step: u64,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            last_step: 0,
        })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        assert!(rec.step >= self.last_step, "metrics steps must not go backwards");
        self.last_step = rec.step;
        let line = serde_json::to_string(rec).map_err(|e| Error::Eval(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a metrics stream back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Eval(format!("{}: {e}", path.display()))))
        .collect()
}

/// Quantity early stopping watches on the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monitor {
    /// Lower mean total loss is better.
    Loss,
    /// Higher accuracy is better.
    Accuracy,
}

impl Monitor {
    fn score(self, s: &StepStats) -> f64 {
        match self {
            Monitor::Loss => -s.total,
            Monitor::Accuracy => s.accuracy.unwrap_or(0.0),
        }
    }
}

/// Files and bookkeeping of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: u64,
    /// Validation statistics of every epoch, in order.
    pub val_history: Vec<StepStats>,
}

impl RunOutcome {
    pub fn best_val(&self) -> &StepStats {
        &self.val_history[self.best_epoch]
    }
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Epoch loop shared by every training mode. Training order is reshuffled
/// each epoch, the last partial batch is dropped, the validation split is
/// evaluated after every epoch, and the best epoch's parameters are both
/// checkpointed and returned in `model`.
#[allow(clippy::too_many_arguments)]
pub fn fit<M: Trainable>(
    model: &mut M,
    train: &dyn Dataset,
    val: &dyn Dataset,
    cfg: &TrainConfig,
    monitor: Monitor,
    augment_train: bool,
    out_dir: &Path,
    echo: &str,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if train.len() < cfg.batch_size {
        return Err(Error::Validation(format!(
            "training split has {} clips, fewer than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    if val.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let dims = model.config().input_dims;
    if train.clip_dims() != dims {
        return Err(Error::Shape(format!(
            "dataset clips are {:?} but the model expects {:?}",
            train.clip_dims(),
            dims
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::SHUFFLE));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::AUGMENT));
    let mut adam = Adam::new(model.params());
    let save = |model: &M, step: u64, path: &Path| {
        save_checkpoint(
            path,
            &Checkpoint {
                kind: M::KIND,
                step,
                model: model.config().clone(),
                echo: echo.to_string(),
                params: model.params().clone(),
            },
        )
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, M)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let mut batch = chunk.iter().map(|&i| train.get(i)).collect::<Result<Vec<_>>>()?;
            if augment_train {
                batch = batch.iter().map(|it| augment(it, &mut aug_rng)).collect();
            }
            let stats = training_step(model, &batch, &mut adam, cfg)?;
            metrics.write(&MetricsRecord {
                step: adam.step,
                epoch,
                split: "train".into(),
                stats,
            })?;
        }
        let val_stats = evaluate(model, val)?;
        if let Some(name) = val_stats.non_finite_component() {
            return Err(Error::NonFinite(format!(
                "validation loss component {name} is not finite after epoch {epoch}"
            )));
        }
        metrics.write(&MetricsRecord {
            step: adam.step,
            epoch,
            split: "val".into(),
            stats: val_stats,
        })?;
        history.push(val_stats);
        let score = monitor.score(&val_stats);
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            save(model, adam.step, &best_path)?;
            best = Some((epoch, score, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    save(model, adam.step, &final_path)?;
    let epochs_run = history.len();
    let (best_epoch, _, best_model) = match best {
        Some(b) => b,
        None => {
            // Zero epochs: the initial parameters are the best we have.
            history.push(evaluate(model, val)?);
            save(model, 0, &best_path)?;
            (0, 0.0, model.clone())
        }
    };
    *model = best_model;
    Ok(RunOutcome {
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        metrics: metrics_path,
        best_epoch,
        epochs_run,
        steps: adam.step,
        val_history: history,
    })
}

/// Disentangling pretraining on a masked dataset, split at the video level.
pub fn pretrain(
    dataset: Arc<dyn Dataset>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    echo: &str,
) -> Result<(DisentangleModel<f32>, RunOutcome)> {
    let (train, val) = split_dataset(dataset, cfg.val_fraction, derive_seed(cfg.seed, streams::SPLIT))?;
    let mut model = DisentangleModel::new(model_cfg.clone(), derive_seed(cfg.seed, streams::INIT))?;
    let outcome = fit(&mut model, &train, &val, cfg, Monitor::Loss, cfg.augment, out_dir, echo)?;
    Ok((model, outcome))
}

/// Autoencoder-baseline pretraining; masks are ignored.
pub fn pretrain_autoencoder(
    dataset: Arc<dyn Dataset>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    echo: &str,
) -> Result<(Autoencoder<f32>, RunOutcome)> {
    let (train, val) = split_dataset(dataset, cfg.val_fraction, derive_seed(cfg.seed, streams::SPLIT))?;
    let mut model = Autoencoder::new(model_cfg.clone(), derive_seed(cfg.seed, streams::INIT))?;
    let outcome = fit(&mut model, &train, &val, cfg, Monitor::Loss, cfg.augment, out_dir, echo)?;
    Ok((model, outcome))
}

/// Builds the classifier a fine-tuning run starts from: a fresh head on an
/// encoder that is random or copied from a pretraining checkpoint.
pub fn initial_classifier(model_cfg: &ModelConfig, init: &InitMode, seed: u64) -> Result<Classifier<f32>> {
    let head_seed = derive_seed(seed, streams::HEAD);
    let (path, want) = match init {
        InitMode::Random => {
            // Same head draw as the pretrained modes; only the encoder differs.
            let encoder = Classifier::<f32>::new(model_cfg.clone(), derive_seed(seed, streams::INIT))?.params;
            return Classifier::from_encoder(model_cfg.clone(), &encoder, head_seed);
        }
        InitMode::AutoencoderPretrained(p) => (p, ModelKind::Autoencoder),
        InitMode::DisentanglePretrained(p) => (p, ModelKind::Disentangle),
    };
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} initialization needs a checkpoint, {} does not exist",
            init.name(),
            path.display()
        )));
    }
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != want {
        return Err(Error::Config(format!(
            "{} holds a {} checkpoint, {} initialization needs a {} one",
            path.display(),
            ckpt.kind.name(),
            init.name(),
            want.name()
        )));
    }
    Classifier::from_encoder(model_cfg.clone(), &ckpt.params, head_seed)
}

/// Fine-tunes every weight of a classifier with cross-entropy, keeping the
/// epoch with the best validation accuracy.
pub fn finetune_classifier_split(
    train: &dyn Dataset,
    val: &dyn Dataset,
    model_cfg: &ModelConfig,
    init: &InitMode,
    cfg: &TrainConfig,
    augment_train: bool,
    out_dir: &Path,
    echo: &str,
) -> Result<(Classifier<f32>, RunOutcome)> {
    for ds in [train, val] {
        match ds.num_classes() {
            Some(n) if n == model_cfg.num_classes => {}
            other => {
                return Err(Error::Config(format!(
                    "dataset has {} classes, model is configured for {}",
                    other.map_or("no".to_string(), |n| n.to_string()),
                    model_cfg.num_classes
                )))
            }
        }
    }
    let mut model = initial_classifier(model_cfg, init, cfg.seed)?;
    let outcome = fit(&mut model, train, val, cfg, Monitor::Accuracy, augment_train, out_dir, echo)?;
    Ok((model, outcome))
}

/// [`finetune_classifier_split`] on a video-level split of one dataset.
pub fn finetune_classifier(
    dataset: Arc<dyn Dataset>,
    model_cfg: &ModelConfig,
    init: &InitMode,
    cfg: &TrainConfig,
    augment_train: bool,
    out_dir: &Path,
    echo: &str,
) -> Result<(Classifier<f32>, RunOutcome)> {
    let (train, val) = split_dataset(dataset, cfg.val_fraction, derive_seed(cfg.seed, streams::SPLIT))?;
    finetune_classifier_split(&train, &val, model_cfg, init, cfg, augment_train, out_dir, echo)
}

/// Stable digest of a parameter set (names, shapes and values).
pub fn params_digest(params: &Parameters<f32>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Largest absolute difference between two parameter sets with equal names.
pub fn max_param_diff(a: &Parameters<f32>, b: &Parameters<f32>) -> f32 {
    a.iter()
        .zip(b.iter())
        .map(|((_, x), (_, y))| x.max_abs_diff(y))
        .fold(0.0, f32::max)
}

/// Zero gradients shaped like `params`.
pub fn zero_grads(params: &Parameters<f32>) -> Parameters<f32> {
    let mut g = Parameters::new();
    for (name, t) in params.iter() {
        g.insert(name.clone(), Tensor::zeros(t.shape()));
    }
    g
}
