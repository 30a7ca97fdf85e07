//! Joint training of adapters and decoders, affinity scheduling, evaluation
//! and the ablation ladder.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::adapter::{affinity_columns, AdapterConfig};
use crate::affinity::{AffinityMatrix, SignConvention, TaskGradient, Troa, TroaProvider};
use crate::data::{render_seed, split_seed, Domain, Sample, Split};
use crate::decoders::{combined_loss, task_loss, Target, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{Features, Group, Model, ModelConfig, ParameterCounts};
use crate::optim::{clip_grad_norm, warmup_cosine, Adam, OptimizerConfig, ScheduleConfig};

/// Batch size used for evaluation; fixed so reports do not depend on the
/// training batch size.
pub const EVAL_BATCH: usize = 16;
/// Validation samples drawn into the per-epoch prediction grid.
pub const PREVIEW_SAMPLES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TroaConfig {
    /// Only has an effect when task-adapted attention is on.
    pub enabled: bool,
    /// Training steps between affinity updates.
    pub cadence: usize,
    /// Epochs with the uniform affinity before the first update.
    pub burn_in_epochs: usize,
    pub inner_steps: usize,
    pub kappa: f64,
    pub sign: SignConvention,
}

impl Default for TroaConfig {
    fn default() -> Self {
        Self { enabled: true, cadence: 50, burn_in_epochs: 1, inner_steps: 1, kappa: 1.0, sign: SignConvention::PaperNegative }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub domain: Domain,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { domain: Domain::A, train_count: 2000, val_count: 200, test_count: 200 }
    }
}

impl DataConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub troa: TroaConfig,
    pub data: DataConfig,
    pub batch_size: usize,
    /// Seeds the trainable parameters and the shuffling order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            troa: TroaConfig::default(),
            data: DataConfig::default(),
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.epochs == 0 || s.warmup_epochs >= s.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                s.warmup_epochs, s.epochs
            )));
        }
        if !(self.optimizer.lr > 0.0) || !self.optimizer.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.optimizer.lr)));
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&s.min_lr_ratio) {
            return Err(Error::Config("min_lr_ratio must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.data.train_count == 0 {
            return Err(Error::Config("batch_size and train_count must be positive".into()));
        }
        if self.troa.cadence == 0 || self.troa.inner_steps == 0 || !(self.troa.kappa > 0.0) {
            return Err(Error::Config("troa cadence, inner_steps and kappa must be positive".into()));
        }
        self.model.backbone.validate()
    }

    /// Sets the epoch count, keeping the warmup share of the schedule.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let s = &mut self.schedule;
        if epochs > 0 && epochs != s.epochs {
            let scaled = (s.warmup_epochs * epochs) / s.epochs.max(1);
            s.warmup_epochs = scaled.min(epochs - 1);
            s.epochs = epochs;
        }
        self
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.train_count.div_ceil(self.batch_size)
    }

    /// Whether affinity updates run; they need task-adapted attention.
    pub fn troa_active(&self) -> bool {
        self.troa.enabled && self.model.adapter.use_taa
    }
}

/// SHA-256 of the canonical JSON form of a config.
pub fn config_hash(config: &TrainConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Targets of one sample, laid out like the head outputs.
#[derive(Clone, Debug)]
pub struct SampleTargets {
    pub seg: Vec<u8>,
    /// `[HW, 1]`
    pub depth: Array2<f32>,
    /// `[HW, 3]`
    pub normal: Array2<f32>,
    /// `[HW, 1]`, 0 or 1.
    pub edge: Array2<f32>,
}

impl SampleTargets {
    pub fn from_sample(s: &Sample) -> Self {
        let (h, w) = s.seg.dim();
        let hw = h * w;
        Self {
            seg: s.seg.iter().copied().collect(),
            depth: Array2::from_shape_vec((hw, 1), s.depth.iter().copied().collect()).expect("depth map"),
            normal: Array2::from_shape_vec((hw, 3), s.normal.iter().copied().collect()).expect("normal map"),
            edge: Array2::from_shape_vec((hw, 1), s.edge.iter().map(|&e| e as f32).collect()).expect("edge map"),
        }
    }
}

/// A split with cached backbone features; the backbone is frozen, so these
/// never change during training.
pub struct PreparedSplit {
    pub split: Split,
    pub domain: Domain,
    pub seeds: Vec<u64>,
    pub features: Vec<Features<f32>>,
    pub targets: Vec<SampleTargets>,
    /// The first few samples, kept for prediction grids.
    pub preview: Vec<Sample>,
}

impl PreparedSplit {
    /// Features are extracted one sample at a time so they do not depend on
    /// how samples are grouped.
    pub fn new(model: &Model<f32>, split: Split, domain: Domain, count: usize) -> Result<Self> {
        let size = model.config.backbone.image_size;
        let mut out = Self { split, domain, seeds: Vec::new(), features: Vec::new(), targets: Vec::new(), preview: Vec::new() };
        for i in 0..count {
            let seed = split_seed(split, domain, i);
            let sample = render_seed(seed, domain, size);
            out.features.push(model.extract_features(&[&sample.image])?);
            out.targets.push(SampleTargets::from_sample(&sample));
            out.seeds.push(seed);
            if i < PREVIEW_SAMPLES {
                out.preview.push(sample);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let feats: Vec<_> = indices.iter().map(|&i| &self.features[i]).collect();
        let cat = |f: &dyn Fn(&SampleTargets) -> &Array2<f32>| {
            let views: Vec<_> = indices.iter().map(|&i| f(&self.targets[i]).view()).collect();
            concatenate(Axis(0), &views).expect("equal target widths")
        };
        Batch {
            features: Features::stack(&feats),
            seg: indices.iter().flat_map(|&i| self.targets[i].seg.iter().copied()).collect(),
            depth: cat(&|t| &t.depth),
            normal: cat(&|t| &t.normal),
            edge: cat(&|t| &t.edge),
            seeds: indices.iter().map(|&i| self.seeds[i]).collect(),
        }
    }
}

pub struct Batch {
    pub features: Features<f32>,
    pub seg: Vec<u8>,
    pub depth: Array2<f32>,
    pub normal: Array2<f32>,
    pub edge: Array2<f32>,
    pub seeds: Vec<u64>,
}

impl Batch {
    pub fn target(&self, kind: TaskKind) -> Target<'_, f32> {
        match kind {
            TaskKind::Segmentation => Target::Labels(&self.seg),
            TaskKind::Depth => Target::Dense(&self.depth),
            TaskKind::Normal => Target::Dense(&self.normal),
            TaskKind::Edge => Target::Dense(&self.edge),
        }
    }
}

pub struct TrainData {
    pub train: PreparedSplit,
    pub val: PreparedSplit,
}

impl TrainData {
    pub fn new(model: &Model<f32>, data: &DataConfig) -> Result<Self> {
        Ok(Self {
            train: PreparedSplit::new(model, Split::Train, data.domain, data.train_count)?,
            val: PreparedSplit::new(model, Split::Val, data.domain, data.val_count)?,
        })
    }
}

/// Per-task losses and their gradients with respect to the raw outputs.
fn batch_losses(model: &Model<f32>, raws: &[Array2<f32>], batch: &Batch, step: u64) -> Result<(Vec<f64>, Vec<Array2<f32>>)> {
    let mut losses = Vec::with_capacity(raws.len());
    let mut grads = Vec::with_capacity(raws.len());
    for (raw, spec) in raws.iter().zip(&model.tasks) {
        let (l, g) = task_loss(raw, batch.target(spec.kind), spec, model.pixels())?;
        losses.push(l);
        grads.push(g);
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss { step, task_losses: losses, batch_seeds: batch.seeds.clone() });
    }
    Ok((losses, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub task_losses: Vec<f64>,
    pub lr: f64,
    /// Number of affinity updates behind the matrix this step used.
    pub affinity_version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_task_losses: Vec<f64>,
    pub clipped_steps: usize,
    pub degenerate_tokens: usize,
    pub val: Option<MetricsReport>,
}

/// Mutable training state that a checkpoint must carry besides tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub adam_t: u64,
    pub troa_adam_t: u64,
    pub epochs: Vec<EpochRecord>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    /// Optimizer for the inner decoder steps of affinity updates.
    pub troa_adam: Adam<f32>,
    troa: Troa,
    affinity: Arc<AffinityMatrix>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    frozen_digest: String,
}

/// Shuffle seeds are derived from the run seed so they differ from the
/// parameter initialization stream.
const SHUFFLE_SALT: u64 = 0x5348_5546;

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(&config.model, config.seed)?;
        let t = &config.troa;
        let troa = Troa::new(model.num_tasks(), t.kappa, t.sign, t.inner_steps)?;
        let frozen_digest = model.frozen_digest();
        Ok(Self {
            adam: Adam::new(&config.optimizer),
            troa_adam: Adam::new(&config.optimizer),
            affinity: troa.snapshot(),
            troa,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT),
            epoch: 0,
            step: 0,
            history: Vec::new(),
            epochs: Vec::new(),
            frozen_digest,
            model,
            config,
        })
    }

    /// Rebuilds a trainer from saved state; `model` must already hold the
    /// saved tensors and the optimizers their moments.
    pub fn resume(config: TrainConfig, model: Model<f32>, adam: Adam<f32>, troa_adam: Adam<f32>, affinity: AffinityMatrix, state: TrainerState) -> Result<Self> {
        let mut t = Self::new(config)?;
        let c = &t.config.troa;
        t.troa = Troa::with_affinity(affinity, c.kappa, c.sign, c.inner_steps)?;
        t.affinity = t.troa.snapshot();
        t.model = model;
        t.frozen_digest = t.model.frozen_digest();
        t.adam = adam;
        t.adam.t = state.adam_t;
        t.troa_adam = troa_adam;
        t.troa_adam.t = state.troa_adam_t;
        t.rng = state.rng;
        t.epoch = state.epoch;
        t.step = state.step;
        t.epochs = state.epochs;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            adam_t: self.adam.t,
            troa_adam_t: self.troa_adam.t,
            epochs: self.epochs.clone(),
        }
    }

    pub fn affinity(&self) -> Arc<AffinityMatrix> {
        Arc::clone(&self.affinity)
    }

    pub fn prepare_data(&self) -> Result<TrainData> {
        TrainData::new(&self.model, &self.config.data)
    }

    pub fn total_steps(&self) -> usize {
        self.config.schedule.epochs * self.config.steps_per_epoch()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let s = &self.config.schedule;
        let warmup = s.warmup_epochs * self.config.steps_per_epoch();
        warmup_cosine(step as usize, self.config.optimizer.lr, warmup, self.total_steps(), s.min_lr_ratio)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.schedule.epochs
    }

    /// One optimizer step on the uniformly weighted task losses.
    fn train_step(&mut self, batch: &Batch) -> Result<(StepRecord, bool, usize)> {
        let omega = affinity_columns::<f32>(&self.affinity);
        let (raws, cache) = self.model.forward(&batch.features, &omega)?;
        let (losses, grads) = batch_losses(&self.model, &raws, batch, self.step)?;
        let loss = combined_loss(&losses).map_err(|_| Error::NonFiniteLoss {
            step: self.step,
            task_losses: losses.clone(),
            batch_seeds: batch.seeds.clone(),
        })?;
        let n = grads.len() as f32;
        let d_raw: Vec<_> = grads.into_iter().map(|g| g / n).collect();
        self.model.zero_grads();
        self.model.backward(&cache, &d_raw);
        let lr = self.lr_at(self.step);
        let model = &mut self.model;
        let norm = clip_grad_norm(&mut |f| model.visit_trainable(Group::All, f), self.config.optimizer.clip_norm);
        let clipped = self.config.optimizer.clip_norm > 0.0 && norm > self.config.optimizer.clip_norm;
        self.adam.step(&mut |f| model.visit_trainable(Group::All, f), lr);
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch + 1,
            loss,
            task_losses: losses,
            lr,
            affinity_version: self.affinity.step_count,
        };
        self.step += 1;
        Ok((record, clipped, cache.degenerate_tokens))
    }

    fn troa_due(&self) -> bool {
        let burn_in = (self.config.troa.burn_in_epochs * self.config.steps_per_epoch()) as u64;
        self.config.troa_active() && self.step > burn_in && (self.step - burn_in) % self.config.troa.cadence as u64 == 0
    }

    /// One affinity update on `batch`; the new matrix is used from the next step on.
    fn troa_update(&mut self, batch: &Batch) -> Result<()> {
        let lr = self.lr_at(self.step.saturating_sub(1));
        let mut provider = BatchProvider {
            omega: affinity_columns::<f32>(&self.affinity),
            model: &mut self.model,
            adam: &mut self.troa_adam,
            batch,
            lr,
            clip: self.config.optimizer.clip_norm,
            step: self.step,
        };
        self.affinity = self.troa.step(&mut provider)?;
        self.model.zero_grads();
        info!(step = self.step, version = self.affinity.step_count, affinity = ?self.affinity.columns, "affinity updated");
        Ok(())
    }

    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochRecord> {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let n = self.model.num_tasks();
        let (mut sum, mut task_sums, mut count) = (0.0, vec![0.0; n], 0usize);
        let (mut clipped, mut degenerate) = (0, 0);
        for chunk in order.chunks(self.config.batch_size) {
            let batch = data.train.batch(chunk);
            let (rec, c, d) = self.train_step(&batch)?;
            sum += rec.loss;
            for (s, l) in task_sums.iter_mut().zip(&rec.task_losses) {
                *s += l;
            }
            count += 1;
            clipped += c as usize;
            degenerate += d;
            tracing::debug!(step = rec.step, loss = rec.loss, lr = rec.lr, "step");
            self.history.push(rec);
            if self.troa_due() {
                self.troa_update(&batch)?;
            }
        }
        self.epoch += 1;
        if self.model.frozen_digest() != self.frozen_digest {
            return Err(Error::BackboneModified { epoch: self.epoch });
        }
        if degenerate > 0 {
            warn!(epoch = self.epoch, tokens = degenerate, "tokens with vanishing variance in task-scaled norm");
        }
        let val = (!data.val.is_empty())
            .then(|| evaluate(&self.model, &self.affinity, &data.val, &format!("epoch{}", self.epoch)))
            .transpose()?;
        let record = EpochRecord {
            epoch: self.epoch,
            mean_loss: sum / count as f64,
            mean_task_losses: task_sums.iter().map(|s| s / count as f64).collect(),
            clipped_steps: clipped,
            degenerate_tokens: degenerate,
            val,
        };
        info!(
            epoch = record.epoch,
            loss = record.mean_loss,
            task_losses = ?record.mean_task_losses,
            clipped_steps = clipped,
            lr = self.lr_at(self.step.saturating_sub(1)),
            val = ?record.val,
            seconds = started.elapsed().as_secs_f64(),
            "epoch finished"
        );
        self.epochs.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs. With `out`, writes the loss curve, the
    /// per-epoch validation metrics and a prediction grid per epoch.
    pub fn fit(&mut self, data: &TrainData, out: Option<&Path>) -> Result<()> {
        while !self.finished() {
            let rec = self.run_epoch(data)?;
            if let Some(dir) = out {
                if let Some(v) = &rec.val {
                    v.append_csv(&dir.join("val_metrics.csv"))?;
                }
                let preds = predict_split(&self.model, &self.affinity, &data.val, data.val.preview.len())?;
                let rows: Vec<_> = data.val.preview.iter().zip(&preds).collect();
                crate::viz::prediction_grid(&rows).save(dir.join(format!("predictions_epoch{:02}.png", rec.epoch)))?;
            }
        }
        if let Some(dir) = out {
            std::fs::write(dir.join("loss_curve.csv"), loss_curve_csv(&self.history))?;
        }
        Ok(())
    }

    pub fn count_parameters(&mut self) -> ParameterCounts {
        self.model.count_parameters()
    }
}

/// `step,epoch,loss,<task>...,lr,affinity_version`, one row per step.
pub fn loss_curve_csv(history: &[StepRecord]) -> String {
    let mut s = String::from("step,epoch,loss");
    let n = history.first().map_or(0, |r| r.task_losses.len());
    for t in 0..n {
        let _ = write!(s, ",task{t}");
    }
    s.push_str(",lr,affinity_version\n");
    for r in history {
        let _ = write!(s, "{},{},{:.9e}", r.step, r.epoch, r.loss);
        for l in &r.task_losses {
            let _ = write!(s, ",{l:.9e}");
        }
        let _ = writeln!(s, ",{:.9e},{}", r.lr, r.affinity_version);
    }
    s
}

struct BatchProvider<'a> {
    model: &'a mut Model<f32>,
    adam: &'a mut Adam<f32>,
    batch: &'a Batch,
    omega: Vec<Vec<f32>>,
    lr: f64,
    clip: f64,
    step: u64,
}

impl TroaProvider for BatchProvider<'_> {
    fn num_tasks(&self) -> usize {
        self.model.num_tasks()
    }

    fn descend(&mut self, weights: &[f64]) -> Result<()> {
        let (raws, cache) = self.model.forward(&self.batch.features, &self.omega)?;
        let (_, grads) = batch_losses(self.model, &raws, self.batch, self.step)?;
        let d_raw: Vec<_> = grads.into_iter().zip(weights).map(|(g, &w)| g * w as f32).collect();
        self.model.zero_grads();
        self.model.backward(&cache, &d_raw);
        let model = &mut *self.model;
        clip_grad_norm(&mut |f| model.visit_trainable(Group::Decoders, f), self.clip);
        self.adam.step(&mut |f| model.visit_trainable(Group::Decoders, f), self.lr);
        Ok(())
    }

    /// Gradients of each task loss with respect to the backbone features at
    /// the first adapter placement, summed over the batch.
    fn task_gradients(&mut self) -> Result<Vec<TaskGradient>> {
        let (raws, cache) = self.model.forward(&self.batch.features, &self.omega)?;
        let (_, grads) = batch_losses(self.model, &raws, self.batch, self.step)?;
        self.model.zero_grads();
        let d_theta = self.model.backward(&cache, &grads);
        let b = self.batch.features.batch;
        Ok(d_theta
            .iter()
            .enumerate()
            .map(|(t, g)| {
                let rows = g.nrows() / b;
                let mut v = vec![0.0; rows * g.ncols()];
                for (i, row) in g.rows().into_iter().enumerate() {
                    for (j, &x) in row.iter().enumerate() {
                        v[(i % rows) * g.ncols() + j] += x as f64;
                    }
                }
                TaskGradient::new(t, v)
            })
            .collect())
    }
}

/// Per-sample predictions for the tasks a model has.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    pub seg: Option<Vec<u8>>,
    pub depth: Option<Vec<f32>>,
    /// `[HW, 3]` unit vectors.
    pub normal: Option<Array2<f32>>,
    pub edge: Option<Vec<u8>>,
}

impl Prediction {
    pub fn task_count(&self) -> usize {
        self.seg.is_some() as usize + self.depth.is_some() as usize + self.normal.is_some() as usize + self.edge.is_some() as usize
    }
}

/// Predictions for a batch: class argmax, raw depth, normalized normals and
/// edges where the predicted strength exceeds one half.
pub fn predict(model: &Model<f32>, affinity: &AffinityMatrix, features: &Features<f32>) -> Result<Vec<Prediction>> {
    let (raws, _) = model.forward(features, &affinity_columns::<f32>(affinity))?;
    let px = model.pixels();
    let mut out = vec![Prediction::default(); features.batch];
    for (raw, spec) in raws.iter().zip(&model.tasks) {
        for (b, p) in out.iter_mut().enumerate() {
            let r = raw.slice(ndarray::s![b * px..(b + 1) * px, ..]);
            match spec.kind {
                TaskKind::Segmentation => {
                    p.seg = Some(
                        r.rows()
                            .into_iter()
                            .map(|row| {
                                let mut best = 0;
                                for (k, &v) in row.iter().enumerate() {
                                    if v > row[best] {
                                        best = k;
                                    }
                                }
                                best as u8
                            })
                            .collect(),
                    );
                }
                TaskKind::Depth => p.depth = Some(r.column(0).to_vec()),
                TaskKind::Normal => {
                    let mut n = r.to_owned();
                    for mut row in n.rows_mut() {
                        let len = row.dot(&row).sqrt().max(1e-12);
                        row /= len;
                    }
                    p.normal = Some(n);
                }
                TaskKind::Edge => p.edge = Some(r.column(0).iter().map(|&v| (v > 0.5) as u8).collect()),
            }
        }
    }
    Ok(out)
}

/// Predictions for the first `count` samples of a split.
pub fn predict_split(model: &Model<f32>, affinity: &AffinityMatrix, split: &PreparedSplit, count: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(count);
    let idx: Vec<usize> = (0..count.min(split.len())).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend(predict(model, affinity, &split.batch(chunk).features)?);
    }
    Ok(out)
}

/// Deterministic full-split metrics.
pub fn evaluate(model: &Model<f32>, affinity: &AffinityMatrix, split: &PreparedSplit, label: &str) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(model.config.seg_classes);
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let preds = predict(model, affinity, &split.batch(chunk).features)?;
        for (p, &i) in preds.iter().zip(chunk) {
            let t = &split.targets[i];
            if let Some(seg) = &p.seg {
                acc.add_segmentation(seg, &t.seg);
            }
            if let Some(d) = &p.depth {
                acc.add_depth(d, t.depth.as_slice().expect("contiguous"));
            }
            if let Some(n) = &p.normal {
                acc.add_normals(n.view(), t.normal.view());
            }
            if let Some(e) = &p.edge {
                let gt: Vec<u8> = t.edge.iter().map(|&v| v as u8).collect();
                acc.add_edges(e, &gt);
            }
            acc.samples += 1;
        }
    }
    Ok(acc.report(split.split.name(), split.domain.tag(), label, false))
}

/// Trains from scratch and optionally writes per-epoch artifacts to `out`.
pub fn train(config: TrainConfig, out: Option<&Path>) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    let data = trainer.prepare_data()?;
    trainer.fit(&data, out)?;
    Ok(trainer)
}

/// Rungs of the component ablation; each adds one component to the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rung {
    Vanilla,
    Taa,
    Bottleneck,
    Tsn,
}

impl Rung {
    pub const LADDER: [Rung; 4] = [Rung::Vanilla, Rung::Taa, Rung::Bottleneck, Rung::Tsn];

    pub fn name(self) -> &'static str {
        match self {
            Rung::Vanilla => "vanilla",
            Rung::Taa => "taa",
            Rung::Bottleneck => "bottleneck",
            Rung::Tsn => "tsn",
        }
    }

    /// Sets the three component flags for this rung.
    pub fn apply(self, adapter: &mut AdapterConfig) {
        let level = Self::LADDER.iter().position(|&r| r == self).expect("rung in ladder");
        adapter.use_taa = level >= 1;
        adapter.use_bottleneck = level >= 2;
        adapter.use_tsn = level >= 3;
    }
}

impl std::str::FromStr for Rung {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::LADDER
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation rung {s:?} (expected vanilla, taa, bottleneck or tsn)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rung: Rung,
    pub seed: u64,
    pub report: MetricsReport,
    pub params: ParameterCounts,
}

/// Trains every rung once per seed on shared data and evaluates on `eval`.
pub fn run_ablation(base: &TrainConfig, ladder: &[Rung], seeds: &[u64], eval: Split) -> Result<Vec<AblationRow>> {
    let probe = Trainer::new(base.clone())?;
    let data = probe.prepare_data()?;
    let eval_split = match eval {
        Split::Val => None,
        _ => Some(PreparedSplit::new(&probe.model, eval, base.data.domain, base.data.count(eval))?),
    };
    drop(probe);
    let mut rows = Vec::new();
    for &rung in ladder {
        for &seed in seeds {
            let mut config = base.clone();
            rung.apply(&mut config.model.adapter);
            config.seed = seed;
            let mut t = Trainer::new(config)?;
            t.fit(&data, None)?;
            let split = eval_split.as_ref().unwrap_or(&data.val);
            let report = evaluate(&t.model, &t.affinity(), split, rung.name())?;
            info!(rung = rung.name(), seed, report = ?report, "ablation rung finished");
            rows.push(AblationRow { rung, seed, report, params: t.count_parameters() });
        }
    }
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str =
    "rung,seed,miou_pct,depth_rmse,normal_merr_deg,edge_f1_pct,trainable_params,total_params";

/// Per-seed rows followed by one `mean` row per rung.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    let fmt = |s: &mut String, rung: &str, seed: &str, m: [f64; 4], p: &ParameterCounts| {
        let _ = writeln!(s, "{rung},{seed},{:.6},{:.6},{:.6},{:.6},{},{}", m[0], m[1], m[2], m[3], p.trainable, p.total);
    };
    for r in rows {
        let m = [r.report.miou_pct, r.report.depth_rmse, r.report.normal_merr_deg, r.report.edge_f1_pct];
        fmt(&mut s, r.rung.name(), &r.seed.to_string(), m, &r.params);
    }
    for rung in Rung::LADDER {
        let mine: Vec<_> = rows.iter().filter(|r| r.rung == rung).collect();
        if let Some(first) = mine.first() {
            let m = ablation_mean(rows, rung).expect("rung present");
            fmt(&mut s, rung.name(), "mean", m, &first.params);
        }
    }
    s
}

/// Seed-averaged `[miou, depth rmse, normal error, edge f1]` of a rung.
pub fn ablation_mean(rows: &[AblationRow], rung: Rung) -> Option<[f64; 4]> {
    let mine: Vec<_> = rows.iter().filter(|r| r.rung == rung).collect();
    if mine.is_empty() {
        return None;
    }
    let n = mine.len() as f64;
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| mine.iter().map(|r| f(&r.report)).sum::<f64>() / n;
    Some([avg(&|r| r.miou_pct), avg(&|r| r.depth_rmse), avg(&|r| r.normal_merr_deg), avg(&|r| r.edge_f1_pct)])
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.data = DataConfig { domain: Domain::A, train_count: 8, val_count: 4, test_count: 4 };
        c.batch_size = 4;
        c.schedule = ScheduleConfig { epochs: 2, warmup_epochs: 1, min_lr_ratio: 0.01 };
        c.troa.burn_in_epochs = 0;
        c.troa.cadence = 1;
        c
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.schedule.warmup_epochs = 30;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.optimizer.lr = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = TrainConfig::default().with_epochs(1);
        assert_eq!((c.schedule.epochs, c.schedule.warmup_epochs), (1, 0));
        assert!(c.validate().is_ok());
        let c = TrainConfig::default().with_epochs(12);
        assert_eq!(c.schedule.warmup_epochs, 2);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"batch_size": 4, "bach_size": 5}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"batch_size": 4}"#).unwrap();
        assert_eq!(ok.batch_size, 4);
        assert_eq!(ok.schedule, ScheduleConfig::default());
    }

    #[test]
    fn lr_follows_closed_form() {
        let t = Trainer::new(tiny_config()).unwrap();
        let spe = t.config.steps_per_epoch();
        assert_eq!(spe, 2);
        for s in 0..4u64 {
            let want = warmup_cosine(s as usize, 1e-3, 2, 4, 0.01);
            assert!((t.lr_at(s) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn smoke_run_finite_and_plumbed() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        let data = t.prepare_data().unwrap();
        t.fit(&data, None).unwrap();
        assert_eq!(t.history.len(), 4);
        assert!(t.history.iter().all(|r| r.loss.is_finite() && r.task_losses.iter().all(|l| l.is_finite())));
        // One affinity update after every step; each step sees the latest one.
        for (i, r) in t.history.iter().enumerate() {
            assert_eq!(r.affinity_version, i as u64);
        }
        assert!(t.affinity().is_simplex(1e-6));
        assert_eq!(t.epochs.len(), 2);
        assert!(t.epochs[1].val.is_some());
    }

    #[test]
    fn affinity_frozen_without_taa() {
        let mut c = tiny_config();
        c.model.adapter.use_taa = false;
        let mut t = Trainer::new(c).unwrap();
        let data = t.prepare_data().unwrap();
        t.fit(&data, None).unwrap();
        assert_eq!(t.affinity().step_count, 0);
        assert_eq!(*t.affinity(), AffinityMatrix::uniform(4));
    }

    #[test]
    fn ladder_flags_and_parse() {
        let mut a = AdapterConfig::default();
        Rung::Vanilla.apply(&mut a);
        assert!(!a.use_taa && !a.use_bottleneck && !a.use_tsn);
        Rung::Bottleneck.apply(&mut a);
        assert!(a.use_taa && a.use_bottleneck && !a.use_tsn);
        assert_eq!("tsn".parse::<Rung>().unwrap(), Rung::Tsn);
        assert!("full".parse::<Rung>().is_err());
    }

    #[test]
    fn every_rung_takes_a_finite_step() {
        for rung in Rung::LADDER {
            let mut c = tiny_config();
            rung.apply(&mut c.model.adapter);
            let mut t = Trainer::new(c).unwrap();
            let data = t.prepare_data().unwrap();
            let (rec, _, _) = t.train_step(&data.train.batch(&[0, 1])).unwrap();
            assert!(rec.loss.is_finite(), "{rung:?}");
        }
    }

    #[test]
    fn task_gradients_sum_over_batch() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        let data = t.prepare_data().unwrap();
        let omega = affinity_columns::<f32>(&t.affinity());
        let grads = |t: &mut Trainer, idx: &[usize]| {
            let batch = data.train.batch(idx);
            let mut p = BatchProvider {
                model: &mut t.model,
                adam: &mut t.troa_adam,
                batch: &batch,
                omega: omega.clone(),
                lr: 0.0,
                clip: 0.0,
                step: 0,
            };
            p.task_gradients().unwrap()
        };
        // Batch-mean losses: the two-sample gradient is half the sum of singles.
        let a = grads(&mut t, &[0]);
        let b = grads(&mut t, &[1]);
        let ab = grads(&mut t, &[0, 1]);
        for k in 0..4 {
            for i in (0..ab[k].vector.len()).step_by(97) {
                let want = 0.5 * (a[k].vector[i] + b[k].vector[i]);
                assert!((ab[k].vector[i] - want).abs() <= 1e-4 * want.abs().max(1e-6), "task {k} entry {i}");
            }
        }
    }
}
