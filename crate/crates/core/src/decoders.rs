//! Per-task transformer decoders, linear heads and losses.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::StageGeometry;
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_backward, scoped, Linear, Module, Param, PatchExpand, Real, SwinBlock, SwinBlockCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Segmentation,
    Depth,
    Normal,
    Edge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Rmse,
    L1,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Segmentation, TaskKind::Depth, TaskKind::Normal, TaskKind::Edge];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Segmentation => "segmentation",
            TaskKind::Depth => "depth",
            TaskKind::Normal => "normal",
            TaskKind::Edge => "edge",
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            TaskKind::Segmentation => LossKind::CrossEntropy,
            TaskKind::Depth => LossKind::Rmse,
            TaskKind::Normal | TaskKind::Edge => LossKind::L1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub kind: TaskKind,
    pub head_channels: usize,
    pub loss_kind: LossKind,
}

impl TaskSpec {
    pub fn new(task_id: usize, kind: TaskKind, seg_classes: usize) -> Self {
        let head_channels = match kind {
            TaskKind::Segmentation => seg_classes,
            TaskKind::Depth | TaskKind::Edge => 1,
            TaskKind::Normal => 3,
        };
        Self { task_id, kind, head_channels, loss_kind: kind.loss_kind() }
    }

    /// The four dense tasks in their canonical order.
    pub fn all(seg_classes: usize) -> Vec<TaskSpec> {
        TaskKind::ALL.iter().enumerate().map(|(i, &k)| TaskSpec::new(i, k, seg_classes)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Token width of each of the four stages.
    pub widths: [usize; 4],
    pub heads: [usize; 4],
    pub blocks_per_stage: usize,
    pub window_size: usize,
    pub mlp_ratio: usize,
    /// Width after the last stage's upsampling.
    pub upsampled_dim: usize,
    /// Width of the full-resolution features fed to the head.
    pub final_dim: usize,
    /// Adds a linear map of each pixel's 3x3 RGB neighbourhood to the
    /// full-resolution features.
    pub pixel_guide: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            widths: [64, 32, 16, 8],
            heads: [8, 4, 2, 1],
            blocks_per_stage: 2,
            window_size: 4,
            mlp_ratio: 4,
            upsampled_dim: 16,
            final_dim: 16,
            pixel_guide: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage<F> {
    pub blocks: Vec<SwinBlock<F>>,
    pub expand: PatchExpand<F>,
    /// Projects a skip feature map onto the upsampled tokens.
    pub guide: Option<Linear<F>>,
}

/// Encoder feature maps at the resolutions the decoder passes through.
pub struct DecoderInputs<'a, F> {
    /// Stage-4 embedding of this task.
    pub embedding: &'a Array2<F>,
    /// Skip features at stage-3, stage-2 and stage-1 resolution.
    pub guides: [&'a Array2<F>; 3],
    /// [`pixel_windows`] of the input images; required with a pixel guide.
    pub pixels: Option<&'a Array2<F>>,
}

/// Values per pixel: its RGB plus the absolute RGB difference to each of
/// its 8 neighbours.
pub const PIXEL_WINDOW: usize = 27;

/// Local colour and contrast of every pixel (borders replicated), one row
/// per pixel. `rgb` is `[batch * size * size, 3]` in row-major pixel order.
pub fn pixel_windows<F: Real>(rgb: &Array2<F>, size: usize) -> Array2<F> {
    let px = size * size;
    let batch = rgb.nrows() / px;
    let mut out = Array2::zeros((rgb.nrows(), PIXEL_WINDOW));
    for b in 0..batch {
        for y in 0..size {
            for x in 0..size {
                let centre = rgb.row(b * px + y * size + x);
                let mut row = out.row_mut(b * px + y * size + x);
                for c in 0..3 {
                    row[c] = centre[c];
                }
                let mut k = 3;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let yy = (y as isize + dy).clamp(0, size as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, size as isize - 1) as usize;
                        let src = rgb.row(b * px + yy * size + xx);
                        for c in 0..3 {
                            row[k] = (src[c] - centre[c]).abs();
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Decoder<F> {
    pub spec: TaskSpec,
    pub input_proj: Linear<F>,
    pub stages: Vec<DecoderStage<F>>,
    pub final_expand: PatchExpand<F>,
    pub pixel_guide: Option<Linear<F>>,
    pub head: Linear<F>,
    grid: usize,
}

pub struct DecoderCache<F> {
    embedding: Array2<F>,
    guides: Vec<Array2<F>>,
    block_caches: Vec<Vec<SwinBlockCache<F>>>,
    expand_inputs: Vec<Array2<F>>,
    final_in: Array2<F>,
    pixels: Option<Array2<F>>,
    final_pre: Array2<F>,
    final_act: Array2<F>,
}

impl<F: Real> Decoder<F> {
    /// `encoder` is the backbone's stage geometry; the decoder starts at the
    /// stage-4 grid and doubles resolution five times up to the image size.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        spec: TaskSpec,
        config: &DecoderConfig,
        encoder: &[StageGeometry; 4],
    ) -> Result<Self> {
        let mut grid = encoder[3].h;
        let input_proj = Linear::new(rng, encoder[3].dim, config.widths[0], true);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let width = config.widths[s];
            if config.heads[s] == 0 || width % config.heads[s] != 0 {
                return Err(Error::Config(format!("decoder width {width} not divisible by {} heads", config.heads[s])));
            }
            let window = config.window_size.min(grid);
            let blocks = (0..config.blocks_per_stage)
                .map(|_| SwinBlock::new(rng, width, config.heads[s], grid, grid, window, config.mlp_ratio))
                .collect();
            let out = if s < 3 { config.widths[s + 1] } else { config.upsampled_dim };
            let expand = PatchExpand::new(rng, width, out, grid, grid);
            let guide = (s < 3).then(|| Linear::new(rng, encoder[2 - s].dim, out, true));
            stages.push(DecoderStage { blocks, expand, guide });
            grid *= 2;
        }
        let final_expand = PatchExpand::new(rng, config.upsampled_dim, config.final_dim, grid, grid);
        let pixel_guide = config.pixel_guide.then(|| Linear::new(rng, PIXEL_WINDOW, config.final_dim, true));
        let head = Linear::new(rng, config.final_dim, spec.head_channels, true);
        Ok(Self { spec, input_proj, stages, final_expand, pixel_guide, head, grid: grid * 2 })
    }

    /// Side length of the dense output.
    pub fn output_size(&self) -> usize {
        self.grid
    }

    /// Raw head outputs, `[batch * H * W, K]`.
    pub fn forward(&self, inputs: &DecoderInputs<'_, F>) -> Result<(Array2<F>, DecoderCache<F>)> {
        if inputs.embedding.ncols() != self.input_proj.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "decoder expects {} channels, got {}",
                self.input_proj.d_in(),
                inputs.embedding.ncols()
            )));
        }
        let mut x = self.input_proj.forward(inputs.embedding);
        let mut block_caches = Vec::with_capacity(4);
        let mut expand_inputs = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            let mut caches = Vec::with_capacity(stage.blocks.len());
            for b in &stage.blocks {
                let (y, c) = b.forward(&x);
                caches.push(c);
                x = y;
            }
            let up = stage.expand.forward(&x);
            expand_inputs.push(x);
            x = up;
            if let Some(g) = &stage.guide {
                let feat = inputs.guides[s];
                if feat.nrows() != x.nrows() || feat.ncols() != g.d_in() {
                    return Err(Error::DimensionMismatch(format!(
                        "guide {s} has shape {:?}, expected ({}, {})",
                        feat.dim(),
                        x.nrows(),
                        g.d_in()
                    )));
                }
                x += &g.forward(feat);
            }
            block_caches.push(caches);
        }
        let mut final_pre = self.final_expand.forward(&x);
        let pixels = match (&self.pixel_guide, inputs.pixels) {
            (Some(pg), Some(p)) if p.dim() == (final_pre.nrows(), PIXEL_WINDOW) => {
                final_pre += &pg.forward(p);
                Some(p.clone())
            }
            (Some(_), p) => {
                return Err(Error::DimensionMismatch(format!(
                    "pixel guide expects ({}, {PIXEL_WINDOW}) pixel windows, got {:?}",
                    final_pre.nrows(),
                    p.map(|p| p.dim())
                )))
            }
            (None, _) => None,
        };
        let final_act = gelu(&final_pre);
        let out = self.head.forward(&final_act);
        let cache = DecoderCache {
            embedding: inputs.embedding.clone(),
            guides: inputs.guides.iter().map(|g| (*g).clone()).collect(),
            block_caches,
            expand_inputs,
            final_in: x,
            pixels,
            final_pre,
            final_act,
        };
        Ok((out, cache))
    }

    /// Returns gradients with respect to the embedding and the stage-3 guide.
    pub fn backward(&mut self, cache: &DecoderCache<F>, d_out: &Array2<F>) -> (Array2<F>, Array2<F>) {
        let d_act = self.head.backward(&cache.final_act, d_out);
        let d_pre = gelu_backward(&cache.final_pre, &d_act);
        if let (Some(pg), Some(p)) = (&mut self.pixel_guide, &cache.pixels) {
            pg.accumulate(p, &d_pre);
        }
        let mut dx = self.final_expand.backward(&cache.final_in, &d_pre);
        let mut d_guide3 = Array2::zeros(cache.guides[0].raw_dim());
        for s in (0..self.stages.len()).rev() {
            let stage = &mut self.stages[s];
            if let Some(g) = &mut stage.guide {
                let dg = g.backward(&cache.guides[s], &dx);
                if s == 0 {
                    d_guide3 = dg;
                }
            }
            dx = stage.expand.backward(&cache.expand_inputs[s], &dx);
            for (b, c) in stage.blocks.iter_mut().zip(&cache.block_caches[s]).rev() {
                dx = b.backward(c, &dx);
            }
        }
        let d_emb = self.input_proj.backward(&cache.embedding, &dx);
        (d_emb, d_guide3)
    }
}

impl<F: Real> Module<F> for Decoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.input_proj.visit_params(&scoped(prefix, "input_proj"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let sp = scoped(prefix, &format!("stage{}", s + 1));
            for (i, b) in stage.blocks.iter_mut().enumerate() {
                b.visit_params(&scoped(&sp, &format!("block{}", i + 1)), f);
            }
            stage.expand.visit_params(&scoped(&sp, "expand"), f);
            if let Some(g) = &mut stage.guide {
                g.visit_params(&scoped(&sp, "guide"), f);
            }
        }
        self.final_expand.visit_params(&scoped(prefix, "final_expand"), f);
        if let Some(pg) = &mut self.pixel_guide {
            pg.visit_params(&scoped(prefix, "pixel_guide"), f);
        }
        self.head.visit_params(&scoped(prefix, "head"), f);
    }
}

/// Maps raw head outputs to predictions: logits for segmentation, values for
/// depth, unit vectors for normals and edge strengths (thresholded at 0.5
/// downstream).
pub fn activate<F: Real>(raw: &Array2<F>, kind: TaskKind) -> Array2<F> {
    match kind {
        TaskKind::Segmentation | TaskKind::Depth | TaskKind::Edge => raw.clone(),
        TaskKind::Normal => normalize_vectors(raw).0,
    }
}

/// Linear projection to `K` channels followed by the task's output map.
pub fn task_head<F: Real>(features: &Array2<F>, head: &Linear<F>, spec: &TaskSpec) -> Array2<F> {
    activate(&head.forward(features), spec.kind)
}

const NORMAL_EPS: f64 = 1e-12;

fn normalize_vectors<F: Real>(raw: &Array2<F>) -> (Array2<F>, Vec<F>) {
    let mut out = raw.clone();
    let mut norms = Vec::with_capacity(raw.nrows());
    for mut row in out.rows_mut() {
        let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(F::lit(NORMAL_EPS));
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (out, norms)
}

fn sign<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Ground truth for one task over a batch.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a, F> {
    /// Class ids, one per pixel.
    Labels(&'a [u8]),
    /// Values, one row per pixel.
    Dense(&'a Array2<F>),
}

/// Loss and its gradient with respect to the raw head outputs. `pixels` is
/// the number of pixels per sample.
pub fn task_loss<F: Real>(raw: &Array2<F>, target: Target<'_, F>, spec: &TaskSpec, pixels: usize) -> Result<(f64, Array2<F>)> {
    let rows = raw.nrows();
    if raw.ncols() != spec.head_channels || pixels == 0 || rows % pixels != 0 {
        return Err(Error::DimensionMismatch(format!(
            "head output {:?} for {} channels and {pixels} pixels per sample",
            raw.dim(),
            spec.head_channels
        )));
    }
    let count = F::from_usize(rows).unwrap();
    match (spec.kind, target) {
        (TaskKind::Segmentation, Target::Labels(labels)) => {
            if labels.len() != rows {
                return Err(Error::DimensionMismatch(format!("{} labels for {rows} pixels", labels.len())));
            }
            let k = spec.head_channels;
            let mut grad = raw.clone();
            let mut total = 0.0;
            for (mut row, &label) in grad.rows_mut().into_iter().zip(labels) {
                let label = label as usize;
                if label >= k {
                    return Err(Error::InvalidLabel { label, classes: k });
                }
                let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                total += (z.ln() - (row[label].ln())).as_f64();
                row.mapv_inplace(|v| v / z / count);
                row[label] -= F::one() / count;
            }
            Ok((total / rows as f64, grad))
        }
        (TaskKind::Depth, Target::Dense(gt)) => {
            check_dense(raw, gt)?;
            let batch = rows / pixels;
            let diff = raw - gt;
            let mut grad = Array2::zeros(raw.raw_dim());
            let mut total = 0.0;
            for b in 0..batch {
                let d = diff.slice(ndarray::s![b * pixels..(b + 1) * pixels, ..]);
                let rmse = (d.iter().map(|&v| v * v).sum::<F>() / F::from_usize(pixels).unwrap()).sqrt();
                total += rmse.as_f64();
                if rmse > F::zero() {
                    let scale = F::one() / (F::from_usize(pixels * batch).unwrap() * rmse);
                    grad.slice_mut(ndarray::s![b * pixels..(b + 1) * pixels, ..]).assign(&(&d * scale));
                }
            }
            Ok((total / batch as f64, grad))
        }
        (TaskKind::Normal, Target::Dense(gt)) => {
            check_dense(raw, gt)?;
            let (n, norms) = normalize_vectors(raw);
            let denom = count * F::from_usize(raw.ncols()).unwrap();
            let total = (&n - gt).iter().map(|v| v.abs().as_f64()).sum::<f64>() / denom.as_f64();
            let mut grad = (&n - gt).mapv(|v| sign(v) / denom);
            for ((mut g, nr), &norm) in grad.rows_mut().into_iter().zip(n.rows()).zip(&norms) {
                let dot = g.iter().zip(nr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                for (gv, &nv) in g.iter_mut().zip(nr.iter()) {
                    *gv = (*gv - nv * dot) / norm;
                }
            }
            Ok((total, grad))
        }
        (TaskKind::Edge, Target::Dense(gt)) => {
            check_dense(raw, gt)?;
            let diff = raw - gt;
            let total = diff.iter().map(|v| v.abs().as_f64()).sum::<f64>() / rows as f64;
            Ok((total, diff.mapv(|v| sign(v) / count)))
        }
        (kind, _) => Err(Error::DimensionMismatch(format!("wrong target type for {}", kind.name()))),
    }
}

fn check_dense<F: Real>(raw: &Array2<F>, gt: &Array2<F>) -> Result<()> {
    if raw.dim() != gt.dim() {
        return Err(Error::DimensionMismatch(format!("prediction {:?} vs target {:?}", raw.dim(), gt.dim())));
    }
    Ok(())
}

/// Uniform average of the task losses.
pub fn combined_loss(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() || losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss { step: 0, task_losses: losses.to_vec(), batch_seeds: Vec::new() });
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Column-wise sums per sample, e.g. to reduce per-pixel maps.
pub fn per_sample_sum<F: Real>(x: &Array2<F>, pixels: usize) -> Array2<F> {
    let batch = x.nrows() / pixels;
    let mut out = Array2::zeros((batch, x.ncols()));
    for (b, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&x.slice(ndarray::s![b * pixels..(b + 1) * pixels, ..]).sum_axis(Axis(0)));
    }
    out
}
