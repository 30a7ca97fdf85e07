//! Adapter blocks and their chaining across backbone placements.
//!
//! One block, for task `t` (all tasks share the block's weights):
//!
//! ```text
//! x  = backbone + prev_t
//! a  = x + MHA_t(LN1(x))          task-adapted or plain attention
//! w~ = a + FFN(LN2(a))
//! y  = TSN_t(a, w~)               or LN(a; gamma', beta') when TSN is off
//! out = y + Up(GELU(Down(y)))
//! ```

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::AffinityMatrix;
use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_backward, normalize_rows, normalize_rows_backward, scoped, LayerNorm, LnCache, Linear,
    Module, Param, Real,
};
use crate::taa::{MultiHeadTaa, MultiHeadTaaCache};

/// Below this raw standard deviation a token counts as degenerate for TSN.
pub const DEGENERATE_STD: f64 = 1e-12;

/// Numerical floor inside the TSN square root, as in layer normalization.
pub const TSN_EPS: f64 = 1e-5;

/// A backbone layer an adapter is attached to. Both indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub stage: usize,
    pub layer: usize,
}

impl Placement {
    pub const fn new(stage: usize, layer: usize) -> Self {
        Self { stage, layer }
    }
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.stage, self.layer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub bottleneck_dim: usize,
    pub ffn_hidden: usize,
    /// Attention heads for adapters in stages 1..=4.
    pub heads_per_stage: [usize; 4],
    /// `None` applies the default placement rule of the backbone.
    pub placements: Option<Vec<Placement>>,
    pub use_taa: bool,
    pub use_bottleneck: bool,
    pub use_tsn: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck_dim: 3,
            ffn_hidden: 24,
            heads_per_stage: [2, 4, 8, 16],
            placements: None,
            use_taa: true,
            use_bottleneck: true,
            use_tsn: true,
        }
    }
}

/// Diagonal affine map `s -> w ∘ s + b` on a channel vector.
#[derive(Clone, Debug)]
pub struct ChannelAffine<F> {
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Real> ChannelAffine<F> {
    pub fn constant(dim: usize, value: F) -> Self {
        Self { w: Param::zeros(1, dim), b: Param::filled(1, dim, value) }
    }

    pub fn apply(&self, s: &Array2<F>) -> Array2<F> {
        s * &self.w.value + &self.b.value
    }
}

impl<F: Real> Module<F> for ChannelAffine<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&scoped(prefix, "w"), &mut self.w);
        f(&scoped(prefix, "b"), &mut self.b);
    }
}

/// Task-scaled normalization parameters. `gamma_prime` and `beta_prime` are
/// frozen copies of a backbone layer norm.
#[derive(Clone, Debug)]
pub struct TsnParams<F> {
    pub gamma: Vec<ChannelAffine<F>>,
    pub beta: Vec<ChannelAffine<F>>,
    pub gamma_prime: Param<F>,
    pub beta_prime: Param<F>,
}

impl<F: Real> TsnParams<F> {
    /// Generators start at `gamma_t = 1`, `beta_t = 0`.
    pub fn new(num_tasks: usize, gamma_prime: Array2<F>, beta_prime: Array2<F>) -> Self {
        let dim = gamma_prime.ncols();
        Self {
            gamma: (0..num_tasks).map(|_| ChannelAffine::constant(dim, F::one())).collect(),
            beta: (0..num_tasks).map(|_| ChannelAffine::constant(dim, F::zero())).collect(),
            gamma_prime: Param::new(gamma_prime),
            beta_prime: Param::new(beta_prime),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma_prime.value.ncols()
    }
}

impl<F: Real> Module<F> for TsnParams<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (t, (g, b)) in self.gamma.iter_mut().zip(&mut self.beta).enumerate() {
            g.visit_params(&scoped(prefix, &format!("gamma{t}")), f);
            b.visit_params(&scoped(prefix, &format!("beta{t}")), f);
        }
    }
}

pub struct TsnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
    summary: Array2<F>,
    scale: Array2<F>,
    pub degenerate_tokens: usize,
}

/// Per-sample channel vectors expanded to one row per token.
fn expand_rows<F: Real>(per_sample: &Array2<F>, hw: usize) -> Array2<F> {
    let mut out = Array2::zeros((per_sample.nrows() * hw, per_sample.ncols()));
    for (b, row) in per_sample.rows().into_iter().enumerate() {
        out.slice_mut(s![b * hw..(b + 1) * hw, ..]).assign(&row.broadcast((hw, row.len())).unwrap());
    }
    out
}

fn sum_per_sample<F: Real>(rows: &Array2<F>, hw: usize) -> Array2<F> {
    let batch = rows.nrows() / hw;
    let mut out = Array2::zeros((batch, rows.ncols()));
    for b in 0..batch {
        out.row_mut(b).assign(&rows.slice(s![b * hw..(b + 1) * hw, ..]).sum_axis(Axis(0)));
    }
    out
}

fn count_degenerate<F: Real>(x: &Array2<F>) -> usize {
    let c = F::from_usize(x.ncols()).unwrap();
    x.rows()
        .into_iter()
        .filter(|row| {
            let mean = row.sum() / c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / c;
            var.sqrt().as_f64() < DEGENERATE_STD
        })
        .count()
}

/// Task-scaled normalization of `a` (`[batch * hw, C]`) conditioned on the
/// token mean of `omega_tilde` per sample:
/// `(a - mu) / sigma * (gamma' ∘ gamma_t(s) + beta') + beta_t(s)`.
pub fn tsn<F: Real>(
    a: &Array2<F>,
    omega_tilde: &Array2<F>,
    params: &TsnParams<F>,
    task: usize,
    hw: usize,
) -> Result<(Array2<F>, TsnCache<F>)> {
    let dim = params.dim();
    if a.dim() != omega_tilde.dim() || a.ncols() != dim || hw == 0 || a.nrows() % hw != 0 {
        return Err(Error::DimensionMismatch(format!(
            "TSN inputs {:?}/{:?} with {hw} tokens and width {dim}",
            a.dim(),
            omega_tilde.dim()
        )));
    }
    let degenerate_tokens = count_degenerate(a);
    if degenerate_tokens > 0 {
        tracing::warn!(task, degenerate_tokens, "TSN input has constant tokens");
    }
    let (xhat, inv_std) = normalize_rows(a, F::lit(TSN_EPS));
    let summary = sum_per_sample(omega_tilde, hw) / F::from_usize(hw).unwrap();
    let scale = &params.gamma[task].apply(&summary) * &params.gamma_prime.value + &params.beta_prime.value;
    let shift = params.beta[task].apply(&summary);
    let y = &xhat * &expand_rows(&scale, hw) + &expand_rows(&shift, hw);
    Ok((y, TsnCache { xhat, inv_std, summary, scale, degenerate_tokens }))
}

/// Returns `(d_a, d_omega_tilde)` and accumulates generator gradients.
pub fn tsn_backward<F: Real>(
    params: &mut TsnParams<F>,
    cache: &TsnCache<F>,
    task: usize,
    hw: usize,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let d_xhat = dy * &expand_rows(&cache.scale, hw);
    let d_scale = sum_per_sample(&(dy * &cache.xhat), hw);
    let d_shift = sum_per_sample(dy, hw);
    let d_gamma_out = &d_scale * &params.gamma_prime.value;
    let g = &mut params.gamma[task];
    g.w.grad += &(&d_gamma_out * &cache.summary).sum_axis(Axis(0)).insert_axis(Axis(0));
    g.b.grad += &d_gamma_out.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_summary = &d_gamma_out * &g.w.value + &(&d_shift * &params.beta[task].w.value);
    let bt = &mut params.beta[task];
    bt.w.grad += &(&d_shift * &cache.summary).sum_axis(Axis(0)).insert_axis(Axis(0));
    bt.b.grad += &d_shift.sum_axis(Axis(0)).insert_axis(Axis(0));
    let da = normalize_rows_backward(&cache.xhat, &cache.inv_std, &d_xhat);
    let d_omega = expand_rows(&d_summary, hw) / F::from_usize(hw).unwrap();
    (da, d_omega)
}

/// One adapter layer serving all tasks.
#[derive(Clone, Debug)]
pub struct AdapterBlock<F> {
    pub norm1: LayerNorm<F>,
    pub attn: MultiHeadTaa<F>,
    pub norm2: LayerNorm<F>,
    pub ffn1: Linear<F>,
    pub ffn2: Linear<F>,
    pub tsn: TsnParams<F>,
    pub down: Linear<F>,
    pub up: Linear<F>,
    pub hw: usize,
    pub num_tasks: usize,
    pub use_tsn: bool,
}

pub struct AdapterCache<F> {
    ln1: LnCache<F>,
    attn: MultiHeadTaaCache<F>,
    ln2: LnCache<F>,
    ffn_in: Array2<F>,
    ffn_pre: Array2<F>,
    ffn_hidden: Array2<F>,
    tsn: Option<TsnCache<F>>,
    plain_norm: Option<LnCache<F>>,
    y: Array2<F>,
    down_pre: Array2<F>,
    down_act: Array2<F>,
}

impl<F> AdapterCache<F> {
    pub fn degenerate_tokens(&self) -> usize {
        self.tsn.as_ref().map_or(0, |c| c.degenerate_tokens)
    }

    pub fn attention(&self) -> &MultiHeadTaaCache<F> {
        &self.attn
    }
}

impl<F: Real> AdapterBlock<F> {
    /// `gamma_prime`/`beta_prime` are `[1, dim]` copies of a backbone norm.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        dim: usize,
        hw: usize,
        heads: usize,
        num_tasks: usize,
        config: &AdapterConfig,
        gamma_prime: Array2<F>,
        beta_prime: Array2<F>,
    ) -> Result<Self> {
        if config.use_bottleneck && config.bottleneck_dim >= dim {
            return Err(Error::Config(format!(
                "bottleneck width {} must be below the channel width {dim}",
                config.bottleneck_dim
            )));
        }
        if gamma_prime.dim() != (1, dim) || beta_prime.dim() != (1, dim) {
            return Err(Error::DimensionMismatch("frozen norm parameters must be [1, dim]".into()));
        }
        let mid = if config.use_bottleneck { config.bottleneck_dim } else { dim };
        Ok(Self {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadTaa::new(rng, dim, heads, hw, num_tasks, config.use_taa)?,
            norm2: LayerNorm::new(dim),
            ffn1: Linear::new(rng, dim, config.ffn_hidden, true),
            ffn2: Linear::zeros(config.ffn_hidden, dim, true),
            tsn: TsnParams::new(num_tasks, gamma_prime, beta_prime),
            down: Linear::new(rng, dim, mid, true),
            up: Linear::zeros(mid, dim, true),
            hw,
            num_tasks,
            use_tsn: config.use_tsn,
        })
    }

    pub fn dim(&self) -> usize {
        self.norm1.dim()
    }

    pub fn forward_task(
        &self,
        backbone: &Array2<F>,
        prev: Option<&Array2<F>>,
        omega_t: &[F],
        task: usize,
    ) -> Result<(Array2<F>, AdapterCache<F>)> {
        if backbone.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "adapter width {} got features with {} channels",
                self.dim(),
                backbone.ncols()
            )));
        }
        let x = match prev {
            Some(p) if p.dim() != backbone.dim() => {
                return Err(Error::DimensionMismatch(format!(
                    "skip state {:?} does not match features {:?}",
                    p.dim(),
                    backbone.dim()
                )))
            }
            Some(p) => backbone + p,
            None => backbone.clone(),
        };
        let (u, ln1) = self.norm1.forward(&x);
        let (att, attn) = self.attn.forward(&u, omega_t, task)?;
        let a = &x + &att;
        let (ffn_in, ln2) = self.norm2.forward(&a);
        let ffn_pre = self.ffn1.forward(&ffn_in);
        let ffn_hidden = gelu(&ffn_pre);
        let omega_tilde = &a + &self.ffn2.forward(&ffn_hidden);
        let (y, tsn, plain_norm) = if self.use_tsn {
            let (y, c) = tsn(&a, &omega_tilde, &self.tsn, task, self.hw)?;
            (y, Some(c), None)
        } else {
            let (xhat, inv_std) = normalize_rows(&omega_tilde, F::lit(TSN_EPS));
            let y = &xhat * &self.tsn.gamma_prime.value + &self.tsn.beta_prime.value;
            (y, None, Some(LnCache { xhat, inv_std }))
        };
        let down_pre = self.down.forward(&y);
        let down_act = gelu(&down_pre);
        let out = &y + &self.up.forward(&down_act);
        let cache = AdapterCache { ln1, attn, ln2, ffn_in, ffn_pre, ffn_hidden, tsn, plain_norm, y, down_pre, down_act };
        Ok((out, cache))
    }

    /// Gradient with respect to `backbone + prev`.
    pub fn backward_task(&mut self, cache: &AdapterCache<F>, task: usize, d_out: &Array2<F>) -> Array2<F> {
        let d_act = self.up.backward(&cache.down_act, d_out);
        let dy = d_out + &self.down.backward(&cache.y, &gelu_backward(&cache.down_pre, &d_act));
        let (mut da, d_omega) = match (&cache.tsn, &cache.plain_norm) {
            (Some(c), _) => tsn_backward(&mut self.tsn, c, task, self.hw, &dy),
            (None, Some(ln)) => {
                let d_xhat = &dy * &self.tsn.gamma_prime.value;
                let d_omega = normalize_rows_backward(&ln.xhat, &ln.inv_std, &d_xhat);
                (Array2::zeros(dy.raw_dim()), d_omega)
            }
            (None, None) => unreachable!("cache always holds one normalization"),
        };
        da += &d_omega;
        let d_hidden = self.ffn2.backward(&cache.ffn_hidden, &d_omega);
        let d_ffn_in = self.ffn1.backward(&cache.ffn_in, &gelu_backward(&cache.ffn_pre, &d_hidden));
        da += &self.norm2.backward(&cache.ln2, &d_ffn_in);
        let du = self.attn.backward(&cache.attn, &da);
        &da + &self.norm1.backward(&cache.ln1, &du)
    }

    /// Frozen tensors owned by the block (the inherited norm copies).
    pub fn visit_frozen(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&scoped(prefix, "tsn.gamma_prime"), &mut self.tsn.gamma_prime);
        f(&scoped(prefix, "tsn.beta_prime"), &mut self.tsn.beta_prime);
    }
}

impl<F: Real> Module<F> for AdapterBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.norm1.visit_params(&scoped(prefix, "norm1"), f);
        self.attn.visit_params(&scoped(prefix, "attn"), f);
        self.norm2.visit_params(&scoped(prefix, "norm2"), f);
        self.ffn1.visit_params(&scoped(prefix, "ffn1"), f);
        self.ffn2.visit_params(&scoped(prefix, "ffn2"), f);
        if self.use_tsn {
            self.tsn.visit_params(&scoped(prefix, "tsn"), f);
        }
        self.down.visit_params(&scoped(prefix, "down"), f);
        self.up.visit_params(&scoped(prefix, "up"), f);
    }
}

/// Columns of `affinity` converted to the network's float type.
pub fn affinity_columns<F: Real>(affinity: &AffinityMatrix) -> Vec<Vec<F>> {
    (0..affinity.num_tasks())
        .map(|t| affinity.column(t).iter().map(|&v| F::lit(v)).collect())
        .collect()
}

/// Runs one block for every task. `prev` holds one skip state per task.
pub fn adapter_forward<F: Real>(
    backbone: &Array2<F>,
    prev: Option<&[Array2<F>]>,
    affinity: &AffinityMatrix,
    block: &AdapterBlock<F>,
) -> Result<Vec<Array2<F>>> {
    if affinity.num_tasks() != block.num_tasks {
        return Err(Error::DimensionMismatch(format!(
            "affinity has {} tasks, block serves {}",
            affinity.num_tasks(),
            block.num_tasks
        )));
    }
    let omega = affinity_columns::<F>(affinity);
    (0..block.num_tasks)
        .map(|t| Ok(block.forward_task(backbone, prev.map(|p| &p[t]), &omega[t], t)?.0))
        .collect()
}

/// Fixed 2x2 average merge of tokens followed by a learnable `C -> 2C`
/// projection, carrying adapter state across a stage boundary.
#[derive(Clone, Debug)]
pub struct StageTransition<F> {
    pub proj: Linear<F>,
    pub h: usize,
    pub w: usize,
}

impl<F: Real> StageTransition<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, h: usize, w: usize) -> Self {
        Self { proj: Linear::new(rng, dim, 2 * dim, true), h, w }
    }

    pub fn merge(&self, x: &Array2<F>) -> Array2<F> {
        let (h, w) = (self.h, self.w);
        let batch = x.nrows() / (h * w);
        let (h2, w2) = (h / 2, w / 2);
        let mut out = Array2::zeros((batch * h2 * w2, x.ncols()));
        let quarter = F::lit(0.25);
        for b in 0..batch {
            for i in 0..h2 {
                for j in 0..w2 {
                    let mut dst = out.row_mut(b * h2 * w2 + i * w2 + j);
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = x.row(b * h * w + (2 * i + di) * w + 2 * j + dj);
                        dst.scaled_add(quarter, &src);
                    }
                }
            }
        }
        out
    }

    fn merge_backward(&self, d_merged: &Array2<F>) -> Array2<F> {
        let (h, w) = (self.h, self.w);
        let (h2, w2) = (h / 2, w / 2);
        let batch = d_merged.nrows() / (h2 * w2);
        let mut dx = Array2::zeros((batch * h * w, d_merged.ncols()));
        let quarter = F::lit(0.25);
        for b in 0..batch {
            for i in 0..h2 {
                for j in 0..w2 {
                    let src = d_merged.row(b * h2 * w2 + i * w2 + j);
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        dx.row_mut(b * h * w + (2 * i + di) * w + 2 * j + dj).scaled_add(quarter, &src);
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        self.proj.forward(&self.merge(x))
    }

    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        let merged = self.merge(x);
        let d_merged = self.proj.backward(&merged, dy);
        self.merge_backward(&d_merged)
    }
}

impl<F: Real> Module<F> for StageTransition<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.proj.visit_params(&scoped(prefix, "proj"), f);
    }
}

/// Grid geometry of each backbone stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageGeometry {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
}

impl StageGeometry {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// Backbone features consumed by the chain, for one batch.
pub struct ChainInputs<'a, F> {
    /// Backbone output at each placement, in placement order.
    pub at_placements: Vec<&'a Array2<F>>,
    /// Backbone output of the last stage-4 layer.
    pub final_features: &'a Array2<F>,
}

/// Per-task chain outputs.
#[derive(Clone, Debug)]
pub struct TaskEmbedding<F> {
    /// Stage-4 embedding fed to the task decoder.
    pub stage4: Array2<F>,
    /// Output of the last stage-3 adapter, when there is one.
    pub stage3: Option<Array2<F>>,
}

enum ChainStep<F> {
    Transition { stage: usize, inputs: Vec<Array2<F>> },
    Block { index: usize, caches: Vec<AdapterCache<F>>, tap_stage3: bool },
}

pub struct ChainCache<F> {
    steps: Vec<ChainStep<F>>,
    pub degenerate_tokens: usize,
}

impl<F> ChainCache<F> {
    /// Adapter cache of block `index` for `task`.
    pub fn block(&self, index: usize, task: usize) -> Option<&AdapterCache<F>> {
        self.steps.iter().find_map(|s| match s {
            ChainStep::Block { index: i, caches, .. } if *i == index => caches.get(task),
            _ => None,
        })
    }
}

/// Ordered adapter blocks with additive skips between consecutive layers.
#[derive(Clone, Debug)]
pub struct AdapterChain<F> {
    pub placements: Vec<Placement>,
    pub blocks: Vec<AdapterBlock<F>>,
    /// `transitions[s - 1]` carries state from stage `s` to `s + 1`.
    pub transitions: Vec<Option<StageTransition<F>>>,
    pub num_tasks: usize,
}

impl<F: Real> AdapterChain<F> {
    /// `norms[k]` is the frozen `(gamma', beta')` pair for placement `k`.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        placements: &[Placement],
        geometry: &[StageGeometry; 4],
        num_tasks: usize,
        config: &AdapterConfig,
        norms: Vec<(Array2<F>, Array2<F>)>,
    ) -> Result<Self> {
        if placements.is_empty() {
            return Err(Error::InvalidPlacement("at least one adapter placement is required".into()));
        }
        if placements.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidPlacement("placements must be strictly increasing".into()));
        }
        if norms.len() != placements.len() {
            return Err(Error::DimensionMismatch("one frozen norm per placement is required".into()));
        }
        let mut blocks = Vec::with_capacity(placements.len());
        for (p, (g, b)) in placements.iter().zip(norms) {
            if !(1..=4).contains(&p.stage) {
                return Err(Error::InvalidPlacement(format!("stage of {p} out of range")));
            }
            let geo = geometry[p.stage - 1];
            let heads = config.heads_per_stage[p.stage - 1];
            blocks.push(AdapterBlock::new(rng, geo.dim, geo.tokens(), heads, num_tasks, config, g, b)?);
        }
        let first = placements[0].stage;
        let transitions = (1..4)
            .map(|s| {
                (s >= first).then(|| {
                    let g = geometry[s - 1];
                    StageTransition::new(rng, g.dim, g.h, g.w)
                })
            })
            .collect();
        Ok(Self { placements: placements.to_vec(), blocks, transitions, num_tasks })
    }

    pub fn forward(
        &self,
        inputs: &ChainInputs<'_, F>,
        omega: &[Vec<F>],
    ) -> Result<(Vec<TaskEmbedding<F>>, ChainCache<F>)> {
        if inputs.at_placements.len() != self.blocks.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} placement features for {} blocks",
                inputs.at_placements.len(),
                self.blocks.len()
            )));
        }
        if omega.len() != self.num_tasks {
            return Err(Error::DimensionMismatch(format!("{} affinity columns for {} tasks", omega.len(), self.num_tasks)));
        }
        let n = self.num_tasks;
        let mut steps = Vec::new();
        let mut degenerate = 0;
        let mut state: Option<Vec<Array2<F>>> = None;
        let mut stage3: Option<Vec<Array2<F>>> = None;
        let mut cur = self.placements[0].stage;
        for (k, block) in self.blocks.iter().enumerate() {
            let stage = self.placements[k].stage;
            if let Some(s) = state.take() {
                state = Some(self.carry(s, cur, stage, &mut steps));
            }
            cur = stage;
            let mut outs = Vec::with_capacity(n);
            let mut caches = Vec::with_capacity(n);
            for (t, om) in omega.iter().enumerate() {
                let prev = state.as_ref().map(|s| &s[t]);
                let (o, c) = block.forward_task(inputs.at_placements[k], prev, om, t)?;
                degenerate += c.degenerate_tokens();
                outs.push(o);
                caches.push(c);
            }
            let last_in_stage3 = stage == 3 && self.placements.get(k + 1).is_none_or(|p| p.stage != 3);
            if last_in_stage3 {
                stage3 = Some(outs.clone());
            }
            steps.push(ChainStep::Block { index: k, caches, tap_stage3: last_in_stage3 });
            state = Some(outs);
        }
        let state = state.expect("at least one block");
        let stage4: Vec<Array2<F>> = if cur < 4 {
            let carried = self.carry(state, cur, 4, &mut steps);
            carried.into_iter().map(|s| &s + inputs.final_features).collect()
        } else {
            state
        };
        let out = stage4
            .into_iter()
            .enumerate()
            .map(|(t, s4)| TaskEmbedding { stage4: s4, stage3: stage3.as_ref().map(|v| v[t].clone()) })
            .collect();
        Ok((out, ChainCache { steps, degenerate_tokens: degenerate }))
    }

    fn carry(&self, mut state: Vec<Array2<F>>, from: usize, to: usize, steps: &mut Vec<ChainStep<F>>) -> Vec<Array2<F>> {
        for s in from..to {
            let tr = self.transitions[s - 1].as_ref().expect("transition exists past the first stage");
            let next = state.iter().map(|x| tr.forward(x)).collect();
            steps.push(ChainStep::Transition { stage: s, inputs: state });
            state = next;
        }
        state
    }

    /// Backpropagates per-task gradients of the embeddings. Returns, per task,
    /// the gradient with respect to the backbone features at the first placement.
    pub fn backward(
        &mut self,
        cache: &ChainCache<F>,
        d_stage4: &[Array2<F>],
        d_stage3: Option<&[Array2<F>]>,
    ) -> Vec<Array2<F>> {
        let mut d_state: Vec<Array2<F>> = d_stage4.to_vec();
        let mut d_first = Vec::new();
        for step in cache.steps.iter().rev() {
            match step {
                ChainStep::Transition { stage, inputs } => {
                    let tr = self.transitions[stage - 1].as_mut().expect("transition used in forward");
                    d_state = inputs.iter().zip(&d_state).map(|(x, d)| tr.backward(x, d)).collect();
                }
                ChainStep::Block { index, caches, tap_stage3 } => {
                    if let (true, Some(d3)) = (*tap_stage3, d_stage3) {
                        for (d, extra) in d_state.iter_mut().zip(d3) {
                            *d += extra;
                        }
                    }
                    let block = &mut self.blocks[*index];
                    d_state = caches.iter().zip(&d_state).enumerate().map(|(t, (c, d))| block.backward_task(c, t, d)).collect();
                    if *index == 0 {
                        d_first = d_state.clone();
                    }
                }
            }
        }
        d_first
    }

    pub fn visit_frozen(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.visit_frozen(&scoped(prefix, &format!("block{k}")), f);
        }
    }
}

impl<F: Real> Module<F> for AdapterChain<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&scoped(prefix, &format!("block{k}")), f);
        }
        for (s, tr) in self.transitions.iter_mut().enumerate() {
            if let Some(tr) = tr {
                tr.visit_params(&scoped(prefix, &format!("transition{}", s + 1)), f);
            }
        }
    }
}
