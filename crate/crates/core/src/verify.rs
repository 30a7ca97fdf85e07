//! Finite-difference gradient checks and direct-formula oracles.
//!
//! The oracles are written from the formulas with plain loops and do not call
//! into the network code. Everything here runs in `f64`.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{tsn, tsn_backward, AdapterBlock, AdapterConfig, TsnParams};
use crate::affinity::SignConvention;
use crate::decoders::{task_loss, Target, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::taa::MultiHeadTaa;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_SEED: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub group: String,
    pub max_rel_error: f64,
    pub step: f64,
    pub seed: u64,
    /// Number of scalar entries compared.
    pub entries: usize,
}

impl GradCheckReport {
    fn merge(group: &str, reports: Vec<GradCheckReport>) -> GradCheckReport {
        let first = &reports[0];
        GradCheckReport {
            group: group.to_string(),
            max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
            step: first.step,
            seed: first.seed,
            entries: reports.iter().map(|r| r.entries).sum(),
        }
    }
}

/// Central differences of `f` at `x` against `analytic`. The relative error of
/// an entry is `|a - n| / max(|a|, |n|, 1e-8)`; the report holds the maximum.
pub fn finite_difference_gradcheck(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    group: &str,
    step: f64,
    seed: u64,
) -> GradCheckReport {
    assert!((1e-6..=1e-4).contains(&step), "finite-difference step {step} outside [1e-6, 1e-4]");
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    GradCheckReport { group: group.to_string(), max_rel_error: worst, step, seed, entries: x.len() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradModule {
    Taa,
    Tsn,
    Adapter,
    Losses,
}

impl GradModule {
    pub const ALL: [GradModule; 4] = [Self::Taa, Self::Tsn, Self::Adapter, Self::Losses];

    pub fn name(self) -> &'static str {
        match self {
            Self::Taa => "taa",
            Self::Tsn => "tsn",
            Self::Adapter => "adapter",
            Self::Losses => "losses",
        }
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck module {s:?} (taa, tsn, adapter, losses)")))
    }
}

/// Runs the fixture for `module`. With `corrupt` the analytic gradient is
/// scaled by 1.1 before comparison, which a working check must flag.
pub fn gradcheck(module: GradModule, seed: u64, step: f64, corrupt: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = Ctx { seed, step, corrupt };
    match module {
        GradModule::Taa => taa_fixture(&mut rng, &ctx),
        GradModule::Tsn => tsn_fixture(&mut rng, &ctx),
        GradModule::Adapter => adapter_fixture(&mut rng, &ctx),
        GradModule::Losses => losses_fixture(&mut rng, &ctx),
    }
}

struct Ctx {
    seed: u64,
    step: f64,
    corrupt: bool,
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.random_range(-1.0..1.0))
}

fn randomize(m: &mut dyn Module<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    m.visit_params("", &mut |_, p| p.value = random(rng, p.value.nrows(), p.value.ncols(), scale));
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone)]
struct NoParams;

impl Module<f64> for NoParams {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<f64>)) {}
}

fn read_params(m: &mut dyn Module<f64>) -> (Vec<f64>, Vec<f64>) {
    let (mut values, mut grads) = (Vec::new(), Vec::new());
    m.visit_params("", &mut |_, p| {
        values.extend(p.value.iter());
        grads.extend(p.grad.iter());
    });
    (values, grads)
}

fn write_params(m: &mut dyn Module<f64>, flat: &[f64]) {
    let mut at = 0;
    m.visit_params("", &mut |_, p| {
        for v in p.value.iter_mut() {
            *v = flat[at];
            at += 1;
        }
    });
}

/// Checks parameters of `module` and all `inputs` together. `loss` evaluates
/// the scalar; `backward` must accumulate parameter gradients into a freshly
/// zeroed module and return the input gradients.
fn check<M: Module<f64> + Clone>(
    group: &str,
    ctx: &Ctx,
    module: &M,
    inputs: &[Array2<f64>],
    loss: impl Fn(&M, &[Array2<f64>]) -> f64,
    backward: impl Fn(&mut M, &[Array2<f64>]) -> Vec<Array2<f64>>,
) -> GradCheckReport {
    let mut m = module.clone();
    m.visit_params("", &mut |_, p| p.zero_grad());
    let d_inputs = backward(&mut m, inputs);
    let (mut x, mut analytic) = read_params(&mut m);
    let n_params = x.len();
    for (input, d) in inputs.iter().zip(&d_inputs) {
        x.extend(input.iter());
        analytic.extend(d.iter());
    }
    if ctx.corrupt {
        analytic.iter_mut().for_each(|g| *g *= 1.1);
    }
    let shapes: Vec<_> = inputs.iter().map(|a| a.raw_dim()).collect();
    let mut f = |flat: &[f64]| {
        let mut probe = module.clone();
        write_params(&mut probe, &flat[..n_params]);
        let mut at = n_params;
        let xs: Vec<Array2<f64>> = shapes
            .iter()
            .map(|s| {
                let n = s[0] * s[1];
                let a = Array2::from_shape_vec(*s, flat[at..at + n].to_vec()).expect("shape");
                at += n;
                a
            })
            .collect();
        loss(&probe, &xs)
    };
    finite_difference_gradcheck(&mut f, &x, &analytic, group, ctx.step, ctx.seed)
}

fn taa_fixture(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<GradCheckReport> {
    let (dim, heads, hw, tasks, task) = (8, 2, 4, 3, 1);
    let mut attn = MultiHeadTaa::<f64>::new(rng, dim, heads, hw, tasks, true)?;
    randomize(&mut attn, rng, 0.5);
    let omega = random_simplex(rng, tasks);
    let u = random(rng, 2 * hw, dim, 1.0);
    let r = random(rng, 2 * hw, dim, 1.0 / (2 * hw * dim) as f64);
    let loss = |m: &MultiHeadTaa<f64>, x: &[Array2<f64>]| dot(&m.forward(&x[0], &omega, task).expect("fixture shapes").0, &r);
    let backward = |m: &mut MultiHeadTaa<f64>, x: &[Array2<f64>]| {
        let (_, cache) = m.forward(&x[0], &omega, task).expect("fixture shapes");
        vec![m.backward(&cache, &r)]
    };
    Ok(check("taa", ctx, &attn, &[u], loss, backward))
}

fn tsn_fixture(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<GradCheckReport> {
    let (dim, hw, tasks, task) = (4, 3, 3, 2);
    let mut params = TsnParams::new(tasks, random(rng, 1, dim, 1.0), random(rng, 1, dim, 1.0));
    randomize(&mut params, rng, 1.0);
    let a = random(rng, 2 * hw, dim, 1.0);
    let omega_tilde = random(rng, 2 * hw, dim, 1.0);
    let r = random(rng, 2 * hw, dim, 1.0 / (2 * hw * dim) as f64);
    let loss = |p: &TsnParams<f64>, x: &[Array2<f64>]| dot(&tsn(&x[0], &x[1], p, task, hw).expect("fixture shapes").0, &r);
    let backward = |p: &mut TsnParams<f64>, x: &[Array2<f64>]| {
        let (_, cache) = tsn(&x[0], &x[1], p, task, hw).expect("fixture shapes");
        let (da, dw) = tsn_backward(p, &cache, task, hw, &r);
        vec![da, dw]
    };
    Ok(check("tsn", ctx, &params, &[a, omega_tilde], loss, backward))
}

fn adapter_fixture(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<GradCheckReport> {
    let (dim, hw, heads, tasks, task) = (8, 4, 2, 3, 0);
    let config = AdapterConfig { bottleneck_dim: 3, ffn_hidden: 6, ..AdapterConfig::default() };
    let (gamma, beta) = (random(rng, 1, dim, 1.0), random(rng, 1, dim, 1.0));
    let mut block = AdapterBlock::<f64>::new(rng, dim, hw, heads, tasks, &config, gamma, beta)?;
    randomize(&mut block, rng, 0.5);
    let omega = random_simplex(rng, tasks);
    let backbone = random(rng, 2 * hw, dim, 1.0);
    let prev = random(rng, 2 * hw, dim, 1.0);
    let r = random(rng, 2 * hw, dim, 1.0 / (2 * hw * dim) as f64);
    let loss = |b: &AdapterBlock<f64>, x: &[Array2<f64>]| {
        dot(&b.forward_task(&x[0], Some(&x[1]), &omega, task).expect("fixture shapes").0, &r)
    };
    let backward = |b: &mut AdapterBlock<f64>, x: &[Array2<f64>]| {
        let (_, cache) = b.forward_task(&x[0], Some(&x[1]), &omega, task).expect("fixture shapes");
        let d = b.backward_task(&cache, task, &r);
        vec![d.clone(), d]
    };
    Ok(check("adapter", ctx, &block, &[backbone, prev], loss, backward))
}

fn losses_fixture(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<GradCheckReport> {
    let (classes, pixels, batch) = (5, 6, 2);
    let rows = pixels * batch;
    let mut reports = Vec::new();
    for (id, kind) in [TaskKind::Segmentation, TaskKind::Depth, TaskKind::Normal, TaskKind::Edge].into_iter().enumerate() {
        let spec = TaskSpec::new(id, kind, classes);
        let raw = random(rng, rows, spec.head_channels, 1.0);
        let labels: Vec<u8> = (0..rows).map(|_| rng.random_range(0..classes as u8)).collect();
        let dense = match kind {
            TaskKind::Normal => {
                let mut n = random(rng, rows, 3, 1.0);
                for mut row in n.rows_mut() {
                    let len = row.dot(&row).sqrt();
                    row /= len;
                }
                n
            }
            TaskKind::Edge => Array2::from_shape_simple_fn((rows, 1), || f64::from(rng.random_bool(0.3) as u8)),
            _ => random(rng, rows, 1, 1.0),
        };
        let target = |kind| match kind {
            TaskKind::Segmentation => Target::Labels(&labels),
            _ => Target::Dense(&dense),
        };
        let loss = |_: &NoParams, x: &[Array2<f64>]| task_loss(&x[0], target(kind), &spec, pixels).expect("fixture shapes").0;
        let backward = |_: &mut NoParams, x: &[Array2<f64>]| vec![task_loss(&x[0], target(kind), &spec, pixels).expect("fixture shapes").1];
        reports.push(check(kind.name(), ctx, &NoParams, &[raw], loss, backward));
    }
    Ok(GradCheckReport::merge("losses", reports))
}

/// `omega[n] * exp(s * kappa * sim[n]) / sum_m omega[m] * exp(s * kappa * sim[m])`
/// evaluated directly, with the exponent clamped to `[-700, 700]` and a
/// compensated sum.
pub fn mirror_descent_oracle(omega: &[f64], sim: &[f64], kappa: f64, sign: SignConvention) -> Vec<f64> {
    let s = match sign {
        SignConvention::PaperNegative => -1.0,
        SignConvention::Positive => 1.0,
    };
    let terms: Vec<f64> = omega.iter().zip(sim).map(|(w, x)| w * (s * kappa * x).clamp(-700.0, 700.0).exp()).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &t in &terms {
        let next = sum + t;
        comp += if sum.abs() >= t.abs() { (sum - next) + t } else { (t - next) + sum };
        sum = next;
    }
    let total = sum + comp;
    terms.into_iter().map(|t| t / total).collect()
}

/// `softmax(A' + q kᵀ / sqrt(c)) v` row by row; `a_prime = None` means zero.
pub fn attention_oracle(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, a_prime: Option<&Array2<f64>>) -> Array2<f64> {
    let (n, c) = q.dim();
    let m = k.nrows();
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = Array2::zeros((n, v.ncols()));
    for i in 0..n {
        let mut logits = vec![0.0; m];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut qk = 0.0;
            for ch in 0..c {
                qk += q[[i, ch]] * k[[j, ch]];
            }
            *l = qk * scale + a_prime.map_or(0.0, |a| a[[i, j]]);
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = weights.iter().sum();
        for (j, w) in weights.iter().enumerate() {
            for ch in 0..v.ncols() {
                out[[i, ch]] += w / z * v[[j, ch]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::mirror_descent_update;
    use crate::nn::attend;
    use crate::taa::{task_adapted_attention, AttentionInput, LogitModulator};
    use proptest::prelude::*;

    #[test]
    fn quadratic_is_exact() {
        let x = [0.3, -1.2, 2.5, 0.0];
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let mut f = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        let r = finite_difference_gradcheck(&mut f, &x, &grad, "quadratic", DEFAULT_STEP, 0);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.entries, 4);
    }

    #[test]
    fn fixtures_pass() {
        for m in GradModule::ALL {
            let r = gradcheck(m, DEFAULT_SEED, DEFAULT_STEP, false).unwrap();
            assert!(r.max_rel_error < 1e-3, "{m}: {r:?}");
            assert!(r.entries > 0);
        }
    }

    #[test]
    fn corrupted_gradients_are_caught() {
        for m in GradModule::ALL {
            let r = gradcheck(m, DEFAULT_SEED, DEFAULT_STEP, true).unwrap();
            assert!(r.max_rel_error > 1e-2, "{m}: {r:?}");
        }
    }

    #[test]
    fn module_names_round_trip() {
        for m in GradModule::ALL {
            assert_eq!(m.name().parse::<GradModule>().unwrap(), m);
        }
        assert!("swin".parse::<GradModule>().is_err());
    }

    #[test]
    fn report_serializes() {
        let r = gradcheck(GradModule::Losses, 1, 1e-5, false).unwrap();
        let back: GradCheckReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn mirror_oracle_fixed_points() {
        assert_eq!(mirror_descent_oracle(&[0.5, 0.5], &[3.0, 3.0], 1.0, SignConvention::PaperNegative), vec![0.5, 0.5]);
        let w = mirror_descent_oracle(&[0.5, 0.5], &[1.0, 0.0], 1.0, SignConvention::PaperNegative);
        assert!((w[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn extreme_similarities_stay_finite() {
        for sign in [SignConvention::PaperNegative, SignConvention::Positive] {
            let omega = [0.25, 0.25, 0.5];
            let sim = [50.0, -50.0, 0.0];
            let fast = mirror_descent_update(&omega, &sim, 1.0, sign);
            let slow = mirror_descent_oracle(&omega, &sim, 1.0, sign);
            assert!(fast.iter().all(|v| v.is_finite()));
            let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax(&fast), argmax(&slow));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn mirror_update_matches_oracle(
            raw in prop::collection::vec(0.01f64..1.0, 2..=4),
            sim in prop::collection::vec(-1.0f64..1.0, 4),
            kappa in 0.01f64..5.0,
            positive in any::<bool>(),
        ) {
            let total: f64 = raw.iter().sum();
            let omega: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let sim = &sim[..omega.len()];
            let sign = if positive { SignConvention::Positive } else { SignConvention::PaperNegative };
            let fast = mirror_descent_update(&omega, sim, kappa, sign);
            let slow = mirror_descent_oracle(&omega, sim, kappa, sign);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-300), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_oracle_matches_taa() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let (h, w, c) = (2, 2, 3);
            let input = AttentionInput { q: random(&mut rng, 4, c, 1.0), k: random(&mut rng, 4, c, 1.0), v: random(&mut rng, 4, c, 1.0), heads: 1, h, w };
            let mut modulator = LogitModulator::<f64>::new(&mut rng, h * w, 2);
            randomize(&mut modulator, &mut rng, 0.7);
            let omega = random_simplex(&mut rng, 2);
            let got = task_adapted_attention(&input, &omega, &modulator, 1).unwrap();
            let film = modulator.film[1].forward(&omega);
            let a = &modulator.a.value;
            let a_prime = Array2::from_shape_fn(a.dim(), |(i, j)| a[[i, j]] * film.scale[i] + film.shift[i]);
            let want = attention_oracle(&input.q, &input.k, &input.v, Some(&a_prime));
            assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn attention_oracle_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (random(&mut rng, 3, 2, 1.0), random(&mut rng, 3, 2, 1.0), random(&mut rng, 3, 2, 1.0));
        let zero = Array2::zeros((3, 3));
        assert_eq!(attention_oracle(&q, &k, &v, Some(&zero)), attention_oracle(&q, &k, &v, None));
        let plain = attend(&q, &k, &v, None).0;
        assert!(plain.iter().zip(&attention_oracle(&q, &k, &v, None)).all(|(x, y)| (x - y).abs() < 1e-12));
        let one = |a: Array2<f64>| a.slice(ndarray::s![..1, ..]).to_owned();
        assert_eq!(attention_oracle(&one(q), &one(k), &one(v.clone()), None), one(v));
    }
}
