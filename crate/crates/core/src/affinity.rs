//! Gradient-based task affinities.
//!
//! Each task `t` owns a weight vector `omega_t` on the probability simplex over
//! all `N` tasks. One outer iteration takes a few optimizer steps on the
//! affinity-weighted loss, measures the cosine similarity between per-task
//! gradients of the shared representation, and applies a normalized
//! exponential (entropic mirror descent) update to every column.

use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};

/// Norms below this are treated as a vanished gradient.
pub const ZERO_GRADIENT_NORM: f64 = 1e-12;

/// Gradient of one task loss w.r.t. the shared representation, flattened and
/// averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGradient {
    pub task_id: usize,
    pub vector: Vec<f64>,
    pub norm: f64,
}

impl TaskGradient {
    pub fn new(task_id: usize, vector: Vec<f64>) -> Self {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { task_id, vector, norm }
    }
}

/// Pairwise cosine similarities between task gradients, `values[t][n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn row(&self, t: usize) -> Vec<f64> {
        self.values.row(t).to_vec()
    }
}

/// Which sign the exponent of the weight update carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `exp(-kappa * sim)`: similar tasks are down-weighted.
    #[default]
    #[serde(alias = "paper")]
    PaperNegative,
    /// `exp(+kappa * sim)`: similar tasks are up-weighted.
    Positive,
}

impl SignConvention {
    pub fn factor(self) -> f64 {
        match self {
            Self::PaperNegative => -1.0,
            Self::Positive => 1.0,
        }
    }
}

/// `columns[t]` is the affinity vector of target task `t` over inductive tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    pub columns: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AffinityMatrix {
    pub fn uniform(n: usize) -> Self {
        Self { columns: vec![vec![1.0 / n as f64; n]; n], step_count: 0 }
    }

    pub fn num_tasks(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, t: usize) -> &[f64] {
        &self.columns[t]
    }

    /// Every column nonnegative and summing to one within `tol`.
    pub fn is_simplex(&self, tol: f64) -> bool {
        self.columns.iter().all(|c| on_simplex(c, tol))
    }

    /// Matrix view with entry `(n, t) = omega_t[n]`, so columns are the
    /// per-task affinity vectors.
    pub fn to_array(&self) -> Array2<f64> {
        let n = self.num_tasks();
        Array2::from_shape_fn((n, n), |(r, c)| self.columns[c][r])
    }

    /// Row-major CSV of [`Self::to_array`] with 9 significant digits.
    pub fn to_csv(&self) -> String {
        let a = self.to_array();
        let mut out = String::new();
        for row in a.rows() {
            let cells: Vec<String> = row.iter().map(|&v| format_sig(v, 9)).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Config(format!("affinity csv: {e}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("affinity csv is not square".into()));
        }
        let columns = (0..n).map(|c| (0..n).map(|r| rows[r][c]).collect()).collect();
        Ok(Self { columns, step_count: 0 })
    }
}

pub fn on_simplex(v: &[f64], tol: f64) -> bool {
    v.iter().all(|&x| x >= -tol) && (v.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Formats `v` with `digits` significant digits in plain or scientific notation.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..digits as i32).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.prec$e}", prec = digits - 1)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("gradient lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < ZERO_GRADIENT_NORM {
        return Err(Error::ZeroGradient { task: 0 });
    }
    if nb < ZERO_GRADIENT_NORM {
        return Err(Error::ZeroGradient { task: 1 });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// All-pairs cosine similarity. A vanished gradient yields similarity 0 for
/// every pair it takes part in (including its diagonal entry) and a warning.
pub fn compute_similarity_matrix(grads: &[TaskGradient]) -> Result<SimilarityMatrix> {
    let n = grads.len();
    if n < 2 {
        return Err(Error::DimensionMismatch(format!("need at least 2 task gradients, got {n}")));
    }
    let len = grads[0].vector.len();
    if let Some(g) = grads.iter().find(|g| g.vector.len() != len) {
        return Err(Error::DimensionMismatch(format!(
            "task {} gradient has length {}, expected {len}",
            g.task_id,
            g.vector.len()
        )));
    }
    for g in grads.iter().filter(|g| g.norm < ZERO_GRADIENT_NORM) {
        warn!(task = g.task_id, norm = g.norm, "zero task gradient; similarity set to 0");
    }
    let mut values = Array2::zeros((n, n));
    for t in 0..n {
        for m in t..n {
            let s = match cosine_similarity(&grads[t].vector, &grads[m].vector) {
                Ok(s) => s,
                Err(Error::ZeroGradient { .. }) => 0.0,
                Err(e) => return Err(e),
            };
            values[[t, m]] = s;
            values[[m, t]] = s;
        }
    }
    Ok(SimilarityMatrix { values })
}

/// Normalized exponential-weight update of one affinity column, evaluated in
/// log space: `omega[n] * exp(s * kappa * sim[n])` renormalized, with `s = -1`
/// for [`SignConvention::PaperNegative`].
pub fn mirror_descent_update(omega: &[f64], sim: &[f64], kappa: f64, sign: SignConvention) -> Vec<f64> {
    debug_assert_eq!(omega.len(), sim.len());
    let s = sign.factor() * kappa;
    let logits: Vec<f64> = omega
        .iter()
        .zip(sim)
        .map(|(&w, &x)| if w > 0.0 { w.ln() + s * x } else { f64::NEG_INFINITY })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// The training-side half of one affinity iteration: the shared representation
/// and per-task decoders live behind this trait.
pub trait TroaProvider {
    fn num_tasks(&self) -> usize;

    /// One optimizer step on `sum_n weights[n] * L_n` over the task decoders.
    fn descend(&mut self, weights: &[f64]) -> Result<()>;

    /// Per-task gradients of the current batch losses w.r.t. the shared representation.
    fn task_gradients(&mut self) -> Result<Vec<TaskGradient>>;
}

/// Affinity optimizer state. The published matrix is an immutable snapshot
/// that readers may hold while the next step is computed.
#[derive(Clone, Debug)]
pub struct Troa {
    affinity: Arc<AffinityMatrix>,
    pub kappa: f64,
    pub sign: SignConvention,
    pub inner_steps: usize,
    last_similarity: Option<SimilarityMatrix>,
}

impl Troa {
    pub fn new(num_tasks: usize, kappa: f64, sign: SignConvention, inner_steps: usize) -> Result<Self> {
        Self::with_affinity(AffinityMatrix::uniform(num_tasks), kappa, sign, inner_steps)
    }

    pub fn with_affinity(
        affinity: AffinityMatrix,
        kappa: f64,
        sign: SignConvention,
        inner_steps: usize,
    ) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
        }
        if inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if !affinity.is_simplex(1e-6) {
            return Err(Error::Config("initial affinity columns must lie on the simplex".into()));
        }
        Ok(Self { affinity: Arc::new(affinity), kappa, sign, inner_steps, last_similarity: None })
    }

    pub fn snapshot(&self) -> Arc<AffinityMatrix> {
        Arc::clone(&self.affinity)
    }

    pub fn last_similarity(&self) -> Option<&SimilarityMatrix> {
        self.last_similarity.as_ref()
    }

    /// Mean affinity each inductive task receives over all target columns;
    /// this is the decoder objective weighting for the inner descent steps.
    pub fn inner_weights(&self) -> Vec<f64> {
        let n = self.affinity.num_tasks();
        (0..n)
            .map(|m| self.affinity.columns.iter().map(|c| c[m]).sum::<f64>() / n as f64)
            .collect()
    }

    /// One outer iteration; returns the newly published matrix.
    pub fn step<P: TroaProvider + ?Sized>(&mut self, provider: &mut P) -> Result<Arc<AffinityMatrix>> {
        let n = self.affinity.num_tasks();
        if provider.num_tasks() != n {
            return Err(Error::DimensionMismatch(format!(
                "provider has {} tasks, affinity has {n}",
                provider.num_tasks()
            )));
        }
        let weights = self.inner_weights();
        for _ in 0..self.inner_steps {
            provider.descend(&weights)?;
        }
        let grads = provider.task_gradients()?;
        let sim = compute_similarity_matrix(&grads)?;
        let columns = (0..n)
            .map(|t| mirror_descent_update(&self.affinity.columns[t], &sim.row(t), self.kappa, self.sign))
            .collect();
        self.affinity = Arc::new(AffinityMatrix { columns, step_count: self.affinity.step_count + 1 });
        self.last_similarity = Some(sim);
        Ok(self.snapshot())
    }
}
