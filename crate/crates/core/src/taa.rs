//! Task-adapted attention.
//!
//! Plain self-attention is `softmax(q kᵀ / sqrt(c)) v`. The task-adapted
//! variant adds a task-conditioned logit matrix `A'(omega_t)` before the
//! softmax, where `A` is a learnable `hw x hw` matrix shared by all heads and
//! tasks, and a per-task FiLM generator turns the affinity column `omega_t`
//! into a row-wise scale `g` and shift `b`: `A' = A ∘ (g 1ᵀ) + b 1ᵀ`.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::affinity::AffinityMatrix;
use crate::error::{Error, Result};
use crate::nn::{
    attend, attend_backward, gelu, gelu_backward, normal_array, scoped, Linear, Module, Param, Real,
};

/// Hidden width of the FiLM generators.
pub const FILM_HIDDEN: usize = 16;

/// Standard deviation of the initial logit matrix `A`.
pub const A_INIT_STD: f64 = 0.02;

/// Per-head token matrices on an `h x w` grid.
#[derive(Clone, Debug)]
pub struct AttentionInput<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    pub heads: usize,
    pub h: usize,
    pub w: usize,
}

impl<F: Real> AttentionInput<F> {
    pub fn validate(&self) -> Result<()> {
        let hw = self.h * self.w;
        for (name, m) in [("q", &self.q), ("k", &self.k), ("v", &self.v)] {
            if m.nrows() != hw {
                return Err(Error::DimensionMismatch(format!("{name} has {} tokens, expected {hw}", m.nrows())));
            }
        }
        if self.q.ncols() == 0 || self.q.ncols() != self.k.ncols() {
            return Err(Error::DimensionMismatch("q/k channel widths differ or are empty".into()));
        }
        Ok(())
    }
}

/// Maps an affinity column (length `N`) to a row scale and a row shift of
/// length `hw` through two small MLPs.
#[derive(Clone, Debug)]
pub struct FilmGenerator<F> {
    pub task_id: usize,
    pub gamma1: Linear<F>,
    pub gamma2: Linear<F>,
    pub beta1: Linear<F>,
    pub beta2: Linear<F>,
}

#[derive(Clone, Debug)]
pub struct FilmCache<F> {
    omega: Array2<F>,
    gamma_pre: Array2<F>,
    gamma_hidden: Array2<F>,
    beta_pre: Array2<F>,
    beta_hidden: Array2<F>,
    pub scale: Array1<F>,
    pub shift: Array1<F>,
}

impl<F: Real> FilmGenerator<F> {
    /// Output layers start at zero weight so that `g = 1` and `b = 0`.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, task_id: usize, num_tasks: usize, hw: usize) -> Self {
        let mut gamma2 = Linear::zeros(FILM_HIDDEN, hw, true);
        gamma2.bias.as_mut().unwrap().value.fill(F::one());
        Self {
            task_id,
            gamma1: Linear::new(rng, num_tasks, FILM_HIDDEN, true),
            gamma2,
            beta1: Linear::new(rng, num_tasks, FILM_HIDDEN, true),
            beta2: Linear::zeros(FILM_HIDDEN, hw, true),
        }
    }

    pub fn out_len(&self) -> usize {
        self.gamma2.d_out()
    }

    pub fn forward(&self, omega: &[F]) -> FilmCache<F> {
        let omega = Array2::from_shape_vec((1, omega.len()), omega.to_vec()).expect("row vector");
        let gamma_pre = self.gamma1.forward(&omega);
        let gamma_hidden = gelu(&gamma_pre);
        let scale = self.gamma2.forward(&gamma_hidden).row(0).to_owned();
        let beta_pre = self.beta1.forward(&omega);
        let beta_hidden = gelu(&beta_pre);
        let shift = self.beta2.forward(&beta_hidden).row(0).to_owned();
        FilmCache { omega, gamma_pre, gamma_hidden, beta_pre, beta_hidden, scale, shift }
    }

    /// Affinities are constants here: no gradient flows back into them.
    pub fn backward(&mut self, cache: &FilmCache<F>, d_scale: &Array1<F>, d_shift: &Array1<F>) {
        let dg = d_scale.clone().insert_axis(Axis(0));
        let dh = self.gamma2.backward(&cache.gamma_hidden, &dg);
        self.gamma1.accumulate(&cache.omega, &gelu_backward(&cache.gamma_pre, &dh));
        let db = d_shift.clone().insert_axis(Axis(0));
        let dh = self.beta2.backward(&cache.beta_hidden, &db);
        self.beta1.accumulate(&cache.omega, &gelu_backward(&cache.beta_pre, &dh));
    }
}

impl<F: Real> Module<F> for FilmGenerator<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.gamma1.visit_params(&scoped(prefix, "gamma1"), f);
        self.gamma2.visit_params(&scoped(prefix, "gamma2"), f);
        self.beta1.visit_params(&scoped(prefix, "beta1"), f);
        self.beta2.visit_params(&scoped(prefix, "beta2"), f);
    }
}

/// The learnable logit matrix of one adapter layer plus one FiLM generator per task.
#[derive(Clone, Debug)]
pub struct LogitModulator<F> {
    pub a: Param<F>,
    pub film: Vec<FilmGenerator<F>>,
}

impl<F: Real> LogitModulator<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, hw: usize, num_tasks: usize) -> Self {
        Self {
            a: Param::new(normal_array(rng, hw, hw, A_INIT_STD)),
            film: (0..num_tasks).map(|t| FilmGenerator::new(rng, t, num_tasks, hw)).collect(),
        }
    }

    pub fn hw(&self) -> usize {
        self.a.value.nrows()
    }
}

impl<F: Real> Module<F> for LogitModulator<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&scoped(prefix, "a"), &mut self.a);
        for (t, g) in self.film.iter_mut().enumerate() {
            g.visit_params(&scoped(prefix, &format!("film{t}")), f);
        }
    }
}

/// `A ∘ (g 1ᵀ) + b 1ᵀ`.
pub fn modulate<F: Real>(a: &Array2<F>, scale: &Array1<F>, shift: &Array1<F>) -> Result<Array2<F>> {
    let hw = a.nrows();
    if scale.len() != hw || shift.len() != hw {
        return Err(Error::DimensionMismatch(format!(
            "FiLM outputs have length {}/{}, logit matrix side is {hw}",
            scale.len(),
            shift.len()
        )));
    }
    let g = scale.view().insert_axis(Axis(1));
    let b = shift.view().insert_axis(Axis(1));
    Ok(a * &g + &b)
}

/// `A'(omega_t)` for task `t`.
pub fn film_modulate<F: Real>(omega_t: &[F], modulator: &LogitModulator<F>, t: usize) -> Result<Array2<F>> {
    let film = modulator.film[t].forward(omega_t);
    modulate(&modulator.a.value, &film.scale, &film.shift)
}

/// Single-head self-attention.
pub fn self_attention<F: Real>(input: &AttentionInput<F>) -> Result<Array2<F>> {
    input.validate()?;
    Ok(attend(&input.q, &input.k, &input.v, None).0)
}

/// Single-head task-adapted attention.
pub fn task_adapted_attention<F: Real>(
    input: &AttentionInput<F>,
    omega_t: &[F],
    modulator: &LogitModulator<F>,
    t: usize,
) -> Result<Array2<F>> {
    input.validate()?;
    let a_prime = film_modulate(omega_t, modulator, t)?;
    if a_prime.nrows() != input.q.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "logit matrix side {} does not match {} tokens",
            a_prime.nrows(),
            input.q.nrows()
        )));
    }
    Ok(attend(&input.q, &input.k, &input.v, Some(&a_prime)).0)
}

/// Multi-head attention over a whole `h x w` map, optionally task-adapted.
/// Inputs are `[batch * hw, C]`; every sample attends within itself.
#[derive(Clone, Debug)]
pub struct MultiHeadTaa<F> {
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub heads: usize,
    pub hw: usize,
    /// `None` gives plain multi-head self-attention.
    pub modulator: Option<LogitModulator<F>>,
}

pub struct MultiHeadTaaCache<F> {
    u: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    concat: Array2<F>,
    film: Option<(usize, FilmCache<F>)>,
}

impl<F> MultiHeadTaaCache<F> {
    /// Softmax maps, sample-major then head.
    pub fn probs(&self) -> &[Array2<F>] {
        &self.probs
    }
}

impl<F: Real> MultiHeadTaa<F> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        dim: usize,
        heads: usize,
        hw: usize,
        num_tasks: usize,
        task_adapted: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::DimensionMismatch(format!("channels {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(rng, dim, 3 * dim, true),
            proj: Linear::new(rng, dim, dim, true),
            heads,
            hw,
            modulator: task_adapted.then(|| LogitModulator::new(rng, hw, num_tasks)),
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.d_out()
    }

    pub fn forward(&self, u: &Array2<F>, omega_t: &[F], task: usize) -> Result<(Array2<F>, MultiHeadTaaCache<F>)> {
        let dim = self.dim();
        if u.ncols() != dim || u.nrows() % self.hw != 0 {
            return Err(Error::DimensionMismatch(format!(
                "attention input {:?} incompatible with {} tokens x {dim} channels",
                u.dim(),
                self.hw
            )));
        }
        let hd = dim / self.heads;
        let batch = u.nrows() / self.hw;
        let film = match &self.modulator {
            Some(m) => Some((task, m.film[task].forward(omega_t))),
            None => None,
        };
        let a_prime = match (&self.modulator, &film) {
            (Some(m), Some((_, c))) => Some(modulate(&m.a.value, &c.scale, &c.shift)?),
            _ => None,
        };
        let qkv = self.qkv.forward(u);
        let mut concat = Array2::zeros((u.nrows(), dim));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let rows = b * self.hw..(b + 1) * self.hw;
            for head in 0..self.heads {
                let c0 = head * hd;
                let q = qkv.slice(s![rows.clone(), c0..c0 + hd]).to_owned();
                let k = qkv.slice(s![rows.clone(), dim + c0..dim + c0 + hd]).to_owned();
                let v = qkv.slice(s![rows.clone(), 2 * dim + c0..2 * dim + c0 + hd]).to_owned();
                let (o, p) = attend(&q, &k, &v, a_prime.as_ref());
                concat.slice_mut(s![rows.clone(), c0..c0 + hd]).assign(&o);
                probs.push(p);
            }
        }
        let y = self.proj.forward(&concat);
        Ok((y, MultiHeadTaaCache { u: u.clone(), qkv, probs, concat, film }))
    }

    pub fn backward(&mut self, cache: &MultiHeadTaaCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dim = self.dim();
        let hd = dim / self.heads;
        let batch = dy.nrows() / self.hw;
        let d_concat = self.proj.backward(&cache.concat, dy);
        let mut d_qkv = Array2::zeros(cache.qkv.raw_dim());
        let mut d_aprime = Array2::<F>::zeros((self.hw, self.hw));
        let mut p_iter = cache.probs.iter();
        for b in 0..batch {
            let rows = b * self.hw..(b + 1) * self.hw;
            for head in 0..self.heads {
                let c0 = head * hd;
                let q = cache.qkv.slice(s![rows.clone(), c0..c0 + hd]).to_owned();
                let k = cache.qkv.slice(s![rows.clone(), dim + c0..dim + c0 + hd]).to_owned();
                let v = cache.qkv.slice(s![rows.clone(), 2 * dim + c0..2 * dim + c0 + hd]).to_owned();
                let d_o = d_concat.slice(s![rows.clone(), c0..c0 + hd]).to_owned();
                let p = p_iter.next().expect("cache matches batch");
                let g = attend_backward(&q, &k, &v, p, &d_o);
                d_qkv.slice_mut(s![rows.clone(), c0..c0 + hd]).assign(&g.dq);
                d_qkv.slice_mut(s![rows.clone(), dim + c0..dim + c0 + hd]).assign(&g.dk);
                d_qkv.slice_mut(s![rows.clone(), 2 * dim + c0..2 * dim + c0 + hd]).assign(&g.dv);
                d_aprime += &g.dlogits;
            }
        }
        if let (Some(m), Some((task, film))) = (&mut self.modulator, &cache.film) {
            let g = film.scale.view().insert_axis(Axis(1));
            m.a.grad += &(&d_aprime * &g);
            let d_scale = (&d_aprime * &m.a.value).sum_axis(Axis(1));
            let d_shift = d_aprime.sum_axis(Axis(1));
            m.film[*task].backward(film, &d_scale, &d_shift);
        }
        self.qkv.backward(&cache.u, &d_qkv)
    }

    /// Softmax maps of every head for the first sample of `u`.
    pub fn attention_maps(&self, u: &Array2<F>, omega_t: &[F], task: usize) -> Result<Vec<Array2<F>>> {
        let (_, cache) = self.forward(u, omega_t, task)?;
        Ok(cache.probs.into_iter().take(self.heads).collect())
    }
}

impl<F: Real> Module<F> for MultiHeadTaa<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.qkv.visit_params(&scoped(prefix, "qkv"), f);
        self.proj.visit_params(&scoped(prefix, "proj"), f);
        if let Some(m) = &mut self.modulator {
            m.visit_params(&scoped(prefix, "modulator"), f);
        }
    }
}

/// Multi-head attention of `tokens` (one sample, `[hw, C]`) conditioned on
/// column `t` of `affinity`.
pub fn multi_head_taa<F: Real>(
    tokens: &Array2<F>,
    affinity: &AffinityMatrix,
    params: &MultiHeadTaa<F>,
    t: usize,
) -> Result<Array2<F>> {
    if tokens.ncols() % params.heads != 0 {
        return Err(Error::DimensionMismatch(format!(
            "channels {} not divisible by {} heads",
            tokens.ncols(),
            params.heads
        )));
    }
    let omega: Vec<F> = affinity.column(t).iter().map(|&v| F::lit(v)).collect();
    Ok(params.forward(tokens, &omega, t)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn input(rng: &mut ChaCha8Rng, hw: usize, c: usize) -> AttentionInput<f64> {
        AttentionInput {
            q: normal_array(rng, hw, c, 1.0),
            k: normal_array(rng, hw, c, 1.0),
            v: normal_array(rng, hw, c, 1.0),
            heads: 1,
            h: hw,
            w: 1,
        }
    }

    fn set_film(m: &mut LogitModulator<f64>, t: usize, scale: f64, shift: f64) {
        let g = &mut m.film[t];
        g.gamma2.weight.value.fill(0.0);
        g.gamma2.bias.as_mut().unwrap().value.fill(scale);
        g.beta2.weight.value.fill(0.0);
        g.beta2.bias.as_mut().unwrap().value.fill(shift);
    }

    #[test]
    fn single_token_returns_value() {
        let mut r = rng(0);
        let inp = input(&mut r, 1, 3);
        let out = self_attention(&inp).unwrap();
        assert_eq!(out, inp.v);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut r = rng(1);
        let mut inp = input(&mut r, 4, 2);
        let k0 = inp.k.row(0).to_owned();
        for mut row in inp.k.rows_mut() {
            row.assign(&k0);
        }
        let out = self_attention(&inp).unwrap();
        let mean = inp.v.mean_axis(Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_and_zero_modulation() {
        let mut r = rng(2);
        let mut m = LogitModulator::<f64>::new(&mut r, 4, 3, );
        let omega = [0.2, 0.3, 0.5];
        let a1 = film_modulate(&omega, &m, 1).unwrap();
        assert_eq!(a1, m.a.value);
        set_film(&mut m, 1, 0.0, 0.0);
        let a0 = film_modulate(&omega, &m, 1).unwrap();
        assert!(a0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modulate_rejects_wrong_lengths() {
        let a = Array2::<f64>::zeros((4, 4));
        let err = modulate(&a, &Array1::zeros(3), &Array1::zeros(4)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn constant_row_logits_reduce_to_self_attention() {
        let mut r = rng(3);
        let inp = input(&mut r, 4, 2);
        let mut m = LogitModulator::<f64>::new(&mut r, 4, 2);
        let omega = [0.5, 0.5];
        set_film(&mut m, 0, 0.0, 0.0);
        let sa = self_attention(&inp).unwrap();
        let taa = task_adapted_attention(&inp, &omega, &m, 0).unwrap();
        assert!((&sa - &taa).iter().all(|d| d.abs() < 1e-12));
        set_film(&mut m, 0, 0.0, 3.7);
        let taa = task_adapted_attention(&inp, &omega, &m, 0).unwrap();
        assert!((&sa - &taa).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn multi_head_preserves_shape_and_rejects_bad_heads() {
        let mut r = rng(4);
        for (hw, c, heads) in [(4, 8, 2), (16, 12, 3), (1, 4, 4)] {
            let mha = MultiHeadTaa::<f64>::new(&mut r, c, heads, hw, 3, true).unwrap();
            let x = normal_array(&mut r, hw, c, 1.0);
            let y = multi_head_taa(&x, &AffinityMatrix::uniform(3), &mha, 2).unwrap();
            assert_eq!(y.dim(), x.dim());
        }
        assert!(MultiHeadTaa::<f64>::new(&mut r, 10, 3, 4, 3, true).is_err());
    }

    #[test]
    fn distinct_affinity_columns_change_the_output() {
        let mut r = rng(5);
        let mut mha = MultiHeadTaa::<f64>::new(&mut r, 8, 2, 4, 3, true).unwrap();
        let m = mha.modulator.as_mut().unwrap();
        for g in &mut m.film {
            g.gamma2.weight.value = normal_array(&mut r, FILM_HIDDEN, 4, 0.5);
        }
        m.a.value = normal_array(&mut r, 4, 4, 1.0);
        let x = normal_array(&mut r, 4, 8, 1.0);
        let ya = mha.forward(&x, &[0.7, 0.2, 0.1], 0).unwrap().0;
        let yb = mha.forward(&x, &[0.1, 0.1, 0.8], 0).unwrap().0;
        let diff = (&ya - &yb).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff > 0.0);
    }
}
