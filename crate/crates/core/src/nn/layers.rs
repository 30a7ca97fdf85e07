use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use super::{scoped, Module, Param, Real};

/// Affine map `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
}

impl<F: Real> Linear<F> {
    /// LeCun-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize, bias: bool) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Self {
            weight: Param::normal(rng, d_in, d_out, std),
            bias: bias.then(|| Param::zeros(1, d_out)),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Param::zeros(d_in, d_out),
            bias: bias.then(|| Param::zeros(1, d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.value);
        if let Some(b) = &self.bias {
            y += &b.value;
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        self.accumulate(x, dy);
        dy.dot(&self.weight.value.t())
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&mut self, x: &Array2<F>, dy: &Array2<F>) {
        self.weight.grad += &x.t().dot(dy);
        if let Some(b) = &mut self.bias {
            b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&scoped(prefix, "bias"), b);
        }
    }
}

/// Per-row standardization: returns `(x - mean) / sqrt(var + eps)` and the
/// per-row inverse standard deviation.
pub fn normalize_rows<F: Real>(x: &Array2<F>, eps: F) -> (Array2<F>, Array1<F>) {
    let c = F::from_usize(x.ncols()).unwrap();
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / c;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / c;
        let is = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * is);
        *s = is;
    }
    (xhat, inv_std)
}

/// Backward of [`normalize_rows`] given the gradient w.r.t. `xhat`.
pub fn normalize_rows_backward<F: Real>(
    xhat: &Array2<F>,
    inv_std: &Array1<F>,
    dxhat: &Array2<F>,
) -> Array2<F> {
    let c = F::from_usize(xhat.ncols()).unwrap();
    let mut dx = Array2::zeros(xhat.raw_dim());
    for (((mut out, xh), dxh), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(xhat.rows())
        .zip(dxhat.rows())
        .zip(inv_std.iter())
    {
        let sum_d = dxh.sum();
        let sum_dx = dxh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
        Zip::from(&mut out).and(&xh).and(&dxh).for_each(|o, &xv, &dv| {
            *o = is / c * (c * dv - sum_d - xv * sum_dx);
        });
    }
    dx
}

#[derive(Clone, Debug)]
pub struct LayerNorm<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub eps: F,
}

#[derive(Clone, Debug)]
pub struct LnCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            weight: Param::filled(1, dim, F::one()),
            bias: Param::zeros(1, dim),
            eps: F::lit(1e-5),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LnCache<F>) {
        let (xhat, inv_std) = normalize_rows(x, self.eps);
        let y = &xhat * &self.weight.value + &self.bias.value;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LnCache<F>, dy: &Array2<F>) -> Array2<F> {
        self.weight.grad += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.weight.value;
        normalize_rows_backward(&cache.xhat, &cache.inv_std, &dxhat)
    }
}

impl<F: Real> Module<F> for LayerNorm<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        f(&scoped(prefix, "bias"), &mut self.bias);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated Gaussian error linear unit.
pub fn gelu<F: Real>(x: &Array2<F>) -> Array2<F> {
    // 0.5 (1 + tanh z) == sigmoid(2z); one exp is much cheaper than tanh.
    let (c2, a) = (F::lit(2.0 * GELU_C), F::lit(GELU_A));
    x.mapv(|v| v / (F::one() + (-c2 * (v + a * v * v * v)).exp()))
}

pub fn gelu_backward<F: Real>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let (c2, a, three) = (F::lit(2.0 * GELU_C), F::lit(GELU_A), F::lit(3.0));
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = F::one() / (F::one() + (-c2 * (v + a * v * v * v)).exp());
        *d *= s + v * s * (F::one() - s) * c2 * (F::one() + three * a * v * v);
    });
    dx
}

pub fn softmax_rows_inplace<F: Real>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let m = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}
