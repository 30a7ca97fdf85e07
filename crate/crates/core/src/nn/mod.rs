//! Minimal dense layers with hand-written backward passes.
//!
//! Every layer works on token matrices of shape `[rows, channels]` and is
//! generic over [`Real`] so the same code runs in `f32` for training and in
//! `f64` for finite-difference gradient checks. Forward passes return an
//! explicit cache; backward passes accumulate into [`Param::grad`] and return
//! the gradient with respect to the layer input.

mod attention;
mod block;
mod layers;

pub use attention::{attend, attend_backward, AttendGrads, WindowAttention, WindowAttentionCache};
pub use block::{PatchExpand, SwinBlock, SwinBlockCache};
pub use layers::{
    gelu, gelu_backward, normalize_rows, normalize_rows_backward, softmax_rows_inplace, LayerNorm,
    LnCache, Linear,
};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating point type the network can run in.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A trainable tensor with its gradient accumulator. Vectors are stored as
/// `[1, n]` rows so every parameter shares one shape type.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: Array2<F>,
    pub grad: Array2<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: Array2<F>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Self::new(Array2::from_elem((rows, cols), v))
    }

    pub fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Self {
        Self::new(normal_array(rng, rows, cols, std))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

pub fn normal_array<F: Real, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || F::lit(dist.sample(rng)))
}

/// Anything that owns parameters. Names are dotted paths and are stable
/// across runs; checkpoints key tensors by them.
pub trait Module<F: Real> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));
}

pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn count_params<F: Real>(m: &mut dyn Module<F>) -> usize {
    let mut n = 0;
    m.visit_params("", &mut |_, p| n += p.len());
    n
}

pub fn zero_grads<F: Real>(m: &mut dyn Module<F>) {
    m.visit_params("", &mut |_, p| p.zero_grad());
}

/// Copies rows `rows` and columns `col0..col0 + ncols` of `src` into a dense block.
pub fn gather_block<F: Real>(src: &Array2<F>, rows: &[usize], col0: usize, ncols: usize) -> Array2<F> {
    let mut out = Array2::zeros((rows.len(), ncols));
    for (i, &r) in rows.iter().enumerate() {
        let s = src.row(r);
        let mut o = out.row_mut(i);
        for c in 0..ncols {
            o[c] = s[col0 + c];
        }
    }
    out
}

/// Inverse of [`gather_block`], accumulating.
pub fn scatter_add_block<F: Real>(dst: &mut Array2<F>, rows: &[usize], col0: usize, block: &Array2<F>) {
    for (i, &r) in rows.iter().enumerate() {
        let b = block.row(i);
        let mut d = dst.row_mut(r);
        for c in 0..block.ncols() {
            d[col0 + c] += b[c];
        }
    }
}

/// SHA-256 over parameter names and shapes.
pub fn architecture_digest<F: Real>(m: &mut dyn Module<F>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    m.visit_params("", &mut |name, p| {
        h.update(name.as_bytes());
        h.update(format!("{:?}", p.value.dim()).as_bytes());
    });
    hex::encode(h.finalize())
}

/// SHA-256 over parameter names and values.
pub fn parameter_digest<F: Real>(m: &mut dyn Module<F>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    m.visit_params("", &mut |name, p| {
        h.update(name.as_bytes());
        for v in p.value.iter() {
            h.update(v.as_f64().to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}
