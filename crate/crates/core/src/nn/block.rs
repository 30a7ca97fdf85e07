use ndarray::Array2;
use rand::Rng;

use super::attention::{WindowAttention, WindowAttentionCache};
use super::layers::{gelu, gelu_backward, LayerNorm, LnCache, Linear};
use super::{scoped, Module, Param, Real};

/// Pre-norm windowed transformer block: `x + WMSA(LN(x))`, then `+ MLP(LN(.))`.
#[derive(Clone, Debug)]
pub struct SwinBlock<F> {
    pub norm1: LayerNorm<F>,
    pub attn: WindowAttention<F>,
    pub norm2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct SwinBlockCache<F> {
    ln1: LnCache<F>,
    attn: WindowAttentionCache<F>,
    ln2: LnCache<F>,
    mlp_in: Array2<F>,
    hidden_pre: Array2<F>,
    hidden: Array2<F>,
}

impl<F: Real> SwinBlock<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        dim: usize,
        heads: usize,
        h: usize,
        w: usize,
        window: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: WindowAttention::new(rng, dim, heads, h, w, window),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(rng, dim, dim * mlp_ratio, true),
            fc2: Linear::new(rng, dim * mlp_ratio, dim, true),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, SwinBlockCache<F>) {
        let (u, ln1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&u);
        let x1 = x + &a;
        let (mlp_in, ln2) = self.norm2.forward(&x1);
        let hidden_pre = self.fc1.forward(&mlp_in);
        let hidden = gelu(&hidden_pre);
        let y = &x1 + &self.fc2.forward(&hidden);
        (y, SwinBlockCache { ln1, attn, ln2, mlp_in, hidden_pre, hidden })
    }

    pub fn backward(&mut self, cache: &SwinBlockCache<F>, dy: &Array2<F>) -> Array2<F> {
        let d_hidden = self.fc2.backward(&cache.hidden, dy);
        let d_pre = gelu_backward(&cache.hidden_pre, &d_hidden);
        let d_mlp_in = self.fc1.backward(&cache.mlp_in, &d_pre);
        let dx1 = dy + &self.norm2.backward(&cache.ln2, &d_mlp_in);
        let du = self.attn.backward(&cache.attn, &dx1);
        &dx1 + &self.norm1.backward(&cache.ln1, &du)
    }
}

impl<F: Real> Module<F> for SwinBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.norm1.visit_params(&scoped(prefix, "norm1"), f);
        self.attn.visit_params(&scoped(prefix, "attn"), f);
        self.norm2.visit_params(&scoped(prefix, "norm2"), f);
        self.fc1.visit_params(&scoped(prefix, "fc1"), f);
        self.fc2.visit_params(&scoped(prefix, "fc2"), f);
    }
}

/// Learned 2x upsampling: each token is projected to `4 * c_out` channels and
/// unfolded into a 2x2 block of `c_out`-channel tokens.
#[derive(Clone, Debug)]
pub struct PatchExpand<F> {
    pub linear: Linear<F>,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl<F: Real> PatchExpand<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, h: usize, w: usize) -> Self {
        Self { linear: Linear::new(rng, c_in, 4 * c_out, true), c_out, h, w }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let y = self.linear.forward(x);
        let (h, w, c) = (self.h, self.w, self.c_out);
        let batch = x.nrows() / (h * w);
        let mut out = Array2::zeros((batch * 4 * h * w, c));
        for b in 0..batch {
            for i in 0..h {
                for j in 0..w {
                    let src = y.row(b * h * w + i * w + j);
                    for g in 0..4 {
                        let (di, dj) = (g / 2, g % 2);
                        let dst = b * 4 * h * w + (2 * i + di) * 2 * w + 2 * j + dj;
                        let mut row = out.row_mut(dst);
                        for ch in 0..c {
                            row[ch] = src[g * c + ch];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        let (h, w, c) = (self.h, self.w, self.c_out);
        let batch = x.nrows() / (h * w);
        let mut d_lin = Array2::zeros((x.nrows(), 4 * c));
        for b in 0..batch {
            for i in 0..h {
                for j in 0..w {
                    let mut dst = d_lin.row_mut(b * h * w + i * w + j);
                    for g in 0..4 {
                        let (di, dj) = (g / 2, g % 2);
                        let src = dy.row(b * 4 * h * w + (2 * i + di) * 2 * w + 2 * j + dj);
                        for ch in 0..c {
                            dst[g * c + ch] = src[ch];
                        }
                    }
                }
            }
        }
        self.linear.backward(x, &d_lin)
    }
}

impl<F: Real> Module<F> for PatchExpand<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.linear.visit_params(&scoped(prefix, "linear"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_input_grad(
        forward: impl Fn(&Array2<f64>) -> Array2<f64>,
        analytic: &Array2<f64>,
        x: &Array2<f64>,
        w: &Array2<f64>,
    ) {
        let h = 1e-5;
        for idx in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = ((&forward(&xp) * w).sum() - (&forward(&xm) * w).sum()) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((num - a).abs() <= 1e-6 * (1.0 + a.abs()), "idx {idx}: {num} vs {a}");
        }
    }

    #[test]
    fn swin_block_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut block = SwinBlock::<f64>::new(&mut rng, 8, 2, 4, 4, 2, 2);
        let x = normal_array(&mut rng, 16, 8, 1.0);
        let w = normal_array(&mut rng, 16, 8, 1.0);
        let (_, cache) = block.forward(&x);
        let dx = block.backward(&cache, &w);
        check_input_grad(|x| block.forward(x).0, &dx, &x, &w);
    }

    #[test]
    fn patch_expand_doubles_grid_and_is_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut up = PatchExpand::<f64>::new(&mut rng, 6, 3, 2, 2);
        let x = normal_array(&mut rng, 2 * 4, 6, 1.0);
        let y = up.forward(&x);
        assert_eq!(y.dim(), (2 * 16, 3));
        let w = normal_array(&mut rng, 32, 3, 1.0);
        let dx = up.backward(&x, &w);
        check_input_grad(|x| up.forward(x), &dx, &x, &w);
    }
}
