use ndarray::{Array2, Axis};
use rand::Rng;

use super::layers::{softmax_rows_inplace, Linear};
use super::{gather_block, scatter_add_block, scoped, Module, Param, Real};

/// Single-head scaled dot-product attention with an optional additive logit
/// bias: `softmax(q kᵀ / sqrt(d) + bias) v`. Returns `(output, probabilities)`.
pub fn attend<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    bias: Option<&Array2<F>>,
) -> (Array2<F>, Array2<F>) {
    let scale = F::one() / F::from_usize(q.ncols()).unwrap().sqrt();
    let mut logits = q.dot(&k.t()) * scale;
    if let Some(b) = bias {
        logits += b;
    }
    softmax_rows_inplace(&mut logits);
    let out = logits.dot(v);
    (out, logits)
}

pub struct AttendGrads<F> {
    pub dq: Array2<F>,
    pub dk: Array2<F>,
    pub dv: Array2<F>,
    /// Gradient w.r.t. the pre-softmax logits (and hence any additive bias).
    pub dlogits: Array2<F>,
}

pub fn attend_backward<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    probs: &Array2<F>,
    d_out: &Array2<F>,
) -> AttendGrads<F> {
    let scale = F::one() / F::from_usize(q.ncols()).unwrap().sqrt();
    let dv = probs.t().dot(d_out);
    let dp = d_out.dot(&v.t());
    let mut dlogits = &dp * probs;
    let row_dot = dlogits.sum_axis(Axis(1)).insert_axis(Axis(1));
    dlogits -= &(probs * &row_dot);
    let dq = dlogits.dot(k) * scale;
    let dk = dlogits.t().dot(q) * scale;
    AttendGrads { dq, dk, dv, dlogits }
}

/// Non-overlapping window multi-head self-attention with a learned relative
/// position bias, on a fixed `h x w` token grid.
#[derive(Clone, Debug)]
pub struct WindowAttention<F> {
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub rel_bias: Param<F>,
    pub heads: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    rel_index: Vec<usize>,
    windows: Vec<Vec<usize>>,
}

pub struct WindowAttentionCache<F> {
    x: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    concat: Array2<F>,
}

impl<F: Real> WindowAttention<F> {
    /// `window` is clipped to the grid so small late-stage maps attend globally.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        dim: usize,
        heads: usize,
        h: usize,
        w: usize,
        window: usize,
    ) -> Self {
        assert!(dim % heads == 0, "channels {dim} not divisible by heads {heads}");
        let window = window.min(h).min(w);
        assert!(h % window == 0 && w % window == 0, "grid {h}x{w} not tiled by window {window}");
        let side = 2 * window - 1;
        let mut rel_index = Vec::with_capacity(window.pow(4));
        for i in 0..window * window {
            for j in 0..window * window {
                let (yi, xi) = (i / window, i % window);
                let (yj, xj) = (j / window, j % window);
                let dy = yi + window - 1 - yj;
                let dx = xi + window - 1 - xj;
                rel_index.push(dy * side + dx);
            }
        }
        let mut windows = Vec::new();
        for wy in 0..h / window {
            for wx in 0..w / window {
                let mut idx = Vec::with_capacity(window * window);
                for y in 0..window {
                    for x in 0..window {
                        idx.push((wy * window + y) * w + wx * window + x);
                    }
                }
                windows.push(idx);
            }
        }
        Self {
            qkv: Linear::new(rng, dim, 3 * dim, true),
            proj: Linear::new(rng, dim, dim, true),
            rel_bias: Param::normal(rng, side * side, heads, 0.02),
            heads,
            h,
            w,
            window,
            rel_index,
            windows,
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.d_out()
    }

    fn bias_for_head(&self, head: usize) -> Array2<F> {
        let n = self.window * self.window;
        Array2::from_shape_fn((n, n), |(i, j)| self.rel_bias.value[[self.rel_index[i * n + j], head]])
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, WindowAttentionCache<F>) {
        let dim = self.dim();
        let hd = dim / self.heads;
        let tokens = self.h * self.w;
        let batch = x.nrows() / tokens;
        let qkv = self.qkv.forward(x);
        let biases: Vec<_> = (0..self.heads).map(|h| self.bias_for_head(h)).collect();
        let mut concat = Array2::zeros((x.nrows(), dim));
        let mut probs = Vec::with_capacity(batch * self.windows.len() * self.heads);
        let mut rows = vec![0; self.window * self.window];
        for b in 0..batch {
            for win in &self.windows {
                for (r, &i) in rows.iter_mut().zip(win) {
                    *r = b * tokens + i;
                }
                for head in 0..self.heads {
                    let q = gather_block(&qkv, &rows, head * hd, hd);
                    let k = gather_block(&qkv, &rows, dim + head * hd, hd);
                    let v = gather_block(&qkv, &rows, 2 * dim + head * hd, hd);
                    let (o, p) = attend(&q, &k, &v, Some(&biases[head]));
                    scatter_add_block(&mut concat, &rows, head * hd, &o);
                    probs.push(p);
                }
            }
        }
        let y = self.proj.forward(&concat);
        (y, WindowAttentionCache { x: x.clone(), qkv, probs, concat })
    }

    pub fn backward(&mut self, cache: &WindowAttentionCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dim = self.dim();
        let hd = dim / self.heads;
        let tokens = self.h * self.w;
        let batch = dy.nrows() / tokens;
        let n = self.window * self.window;
        let d_concat = self.proj.backward(&cache.concat, dy);
        let mut d_qkv = Array2::zeros(cache.qkv.raw_dim());
        let mut rows = vec![0; n];
        let mut p_iter = cache.probs.iter();
        for b in 0..batch {
            for win in &self.windows {
                for (r, &i) in rows.iter_mut().zip(win) {
                    *r = b * tokens + i;
                }
                for head in 0..self.heads {
                    let p = p_iter.next().expect("cache matches batch");
                    let q = gather_block(&cache.qkv, &rows, head * hd, hd);
                    let k = gather_block(&cache.qkv, &rows, dim + head * hd, hd);
                    let v = gather_block(&cache.qkv, &rows, 2 * dim + head * hd, hd);
                    let d_o = gather_block(&d_concat, &rows, head * hd, hd);
                    let g = attend_backward(&q, &k, &v, p, &d_o);
                    scatter_add_block(&mut d_qkv, &rows, head * hd, &g.dq);
                    scatter_add_block(&mut d_qkv, &rows, dim + head * hd, &g.dk);
                    scatter_add_block(&mut d_qkv, &rows, 2 * dim + head * hd, &g.dv);
                    for i in 0..n {
                        for j in 0..n {
                            self.rel_bias.grad[[self.rel_index[i * n + j], head]] += g.dlogits[[i, j]];
                        }
                    }
                }
            }
        }
        self.qkv.backward(&cache.x, &d_qkv)
    }

    /// Attention probabilities of one head for every window of the first sample.
    pub fn attention_maps(&self, x: &Array2<F>, head: usize) -> Vec<Array2<F>> {
        let (_, cache) = self.forward(x);
        (0..self.windows.len())
            .map(|wi| cache.probs[wi * self.heads + head].clone())
            .collect()
    }
}

impl<F: Real> Module<F> for WindowAttention<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.qkv.visit_params(&scoped(prefix, "qkv"), f);
        self.proj.visit_params(&scoped(prefix, "proj"), f);
        f(&scoped(prefix, "rel_bias"), &mut self.rel_bias);
    }
}
