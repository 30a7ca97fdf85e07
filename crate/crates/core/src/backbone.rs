//! Frozen four-stage windowed-attention encoder.
//!
//! Weights are drawn from a fixed seed instead of being pretrained. Layer
//! norm parameters are perturbed away from `1`/`0` so that the norms adapters
//! inherit carry information.

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterChain, AdapterConfig, Placement, StageGeometry};
use crate::error::{Error, Result};
use crate::nn::{normal_array, scoped, LayerNorm, Linear, Module, Param, Real, SwinBlock};

pub const DEFAULT_BACKBONE_SEED: u64 = 0x5EED_BA5E;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub stage_depths: [usize; 4],
    /// How much the reference depths were shrunk; drives the default placements.
    pub depth_divisor: usize,
    pub window_size: usize,
    pub heads: [usize; 4],
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            embed_dim: 32,
            stage_depths: [1, 1, 4, 2],
            depth_divisor: 4,
            window_size: 4,
            heads: [2, 4, 8, 16],
            mlp_ratio: 4,
            seed: DEFAULT_BACKBONE_SEED,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let grid = self.image_size / self.patch_size.max(1);
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if grid % 8 != 0 {
            return Err(Error::Config(format!("token grid {grid} must halve three times")));
        }
        for s in 0..4 {
            let g = grid >> s;
            let win = self.window_size.min(g);
            if win == 0 || g % win != 0 {
                return Err(Error::Config(format!("stage {} grid {g} not tiled by window {}", s + 1, self.window_size)));
            }
            let dim = self.embed_dim << s;
            if self.heads[s] == 0 || dim % self.heads[s] != 0 {
                return Err(Error::Config(format!("stage {} width {dim} not divisible by {} heads", s + 1, self.heads[s])));
            }
            if self.stage_depths[s] == 0 {
                return Err(Error::Config(format!("stage {} has no layers", s + 1)));
            }
        }
        if self.depth_divisor == 0 {
            return Err(Error::Config("depth divisor must be positive".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> [StageGeometry; 4] {
        let grid = self.image_size / self.patch_size;
        std::array::from_fn(|s| StageGeometry { h: grid >> s, w: grid >> s, dim: self.embed_dim << s })
    }
}

/// Last `ceil(4 / divisor)` layers of stage 3 and every layer of stage 4.
pub fn default_placements(depths: &[usize; 4], divisor: usize) -> Vec<Placement> {
    let n3 = 4usize.div_ceil(divisor.max(1)).min(depths[2]);
    let mut out: Vec<_> = (depths[2] - n3 + 1..=depths[2]).map(|l| Placement::new(3, l)).collect();
    out.extend((1..=depths[3]).map(|l| Placement::new(4, l)));
    out
}

pub fn validate_placements(placements: &[Placement], depths: &[usize; 4]) -> Result<()> {
    if placements.is_empty() {
        return Err(Error::InvalidPlacement("no placements".into()));
    }
    for p in placements {
        if !(1..=4).contains(&p.stage) {
            return Err(Error::InvalidPlacement(format!("{p}: stage must be 1..=4")));
        }
        let depth = depths[p.stage - 1];
        if p.layer == 0 || p.layer > depth {
            return Err(Error::InvalidPlacement(format!("{p}: stage {} has {depth} layers", p.stage)));
        }
    }
    if placements.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidPlacement("placements must be strictly increasing".into()));
    }
    Ok(())
}

/// Concatenates each 2x2 neighbourhood, normalizes and projects `4C -> 2C`.
#[derive(Clone, Debug)]
pub struct PatchMerging<F> {
    pub norm: LayerNorm<F>,
    pub reduction: Linear<F>,
    pub h: usize,
    pub w: usize,
}

impl<F: Real> PatchMerging<F> {
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let (h, w) = (self.h, self.w);
        let c = x.ncols();
        let batch = x.nrows() / (h * w);
        let (h2, w2) = (h / 2, w / 2);
        let mut cat = Array2::zeros((batch * h2 * w2, 4 * c));
        for b in 0..batch {
            for i in 0..h2 {
                for j in 0..w2 {
                    let mut dst = cat.row_mut(b * h2 * w2 + i * w2 + j);
                    for (g, (di, dj)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
                        let src = x.row(b * h * w + (2 * i + di) * w + 2 * j + dj);
                        dst.slice_mut(s![g * c..(g + 1) * c]).assign(&src);
                    }
                }
            }
        }
        self.reduction.forward(&self.norm.forward(&cat).0)
    }
}

impl<F: Real> Module<F> for PatchMerging<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.norm.visit_params(&scoped(prefix, "norm"), f);
        self.reduction.visit_params(&scoped(prefix, "reduction"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Stage<F> {
    pub merge: Option<PatchMerging<F>>,
    pub blocks: Vec<SwinBlock<F>>,
}

/// Outputs of every layer, grouped by stage, for one batch.
#[derive(Clone, Debug)]
pub struct StageFeatures<F> {
    pub geometry: [StageGeometry; 4],
    /// `layers[s][l]` is the output of layer `l + 1` of stage `s + 1`.
    pub layers: Vec<Vec<Array2<F>>>,
}

impl<F> StageFeatures<F> {
    pub fn at(&self, p: Placement) -> &Array2<F> {
        &self.layers[p.stage - 1][p.layer - 1]
    }

    /// Output of the last layer of a 1-based stage.
    pub fn stage_output(&self, stage: usize) -> &Array2<F> {
        self.layers[stage - 1].last().expect("stages are non-empty")
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<F> {
    pub config: BackboneConfig,
    pub patch_embed: Linear<F>,
    pub patch_norm: LayerNorm<F>,
    pub stages: Vec<Stage<F>>,
}

fn perturb_norm<F: Real, R: Rng + ?Sized>(rng: &mut R, norm: &mut LayerNorm<F>) {
    let dim = norm.dim();
    norm.weight.value = normal_array::<F, _>(rng, 1, dim, 0.1).mapv(|v| v + F::one());
    norm.bias.value = normal_array(rng, 1, dim, 0.05);
}

impl<F: Real> Backbone<F> {
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let p = config.patch_size;
        let geo = config.geometry();
        let patch_embed = Linear::new(&mut rng, 3 * p * p, config.embed_dim, true);
        let mut patch_norm = LayerNorm::new(config.embed_dim);
        perturb_norm(&mut rng, &mut patch_norm);
        let mut stages = Vec::with_capacity(4);
        for (s, g) in geo.iter().enumerate() {
            let merge = (s > 0).then(|| {
                let prev = geo[s - 1];
                let mut norm = LayerNorm::new(4 * prev.dim);
                perturb_norm(&mut rng, &mut norm);
                PatchMerging { norm, reduction: Linear::new(&mut rng, 4 * prev.dim, g.dim, false), h: prev.h, w: prev.w }
            });
            let blocks = (0..config.stage_depths[s])
                .map(|_| {
                    let mut b =
                        SwinBlock::new(&mut rng, g.dim, config.heads[s], g.h, g.w, config.window_size, config.mlp_ratio);
                    perturb_norm(&mut rng, &mut b.norm1);
                    perturb_norm(&mut rng, &mut b.norm2);
                    b
                })
                .collect();
            stages.push(Stage { merge, blocks });
        }
        Ok(Self { config: config.clone(), patch_embed, patch_norm, stages })
    }

    pub fn geometry(&self) -> [StageGeometry; 4] {
        self.config.geometry()
    }

    /// Non-overlapping patches flattened in `(row, col, channel)` order and
    /// projected to the base width. `images` is a stack of `[H, W, 3]` arrays.
    pub fn patch_embed(&self, images: &[&Array3<F>]) -> Result<Array2<F>> {
        let n = self.config.image_size;
        let p = self.config.patch_size;
        let g = n / p;
        let mut patches = Array2::zeros((images.len() * g * g, 3 * p * p));
        for (b, img) in images.iter().enumerate() {
            if img.dim() != (n, n, 3) {
                return Err(Error::DimensionMismatch(format!("image {:?}, expected ({n}, {n}, 3)", img.dim())));
            }
            for i in 0..g {
                for j in 0..g {
                    let mut row = patches.row_mut(b * g * g + i * g + j);
                    let block = img.slice(s![i * p..(i + 1) * p, j * p..(j + 1) * p, ..]);
                    for (dst, &v) in row.iter_mut().zip(block.iter()) {
                        *dst = v;
                    }
                }
            }
        }
        Ok(self.patch_embed.forward(&patches))
    }

    /// Features of every layer. Gradients never flow into the backbone.
    pub fn encoder_forward(&self, images: &[&Array3<F>]) -> Result<StageFeatures<F>> {
        let mut x = self.patch_norm.forward(&self.patch_embed(images)?).0;
        let mut layers = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                x = m.forward(&x);
            }
            let mut outs = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                x = block.forward(&x).0;
                outs.push(x.clone());
            }
            layers.push(outs);
        }
        Ok(StageFeatures { geometry: self.geometry(), layers })
    }

    /// The post-attention norm of the layer at `p`, as `(gamma, beta)`.
    pub fn norm_at(&self, p: Placement) -> (Array2<F>, Array2<F>) {
        let n = &self.stages[p.stage - 1].blocks[p.layer - 1].norm2;
        (n.weight.value.clone(), n.bias.value.clone())
    }

    pub fn resolve_placements(&self, config: &AdapterConfig) -> Result<Vec<Placement>> {
        let placements = match &config.placements {
            Some(p) => p.clone(),
            None => default_placements(&self.config.stage_depths, self.config.depth_divisor),
        };
        validate_placements(&placements, &self.config.stage_depths)?;
        Ok(placements)
    }

    /// Builds the adapter chain hooked onto this backbone's placements.
    pub fn attach_adapters<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        config: &AdapterConfig,
        num_tasks: usize,
    ) -> Result<AdapterChain<F>> {
        let placements = self.resolve_placements(config)?;
        let norms = placements.iter().map(|&p| self.norm_at(p)).collect();
        AdapterChain::new(rng, &placements, &self.geometry(), num_tasks, config, norms)
    }
}

impl<F: Real> Module<F> for Backbone<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.patch_embed.visit_params(&scoped(prefix, "patch_embed"), f);
        self.patch_norm.visit_params(&scoped(prefix, "patch_norm"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let sp = scoped(prefix, &format!("stage{}", s + 1));
            if let Some(m) = &mut stage.merge {
                m.visit_params(&scoped(&sp, "merge"), f);
            }
            for (l, b) in stage.blocks.iter_mut().enumerate() {
                b.visit_params(&scoped(&sp, &format!("layer{}", l + 1)), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::count_params;

    fn image(seed: u64, n: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((n, n, 3), || rng.random::<f64>())
    }

    #[test]
    fn patch_embed_shapes_and_bias() {
        let bb = Backbone::<f64>::new(&BackboneConfig::default()).unwrap();
        let zero = Array3::zeros((64, 64, 3));
        let t = bb.patch_embed(&[&zero]).unwrap();
        assert_eq!(t.dim(), (256, 32));
        let bias = &bb.patch_embed.bias.as_ref().unwrap().value;
        assert!(t.rows().into_iter().all(|r| r == bias.row(0)));
        assert!(bb.patch_embed(&[&Array3::zeros((32, 32, 3))]).is_err());
    }

    #[test]
    fn patch_embed_matches_direct_product() {
        let bb = Backbone::<f64>::new(&BackboneConfig::default()).unwrap();
        let img = image(3, 64);
        let t = bb.patch_embed(&[&img]).unwrap();
        let w = &bb.patch_embed.weight.value;
        let b = &bb.patch_embed.bias.as_ref().unwrap().value;
        for (ti, tj, c) in [(0, 0, 0), (5, 11, 17), (15, 15, 31)] {
            let mut acc = b[[0, c]];
            let mut k = 0;
            for dy in 0..4 {
                for dx in 0..4 {
                    for ch in 0..3 {
                        acc += img[[ti * 4 + dy, tj * 4 + dx, ch]] * w[[k, c]];
                        k += 1;
                    }
                }
            }
            assert!((t[[ti * 16 + tj, c]] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn pyramid_shapes_and_determinism() {
        let bb = Backbone::<f64>::new(&BackboneConfig::default()).unwrap();
        let img = image(4, 64);
        let f1 = bb.encoder_forward(&[&img]).unwrap();
        let f2 = bb.encoder_forward(&[&img]).unwrap();
        for s in 0..4 {
            assert_eq!(f1.layers[s], f2.layers[s]);
            let out = f1.stage_output(s + 1);
            assert_eq!(out.dim(), (256 >> (2 * s), 32 << s));
        }
    }

    #[test]
    fn micro_encoder_is_manual_composition() {
        let cfg = BackboneConfig {
            image_size: 16,
            patch_size: 2,
            embed_dim: 8,
            stage_depths: [1, 1, 1, 1],
            window_size: 2,
            heads: [1, 2, 2, 4],
            ..Default::default()
        };
        let bb = Backbone::<f64>::new(&cfg).unwrap();
        let img = image(5, 16);
        let feats = bb.encoder_forward(&[&img]).unwrap();
        let mut x = bb.patch_norm.forward(&bb.patch_embed(&[&img]).unwrap()).0;
        for (s, stage) in bb.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                x = m.forward(&x);
            }
            x = stage.blocks[0].forward(&x).0;
            assert_eq!(feats.layers[s][0], x);
        }
    }

    #[test]
    fn placement_rules() {
        let paper = default_placements(&[2, 2, 18, 2], 1);
        let expect: Vec<_> = [(3, 15), (3, 16), (3, 17), (3, 18), (4, 1), (4, 2)]
            .into_iter()
            .map(|(s, l)| Placement::new(s, l))
            .collect();
        assert_eq!(paper, expect);
        let toy = default_placements(&[1, 1, 4, 2], 4);
        assert_eq!(toy, vec![Placement::new(3, 4), Placement::new(4, 1), Placement::new(4, 2)]);
        let err = validate_placements(&[Placement::new(3, 19)], &[2, 2, 18, 2]).unwrap_err();
        assert!(matches!(err, Error::InvalidPlacement(_)));
        assert!(validate_placements(&[Placement::new(5, 1)], &[2, 2, 18, 2]).is_err());
    }

    #[test]
    fn attach_uses_backbone_norms() {
        let bb = Backbone::<f64>::new(&BackboneConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let chain = bb.attach_adapters(&mut rng, &AdapterConfig::default(), 4).unwrap();
        assert_eq!(chain.blocks.len(), 3);
        let (g, _) = bb.norm_at(Placement::new(3, 4));
        assert_eq!(chain.blocks[0].tsn.gamma_prime.value, g);
        let bad = AdapterConfig { placements: Some(vec![Placement::new(3, 5)]), ..Default::default() };
        assert!(bb.attach_adapters(&mut rng, &bad, 4).is_err());
    }

    #[test]
    fn toy_backbone_size() {
        let mut bb = Backbone::<f32>::new(&BackboneConfig::default()).unwrap();
        let n = count_params(&mut bb);
        assert!((2_500_000..2_700_000).contains(&n), "{n}");
    }
}
