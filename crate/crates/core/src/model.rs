//! The full network: frozen backbone, shared adapter chain, per-task decoders.

use ndarray::{concatenate, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterChain, AdapterConfig, ChainCache, ChainInputs, Placement};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::SEG_CLASSES;
use crate::decoders::{pixel_windows, Decoder, DecoderCache, DecoderConfig, DecoderInputs, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{count_params, parameter_digest, scoped, Module, Param, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
    pub tasks: Vec<TaskKind>,
    pub seg_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            decoder: DecoderConfig::default(),
            tasks: TaskKind::ALL.to_vec(),
            seg_classes: SEG_CLASSES,
        }
    }
}

impl ModelConfig {
    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().enumerate().map(|(i, &k)| TaskSpec::new(i, k, self.seg_classes)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
}

impl ParameterCounts {
    pub fn trainable_ratio(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Backbone maps the trainable part needs, for a batch of samples. Rows of
/// consecutive samples are stacked.
#[derive(Clone, Debug)]
pub struct Features<F> {
    /// One map per entry of [`Model::feature_keys`].
    pub maps: Vec<Array2<F>>,
    /// Input RGB, `[batch * H * W, 3]`, for the decoders' pixel guides.
    pub pixels: Array2<F>,
    pub batch: usize,
}

impl<F: Real> Features<F> {
    /// Stacks single-sample features.
    pub fn stack(items: &[&Features<F>]) -> Self {
        let n = items[0].maps.len();
        let maps = (0..n)
            .map(|k| {
                let views: Vec<_> = items.iter().map(|f| f.maps[k].view()).collect();
                concatenate(Axis(0), &views).expect("equal widths")
            })
            .collect();
        let px: Vec<_> = items.iter().map(|f| f.pixels.view()).collect();
        let pixels = concatenate(Axis(0), &px).expect("equal widths");
        Self { maps, pixels, batch: items.iter().map(|f| f.batch).sum() }
    }

    /// Splits batch features into one item per sample.
    pub fn unstack(&self) -> Vec<Features<F>> {
        let part = |m: &Array2<F>, b: usize| {
            let rows = m.nrows() / self.batch;
            m.slice(ndarray::s![b * rows..(b + 1) * rows, ..]).to_owned()
        };
        (0..self.batch)
            .map(|b| Features { maps: self.maps.iter().map(|m| part(m, b)).collect(), pixels: part(&self.pixels, b), batch: 1 })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub backbone: Backbone<F>,
    pub adapters: AdapterChain<F>,
    pub decoders: Vec<Decoder<F>>,
    feature_keys: Vec<Placement>,
}

pub struct ModelCache<F> {
    chain: ChainCache<F>,
    decoders: Vec<DecoderCache<F>>,
    adapter_stage3: bool,
    pub degenerate_tokens: usize,
}

impl<F> ModelCache<F> {
    /// Per-head softmax maps of adapter `block` for `task` on the first
    /// sample of the batch.
    pub fn attention_maps(&self, block: usize, task: usize, heads: usize) -> Option<&[Array2<F>]> {
        let probs = self.chain.block(block, task)?.attention().probs();
        probs.get(..heads)
    }
}

/// Trainable-parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    All,
    Decoders,
}

impl<F: Real> Model<F> {
    /// `seed` initializes the trainable parameters; the backbone has its own.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        if config.seg_classes < 2 || config.seg_classes > u8::MAX as usize {
            return Err(Error::Config(format!("segmentation needs 2..=255 classes, got {}", config.seg_classes)));
        }
        let backbone = Backbone::new(&config.backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks = config.task_specs();
        let adapters = backbone.attach_adapters(&mut rng, &config.adapter, tasks.len())?;
        let geo = backbone.geometry();
        let decoders = tasks
            .iter()
            .map(|&s| Decoder::new(&mut rng, s, &config.decoder, &geo))
            .collect::<Result<Vec<_>>>()?;
        if let Some(d) = decoders.first() {
            if d.output_size() != config.backbone.image_size {
                return Err(Error::Config(format!(
                    "decoder output {} does not match image size {}",
                    d.output_size(),
                    config.backbone.image_size
                )));
            }
        }
        let depths = config.backbone.stage_depths;
        let mut feature_keys = adapters.placements.clone();
        for s in 1..=4 {
            feature_keys.push(Placement::new(s, depths[s - 1]));
        }
        feature_keys.sort();
        feature_keys.dedup();
        Ok(Self { config: config.clone(), tasks, backbone, adapters, decoders, feature_keys })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn pixels(&self) -> usize {
        self.config.backbone.image_size.pow(2)
    }

    pub fn feature_keys(&self) -> &[Placement] {
        &self.feature_keys
    }

    fn key_index(&self, p: Placement) -> usize {
        self.feature_keys.binary_search(&p).expect("feature key registered")
    }

    /// Frozen backbone features of a batch of `[H, W, 3]` images.
    pub fn extract_features(&self, images: &[&Array3<F>]) -> Result<Features<F>> {
        let all = self.backbone.encoder_forward(images)?;
        let rgb: Vec<F> = images.iter().flat_map(|im| im.iter().copied()).collect();
        let pixels = Array2::from_shape_vec((rgb.len() / 3, 3), rgb).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Ok(Features { maps: self.feature_keys.iter().map(|&p| all.at(p).clone()).collect(), pixels, batch: images.len() })
    }

    /// Raw head outputs per task.
    pub fn forward(&self, features: &Features<F>, omega: &[Vec<F>]) -> Result<(Vec<Array2<F>>, ModelCache<F>)> {
        let at_placements = self.adapters.placements.iter().map(|&p| &features.maps[self.key_index(p)]).collect();
        let depths = self.config.backbone.stage_depths;
        let last = |s: usize| &features.maps[self.key_index(Placement::new(s, depths[s - 1]))];
        let inputs = ChainInputs { at_placements, final_features: last(4) };
        let (emb, chain) = self.adapters.forward(&inputs, omega)?;
        let mut raws = Vec::with_capacity(self.tasks.len());
        let mut caches = Vec::with_capacity(self.tasks.len());
        let mut adapter_stage3 = false;
        let windows = self.config.decoder.pixel_guide.then(|| pixel_windows(&features.pixels, self.config.backbone.image_size));
        for (t, dec) in self.decoders.iter().enumerate() {
            let g3 = match &emb[t].stage3 {
                Some(s3) => {
                    adapter_stage3 = true;
                    s3
                }
                None => last(3),
            };
            let di = DecoderInputs { embedding: &emb[t].stage4, guides: [g3, last(2), last(1)], pixels: windows.as_ref() };
            let (raw, c) = dec.forward(&di)?;
            raws.push(raw);
            caches.push(c);
        }
        let degenerate_tokens = chain.degenerate_tokens;
        Ok((raws, ModelCache { chain, decoders: caches, adapter_stage3, degenerate_tokens }))
    }

    /// Accumulates parameter gradients for `d_raw` (one per task) and
    /// returns, per task, the gradient with respect to the adapter input
    /// features at the first placement.
    pub fn backward(&mut self, cache: &ModelCache<F>, d_raw: &[Array2<F>]) -> Vec<Array2<F>> {
        let mut d4 = Vec::with_capacity(d_raw.len());
        let mut d3 = Vec::with_capacity(d_raw.len());
        for ((dec, c), d) in self.decoders.iter_mut().zip(&cache.decoders).zip(d_raw) {
            let (de, dg) = dec.backward(c, d);
            d4.push(de);
            d3.push(dg);
        }
        let d3 = cache.adapter_stage3.then_some(d3.as_slice());
        self.adapters.backward(&cache.chain, &d4, d3)
    }

    pub fn visit_trainable(&mut self, group: Group, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        if group == Group::All {
            self.adapters.visit_params("adapters", f);
        }
        for (t, d) in self.decoders.iter_mut().enumerate() {
            d.visit_params(&format!("decoders.{}", t), f);
        }
    }

    pub fn visit_frozen(&mut self, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.backbone.visit_params("backbone", f);
        self.adapters.visit_frozen("adapters", f);
    }

    pub fn count_parameters(&mut self) -> ParameterCounts {
        let mut trainable = 0;
        self.visit_trainable(Group::All, &mut |_, p| trainable += p.len());
        let mut frozen = 0;
        self.visit_frozen(&mut |_, p| frozen += p.len());
        ParameterCounts { total: trainable + frozen, trainable, frozen }
    }

    pub fn backbone_parameter_count(&mut self) -> usize {
        count_params(&mut self.backbone)
    }

    /// Digest of every frozen parameter value.
    pub fn frozen_digest(&mut self) -> String {
        struct Frozen<'a, F>(&'a mut Model<F>);
        impl<F: Real> Module<F> for Frozen<'_, F> {
            fn visit_params(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
                self.0.visit_frozen(f);
            }
        }
        parameter_digest(&mut Frozen(self))
    }

    pub fn zero_grads(&mut self) {
        self.visit_trainable(Group::All, &mut |_, p| p.zero_grad());
    }
}

/// Exposes all trainable parameters as one module, e.g. for gradient checks.
impl<F: Real> Module<F> for Model<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.visit_trainable(Group::All, &mut |name, p| f(&scoped(prefix, name), p));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::AffinityMatrix;
    use crate::adapter::affinity_columns;

    #[test]
    fn default_model_budget() {
        let mut m = Model::<f32>::new(&ModelConfig::default(), 0).unwrap();
        let c = m.count_parameters();
        assert!(c.trainable_ratio() < 0.40, "{c:?}");
        assert_eq!(c.frozen, m.backbone_parameter_count() + m.adapters.blocks.iter().map(|b| 2 * b.dim()).sum::<usize>());
    }

    #[test]
    fn forward_shapes_and_feature_stacking() {
        let m = Model::<f32>::new(&ModelConfig::default(), 0).unwrap();
        let imgs: Vec<_> = (0..2).map(|s| crate::data::render_seed(s, crate::data::Domain::A, 64).image).collect();
        let both = m.extract_features(&[&imgs[0], &imgs[1]]).unwrap();
        let one = m.extract_features(&[&imgs[1]]).unwrap();
        let split = both.unstack();
        for (a, b) in split[1].maps.iter().zip(&one.maps) {
            let diff = (a - b).iter().fold(0f32, |m, v| m.max(v.abs()));
            assert!(diff < 1e-4);
        }
        let omega = affinity_columns::<f32>(&AffinityMatrix::uniform(4));
        let (raws, _) = m.forward(&both, &omega).unwrap();
        for (r, t) in raws.iter().zip(&m.tasks) {
            assert_eq!(r.dim(), (2 * 4096, t.head_channels));
        }
    }
}
