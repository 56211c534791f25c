use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{loc_attention, prior_attention, Activation, LocMlp, PriorAttentionWeights};
use super::c3::c3_calibrate;
use super::encoder::{self, encode, FeaturePyramid};
use super::fusion::{self, film_modulate, fuse_knowledge, FilmWeights};
use super::isr::isr_masks;
use super::{DamageHeatmap, ModelConfig, ModelError, StructuralPriorGraph, IMAGE_CHANNELS};
use crate::params::{glorot_normal, ParamStore, ParamVars};
use crate::tensor::{softmax_slice, Tape, Tensor, Var};

/// Flat gather indices for nearest-neighbour resampling of a channel-last
/// `[src_h, src_w, channels]` map to `[dst_h, dst_w, channels]`.
pub fn nearest_index(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize, channels: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(dst_h * dst_w * channels);
    for y in 0..dst_h {
        let sy = y * src_h / dst_h;
        for x in 0..dst_w {
            let sx = x * src_w / dst_w;
            let base = (sy * src_w + sx) * channels;
            idx.extend(base..base + channels);
        }
    }
    idx
}

/// Fixed role of each query: the first `P` queries track one part class
/// each, the rest are spread over the damage classes round-robin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySlot {
    Part(usize),
    Damage(usize),
}

impl ModelConfig {
    pub fn query_slots(&self) -> Vec<QuerySlot> {
        (0..self.num_queries)
            .map(|i| {
                if i < self.num_part_classes {
                    QuerySlot::Part(i)
                } else {
                    QuerySlot::Damage((i - self.num_part_classes) % self.num_damage_classes)
                }
            })
            .collect()
    }
}

/// Snapshot of one query after the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceQuery {
    pub embedding: Tensor,
    pub part_assignment: Option<usize>,
}

/// How tokens get their part identity for the structural attention bias.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum TokenPartSource {
    /// Part queries use their own slot; damage queries use the argmax of a
    /// preliminary class prediction.
    Slots,
    /// Every query uses the argmax of a preliminary class prediction.
    #[default]
    Predicted,
    Explicit(Vec<Option<usize>>),
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub token_parts: TokenPartSource,
    /// Optional `[H, W, 1]` conditioning channel (bootstrap refinement).
    pub conditioning: Option<Tensor>,
}

/// One predicted instance in plain data form.
///
/// `part_probs` has `P + 1` entries (last: no object) and `damage_probs`
/// has `D + 1` entries (last: no damage).
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    /// Soft mask `[H, W]`.
    pub mask: Tensor,
    pub part_probs: Vec<f64>,
    pub damage_probs: Vec<f64>,
    pub score: f64,
    pub embedding: Vec<f64>,
}

impl InstancePrediction {
    /// Max real-part probability times max damage probability.
    pub fn compute_score(part_probs: &[f64], damage_probs: &[f64]) -> f64 {
        let real_parts = &part_probs[..part_probs.len().saturating_sub(1)];
        let p = real_parts.iter().copied().fold(0.0, f64::max);
        let d = damage_probs.iter().copied().fold(0.0, f64::max);
        p * d
    }

    pub fn binary_mask(&self) -> Vec<bool> {
        self.mask.data().iter().map(|&v| v >= 0.5).collect()
    }

    pub fn part_label(&self) -> usize {
        argmax(&self.part_probs)
    }

    pub fn damage_label(&self) -> usize {
        argmax(&self.damage_probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Tape handles for everything downstream consumers (losses, distillation)
/// need from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    /// FiLM-modulated coarsest features used by the mask head.
    pub mask_features: Var,
    /// `[h, w, N]` at mask-feature resolution.
    pub mask_logits: Var,
    /// `[H, W, N]` sigmoid masks at input resolution.
    pub masks: Var,
    /// `[N, P + 1]`.
    pub part_logits: Var,
    /// `[N, D + 1]`.
    pub damage_logits: Var,
    /// Final query embeddings `[N, d]`.
    pub queries: Var,
    /// Per-level spatial attention `[H_l, W_l]`: channel mean of squared
    /// activations.
    pub attention_maps: Vec<Var>,
    /// Query-to-pixel pooling weights `[N, h·w]`.
    pub query_attention: Var,
    /// Structural self-attention rows `[N, N]`.
    pub prior_attention: Var,
    pub channel_gate: Var,
    pub knowledge: Var,
    pub token_parts: Vec<Option<usize>>,
    pub image_size: (usize, usize),
}

impl ForwardOutput {
    pub fn num_instances(&self, tape: &Tape) -> usize {
        tape.shape(self.part_logits)[0]
    }

    pub fn predictions(&self, tape: &Tape) -> Vec<InstancePrediction> {
        let (h, w) = self.image_size;
        let n = self.num_instances(tape);
        let masks = tape.data(self.masks);
        let pl = tape.value(self.part_logits);
        let dl = tape.value(self.damage_logits);
        let (kp, kd) = (pl.shape()[1], dl.shape()[1]);
        let q = tape.value(self.queries);
        let d = q.shape()[1];
        (0..n)
            .map(|i| {
                let mask: Vec<f64> = (0..h * w).map(|px| masks[px * n + i]).collect();
                let part_probs = softmax_slice(&pl.data()[i * kp..(i + 1) * kp], 1.0);
                let damage_probs = softmax_slice(&dl.data()[i * kd..(i + 1) * kd], 1.0);
                InstancePrediction {
                    mask: Tensor::new(&[h, w], mask).expect("mask shape"),
                    score: InstancePrediction::compute_score(&part_probs, &damage_probs),
                    part_probs,
                    damage_probs,
                    embedding: q.data()[i * d..(i + 1) * d].to_vec(),
                }
            })
            .collect()
    }

    pub fn instance_queries(&self, tape: &Tape) -> Vec<InstanceQuery> {
        let q = tape.value(self.queries);
        let d = q.shape()[1];
        self.token_parts
            .iter()
            .enumerate()
            .map(|(i, &part_assignment)| InstanceQuery {
                embedding: Tensor::new(&[d], q.data()[i * d..(i + 1) * d].to_vec()).expect("row"),
                part_assignment,
            })
            .collect()
    }
}

/// A network of the block family at one capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct SlickModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn identity(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        m.data_mut()[i * n + i] = 1.0;
    }
    m
}

impl SlickModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, d, n) = (config.channels, config.query_dim, config.num_queries);
        encoder::init(&config, &mut rng, &mut store);

        let mut loc_w1 = Tensor::zeros(&[c + 1, c]);
        loc_w1.data_mut()[..c * c].copy_from_slice(identity(c).data());
        for j in 0..c {
            loc_w1.data_mut()[c * c + j] = 0.1 * Tensor::randn(&[1], 1.0, &mut rng).item();
        }
        let mut loc_w2 = identity(c);
        for (v, e) in loc_w2.data_mut().iter_mut().zip(Tensor::randn(&[c * c], 0.05, &mut rng).data()) {
            *v += e;
        }
        store.insert("loc.w1", loc_w1);
        store.insert("loc.b1", Tensor::zeros(&[c]));
        store.insert("loc.w2", loc_w2);
        store.insert("loc.b2", Tensor::zeros(&[c]));

        let reduced = c / config.se_reduction;
        store.insert("c3.w1", glorot_normal(c, reduced, &mut rng));
        store.insert("c3.w2", glorot_normal(reduced, c, &mut rng));

        fusion::init(&config, &mut rng, &mut store);

        store.insert("query.embed", Tensor::randn(&[n, d], 1.0, &mut rng));
        store.insert("pool.wk", glorot_normal(c, d, &mut rng));
        store.insert("pool.wo", glorot_normal(c, d, &mut rng));
        store.insert("attn.wq", glorot_normal(d, d, &mut rng));
        store.insert("attn.wk", glorot_normal(d, d, &mut rng));
        store.insert("attn.wv", Tensor::randn(&[d, d], 0.5 / (d as f64).sqrt(), &mut rng));

        let classes = config.part_logits() + config.damage_logits();
        store.insert("cls.w1", glorot_normal(d, d, &mut rng));
        store.insert("cls.b1", Tensor::zeros(&[d]));
        store.insert("cls.w2", glorot_normal(d, classes, &mut rng));
        store.insert("cls.b2", Tensor::zeros(&[classes]));

        let k = config.mask_kernel;
        let kdim = k * k * c;
        store.insert("phi.w", Tensor::randn(&[d, kdim], 0.5 / ((d * kdim) as f64).sqrt(), &mut rng));
        store.insert("phi.b", Tensor::zeros(&[kdim]));

        Ok(Self { config, params: store })
    }

    /// Runs the network on a tape. Parameters must already be bound.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        image: &Tensor,
        heat: &DamageHeatmap,
        graph: &StructuralPriorGraph,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.config;
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != IMAGE_CHANNELS {
            return Err(ModelError::BadInput(shape.to_vec()));
        }
        let (h, w) = (shape[0], shape[1]);
        let x = tape.constant(image.clone());
        let cond = match &opts.conditioning {
            Some(c) if c.shape() == [h, w, 1] => c.clone(),
            Some(c) => return Err(ModelError::BadInput(c.shape().to_vec())),
            None => Tensor::zeros(&[h, w, 1]),
        };
        let cond = tape.constant(cond);
        let stem_in = tape.concat(&[x, cond], 2)?;

        let pyramid = encode(tape, p, stem_in, cfg)?;
        let coarse = pyramid.last();
        let loc = LocMlp {
            w1: p.get("loc.w1")?,
            b1: p.get("loc.b1")?,
            w2: p.get("loc.w2")?,
            b2: p.get("loc.b2")?,
            activation: Activation::Relu,
        };
        let localized = loc_attention(tape, coarse, heat, &loc)?;
        let (calibrated, channel_gate) = c3_calibrate(tape, localized, p.get("c3.w1")?, p.get("c3.w2")?)?;
        let knowledge = fuse_knowledge(tape, p, x)?;
        let film = FilmWeights {
            wg: p.get("film.wg")?,
            bg: p.get("film.bg")?,
            wb: p.get("film.wb")?,
            bb: p.get("film.bb")?,
        };
        let mask_features = film_modulate(tape, calibrated, knowledge, &film)?;

        // Pixel tokens of the coarsest level pooled into the queries.
        let fs = tape.shape(mask_features).to_vec();
        let (fh, fw, c) = (fs[0], fs[1], fs[2]);
        let d = cfg.query_dim;
        let pixels = tape.reshape(mask_features, &[fh * fw, c])?;
        let keys = tape.matmul(pixels, p.get("pool.wk")?)?;
        let keys_t = tape.transpose(keys)?;
        let embed = p.get("query.embed")?;
        let scores = tape.matmul(embed, keys_t)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let query_attention = tape.softmax(scores, 1.0)?;
        let pooled = tape.matmul(query_attention, pixels)?;
        let pooled = tape.matmul(pooled, p.get("pool.wo")?)?;
        let tokens0 = tape.add(embed, pooled)?;

        let token_parts = self.token_parts(tape, p, tokens0, &opts.token_parts)?;
        let attn_w = PriorAttentionWeights {
            wq: p.get("attn.wq")?,
            wk: p.get("attn.wk")?,
            wv: p.get("attn.wv")?,
        };
        let (mixed, prior_attn) = prior_attention(tape, tokens0, graph, &token_parts, &attn_w)?;
        let queries = tape.add(tokens0, mixed)?;

        let (part_logits, damage_logits) = self.class_head(tape, p, queries)?;
        let isr = isr_masks(tape, queries, mask_features, p.get("phi.w")?, p.get("phi.b")?, cfg.mask_kernel)?;
        let n = cfg.num_queries;
        let up = nearest_index(fh, fw, h, w, n);
        let masks = tape.gather(isr.masks, up, &[h, w, n])?;

        let mut attention_maps = Vec::with_capacity(pyramid.len());
        for &level in &pyramid.levels {
            let s = tape.shape(level).to_vec();
            let sq = tape.square(level)?;
            let summed = tape.sum_last(sq)?;
            attention_maps.push(tape.scale(summed, 1.0 / s[2] as f64)?);
        }

        Ok(ForwardOutput {
            pyramid,
            mask_features,
            mask_logits: isr.logits,
            masks,
            part_logits,
            damage_logits,
            queries,
            attention_maps,
            query_attention,
            prior_attention: prior_attn,
            channel_gate,
            knowledge,
            token_parts,
            image_size: (h, w),
        })
    }

    fn class_head(&self, tape: &mut Tape, p: &ParamVars, tokens: Var) -> Result<(Var, Var), ModelError> {
        let hidden = tape.matmul(tokens, p.get("cls.w1")?)?;
        let hidden = tape.add_row(hidden, p.get("cls.b1")?)?;
        let hidden = tape.relu(hidden)?;
        let logits = tape.matmul(hidden, p.get("cls.w2")?)?;
        let logits = tape.add_row(logits, p.get("cls.b2")?)?;
        let n = tape.shape(tokens)[0];
        let (kp, kd) = (self.config.part_logits(), self.config.damage_logits());
        let width = kp + kd;
        let part_idx = (0..n).flat_map(|i| (0..kp).map(move |j| i * width + j)).collect();
        let damage_idx = (0..n).flat_map(|i| (kp..width).map(move |j| i * width + j)).collect();
        let part = tape.gather(logits, part_idx, &[n, kp])?;
        let damage = tape.gather(logits, damage_idx, &[n, kd])?;
        Ok((part, damage))
    }

    fn token_parts(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        tokens: Var,
        source: &TokenPartSource,
    ) -> Result<Vec<Option<usize>>, ModelError> {
        let n = self.config.num_queries;
        if let TokenPartSource::Explicit(v) = source {
            return Ok(v.clone());
        }
        let detached = tape.detach(tokens);
        let (part_logits, _) = self.class_head(tape, p, detached)?;
        let kp = self.config.part_logits();
        let no_object = kp - 1;
        let logits = tape.data(part_logits);
        let predicted: Vec<Option<usize>> = (0..n)
            .map(|i| {
                let a = argmax(&logits[i * kp..(i + 1) * kp]);
                (a != no_object).then_some(a)
            })
            .collect();
        Ok(match source {
            TokenPartSource::Slots => self
                .config
                .query_slots()
                .into_iter()
                .zip(predicted)
                .map(|(slot, pred)| match slot {
                    QuerySlot::Part(part) => Some(part),
                    QuerySlot::Damage(_) => pred,
                })
                .collect(),
            _ => predicted,
        })
    }

    /// Convenience inference: fresh tape, frozen parameters, plain data out.
    pub fn predict_instances(
        &self,
        image: &Tensor,
        heat: &DamageHeatmap,
        graph: &StructuralPriorGraph,
        opts: &ForwardOptions,
    ) -> Result<Vec<InstancePrediction>, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, image, heat, graph, opts)?;
        Ok(out.predictions(&tape))
    }
}
