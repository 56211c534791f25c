//! Teacher-to-student transfer: mask, class, feature, graph-relational and
//! attention distillation, multi-scale supervision, the combined training
//! objective and the softmax Lipschitz bound.

mod kd;

pub use kd::{
    attn_transfer, class_kd, feature_kd, graph_kd, kl_rows, mask_kd, node_embeddings, resample, standardize,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{ForwardOutput, ModelConfig, ModelError, StructuralPriorGraph};
use crate::losses::{greedy_match, soft_iou};
use crate::params::{glorot_normal, ParamError, ParamStore, ParamVars};
use crate::tensor::{softmax_slice, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("{op}: shapes differ ({lhs:?} vs {rhs:?})")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("teacher has {teacher} aligned levels, student {student}")]
    Levels { teacher: usize, student: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("node {0} out of range")]
    Node(usize),
    #[error("attention map sums to zero")]
    EmptyAttention,
    #[error("invalid distill config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// Minimum soft-mask IoU for pairing a teacher instance with a student one.
pub const DISTILL_MATCH_IOU: f64 = 0.1;

/// Distillation weights. Serialized under the `distill` key of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub lambda_g: f64,
    /// Weight of attention-map transfer inside the composite term.
    pub lambda_attn: f64,
    /// Per-scale weights; scale `s` pools every spatial map `s` times.
    pub alpha: Vec<f64>,
    pub lambda_kd: f64,
    pub lambda_multi: f64,
    pub lambda_refine: f64,
    /// Cross-entropy, soft-target and feature weights of the three-term
    /// objective used when `appendix_mode` is set.
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub appendix_mode: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            lambda_m: 1.0,
            lambda_c: 1.0,
            lambda_f: 0.5,
            lambda_g: 0.5,
            lambda_attn: 0.0,
            alpha: vec![0.5, 0.5],
            lambda_kd: 1.0,
            lambda_multi: 0.5,
            lambda_refine: 0.1,
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_3: 0.5,
            appendix_mode: false,
        }
    }
}

/// Weights after resolving the preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveWeights {
    pub seg: f64,
    pub mask: f64,
    pub class: f64,
    pub class_temperature: f64,
    pub feature: f64,
    pub graph: f64,
    pub attn: f64,
    pub kd: f64,
    pub multi: f64,
    pub refine: f64,
    pub mask_temperature: f64,
}

impl DistillConfig {
    /// Three-term preset: `λ₁·CE + λ₂·KL(softmax(z_T/τ) ‖ softmax(z_S/τ)) +
    /// λ₃·feature`, expressed through the same machinery.
    pub fn appendix() -> Self {
        Self {
            appendix_mode: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DistillError::Temperature(self.temperature));
        }
        let named = [
            ("lambda_m", self.lambda_m),
            ("lambda_c", self.lambda_c),
            ("lambda_f", self.lambda_f),
            ("lambda_g", self.lambda_g),
            ("lambda_attn", self.lambda_attn),
            ("lambda_kd", self.lambda_kd),
            ("lambda_multi", self.lambda_multi),
            ("lambda_refine", self.lambda_refine),
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_3", self.lambda_3),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DistillError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|&a| !(a >= 0.0)) {
            return Err(DistillError::Config("alpha must be a non-empty list of non-negative weights".into()));
        }
        let sum: f64 = self.alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DistillError::Config(format!("alpha must sum to 1, got {sum}")));
        }
        Ok(())
    }

    pub fn effective(&self) -> EffectiveWeights {
        if self.appendix_mode {
            EffectiveWeights {
                seg: self.lambda_1,
                mask: 0.0,
                class: self.lambda_2,
                class_temperature: self.temperature,
                feature: self.lambda_3,
                graph: 0.0,
                attn: 0.0,
                kd: 1.0,
                multi: 0.0,
                refine: 0.0,
                mask_temperature: self.temperature,
            }
        } else {
            EffectiveWeights {
                seg: 1.0,
                mask: self.lambda_m,
                class: self.lambda_c,
                class_temperature: 1.0,
                feature: self.lambda_f,
                graph: self.lambda_g,
                attn: self.lambda_attn,
                kd: self.lambda_kd,
                multi: self.lambda_multi,
                refine: self.lambda_refine,
                mask_temperature: self.temperature,
            }
        }
    }
}

/// `(teacher level, student level)` pairs, aligned from the coarsest end,
/// coarsest first.
pub fn aligned_levels(teacher: usize, student: usize) -> Vec<(usize, usize)> {
    (0..teacher.min(student)).map(|k| (teacher - 1 - k, student - 1 - k)).collect()
}

/// Training-only projections from student to teacher widths: one 1×1
/// channel map per aligned feature level (`proj.f{k}.w`) and one for query
/// embeddings (`proj.q.w`). Square maps start as the identity.
pub fn projection_head(teacher: &ModelConfig, student: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut init = |rows: usize, cols: usize| {
        if rows == cols {
            let mut m = Tensor::zeros(&[rows, cols]);
            (0..rows).for_each(|i| m.data_mut()[i * cols + i] = 1.0);
            m
        } else {
            glorot_normal(rows, cols, &mut rng)
        }
    };
    for k in 0..aligned_levels(teacher.levels, student.levels).len() {
        store.insert(format!("proj.f{k}.w"), init(student.channels, teacher.channels));
    }
    store.insert("proj.q.w", init(student.query_dim, teacher.query_dim));
    store
}

/// Nodes of the relational graph: parts `0..P`, then damages `P..P+D`.
/// Edges: structural part relations plus every part–damage pair.
pub fn relational_edges(graph: &StructuralPriorGraph, parts: usize, damages: usize) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = graph.relation_edges().into_iter().filter(|&(a, b)| a < parts && b < parts).collect();
    for p in 0..parts {
        for d in 0..damages {
            edges.push((p, parts + d));
        }
    }
    edges
}

/// Node memberships of every query: its argmax part (unless no-object) and
/// its argmax damage (unless none).
pub fn query_nodes(tape: &Tape, out: &ForwardOutput) -> Vec<Vec<usize>> {
    let pl = tape.value(out.part_logits);
    let dl = tape.value(out.damage_logits);
    let (kp, kd) = (pl.shape()[1], dl.shape()[1]);
    let parts = kp - 1;
    (0..pl.shape()[0])
        .map(|i| {
            let mut v = Vec::new();
            let p = argmax(&pl.data()[i * kp..(i + 1) * kp]);
            if p < kp - 1 {
                v.push(p);
            }
            let d = argmax(&dl.data()[i * kd..(i + 1) * kd]);
            if d < kd - 1 {
                v.push(parts + d);
            }
            v
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy soft-IoU pairing of teacher and student instances on their
/// full-resolution masks.
pub fn pair_outputs(tape: &Tape, teacher: &ForwardOutput, student: &ForwardOutput) -> Result<Vec<(usize, usize)>> {
    let (st, ss) = (tape.shape(teacher.masks).to_vec(), tape.shape(student.masks).to_vec());
    if st[..2] != ss[..2] {
        return Err(DistillError::Shape {
            op: "pair_outputs",
            lhs: st,
            rhs: ss,
        });
    }
    let (px, nt, ns) = (st[0] * st[1], st[2], ss[2]);
    let col = |d: &[f64], n: usize, i: usize| -> Vec<f64> { (0..px).map(|p| d[p * n + i]).collect() };
    let (dt, ds) = (tape.data(teacher.masks), tape.data(student.masks));
    let scols: Vec<Vec<f64>> = (0..ns).map(|j| col(ds, ns, j)).collect();
    let iou: Vec<Vec<f64>> = (0..nt)
        .map(|i| {
            let c = col(dt, nt, i);
            scols.iter().map(|s| soft_iou(&c, s)).collect()
        })
        .collect();
    let mut pairs = greedy_match(&iou, ns, DISTILL_MATCH_IOU).pairs;
    pairs.sort();
    Ok(pairs)
}

/// The individual distillation terms at one scale.
#[derive(Debug, Clone, Copy)]
pub struct DistillTerms {
    pub mask: Var,
    pub class: Var,
    pub feature: Var,
    pub graph: Var,
    pub attn: Var,
}

impl DistillTerms {
    pub fn values(&self, tape: &Tape) -> [f64; 5] {
        [self.mask, self.class, self.feature, self.graph, self.attn].map(|v| tape.value(v).item())
    }
}

fn pool_times(tape: &mut Tape, mut v: Var, times: usize) -> Result<Var> {
    for _ in 0..times {
        v = tape.avg_pool2(v)?;
    }
    Ok(v)
}

fn pool_map(tape: &mut Tape, v: Var, times: usize) -> Result<Var> {
    if times == 0 {
        return Ok(v);
    }
    let s = tape.shape(v).to_vec();
    let v3 = tape.reshape(v, &[s[0], s[1], 1])?;
    let p = pool_times(tape, v3, times)?;
    let ps = tape.shape(p).to_vec();
    Ok(tape.reshape(p, &[ps[0], ps[1]])?)
}

fn channels(tape: &mut Tape, v: Var, picks: &[usize]) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    let (h, w, n) = (s[0], s[1], s[2]);
    let k = picks.len();
    let idx = (0..h * w).flat_map(|px| picks.iter().map(move |&i| px * n + i)).collect();
    Ok(tape.gather(v, idx, &[h, w, k])?)
}

fn rows(tape: &mut Tape, v: Var, picks: &[usize]) -> Result<Var> {
    let k = tape.shape(v)[1];
    let idx = picks.iter().flat_map(|&i| (0..k).map(move |j| i * k + j)).collect();
    Ok(tape.gather(v, idx, &[picks.len(), k])?)
}

/// All distillation terms between a frozen teacher pass and a student pass
/// on the same image, with spatial maps pooled `scale` times.
pub fn distill_terms(
    tape: &mut Tape,
    teacher: &ForwardOutput,
    student: &ForwardOutput,
    head: &ParamVars,
    edges: &[(usize, usize)],
    cfg: &DistillConfig,
    scale: usize,
) -> Result<DistillTerms> {
    let w = cfg.effective();
    let pairs = pair_outputs(tape, teacher, student)?;
    let (mask, class) = if pairs.is_empty() {
        (tape.scalar(0.0), tape.scalar(0.0))
    } else {
        let ti: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let si: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let mt = pool_times(tape, teacher.mask_logits, scale)?;
        let ms = pool_times(tape, student.mask_logits, scale)?;
        let mt = channels(tape, mt, &ti)?;
        let ms = channels(tape, ms, &si)?;
        let sh = tape.shape(mt).to_vec();
        let ms = resample(tape, ms, sh[0], sh[1])?;
        let mask = mask_kd(tape, mt, ms, w.mask_temperature)?;

        let pt = rows(tape, teacher.part_logits, &ti)?;
        let ps = rows(tape, student.part_logits, &si)?;
        let dt = rows(tape, teacher.damage_logits, &ti)?;
        let ds = rows(tape, student.damage_logits, &si)?;
        let a = kl_rows(tape, pt, ps, w.class_temperature)?;
        let b = kl_rows(tape, dt, ds, w.class_temperature)?;
        (mask, tape.add(a, b)?)
    };

    let levels = aligned_levels(teacher.pyramid.len(), student.pyramid.len());
    let (mut ft, mut fs, mut proj, mut at, mut as_) = (vec![], vec![], vec![], vec![], vec![]);
    for (k, &(lt, ls)) in levels.iter().enumerate() {
        ft.push(pool_times(tape, teacher.pyramid.levels[lt], scale)?);
        fs.push(pool_times(tape, student.pyramid.levels[ls], scale)?);
        proj.push(head.get(&format!("proj.f{k}.w"))?);
        at.push(pool_map(tape, teacher.attention_maps[lt], scale)?);
        as_.push(pool_map(tape, student.attention_maps[ls], scale)?);
    }
    let feature = feature_kd(tape, &ft, &fs, &proj)?;
    let attn = attn_transfer(tape, &at, &as_)?;

    let nodes = edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0);
    let graph = if nodes == 0 {
        tape.scalar(0.0)
    } else {
        let nodes = nodes.max(tape.shape(teacher.part_logits)[1] - 1 + tape.shape(teacher.damage_logits)[1] - 1);
        let ht = node_embeddings(tape, teacher.queries, &query_nodes(tape, teacher), nodes)?;
        let qs = tape.matmul(student.queries, head.get("proj.q.w")?)?;
        let hs = node_embeddings(tape, qs, &query_nodes(tape, student), nodes)?;
        graph_kd(tape, ht, hs, edges)?
    };
    Ok(DistillTerms {
        mask,
        class,
        feature,
        graph,
        attn,
    })
}

/// `λ_m·mask + λ_c·class + λ_f·feature + λ_g·graph (+ λ_attn·attn)`.
pub fn distill_loss(tape: &mut Tape, terms: &DistillTerms, cfg: &DistillConfig) -> Result<Var> {
    let w = cfg.effective();
    let parts = [
        (terms.mask, w.mask),
        (terms.class, w.class),
        (terms.feature, w.feature),
        (terms.graph, w.graph),
        (terms.attn, w.attn),
    ];
    let mut acc = tape.scalar(0.0);
    for (v, lambda) in parts {
        if lambda != 0.0 {
            let s = tape.scale(v, lambda)?;
            acc = tape.add(acc, s)?;
        }
    }
    Ok(acc)
}

/// `Σ_s α_s · L_s`.
pub fn multi_scale(tape: &mut Tape, per_scale: &[Var], alpha: &[f64]) -> Result<Var> {
    if per_scale.len() != alpha.len() {
        return Err(DistillError::Config(format!(
            "{} scale losses for {} weights",
            per_scale.len(),
            alpha.len()
        )));
    }
    let mut acc = tape.scalar(0.0);
    for (&v, &a) in per_scale.iter().zip(alpha) {
        let s = tape.scale(v, a)?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// `seg + λ_KD·distill + λ_multi·multi + λ_refine·refine` (the segmentation
/// weight is `λ₁` in appendix mode).
pub fn total_objective(tape: &mut Tape, seg: Var, distill: Var, multi: Var, refine: Var, cfg: &DistillConfig) -> Result<Var> {
    let w = cfg.effective();
    let mut acc = tape.scale(seg, w.seg)?;
    for (v, lambda) in [(distill, w.kd), (multi, w.multi), (refine, w.refine)] {
        let s = tape.scale(v, lambda)?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `‖softmax(z_S/τ) - softmax(z_T/τ)‖₁ ≤ (√K/τ)·‖z_S - z_T‖₂`.
pub fn lipschitz_check(z_t: &[f64], z_s: &[f64], tau: f64) -> Result<LipschitzCheck> {
    if z_t.len() != z_s.len() || z_t.is_empty() {
        return Err(DistillError::Shape {
            op: "lipschitz_check",
            lhs: vec![z_t.len()],
            rhs: vec![z_s.len()],
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(DistillError::Temperature(tau));
    }
    let p = softmax_slice(z_t, tau);
    let q = softmax_slice(z_s, tau);
    let lhs = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let l2 = z_t.iter().zip(z_s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let rhs = (z_t.len() as f64).sqrt() / tau * l2;
    Ok(LipschitzCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lipschitz_oracle() {
        let c = lipschitz_check(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert!((c.lhs - 0.924234314520019517).abs() < 1e-15);
        assert!((c.rhs - 2.0).abs() < 1e-15);
        assert!(c.holds);
        let z = lipschitz_check(&[0.3, 2.0], &[0.3, 2.0], 3.0).unwrap();
        assert_eq!((z.lhs, z.rhs, z.holds), (0.0, 0.0, true));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = DistillConfig::default();
        c.validate().unwrap();
        assert_eq!((c.temperature, c.lambda_m, c.lambda_c, c.lambda_f, c.lambda_g), (2.0, 1.0, 1.0, 0.5, 0.5));
        assert_eq!((c.lambda_kd, c.lambda_multi, c.lambda_refine), (1.0, 0.5, 0.1));
        let bad = DistillConfig {
            alpha: vec![0.5, 0.6],
            ..c.clone()
        };
        assert!(bad.validate().is_err());
        let bad = DistillConfig {
            temperature: 0.0,
            ..c.clone()
        };
        assert!(matches!(bad.validate(), Err(DistillError::Temperature(_))));
        let parsed: DistillConfig = serde_json::from_str(r#"{"temperature": 4.0}"#).unwrap();
        assert_eq!(parsed.temperature, 4.0);
        assert_eq!(parsed.lambda_g, 0.5);
        assert!(serde_json::from_str::<DistillConfig>(r#"{"tau": 4.0}"#).is_err());
    }

    #[test]
    fn appendix_preset_drops_graph_and_mask_terms() {
        let w = DistillConfig::appendix().effective();
        assert_eq!((w.graph, w.mask, w.multi), (0.0, 0.0, 0.0));
        assert_eq!(w.class_temperature, 2.0);
        assert_eq!(DistillConfig::default().effective().class_temperature, 1.0);
    }

    #[test]
    fn multi_scale_reductions() {
        let mut t = Tape::new();
        let a = t.scalar(3.0);
        let b = t.scalar(5.0);
        let one = multi_scale(&mut t, &[a], &[1.0]).unwrap();
        assert_eq!(t.value(one).item(), 3.0);
        let zero = multi_scale(&mut t, &[a, b], &[0.0, 0.0]).unwrap();
        assert_eq!(t.value(zero).item(), 0.0);
        let two = multi_scale(&mut t, &[a, b], &[0.25, 0.75]).unwrap();
        assert_eq!(t.value(two).item(), 4.5);
    }

    #[test]
    fn total_objective_weights() {
        let mut t = Tape::new();
        let v: Vec<Var> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x| t.scalar(x)).collect();
        let o = total_objective(&mut t, v[0], v[1], v[2], v[3], &DistillConfig::default()).unwrap();
        assert!((t.value(o).item() - (1.0 + 2.0 + 2.0 + 0.8)).abs() < 1e-15);
    }

    #[test]
    fn level_alignment_from_coarsest() {
        assert_eq!(aligned_levels(3, 2), vec![(2, 1), (1, 0)]);
        assert_eq!(aligned_levels(2, 2), vec![(1, 1), (0, 0)]);
    }
}
