//! Inference path: mask NMS, bootstrap self-refinement, the single-model
//! prediction pipeline and the `.slkp` prediction file.

mod slkp;

pub use slkp::{read_predictions, write_predictions, PredictionFile, SlkpError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{DamageHeatmap, ForwardOptions, ForwardOutput, InstancePrediction, ModelError, SlickModel, StructuralPriorGraph};
use crate::calibrate::{calibrate_instance, CalibrationError, PartDamagePriorTable};
use crate::losses::mask_iou;
use crate::params::ParamVars;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("invalid NMS config: {0}")]
    Nms(String),
}

pub type Result<T> = std::result::Result<T, InferError>;

/// Mask suppression settings. Scores must exceed `score_threshold`; kept
/// masks overlap pairwise with IoU strictly below `iou_threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub top_k: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            iou_threshold: 0.5,
            top_k: 100,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(InferError::Nms(format!("score_threshold {} not in [0, 1]", self.score_threshold)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(InferError::Nms(format!("iou_threshold {} not in (0, 1]", self.iou_threshold)));
        }
        Ok(())
    }
}

/// Indices kept by greedy mask NMS, in keep order. Only the score and
/// threshold relation matters here, so the config is not range-checked;
/// this keeps the scale-invariance property testable with `c·τ > 1`.
pub fn nms_indices(preds: &[InstancePrediction], cfg: &NmsConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let masks: Vec<Vec<bool>> = preds.iter().map(InstancePrediction::binary_mask).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if preds[i].score <= cfg.score_threshold || kept.len() >= cfg.top_k {
            break;
        }
        if kept.iter().all(|&k| mask_iou(&masks[i], &masks[k]) < cfg.iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Greedy non-maximum mask suppression; ties go to the lower index.
pub fn mask_nms(preds: &[InstancePrediction], cfg: &NmsConfig) -> Result<Vec<InstancePrediction>> {
    cfg.validate()?;
    Ok(nms_indices(preds, cfg).into_iter().map(|i| preds[i].clone()).collect())
}

/// Renders predictions into one conditioning channel: the score-weighted
/// sum of soft masks, clamped to `[0, 1]`. Returns `[H, W, 1]`.
pub fn render_conditioning(preds: &[InstancePrediction], h: usize, w: usize) -> Tensor {
    let mut acc = vec![0.0; h * w];
    for p in preds {
        for (a, &m) in acc.iter_mut().zip(p.mask.data()) {
            *a += p.score * m;
        }
    }
    Tensor::new(&[h, w, 1], acc.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("conditioning shape")
}

/// Both passes of bootstrap refinement and the disagreement between them.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub first: ForwardOutput,
    pub second: ForwardOutput,
    /// Mean squared difference between pass-1 and pass-2 masks.
    pub loss: Var,
}

/// Runs the model, renders its predictions into the conditioning channel and
/// runs it again conditioned on them.
pub fn bootstrap_refine(
    tape: &mut Tape,
    model: &SlickModel,
    p: &ParamVars,
    image: &Tensor,
    heat: &DamageHeatmap,
    graph: &StructuralPriorGraph,
    opts: &ForwardOptions,
) -> Result<Refinement> {
    let first = model.forward(tape, p, image, heat, graph, opts)?;
    refine_from(tape, model, p, first, image, heat, graph, opts)
}

/// Second refinement pass given an existing first pass.
#[allow(clippy::too_many_arguments)]
pub fn refine_from(
    tape: &mut Tape,
    model: &SlickModel,
    p: &ParamVars,
    first: ForwardOutput,
    image: &Tensor,
    heat: &DamageHeatmap,
    graph: &StructuralPriorGraph,
    opts: &ForwardOptions,
) -> Result<Refinement> {
    let (h, w) = first.image_size;
    let cond = render_conditioning(&first.predictions(tape), h, w);
    let opts2 = ForwardOptions {
        token_parts: opts.token_parts.clone(),
        conditioning: Some(cond),
    };
    let second = model.forward(tape, p, image, heat, graph, &opts2)?;
    let d = tape.sub(first.masks, second.masks)?;
    let d = tape.square(d)?;
    let loss = tape.mean(d)?;
    Ok(Refinement { first, second, loss })
}

/// End-to-end prediction settings.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub nms: NmsConfig,
    /// Use the second (conditioned) pass of bootstrap refinement.
    pub bootstrap: bool,
}

/// Forward pass (optionally refined), optional calibration, then NMS.
pub fn predict(
    model: &SlickModel,
    image: &Tensor,
    heat: &DamageHeatmap,
    graph: &StructuralPriorGraph,
    cfg: &PredictConfig,
    table: Option<&PartDamagePriorTable>,
) -> Result<Vec<InstancePrediction>> {
    cfg.nms.validate()?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let opts = ForwardOptions::default();
    let out = if cfg.bootstrap {
        bootstrap_refine(&mut tape, model, &p, image, heat, graph, &opts)?.second
    } else {
        model.forward(&mut tape, &p, image, heat, graph, &opts)?
    };
    let mut preds = out.predictions(&tape);
    if let Some(t) = table {
        preds = preds.iter().map(|x| calibrate_instance(x, t)).collect::<std::result::Result<_, _>>()?;
    }
    mask_nms(&preds, &cfg.nms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inst(mask: &[f64], score: f64) -> InstancePrediction {
        InstancePrediction {
            mask: Tensor::new(&[1, mask.len()], mask.to_vec()).unwrap(),
            part_probs: vec![1.0, 0.0],
            damage_probs: vec![1.0],
            score,
            embedding: vec![],
        }
    }

    #[test]
    fn single_instance_above_threshold_is_kept() {
        let k = mask_nms(&[inst(&[1.0, 0.0], 0.9)], &NmsConfig::default()).unwrap();
        assert_eq!(k.len(), 1);
    }

    #[test]
    fn identical_masks_keep_higher_score() {
        let cfg = NmsConfig {
            iou_threshold: 0.5,
            ..Default::default()
        };
        let preds = [inst(&[1.0, 1.0, 0.0], 0.6), inst(&[1.0, 1.0, 0.0], 0.8)];
        assert_eq!(nms_indices(&preds, &cfg), vec![1]);
        let tied = [inst(&[1.0, 1.0, 0.0], 0.8), inst(&[1.0, 1.0, 0.0], 0.8)];
        assert_eq!(nms_indices(&tied, &cfg), vec![0]);
    }

    #[test]
    fn threshold_and_top_k() {
        let preds = [inst(&[1.0, 0.0, 0.0], 0.9), inst(&[0.0, 1.0, 0.0], 0.3), inst(&[0.0, 0.0, 1.0], 0.7)];
        let cfg = NmsConfig {
            score_threshold: 0.3,
            iou_threshold: 0.5,
            top_k: 10,
        };
        assert_eq!(nms_indices(&preds, &cfg), vec![0, 2]);
        let cfg = NmsConfig { top_k: 1, ..cfg };
        assert_eq!(nms_indices(&preds, &cfg), vec![0]);
        assert!(NmsConfig { iou_threshold: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn conditioning_is_clamped() {
        let preds = [inst(&[1.0, 0.5], 0.9), inst(&[1.0, 0.2], 0.8)];
        let c = render_conditioning(&preds, 1, 2);
        assert_eq!(c.data()[0], 1.0);
        assert!((c.data()[1] - (0.45 + 0.16)).abs() < 1e-15);
    }

    #[test]
    fn fresh_model_refinement_is_identity() {
        let model = SlickModel::new(ModelConfig::student(), 5).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut r);
        let heat = DamageHeatmap::zeros(16, 16);
        let g = StructuralPriorGraph::new((0..6).collect(), vec![(0, 1)], vec![], 1.0, -1.0).unwrap();
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, false);
        let r = bootstrap_refine(&mut t, &model, &p, &img, &heat, &g, &ForwardOptions::default()).unwrap();
        assert_eq!(t.value(r.loss).item(), 0.0);
        assert_eq!(r.first.predictions(&t), r.second.predictions(&t));
    }

    #[test]
    fn predict_respects_nms_contract() {
        let model = SlickModel::new(ModelConfig::student(), 6).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut r);
        let heat = DamageHeatmap::zeros(16, 16);
        let g = StructuralPriorGraph::new((0..6).collect(), vec![(0, 1)], vec![], 1.0, -1.0).unwrap();
        let cfg = PredictConfig {
            nms: NmsConfig {
                score_threshold: 0.99,
                ..Default::default()
            },
            bootstrap: true,
        };
        let out = predict(&model, &img, &heat, &g, &cfg, None).unwrap();
        assert!(out.iter().all(|p| p.score > 0.99));
        let cfg = PredictConfig {
            nms: NmsConfig {
                score_threshold: 0.0,
                iou_threshold: 0.3,
                top_k: 100,
            },
            bootstrap: false,
        };
        let out = predict(&model, &img, &heat, &g, &cfg, None).unwrap();
        for i in 0..out.len() {
            for j in 0..i {
                assert!(mask_iou(&out[i].binary_mask(), &out[j].binary_mask()) < 0.3);
            }
        }
    }
}
