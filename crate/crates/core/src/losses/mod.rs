//! Segmentation training losses and the greedy instance matcher.

mod boundary;
mod consistency;
mod matching;

pub use boundary::{boundary, boundary_pixels, boundary_surrogate};
pub use consistency::{consistency, consistency_against, paired_mse, Transform};
pub use matching::{greedy_match, mask_iou, match_instances, soft_iou, InstanceTarget, MatchResult, MATCH_IOU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::ModelError;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{op}: shapes differ ({lhs:?} vs {rhs:?})")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: label {label} out of range for {classes} classes")]
    Label {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("loss weight {name} is negative ({value})")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("all loss weights are zero")]
    AllZero,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Predictions are clamped into this range before any logarithm.
pub const PROB_EPS: f64 = 1e-7;
const DICE_SMOOTH: f64 = 1.0;

fn same_shape(op: &'static str, tape: &Tape, pred: Var, gt: &Tensor) -> Result<()> {
    if tape.shape(pred) != gt.shape() {
        return Err(LossError::Shape {
            op,
            lhs: tape.shape(pred).to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    Ok(())
}

/// Smoothed soft Dice loss `1 - (2Σpg + 1) / (Σp + Σg + 1)` against a
/// constant target.
pub(crate) fn soft_dice(tape: &mut Tape, p: Var, g: &Tensor, smooth: f64) -> Result<Var> {
    let gv = tape.constant(g.clone());
    let inter = tape.mul(p, gv)?;
    let inter = tape.sum(inter)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, smooth)?;
    let sp = tape.sum(p)?;
    let den = tape.add_scalar(sp, g.data().iter().sum::<f64>() + smooth)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// Binary cross-entropy (mean over pixels) plus smoothed Dice loss.
pub fn dice_bce(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    same_shape("dice_bce", tape, pred, gt)?;
    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus_p = tape.neg(p)?;
    let one_minus_p = tape.add_scalar(one_minus_p, 1.0)?;
    let log_p = tape.ln(p)?;
    let log_q = tape.ln(one_minus_p)?;
    let g = tape.constant(gt.clone());
    let not_g = tape.constant(gt.map(|v| 1.0 - v));
    let a = tape.mul(g, log_p)?;
    let b = tape.mul(not_g, log_q)?;
    let ll = tape.add(a, b)?;
    let ll = tape.mean(ll)?;
    let bce = tape.neg(ll)?;
    let dice = soft_dice(tape, p, gt, DICE_SMOOTH)?;
    Ok(tape.add(bce, dice)?)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(LossError::Label {
            op: "cross_entropy",
            label: bad,
            classes: k,
        });
    }
    let logp = tape.log_softmax(logits, 1.0)?;
    let idx = labels.iter().enumerate().map(|(i, &l)| i * k + l).collect();
    let picked = tape.gather(logp, idx, &[labels.len()])?;
    let m = tape.mean(picked)?;
    Ok(tape.neg(m)?)
}

/// Part CE plus damage CE, averaged over instances. Zero for no instances.
pub fn aux_joint(
    tape: &mut Tape,
    part_logits: Var,
    damage_logits: Var,
    part_labels: &[usize],
    damage_labels: &[usize],
) -> Result<Var> {
    if part_labels.is_empty() && damage_labels.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let a = cross_entropy(tape, part_logits, part_labels)?;
    let b = cross_entropy(tape, damage_logits, damage_labels)?;
    Ok(tape.add(a, b)?)
}

/// Weights of the four training terms. JSON keys match the field names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_bnd: f64,
    pub lambda_aux: f64,
    pub lambda_cons: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_seg: 1.0,
            lambda_bnd: 0.5,
            lambda_aux: 0.5,
            lambda_cons: 0.1,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [(&'static str, f64); 4] {
        [
            ("lambda_seg", self.lambda_seg),
            ("lambda_bnd", self.lambda_bnd),
            ("lambda_aux", self.lambda_aux),
            ("lambda_cons", self.lambda_cons),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let mut any = false;
        for (name, value) in self.as_array() {
            if value < 0.0 || value.is_nan() {
                return Err(LossError::NegativeWeight { name, value });
            }
            any |= value > 0.0;
        }
        if any {
            Ok(())
        } else {
            Err(LossError::AllZero)
        }
    }
}

/// Scalar loss terms on one tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub seg: Var,
    pub bnd: Var,
    pub aux: Var,
    pub cons: Var,
}

/// `λ_seg·seg + λ_bnd·bnd + λ_aux·aux + λ_cons·cons`.
pub fn total(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let parts = [
        (terms.seg, w.lambda_seg),
        (terms.bnd, w.lambda_bnd),
        (terms.aux, w.lambda_aux),
        (terms.cons, w.lambda_cons),
    ];
    let mut acc = tape.scale(parts[0].0, parts[0].1)?;
    for &(v, lambda) in &parts[1..] {
        let s = tape.scale(v, lambda)?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Selects instance `i` of a channel-last `[H, W, N]` stack as `[H, W]`.
pub fn select_instance(tape: &mut Tape, masks: Var, i: usize) -> Result<Var> {
    let s = tape.shape(masks).to_vec();
    if s.len() != 3 || i >= s[2] {
        return Err(LossError::Shape {
            op: "select_instance",
            lhs: s,
            rhs: vec![i],
        });
    }
    let (h, w, n) = (s[0], s[1], s[2]);
    let idx = (0..h * w).map(|px| px * n + i).collect();
    Ok(tape.gather(masks, idx, &[h, w])?)
}
