//! Teacher training, student distillation, evaluation and checkpoints.

mod checkpoint;
mod optim;
mod student;
mod teacher;

use std::io;
use std::path::{Path, PathBuf};

pub use checkpoint::Checkpoint;
pub use optim::{clip_gradients, global_norm, AdamW, GradMap, OptimizerConfig, Schedule};
pub use student::{distill_objective, train_student, DistillSettings, StudentSample};
pub use teacher::{teacher_objective, train_teacher, training_options, TrainSettings};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{ForwardOutput, ModelConfig, ModelError, QuerySlot, SlickModel, StructuralPriorGraph};
use crate::distill::DistillError;
use crate::infer::InferError;
use crate::losses::{aux_joint, boundary_surrogate, dice_bce, greedy_match, mask_iou, select_instance, LossError};
use crate::params::{ParamError, ParamVars};
use crate::synthdata::{Dataset, SceneSample};
use crate::tensor::io::SlktError;
use crate::tensor::{Gradients, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Slkt(#[from] SlktError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid setting `{key}`: {reason}")]
    Config { key: &'static str, reason: String },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("gradient for {0} does not match its parameter")]
    GradientShape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset images are {got:?}, model needs at least {min}x{min}")]
    Dataset { got: Vec<usize>, min: usize },
    #[error("worker thread panicked")]
    Worker,
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Fixed per-slot supervision: part slot `i` learns the scene's part `i`,
/// damage slots learn the scene's damage of their class (first free slot
/// wins), every other slot learns an empty mask with no-object/none labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotTargets {
    /// `[H, W]` per slot.
    pub masks: Vec<Tensor>,
    pub present: Vec<bool>,
    pub part: Vec<usize>,
    pub damage: Vec<usize>,
}

pub fn slot_targets(cfg: &ModelConfig, sample: &SceneSample) -> SlotTargets {
    let (h, w) = (sample.height(), sample.width());
    let slots = cfg.query_slots();
    let n = slots.len();
    let (no_part, no_damage) = (cfg.num_part_classes, cfg.num_damage_classes);
    let mut t = SlotTargets {
        masks: vec![Tensor::zeros(&[h, w]); n],
        present: vec![false; n],
        part: vec![no_part; n],
        damage: vec![no_damage; n],
    };
    for (m, &p) in sample.part_masks.iter().zip(&sample.part_labels) {
        if let Some(i) = slots.iter().position(|&s| s == QuerySlot::Part(p)) {
            t.masks[i] = m.clone();
            t.present[i] = true;
            t.part[i] = p;
        }
    }
    for ((m, &d), &p) in sample.damage_masks.iter().zip(&sample.damage_labels).zip(&sample.damage_parts) {
        let free = (0..n).find(|&i| slots[i] == QuerySlot::Damage(d) && !t.present[i]);
        if let Some(i) = free {
            t.masks[i] = m.clone();
            t.present[i] = true;
            t.part[i] = p;
            t.damage[i] = d;
        }
    }
    t
}

/// Mask (BCE + Dice, mean over slots), boundary (mean over occupied slots)
/// and class terms of one forward pass against slot targets.
pub fn supervised_terms(tape: &mut Tape, out: &ForwardOutput, targets: &SlotTargets) -> Result<[Var; 3]> {
    let n = targets.masks.len();
    let mut seg = tape.scalar(0.0);
    let mut bnd = tape.scalar(0.0);
    let mut occupied = 0usize;
    for i in 0..n {
        let m = select_instance(tape, out.masks, i)?;
        let l = dice_bce(tape, m, &targets.masks[i])?;
        seg = tape.add(seg, l)?;
        if targets.present[i] {
            let b = boundary_surrogate(tape, m, &targets.masks[i])?;
            bnd = tape.add(bnd, b)?;
            occupied += 1;
        }
    }
    let seg = tape.scale(seg, 1.0 / n as f64)?;
    let bnd = tape.scale(bnd, 1.0 / occupied.max(1) as f64)?;
    let aux = aux_joint(tape, out.part_logits, out.damage_logits, &targets.part, &targets.damage)?;
    Ok([seg, bnd, aux])
}

/// Gradients of every bound parameter, zero-filled where the loss does not
/// depend on it.
pub(crate) fn collect_grads(tape: &Tape, grads: &Gradients, vars: &ParamVars) -> GradMap {
    vars.iter()
        .map(|(name, &v)| {
            let g = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
            (name.clone(), g)
        })
        .collect()
}

/// Runs `f` over `jobs` on `threads` workers and returns results in job
/// order, so any later reduction is independent of the thread count.
pub(crate) fn run_parallel<J, O, F>(threads: usize, jobs: &[J], f: F) -> Result<Vec<O>>
where
    J: Sync,
    O: Send,
    F: Fn(&J) -> Result<O> + Sync,
{
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let workers = threads.min(jobs.len());
    let chunks: Vec<Vec<(usize, Result<O>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                let f = &f;
                s.spawn(move || (k..jobs.len()).step_by(workers).map(|i| (i, f(&jobs[i]))).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().map_err(|_| TrainError::Worker)).collect::<Result<_>>()
    })?;
    let mut slots: Vec<Option<Result<O>>> = (0..jobs.len()).map(|_| None).collect();
    for (i, r) in chunks.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Sums per-sample gradients in sample order and divides by the count.
pub(crate) fn average_grads(per_sample: Vec<GradMap>) -> GradMap {
    let n = per_sample.len() as f64;
    let mut it = per_sample.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for g in it {
        for (name, v) in g {
            let a = acc.entry(name).or_insert_with(|| vec![0.0; v.len()]);
            a.iter_mut().zip(&v).for_each(|(x, y)| *x += y);
        }
    }
    acc.values_mut().flatten().for_each(|x| *x /= n);
    acc
}

/// Mean values of named loss components over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub terms: Vec<(String, f64)>,
    pub grad_norm: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Batch-mean loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

pub(crate) fn check_dataset(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    for s in &data.samples {
        let (h, w) = (s.height(), s.width());
        if h.min(w) < cfg.min_input_side() {
            return Err(TrainError::Dataset {
                got: vec![h, w],
                min: cfg.min_input_side(),
            });
        }
    }
    Ok(())
}

/// Mask quality on a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over ground-truth instances of the IoU of their matched
    /// prediction (0 when unmatched).
    pub mean_iou: f64,
    pub part_iou: f64,
    pub damage_iou: f64,
    pub instances: usize,
}

/// Per-instance IoUs (parts then damages) of one scene under greedy
/// one-to-one matching on binarized masks.
pub fn scene_ious(model: &SlickModel, sample: &SceneSample, graph: &StructuralPriorGraph) -> Result<Vec<f64>> {
    let preds = model.predict_instances(&sample.image, &sample.heatmap, graph, &Default::default())?;
    let pm: Vec<Vec<bool>> = preds.iter().map(|p| p.binary_mask()).collect();
    let truths: Vec<Vec<bool>> = sample
        .part_masks
        .iter()
        .chain(&sample.damage_masks)
        .map(|m| m.data().iter().map(|&v| v >= 0.5).collect())
        .collect();
    let iou: Vec<Vec<f64>> = pm.iter().map(|p| truths.iter().map(|t| mask_iou(p, t)).collect()).collect();
    let matched = greedy_match(&iou, truths.len(), 0.0);
    let mut out = vec![0.0; truths.len()];
    for &(p, t) in &matched.pairs {
        out[t] = iou[p][t];
    }
    Ok(out)
}

pub fn evaluate(model: &SlickModel, data: &Dataset, graph: &StructuralPriorGraph, threads: usize) -> Result<EvalReport> {
    let per_scene = run_parallel(threads, &data.samples, |s| scene_ious(model, s, graph).map(|v| (v, s.part_masks.len())))?;
    let (mut all, mut parts, mut damages) = (Vec::new(), Vec::new(), Vec::new());
    for (v, np) in per_scene {
        parts.extend_from_slice(&v[..np]);
        damages.extend_from_slice(&v[np..]);
        all.extend(v);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(EvalReport {
        mean_iou: mean(&all),
        part_iou: mean(&parts),
        damage_iou: mean(&damages),
        instances: all.len(),
    })
}
