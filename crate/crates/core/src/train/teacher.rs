use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    average_grads, check_dataset, collect_grads, run_parallel, slot_targets, supervised_terms, AdamW, Checkpoint, EpochLog,
    GradMap, OptimizerConfig, Result, TrainError, TrainReport,
};
use crate::blocks::{ForwardOptions, SlickModel, StructuralPriorGraph, TokenPartSource};
use crate::losses::{consistency_against, total, LossWeights, Transform};
use crate::params::ParamVars;
use crate::synthdata::{Dataset, SceneSample};
use crate::tensor::{Tape, Var};

/// Loop settings shared by teacher training and distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub seed: u64,
    /// Data-parallel workers; results are reduced in sample order, so the
    /// count never changes the outcome.
    pub threads: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config {
                key: "batch_size",
                reason: "must be positive".into(),
            });
        }
        if self.threads == 0 {
            return Err(TrainError::Config {
                key: "threads",
                reason: "must be positive".into(),
            });
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

pub fn training_options() -> ForwardOptions {
    ForwardOptions {
        token_parts: TokenPartSource::Slots,
        conditioning: None,
    }
}

/// Weighted training loss of one scene and its four unweighted terms
/// (mask, boundary, class, consistency).
pub fn teacher_objective(
    tape: &mut Tape,
    model: &SlickModel,
    p: &ParamVars,
    sample: &SceneSample,
    graph: &StructuralPriorGraph,
    weights: &LossWeights,
    transform: Transform,
) -> Result<(Var, [Var; 4])> {
    let opts = training_options();
    let out = model.forward(tape, p, &sample.image, &sample.heatmap, graph, &opts)?;
    let targets = slot_targets(&model.config, sample);
    let [seg, bnd, aux] = supervised_terms(tape, &out, &targets)?;
    let cons = if weights.lambda_cons > 0.0 {
        consistency_against(tape, model, p, out.masks, &sample.image, &sample.heatmap, graph, &opts, transform)?
    } else {
        tape.scalar(0.0)
    };
    let terms = [seg, bnd, aux, cons];
    let loss = total(tape, &crate::losses::LossTerms { seg, bnd, aux, cons }, weights)?;
    Ok((loss, terms))
}

pub(crate) struct Job<'a> {
    pub sample: &'a SceneSample,
    pub transform: Transform,
}

/// Shuffled batches of one epoch, each sample with its augmentation.
pub(crate) fn epoch_jobs<'a>(data: &'a Dataset, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<Job<'a>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    order.shuffle(&mut rng);
    let jobs: Vec<Job> = order
        .into_iter()
        .map(|i| Job {
            sample: &data.samples[i],
            transform: Transform::AUGMENTATIONS[rng.random_range(0..Transform::AUGMENTATIONS.len())],
        })
        .collect();
    let mut batches = Vec::new();
    let mut it = jobs.into_iter().peekable();
    while it.peek().is_some() {
        batches.push(it.by_ref().take(batch).collect());
    }
    batches
}

pub(crate) struct Accumulator {
    names: Vec<String>,
    sums: Vec<f64>,
    loss: f64,
    norm: f64,
    steps: usize,
    samples: usize,
}

impl Accumulator {
    pub fn new(names: &[&str]) -> Self {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            sums: vec![0.0; names.len()],
            loss: 0.0,
            norm: 0.0,
            steps: 0,
            samples: 0,
        }
    }

    pub fn add_sample(&mut self, loss: f64, terms: &[f64]) {
        self.loss += loss;
        self.sums.iter_mut().zip(terms).for_each(|(s, t)| *s += t);
        self.samples += 1;
    }

    pub fn add_step(&mut self, norm: f64) {
        self.norm += norm;
        self.steps += 1;
    }

    pub fn finish(self, epoch: usize, step_size: f64) -> EpochLog {
        let n = self.samples.max(1) as f64;
        EpochLog {
            epoch,
            loss: self.loss / n,
            terms: self.names.into_iter().zip(self.sums.iter().map(|s| s / n)).collect(),
            grad_norm: self.norm / self.steps.max(1) as f64,
            step_size,
        }
    }
}

/// Trains `ck.model` on `data` with the segmentation objective.
pub fn train_teacher(
    ck: &mut Checkpoint,
    data: &Dataset,
    graph: &StructuralPriorGraph,
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    settings.validate()?;
    check_dataset(&ck.model.config, data)?;
    let mut opt = AdamW::new(settings.optimizer)?;
    let mut report = TrainReport::default();
    for epoch in 0..settings.epochs {
        let mut acc = Accumulator::new(&["seg", "bnd", "aux", "cons"]);
        for batch in epoch_jobs(data, settings.batch_size, settings.seed, epoch) {
            let model = &ck.model;
            let results = run_parallel(settings.threads, &batch, |job| -> Result<(f64, [f64; 4], GradMap)> {
                let mut tape = Tape::new();
                let p = model.params.bind(&mut tape, true);
                let (loss, terms) = teacher_objective(&mut tape, model, &p, job.sample, graph, &settings.loss, job.transform)?;
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss).item(), terms.map(|t| tape.value(t).item()), collect_grads(&tape, &grads, &p)))
            })?;
            let mut grads = Vec::with_capacity(results.len());
            let mut batch_loss = 0.0;
            for (loss, terms, g) in results {
                acc.add_sample(loss, &terms);
                batch_loss += loss;
                grads.push(g);
            }
            report.step_losses.push(batch_loss / grads.len() as f64);
            let norm = opt.step(&mut ck.model.params, average_grads(grads))?;
            ck.steps += 1;
            acc.add_step(norm);
        }
        let log = acc.finish(epoch + 1, settings.optimizer.rate(opt.steps_taken().saturating_sub(1)));
        on_epoch(&log);
        report.epochs.push(log);
    }
    Ok(report)
}
