use serde::{Deserialize, Serialize};

use super::teacher::{epoch_jobs, training_options, Accumulator};
use super::{
    average_grads, check_dataset, collect_grads, run_parallel, slot_targets, supervised_terms, AdamW, Checkpoint, GradMap, Result,
    TrainReport, TrainSettings, EpochLog,
};
use crate::blocks::{SlickModel, StructuralPriorGraph};
use crate::distill::{distill_loss, distill_terms, multi_scale, projection_head, relational_edges, total_objective, DistillConfig};
use crate::infer::refine_from;
use crate::losses::{consistency_against, total, LossTerms, Transform};
use crate::params::{ParamStore, ParamVars};
use crate::synthdata::{Dataset, SceneSample};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSettings {
    pub train: TrainSettings,
    pub distill: DistillConfig,
    /// Seed of the projection head when the checkpoint carries none.
    pub head_seed: u64,
}

impl DistillSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.distill.validate()?;
        Ok(())
    }
}

/// Every component of the student objective on one scene.
#[derive(Debug, Clone, Copy)]
pub struct StudentSample {
    pub total: Var,
    pub seg: Var,
    pub distill: Var,
    pub multi: Var,
    pub refine: Var,
    pub mask: Var,
    pub class: Var,
    pub feature: Var,
    pub graph: Var,
    pub attn: Var,
}

impl StudentSample {
    pub const NAMES: [&'static str; 9] = ["seg", "distill", "multi", "refine", "mask", "class", "feature", "graph", "attn"];

    pub fn values(&self, tape: &Tape) -> [f64; 9] {
        [
            self.seg,
            self.distill,
            self.multi,
            self.refine,
            self.mask,
            self.class,
            self.feature,
            self.graph,
            self.attn,
        ]
        .map(|v| tape.value(v).item())
    }
}

/// Student objective against a frozen teacher on one scene: supervised
/// segmentation loss, the distillation composite, its multi-scale version
/// and the bootstrap refinement term.
#[allow(clippy::too_many_arguments)]
pub fn distill_objective(
    tape: &mut Tape,
    teacher: &SlickModel,
    tp: &ParamVars,
    student: &SlickModel,
    sp: &ParamVars,
    head: &ParamVars,
    sample: &SceneSample,
    graph: &StructuralPriorGraph,
    settings: &DistillSettings,
    transform: Transform,
) -> Result<StudentSample> {
    let cfg = &settings.distill;
    let w = cfg.effective();
    let weights = &settings.train.loss;
    let opts = training_options();
    let (image, heat) = (&sample.image, &sample.heatmap);
    let t_out = teacher.forward(tape, tp, image, heat, graph, &opts)?;
    let s_out = student.forward(tape, sp, image, heat, graph, &opts)?;

    let targets = slot_targets(&student.config, sample);
    let [seg, bnd, aux] = supervised_terms(tape, &s_out, &targets)?;
    let cons = if weights.lambda_cons > 0.0 {
        consistency_against(tape, student, sp, s_out.masks, image, heat, graph, &opts, transform)?
    } else {
        tape.scalar(0.0)
    };
    let seg = total(tape, &LossTerms { seg, bnd, aux, cons }, weights)?;

    let edges = relational_edges(graph, student.config.num_part_classes, student.config.num_damage_classes);
    let terms = distill_terms(tape, &t_out, &s_out, head, &edges, cfg, 0)?;
    let distill = distill_loss(tape, &terms, cfg)?;
    let multi = if w.multi != 0.0 {
        let mut per_scale = vec![distill];
        for s in 1..cfg.alpha.len() {
            let t = distill_terms(tape, &t_out, &s_out, head, &edges, cfg, s)?;
            per_scale.push(distill_loss(tape, &t, cfg)?);
        }
        multi_scale(tape, &per_scale, &cfg.alpha)?
    } else {
        tape.scalar(0.0)
    };
    let refine = if w.refine != 0.0 {
        refine_from(tape, student, sp, s_out.clone(), image, heat, graph, &opts)?.loss
    } else {
        tape.scalar(0.0)
    };
    let total = total_objective(tape, seg, distill, multi, refine, cfg)?;
    Ok(StudentSample {
        total,
        seg,
        distill,
        multi,
        refine,
        mask: terms.mask,
        class: terms.class,
        feature: terms.feature,
        graph: terms.graph,
        attn: terms.attn,
    })
}

/// Trains the student in `ck` against the frozen `teacher`. The projection
/// head lives in `ck.extra` and is created when missing.
pub fn train_student(
    ck: &mut Checkpoint,
    teacher: &SlickModel,
    data: &Dataset,
    graph: &StructuralPriorGraph,
    settings: &DistillSettings,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    settings.validate()?;
    check_dataset(&ck.model.config, data)?;
    check_dataset(&teacher.config, data)?;
    if ck.extra.is_empty() {
        ck.extra = projection_head(&teacher.config, &ck.model.config, settings.head_seed);
    }
    let mut all = ParamStore::new();
    all.extend_prefixed("model.", ck.model.params.clone());
    all.extend_prefixed("head.", ck.extra.clone());
    let config = ck.model.config.clone();
    let train = &settings.train;
    let mut opt = AdamW::new(train.optimizer)?;
    let mut report = TrainReport::default();
    for epoch in 0..train.epochs {
        let mut acc = Accumulator::new(&StudentSample::NAMES);
        for batch in epoch_jobs(data, train.batch_size, train.seed, epoch) {
            let student = SlickModel {
                config: config.clone(),
                params: all.strip_prefix("model."),
            };
            let all_ref = &all;
            let results = run_parallel(train.threads, &batch, |job| -> Result<(f64, [f64; 9], GradMap)> {
                let mut tape = Tape::new();
                let tp = teacher.params.bind(&mut tape, false);
                let vars = all_ref.bind(&mut tape, true);
                let (sp, hp) = (vars.strip_prefix("model."), vars.strip_prefix("head."));
                let s = distill_objective(&mut tape, teacher, &tp, &student, &sp, &hp, job.sample, graph, settings, job.transform)?;
                let grads = tape.backward(s.total)?;
                Ok((tape.value(s.total).item(), s.values(&tape), collect_grads(&tape, &grads, &vars)))
            })?;
            let mut grads = Vec::with_capacity(results.len());
            let mut batch_loss = 0.0;
            for (loss, terms, g) in results {
                acc.add_sample(loss, &terms);
                batch_loss += loss;
                grads.push(g);
            }
            report.step_losses.push(batch_loss / grads.len() as f64);
            let norm = opt.step(&mut all, average_grads(grads))?;
            ck.steps += 1;
            acc.add_step(norm);
        }
        let log = acc.finish(epoch + 1, train.optimizer.rate(opt.steps_taken().saturating_sub(1)));
        on_epoch(&log);
        report.epochs.push(log);
    }
    ck.model.params = all.strip_prefix("model.");
    ck.extra = all.strip_prefix("head.");
    Ok(report)
}
