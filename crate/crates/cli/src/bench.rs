//! Teacher/student latency and analytic FLOP comparison.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use slick_core::blocks::{DamageHeatmap, SlickModel, StructuralPriorGraph};
use slick_core::flops;
use slick_core::infer::{predict, InferError, PredictConfig};
use slick_core::tensor::Tensor;

/// Wall-clock statistics of one model at one input size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBench {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub runs: usize,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub input_size: [usize; 2],
    pub teacher: ModelBench,
    pub student: ModelBench,
    /// `teacher.median_ms / student.median_ms`.
    pub speedup: f64,
    /// `teacher.flops / student.flops`.
    pub flop_ratio: f64,
}

/// Median and nearest-rank 95th percentile.
pub fn summarize(samples: &[f64]) -> (f64, f64) {
    assert!(!samples.is_empty(), "no timing samples");
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (median, s[rank - 1])
}

fn time_model(
    model: &SlickModel,
    image: &Tensor,
    heat: &DamageHeatmap,
    graph: &StructuralPriorGraph,
    cfg: &PredictConfig,
    warmup: usize,
    runs: usize,
) -> Result<ModelBench, InferError> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    for _ in 0..warmup {
        predict(model, image, heat, graph, cfg, None)?;
    }
    let mut ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        let out = predict(model, image, heat, graph, cfg, None)?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let (median_ms, p95_ms) = summarize(&ms);
    let count = flops::count(&model.config, h, w);
    Ok(ModelBench {
        median_ms,
        p95_ms,
        runs,
        macs: count.macs,
        flops: count.flops,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn bench_size(
    teacher: &SlickModel,
    student: &SlickModel,
    graph: &StructuralPriorGraph,
    cfg: &PredictConfig,
    side: usize,
    warmup: usize,
    runs: usize,
    seed: u64,
) -> Result<BenchReport, InferError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::uniform(&[side, side, 3], 0.0, 1.0, &mut rng);
    let heat = DamageHeatmap::zeros(side, side);
    let t = time_model(teacher, &image, &heat, graph, cfg, warmup, runs)?;
    let s = time_model(student, &image, &heat, graph, cfg, warmup, runs)?;
    Ok(BenchReport {
        input_size: [side, side],
        speedup: t.median_ms / s.median_ms,
        flop_ratio: t.flops as f64 / s.flops as f64,
        teacher: t,
        student: s,
    })
}

/// Plain-text table, one row per input size.
pub fn table(reports: &[BenchReport]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:>9}  {:>12} {:>12}  {:>12} {:>12}  {:>8}  {:>14} {:>14}  {:>7}",
        "size", "teacher p50", "teacher p95", "student p50", "student p95", "speedup", "teacher FLOPs", "student FLOPs", "ratio"
    )
    .unwrap();
    for r in reports {
        writeln!(
            s,
            "{:>9}  {:>10.3}ms {:>10.3}ms  {:>10.3}ms {:>10.3}ms  {:>7.2}x  {:>14} {:>14}  {:>6.2}x",
            format!("{}x{}", r.input_size[0], r.input_size[1]),
            r.teacher.median_ms,
            r.teacher.p95_ms,
            r.student.median_ms,
            r.student.p95_ms,
            r.speedup,
            r.teacher.flops,
            r.student.flops,
            r.flop_ratio
        )
        .unwrap();
    }
    s
}
