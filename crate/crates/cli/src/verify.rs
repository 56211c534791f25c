//! The property suite behind `slick verify`: gradient checks, reduction
//! identities, the temperature-softmax bound, NMS, boundary and calibration
//! properties. Each check reports how many cases it ran and the worst case.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use slick_core::blocks::{
    film_modulate, plain_attention, prior_attention, FilmWeights, InstancePrediction, ModelConfig, PriorAttentionWeights,
    SlickModel, StructuralPriorGraph,
};
use slick_core::calibrate::{build_table, calibrate_instance, PartDamagePriorTable};
use slick_core::distill::{
    attn_transfer, class_kd, distill_terms, feature_kd, graph_kd, kl_rows, lipschitz_check, mask_kd, projection_head,
    relational_edges, DistillConfig,
};
use slick_core::infer::{mask_nms, nms_indices, NmsConfig};
use slick_core::losses::{aux_joint, boundary, cross_entropy, dice_bce, mask_iou, paired_mse, boundary_surrogate};
use slick_core::synthdata::{generate, make_graph, Layout, Taxonomy};
use slick_core::tensor::{gradcheck, Tape, Tensor, TensorError, Var};
use slick_core::train::training_options;

/// Outcome of one property.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<28} {:>7} cases  {}", self.name, self.cases, self.detail)
    }
}

fn report(name: &str, passed: bool, cases: usize, detail: String) -> PropertyReport {
    PropertyReport {
        name: name.to_string(),
        passed,
        cases,
        detail,
    }
}

pub const GRAD_CASES: u64 = 100;
pub const OP_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn lift(e: impl fmt::Display) -> TensorError {
    TensorError::InvalidArgument {
        op: "verify",
        msg: e.to_string(),
    }
}

/// Entries with magnitude in `[0.1, 2)`, keeping kinks away from the stencil.
fn signed(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..2.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.2, 3.0, r)
}

fn binary(shape: &[usize], p: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| if r.random_bool(p) { 1.0 } else { 0.0 }).collect()).expect("shape")
}

type GradFn = Box<dyn Fn(&mut Tape, &[Var]) -> slick_core::tensor::Result<Var>>;
type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

struct GradCase {
    name: &'static str,
    make: Maker,
    f: GradFn,
    /// Trailing inputs held constant (targets), not differentiated.
    constants: usize,
}

fn case(
    name: &'static str,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    f: impl Fn(&mut Tape, &[Var]) -> slick_core::tensor::Result<Var> + 'static,
) -> GradCase {
    GradCase {
        name,
        make: Box::new(make),
        f: Box::new(f),
        constants: 0,
    }
}

impl GradCase {
    fn with_constants(mut self, n: usize) -> Self {
        self.constants = n;
        self
    }
}

/// Worst relative error of one function over `GRAD_CASES` random inputs.
/// Non-scalar outputs are reduced by a fixed random linear functional.
fn worst_error(c: &GradCase) -> Result<f64, TensorError> {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_CASES {
        let inputs = (c.make)(&mut rng(seed));
        let (free, fixed) = inputs.split_at(inputs.len() - c.constants);
        let err = gradcheck::check(free, FD_STEP, |t, v| {
            let mut all = v.to_vec();
            all.extend(fixed.iter().map(|x| t.constant(x.clone())));
            let out = (c.f)(t, &all)?;
            if t.value(out).len() == 1 {
                return Ok(out);
            }
            let w = Tensor::uniform(t.shape(out), -1.0, 1.0, &mut rng(seed ^ 0x5eed));
            let wv = t.constant(w);
            let p = t.mul(out, wv)?;
            t.sum(p)
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn run_grad_suite(name: &str, cases: Vec<GradCase>, tol: f64) -> PropertyReport {
    let mut failures = Vec::new();
    let mut worst: (f64, &str) = (0.0, "");
    for c in &cases {
        match worst_error(c) {
            Ok(e) => {
                if e > worst.0 {
                    worst = (e, c.name);
                }
                if !(e < tol) {
                    failures.push(format!("{} ({e:.2e})", c.name));
                }
            }
            Err(e) => failures.push(format!("{}: {e}", c.name)),
        }
    }
    let n = cases.len() * GRAD_CASES as usize;
    let detail = if failures.is_empty() {
        format!("{} functions, worst {:.2e} ({}) < {tol:e}", cases.len(), worst.0, worst.1)
    } else {
        format!("failed: {}", failures.join(", "))
    };
    report(name, failures.is_empty(), n, detail)
}

fn op_cases() -> Vec<GradCase> {
    let two = |r: &mut ChaCha8Rng| vec![signed(&[3, 4], r), signed(&[3, 4], r)];
    let one = |r: &mut ChaCha8Rng| vec![signed(&[2, 3, 2], r)];
    let pos = |r: &mut ChaCha8Rng| vec![positive(&[6], r)];
    let row = |r: &mut ChaCha8Rng| vec![signed(&[3, 2, 4], r), signed(&[4], r)];
    let mut v = vec![
        case("add", two, |t, v| t.add(v[0], v[1])),
        case("sub", two, |t, v| t.sub(v[0], v[1])),
        case("mul", two, |t, v| t.mul(v[0], v[1])),
        case("div", |r| vec![signed(&[5], r), positive(&[5], r)], |t, v| t.div(v[0], v[1])),
        case("scale", one, |t, v| t.scale(v[0], -1.7)),
        case("add_scalar", one, |t, v| t.add_scalar(v[0], 0.3)),
        case("neg", one, |t, v| t.neg(v[0])),
        case("sigmoid", one, |t, v| t.sigmoid(v[0])),
        case("relu", one, |t, v| t.relu(v[0])),
        case("exp", one, |t, v| t.exp(v[0])),
        case("square", one, |t, v| t.square(v[0])),
        case("abs", one, |t, v| t.abs(v[0])),
        case("ln", pos, |t, v| t.ln(v[0])),
        case("sqrt", pos, |t, v| t.sqrt(v[0])),
        case("clamp", one, |t, v| t.clamp(v[0], -5.0, 5.0)),
        case("add_row", row, |t, v| t.add_row(v[0], v[1])),
        case("mul_row", row, |t, v| t.mul_row(v[0], v[1])),
        case(
            "mul_scalar_var",
            |r| vec![signed(&[3, 2], r), signed(&[], r)],
            |t, v| t.mul_scalar_var(v[0], v[1]),
        ),
        case("sum", one, |t, v| t.sum(v[0])),
        case("mean", one, |t, v| t.mean(v[0])),
        case("mean_rows", one, |t, v| t.mean_rows(v[0])),
        case("sum_last", one, |t, v| t.sum_last(v[0])),
        case(
            "matmul",
            |r| vec![signed(&[4, 3], r), signed(&[3, 5], r)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case("transpose", |r| vec![signed(&[2, 5], r)], |t, v| t.transpose(v[0])),
        case("softmax", |r| vec![signed(&[3, 5], r)], |t, v| t.softmax(v[0], 2.5)),
        case("log_softmax", |r| vec![signed(&[2, 6], r)], |t, v| t.log_softmax(v[0], 0.7)),
        case("avg_pool2", |r| vec![signed(&[5, 4, 2], r)], |t, v| t.avg_pool2(v[0])),
        case(
            "concat",
            |r| vec![signed(&[2, 3], r), signed(&[2, 1], r)],
            |t, v| t.concat(&[v[0], v[1]], 1),
        ),
        case("gather", |r| vec![signed(&[6], r)], |t, v| t.gather(v[0], vec![5, 0, 0, 3, 2], &[5])),
        case("reshape", |r| vec![signed(&[6], r)], |t, v| t.reshape(v[0], &[2, 3])),
    ];
    for (name, stride, pad, k) in [("conv2d 3x3", 1, 1, 3), ("conv2d 3x3 s2", 2, 1, 3), ("conv2d 1x1", 1, 0, 1)] {
        v.push(case(
            name,
            move |r| vec![signed(&[5, 6, 2], r), signed(&[k, k, 2, 3], r), signed(&[3], r)],
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        ));
    }
    v
}

fn loss_cases() -> Vec<GradCase> {
    vec![
        case(
            "dice_bce",
            |r| vec![signed(&[6, 6], r), binary(&[6, 6], 0.4, r)],
            |t, v| {
                let p = t.sigmoid(v[0])?;
                let gt = t.value(v[1]).clone();
                dice_bce(t, p, &gt).map_err(lift)
            },
        )
        .with_constants(1),
        case(
            "boundary_surrogate",
            |r| vec![signed(&[6, 6], r), binary(&[6, 6], 0.5, r)],
            |t, v| {
                let p = t.sigmoid(v[0])?;
                let gt = t.value(v[1]).clone();
                boundary_surrogate(t, p, &gt).map_err(lift)
            },
        )
        .with_constants(1),
        case(
            "cross_entropy",
            |r| vec![signed(&[4, 5], r)],
            |t, v| cross_entropy(t, v[0], &[0, 4, 2, 2]).map_err(lift),
        ),
        case(
            "aux_joint",
            |r| vec![signed(&[3, 7], r), signed(&[3, 5], r)],
            |t, v| aux_joint(t, v[0], v[1], &[6, 1, 0], &[4, 2, 3]).map_err(lift),
        ),
        case(
            "paired_mse",
            |r| vec![Tensor::uniform(&[4, 4, 3], 0.0, 1.0, r), Tensor::uniform(&[4, 4, 2], 0.0, 1.0, r)],
            |t, v| paired_mse(t, v[0], v[1]).map_err(lift),
        ),
        case(
            "kl_rows",
            |r| vec![signed(&[3, 5], r), signed(&[3, 5], r)],
            |t, v| kl_rows(t, v[0], v[1], 2.0).map_err(lift),
        ),
        case(
            "mask_kd",
            |r| vec![signed(&[4, 4, 2], r), signed(&[4, 4, 2], r)],
            |t, v| mask_kd(t, v[0], v[1], 2.0).map_err(lift),
        ),
        case(
            "class_kd",
            |r| vec![signed(&[3, 6], r), signed(&[3, 6], r)],
            |t, v| class_kd(t, v[0], v[1], 1.5).map_err(lift),
        ),
        case(
            "feature_kd",
            |r| vec![signed(&[4, 4, 3], r), signed(&[2, 2, 2], r), signed(&[2, 3], r)],
            |t, v| feature_kd(t, &[v[0]], &[v[1]], &[v[2]]).map_err(lift),
        ),
        case(
            "graph_kd",
            |r| vec![signed(&[4, 3], r), signed(&[4, 3], r)],
            |t, v| graph_kd(t, v[0], v[1], &[(0, 1), (1, 2), (0, 3), (2, 3)]).map_err(lift),
        ),
        case(
            "attn_transfer",
            |r| vec![positive(&[4, 4], r), positive(&[2, 2], r)],
            |t, v| attn_transfer(t, &[v[0]], &[v[1]]).map_err(lift),
        ),
        case(
            "distill composite",
            |r| {
                vec![
                    signed(&[4, 4, 2], r),
                    signed(&[4, 4, 2], r),
                    signed(&[2, 5], r),
                    signed(&[2, 5], r),
                    signed(&[4, 4, 3], r),
                    signed(&[4, 4, 3], r),
                ]
            },
            |t, v| {
                let c = DistillConfig::default();
                let m = mask_kd(t, v[0], v[1], c.temperature).map_err(lift)?;
                let k = kl_rows(t, v[2], v[3], 1.0).map_err(lift)?;
                let eye = t.constant(identity(3));
                let f = feature_kd(t, &[v[4]], &[v[5]], &[eye]).map_err(lift)?;
                let mut acc = t.scale(m, c.lambda_m)?;
                for (x, w) in [(k, c.lambda_c), (f, c.lambda_f)] {
                    let s = t.scale(x, w)?;
                    acc = t.add(acc, s)?;
                }
                Ok(acc)
            },
        ),
    ]
}

fn identity(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    (0..n).for_each(|i| m.data_mut()[i * n + i] = 1.0);
    m
}

/// Central-difference checks of every differentiable op.
pub fn gradient_ops() -> PropertyReport {
    run_grad_suite("gradient: ops", op_cases(), OP_TOL)
}

/// Central-difference checks of every loss and the distillation composite.
pub fn gradient_losses() -> PropertyReport {
    run_grad_suite("gradient: losses", loss_cases(), LOSS_TOL)
}

/// Prior attention with zero bias against plain attention (1e-12).
pub fn identity_zero_bias() -> PropertyReport {
    let mut worst: f64 = 0.0;
    let cases = 100;
    for seed in 0..cases {
        let mut r = rng(seed);
        let (n, c, dk) = (r.random_range(1..8), r.random_range(1..6), r.random_range(1..5));
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[n, c], 1.0, &mut r));
        let w = PriorAttentionWeights {
            wq: t.constant(Tensor::randn(&[c, dk], 0.7, &mut r)),
            wk: t.constant(Tensor::randn(&[c, dk], 0.7, &mut r)),
            wv: t.constant(Tensor::randn(&[c, c], 0.7, &mut r)),
        };
        let g = StructuralPriorGraph::with_any_bias(vec![0, 1, 2, 3], vec![(0, 1), (2, 3)], vec![(1, 2)], 0.0, 0.0)
            .expect("graph");
        let parts: Vec<Option<usize>> = (0..n).map(|_| r.random_range(0..5usize)).map(|p| (p < 4).then_some(p)).collect();
        let (a, _) = prior_attention(&mut t, x, &g, &parts, &w).expect("prior attention");
        let (b, _) = plain_attention(&mut t, x, &w).expect("plain attention");
        worst = worst.max(t.value(a).max_abs_diff(t.value(b)));
    }
    report("identity: zero-bias attention", worst <= 1e-12, cases as usize, format!("max |diff| {worst:.2e} <= 1e-12"))
}

/// FiLM with γ = 1, β = 0 (zero weights) is the identity (1e-15).
pub fn identity_film() -> PropertyReport {
    let mut worst: f64 = 0.0;
    let cases = 100;
    for seed in 0..cases {
        let mut r = rng(seed);
        let (h, w, c, z) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let f = Tensor::randn(&[h, w, c], 2.0, &mut r);
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let zv = t.constant(Tensor::randn(&[z], 1.0, &mut r));
        let weights = FilmWeights {
            wg: t.constant(Tensor::zeros(&[z, c])),
            bg: t.constant(Tensor::ones(&[c])),
            wb: t.constant(Tensor::zeros(&[z, c])),
            bb: t.constant(Tensor::zeros(&[c])),
        };
        let out = film_modulate(&mut t, fv, zv, &weights).expect("film");
        worst = worst.max(t.value(out).max_abs_diff(&f));
    }
    report("identity: FiLM(1,0)", worst <= 1e-15, cases as usize, format!("max |diff| {worst:.2e} <= 1e-15"))
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn random_probs(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// A table with uniform rows leaves predictions bit-identical.
pub fn identity_uniform_calibration() -> PropertyReport {
    let cases = 100;
    let mut bad = 0;
    for seed in 0..cases {
        let mut r = rng(seed);
        let (p, d) = (r.random_range(1..8), r.random_range(1..6));
        let alpha = r.random_range(0.1..3.0);
        let table = build_table(&[], names("p", p), names("d", d), alpha).expect("table");
        let pred = InstancePrediction {
            mask: Tensor::uniform(&[4, 4], 0.0, 1.0, &mut r),
            part_probs: random_probs(p + 1, &mut r),
            damage_probs: random_probs(d + 1, &mut r),
            score: r.random_range(0.0..1.0),
            embedding: vec![],
        };
        if calibrate_instance(&pred, &table).expect("calibrate") != pred {
            bad += 1;
        }
    }
    report("identity: uniform calibration", bad == 0, cases as usize, format!("{bad} predictions changed"))
}

/// A teacher distilled into a copy of itself: every distillation term is
/// below 1e-8.
pub fn identity_self_distillation() -> PropertyReport {
    let tax = Taxonomy::default();
    let graph = make_graph(&tax, &Layout::canonical()).expect("graph");
    let cfg = ModelConfig::teacher();
    let edges = relational_edges(&graph, cfg.num_part_classes, cfg.num_damage_classes);
    let distill = DistillConfig::default();
    let mut worst = [0.0f64; 4];
    let cases = 3;
    for seed in 0..cases {
        let teacher = SlickModel::new(cfg.clone(), seed).expect("model");
        let student = teacher.clone();
        let head = projection_head(&cfg, &cfg, seed);
        let scene = generate(seed, 32, 32, &tax, 0.5).expect("scene");
        let mut t = Tape::new();
        let tp = teacher.params.bind(&mut t, false);
        let sp = student.params.bind(&mut t, true);
        let hp = head.bind(&mut t, true);
        let opts = training_options();
        let to = teacher.forward(&mut t, &tp, &scene.image, &scene.heatmap, &graph, &opts).expect("teacher");
        let so = student.forward(&mut t, &sp, &scene.image, &scene.heatmap, &graph, &opts).expect("student");
        let terms = distill_terms(&mut t, &to, &so, &hp, &edges, &distill, 0).expect("terms");
        let v = terms.values(&t);
        for (w, x) in worst.iter_mut().zip(v) {
            *w = w.max(x.abs());
        }
    }
    let passed = worst.iter().all(|&x| x < 1e-8);
    report(
        "identity: self-distillation",
        passed,
        cases as usize,
        format!("mask {:.1e} class {:.1e} feature {:.1e} graph {:.1e} < 1e-8", worst[0], worst[1], worst[2], worst[3]),
    )
}

pub const LIPSCHITZ_SAMPLES: usize = 100_000;

/// `‖softmax(z_S/τ) - softmax(z_T/τ)‖₁ ≤ (√K/τ)‖z_S - z_T‖₂` on random
/// logits, τ ∈ [0.5, 10], K ≤ 32.
pub fn lipschitz_bound() -> PropertyReport {
    let mut r = rng(0x11_95);
    let mut violations = 0;
    let mut tightest: f64 = 0.0;
    for _ in 0..LIPSCHITZ_SAMPLES {
        let k = r.random_range(1..=32);
        let tau = r.random_range(0.5..=10.0);
        let scale = 10f64.powf(r.random_range(-2.0..2.0));
        let zt: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0) * scale).collect();
        let zs: Vec<f64> = if r.random_bool(0.5) {
            (0..k).map(|_| r.random_range(-1.0..1.0) * scale).collect()
        } else {
            let eps = 10f64.powf(r.random_range(-6.0..0.0));
            zt.iter().map(|z| z + r.random_range(-1.0..1.0) * eps).collect()
        };
        let c = lipschitz_check(&zt, &zs, tau).expect("valid sample");
        if !c.holds {
            violations += 1;
        }
        if c.rhs > 0.0 {
            tightest = tightest.max(c.lhs / c.rhs);
        }
    }
    report(
        "bound: softmax Lipschitz",
        violations == 0,
        LIPSCHITZ_SAMPLES,
        format!("{violations} violations, max lhs/rhs {tightest:.3}"),
    )
}

pub const NMS_SETS: u64 = 1000;

fn random_predictions(r: &mut ChaCha8Rng) -> Vec<InstancePrediction> {
    let (h, w) = (8, 8);
    let n = r.random_range(0..12);
    (0..n)
        .map(|_| {
            let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
            let (y1, x1) = (r.random_range(y0..h), r.random_range(x0..w));
            let data = (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    if (y0..=y1).contains(&y) && (x0..=x1).contains(&x) {
                        r.random_range(0.5..1.0)
                    } else {
                        r.random_range(0.0..0.5)
                    }
                })
                .collect();
            // Occasional exact duplicates exercise tie-breaking.
            let score = if r.random_bool(0.1) { 0.5 } else { r.random_range(0.0..1.0) };
            InstancePrediction {
                mask: Tensor::new(&[h, w], data).expect("mask"),
                part_probs: vec![],
                damage_probs: vec![],
                score,
                embedding: vec![],
            }
        })
        .collect()
}

/// Subset, score threshold, pairwise IoU, idempotence and score-scale
/// invariance over random prediction sets.
pub fn nms_properties() -> Vec<PropertyReport> {
    let mut fails = [0usize; 5];
    for seed in 0..NMS_SETS {
        let mut r = rng(seed);
        let preds = random_predictions(&mut r);
        let cfg = NmsConfig {
            score_threshold: r.random_range(0.0..0.9),
            iou_threshold: r.random_range(0.05..=1.0),
            top_k: r.random_range(1..15),
        };
        let idx = nms_indices(&preds, &cfg);
        let kept = mask_nms(&preds, &cfg).expect("valid config");

        let distinct: HashSet<usize> = idx.iter().copied().collect();
        let subset = distinct.len() == idx.len()
            && kept.len() == idx.len()
            && idx.iter().zip(&kept).all(|(&i, k)| i < preds.len() && preds[i] == *k);
        fails[0] += usize::from(!subset);

        fails[1] += usize::from(!kept.iter().all(|k| k.score > cfg.score_threshold));

        let masks: Vec<Vec<bool>> = kept.iter().map(InstancePrediction::binary_mask).collect();
        let separated = (0..masks.len()).all(|i| (0..i).all(|j| mask_iou(&masks[i], &masks[j]) < cfg.iou_threshold));
        fails[2] += usize::from(!separated);

        fails[3] += usize::from(mask_nms(&kept, &cfg).expect("valid config") != kept);

        let c = 10f64.powf(r.random_range(-2.0..2.0));
        let scaled: Vec<InstancePrediction> = preds
            .iter()
            .map(|p| InstancePrediction {
                score: p.score * c,
                ..p.clone()
            })
            .collect();
        let scfg = NmsConfig {
            score_threshold: cfg.score_threshold * c,
            ..cfg
        };
        fails[4] += usize::from(nms_indices(&scaled, &scfg) != idx);
    }
    ["nms: subset", "nms: score threshold", "nms: pairwise IoU", "nms: idempotent", "nms: score-scale invariant"]
        .iter()
        .zip(fails)
        .map(|(name, f)| report(name, f == 0, NMS_SETS as usize, format!("{f} violating sets")))
        .collect()
}

/// Boundary pixels as a coordinate set: set pixels with at least one
/// 4-neighbour that is unset or off the grid.
fn boundary_set(mask: &[bool], h: usize, w: usize) -> HashSet<(usize, usize)> {
    let mut out = HashSet::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let neighbours = [
                y.checked_sub(1).map(|yy| (yy, x)),
                (y + 1 < h).then_some((y + 1, x)),
                x.checked_sub(1).map(|xx| (y, xx)),
                (x + 1 < w).then_some((y, x + 1)),
            ];
            if neighbours.iter().any(|n| n.is_none_or(|(yy, xx)| !mask[yy * w + xx])) {
                out.insert((y, x));
            }
        }
    }
    out
}

fn boundary_oracle(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let (ba, bb) = (boundary_set(a, h, w), boundary_set(b, h, w));
    if ba.is_empty() && bb.is_empty() {
        return 0.0;
    }
    let inter = ba.intersection(&bb).count();
    1.0 - 2.0 * inter as f64 / (ba.len() + bb.len()) as f64
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    match r.random_range(0..3) {
        0 => (0..h * w).map(|_| r.random_bool(0.5)).collect(),
        1 => {
            let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
            let (y1, x1) = (r.random_range(y0..h), r.random_range(x0..w));
            (0..h * w).map(|i| (y0..=y1).contains(&(i / w)) && (x0..=x1).contains(&(i % w))).collect()
        }
        _ => {
            let (cy, cx) = (r.random_range(0.0..h as f64), r.random_range(0.0..w as f64));
            let rad = r.random_range(0.5..8.0);
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    (y - cy).powi(2) + (x - cx).powi(2) <= rad * rad
                })
                .collect()
        }
    }
}

fn to_tensor(m: &[bool], h: usize, w: usize) -> Tensor {
    Tensor::new(&[h, w], m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).expect("mask")
}

pub const BOUNDARY_PAIRS: u64 = 1000;

/// Identical masks give 0, disjoint boundaries give 1, and random 16×16
/// pairs match the pixel-set oracle exactly.
pub fn boundary_properties() -> Vec<PropertyReport> {
    let (h, w) = (16, 16);
    let (mut ident, mut disjoint, mut oracle) = (0, 0, 0);
    let mut disjoint_cases = 0;
    for seed in 0..BOUNDARY_PAIRS {
        let mut r = rng(seed);
        let a = random_mask(&mut r, h, w);
        let b = random_mask(&mut r, h, w);
        let (ta, tb) = (to_tensor(&a, h, w), to_tensor(&b, h, w));
        ident += usize::from(boundary(&ta, &ta).expect("shapes") != 0.0);
        oracle += usize::from(boundary(&ta, &tb).expect("shapes") != boundary_oracle(&a, &b, h, w));

        // Two rectangles in opposite halves never share a boundary pixel.
        let y = r.random_range(0..h);
        let left: Vec<bool> = (0..h * w).map(|i| i / w <= y && i % w < r.random_range(1..w / 2)).collect();
        let right: Vec<bool> = (0..h * w).map(|i| i % w >= w / 2 + r.random_range(0..w / 2)).collect();
        if left.iter().any(|&v| v) && right.iter().any(|&v| v) {
            disjoint_cases += 1;
            let d = boundary(&to_tensor(&left, h, w), &to_tensor(&right, h, w)).expect("shapes");
            disjoint += usize::from(d != 1.0);
        }
    }
    vec![
        report("boundary: identical is 0", ident == 0, BOUNDARY_PAIRS as usize, format!("{ident} nonzero")),
        report("boundary: disjoint is 1", disjoint == 0, disjoint_cases, format!("{disjoint} not equal to 1")),
        report("boundary: pixel-set oracle", oracle == 0, BOUNDARY_PAIRS as usize, format!("{oracle} mismatches")),
    ]
}

pub const CALIBRATION_CASES: u64 = 1000;

fn random_counts(r: &mut ChaCha8Rng, p: usize, d: usize) -> Vec<Vec<u64>> {
    (0..p)
        .map(|_| {
            if r.random_bool(0.3) {
                vec![0; d]
            } else {
                (0..d).map(|_| if r.random_bool(0.3) { 0 } else { r.random_range(0..50) }).collect()
            }
        })
        .collect()
}

/// Row sums of random tables (with all-zero rows) and monotonicity of
/// `P(d|p)` in `count(p, d)`.
pub fn calibration_properties() -> Vec<PropertyReport> {
    let (mut worst_sum, mut monotone_fail) = (0.0f64, 0);
    for seed in 0..CALIBRATION_CASES {
        let mut r = rng(seed);
        let (p, d) = (r.random_range(1..10), r.random_range(1..8));
        let alpha = 10f64.powf(r.random_range(-3.0..1.0));
        let counts = random_counts(&mut r, p, d);
        let t = PartDamagePriorTable::from_counts(names("p", p), names("d", d), counts.clone(), alpha).expect("table");
        for i in 0..p {
            let s: f64 = t.row(i).iter().sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        let (pi, di) = (r.random_range(0..p), r.random_range(0..d));
        let mut bumped = counts;
        bumped[pi][di] += r.random_range(1..20);
        let t2 = PartDamagePriorTable::from_counts(names("p", p), names("d", d), bumped, alpha).expect("table");
        monotone_fail += usize::from(t2.prob(pi, di) < t.prob(pi, di));
    }
    vec![
        report(
            "calibration: row sums",
            worst_sum <= 1e-12,
            CALIBRATION_CASES as usize,
            format!("max |row sum - 1| {worst_sum:.2e} <= 1e-12"),
        ),
        report(
            "calibration: monotone",
            monotone_fail == 0,
            CALIBRATION_CASES as usize,
            format!("{monotone_fail} decreases"),
        ),
    ]
}

/// The whole suite in a fixed order.
pub fn run_all(mut on_result: impl FnMut(&PropertyReport)) -> Vec<PropertyReport> {
    let mut out = Vec::new();
    let mut push = |r: PropertyReport| {
        on_result(&r);
        out.push(r);
    };
    push(gradient_ops());
    push(gradient_losses());
    push(identity_zero_bias());
    push(identity_film());
    push(identity_uniform_calibration());
    push(identity_self_distillation());
    push(lipschitz_bound());
    nms_properties().into_iter().for_each(&mut push);
    boundary_properties().into_iter().for_each(&mut push);
    calibration_properties().into_iter().for_each(&mut push);
    out
}
