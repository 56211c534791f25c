use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slick_core::blocks::{c3_calibrate, prior_attention, InstancePrediction, PriorAttentionWeights, StructuralPriorGraph};
use slick_core::calibrate::{calibrate_instance, PartDamagePriorTable};
use slick_core::distill::{attn_transfer, feature_kd, graph_kd, kl_rows, mask_kd};
use slick_core::losses::{boundary, dice_bce, paired_mse, total, LossTerms, LossWeights};
use slick_core::tensor::{Tape, Tensor};

fn tensor(shape: &[usize], seed: u64, std: f64) -> Tensor {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Builds the node first, then reads its value.
macro_rules! val {
    ($t:ident, $e:expr) => {{
        let v = $e;
        $t.value(v).item()
    }};
}

fn eye(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    (0..n).for_each(|i| m.data_mut()[i * n + i] = 1.0);
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), n in 1usize..8, pos in -50.0f64..50.0, neg in -1e9f64..0.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[n, 4], 2.0, &mut r));
        let w = PriorAttentionWeights {
            wq: t.constant(Tensor::randn(&[4, 3], 1.0, &mut r)),
            wk: t.constant(Tensor::randn(&[4, 3], 1.0, &mut r)),
            wv: t.constant(Tensor::randn(&[4, 4], 1.0, &mut r)),
        };
        let g = StructuralPriorGraph::with_any_bias(vec![0, 1, 2], vec![(0, 1)], vec![(1, 2)], pos, neg).unwrap();
        let parts: Vec<Option<usize>> = (0..n).map(|i| if i % 4 == 3 { None } else { Some(i % 3) }).collect();
        let (_, attn) = prior_attention(&mut t, x, &g, &parts, &w).unwrap();
        for row in t.value(attn).data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn c3_never_grows_a_channel(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
        let mut t = Tape::new();
        let f = tensor(&[h, w, 6], seed, 3.0);
        let fv = t.constant(f.clone());
        let w1 = t.constant(tensor(&[6, 3], seed ^ 1, 2.0));
        let w2 = t.constant(tensor(&[3, 6], seed ^ 2, 2.0));
        let (out, _) = c3_calibrate(&mut t, fv, w1, w2).unwrap();
        let norm = |d: &[f64], k: usize| d.iter().skip(k).step_by(6).map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..6 {
            prop_assert!(norm(t.value(out).data(), k) <= norm(f.data(), k));
        }
    }

    #[test]
    fn boundary_is_bounded_and_symmetric(a in prop::collection::vec(0.0f64..1.0, 64), b in prop::collection::vec(0.0f64..1.0, 64)) {
        let ta = Tensor::new(&[8, 8], a).unwrap();
        let tb = Tensor::new(&[8, 8], b).unwrap();
        let d = boundary(&ta, &tb).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, boundary(&tb, &ta).unwrap());
    }

    #[test]
    fn dice_bce_decreases_toward_the_target(
        pred in prop::collection::vec(0.05f64..0.95, 16),
        gt in prop::collection::vec(any::<bool>(), 16),
    ) {
        let gt = Tensor::new(&[4, 4], gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let mut last = f64::INFINITY;
        for step in 0..10 {
            // Stop short of the target itself, where BCE hits log(0) clamping.
            let s = step as f64 / 10.0;
            let p: Vec<f64> = pred.iter().zip(gt.data()).map(|(p, g)| p + s * 0.9 * (g - p)).collect();
            let mut t = Tape::new();
            let v = t.constant(Tensor::new(&[4, 4], p).unwrap());
            let l = val!(t, dice_bce(&mut t, v, &gt).unwrap());
            prop_assert!(l >= 0.0);
            prop_assert!(l < last, "not decreasing at step {step}: {l} >= {last}");
            last = l;
        }
    }

    #[test]
    fn paired_mse_is_non_negative(seed in any::<u64>(), na in 1usize..4, nb in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let a = t.constant(Tensor::uniform(&[3, 3, na], 0.0, 1.0, &mut r));
        let b = t.constant(Tensor::uniform(&[3, 3, nb], 0.0, 1.0, &mut r));
        prop_assert!(val!(t, paired_mse(&mut t, a, b).unwrap()) >= 0.0);
        prop_assert_eq!(val!(t, paired_mse(&mut t, a, a).unwrap()), 0.0);
    }

    #[test]
    fn total_is_linear_in_each_term(vals in prop::array::uniform4(0.0f64..5.0), which in 0usize..4, k in 0.0f64..4.0) {
        let w = LossWeights { lambda_seg: 1.0, lambda_bnd: 0.5, lambda_aux: 0.25, lambda_cons: 0.1 };
        let eval = |v: [f64; 4]| {
            let mut t = Tape::new();
            let terms = LossTerms { seg: t.scalar(v[0]), bnd: t.scalar(v[1]), aux: t.scalar(v[2]), cons: t.scalar(v[3]) };
            let out = total(&mut t, &terms, &w).unwrap();
            val!(t, out)
        };
        let base = eval(vals);
        let mut moved = vals;
        moved[which] += k;
        let lambda = [w.lambda_seg, w.lambda_bnd, w.lambda_aux, w.lambda_cons][which];
        prop_assert!((eval(moved) - base - lambda * k).abs() < 1e-12);
    }

    #[test]
    fn distillation_terms_non_negative_and_zero_at_equality(seed in any::<u64>(), tau in 0.5f64..5.0) {
        let mut t = Tape::new();
        let (a, b) = (tensor(&[3, 3, 2], seed, 2.0), tensor(&[3, 3, 2], seed ^ 7, 2.0));
        let (va, vb) = (t.constant(a), t.constant(b));
        let z = t.constant(tensor(&[3, 5], seed ^ 9, 3.0));
        let z2 = t.constant(tensor(&[3, 5], seed ^ 11, 3.0));
        let id = t.constant(eye(2));
        let h = t.constant(tensor(&[4, 3], seed ^ 13, 1.0));
        let h2 = t.constant(tensor(&[4, 3], seed ^ 17, 1.0));
        let edges = [(0, 1), (1, 2), (2, 3), (0, 3)];
        let am = t.constant(Tensor::uniform(&[4, 4], 0.1, 2.0, &mut ChaCha8Rng::seed_from_u64(seed)));
        let am2 = t.constant(Tensor::uniform(&[4, 4], 0.1, 2.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 3)));

        let pairs: [(f64, f64); 5] = [
            (val!(t, mask_kd(&mut t, va, vb, tau).unwrap()), val!(t, mask_kd(&mut t, va, va, tau).unwrap())),
            (val!(t, kl_rows(&mut t, z, z2, tau).unwrap()), val!(t, kl_rows(&mut t, z, z, tau).unwrap())),
            (
                val!(t, feature_kd(&mut t, &[va], &[vb], &[id]).unwrap()),
                val!(t, feature_kd(&mut t, &[va], &[va], &[id]).unwrap()),
            ),
            (val!(t, graph_kd(&mut t, h, h2, &edges).unwrap()), val!(t, graph_kd(&mut t, h, h, &edges).unwrap())),
            (val!(t, attn_transfer(&mut t, &[am], &[am2]).unwrap()), val!(t, attn_transfer(&mut t, &[am], &[am]).unwrap())),
        ];
        for (differ, equal) in pairs {
            prop_assert!(differ >= 0.0);
            prop_assert!(equal.abs() < 1e-12, "{equal}");
        }
    }

    #[test]
    fn graph_kd_ignores_common_translation(seed in any::<u64>(), shift in prop::array::uniform3(-10.0f64..10.0)) {
        let edges = [(0, 1), (1, 2), (0, 2), (2, 3)];
        let (h, h2) = (tensor(&[4, 3], seed, 1.0), tensor(&[4, 3], seed ^ 5, 1.0));
        let shifted = Tensor::new(&[4, 3], h2.data().iter().enumerate().map(|(i, x)| x + shift[i % 3]).collect()).unwrap();
        let shifted_h = Tensor::new(&[4, 3], h.data().iter().enumerate().map(|(i, x)| x - shift[i % 3]).collect()).unwrap();
        let mut t = Tape::new();
        let (vh, v2, vs, vsh) = (t.constant(h), t.constant(h2), t.constant(shifted), t.constant(shifted_h));
        let base = val!(t, graph_kd(&mut t, vh, v2, &edges).unwrap());
        prop_assert!((val!(t, graph_kd(&mut t, vh, vs, &edges).unwrap()) - base).abs() < 1e-9);
        prop_assert!((val!(t, graph_kd(&mut t, vsh, v2, &edges).unwrap()) - base).abs() < 1e-9);
    }

    #[test]
    fn mask_kd_decreases_along_the_path(seed in any::<u64>(), tau in 0.5f64..4.0) {
        let (mt, ms) = (tensor(&[3, 3, 2], seed, 2.0), tensor(&[3, 3, 2], seed ^ 21, 2.0));
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let s = step as f64 / 9.0;
            let m: Vec<f64> = ms.data().iter().zip(mt.data()).map(|(a, b)| a + s * (b - a)).collect();
            let mut t = Tape::new();
            let (vt, vs) = (t.constant(mt.clone()), t.constant(Tensor::new(&[3, 3, 2], m).unwrap()));
            let l = val!(t, mask_kd(&mut t, vt, vs, tau).unwrap());
            prop_assert!(l <= last + 1e-15);
            last = l;
        }
        prop_assert!(last.abs() < 1e-12);
    }

    #[test]
    fn table_rows_are_distributions(
        counts in prop::collection::vec(prop::collection::vec(0u64..30, 4), 1..6),
        alpha in 0.0f64..3.0,
    ) {
        let p = counts.len();
        let names = |s: &str, n: usize| (0..n).map(|i| format!("{s}{i}")).collect::<Vec<_>>();
        let t = PartDamagePriorTable::from_counts(names("p", p), names("d", 4), counts, alpha).unwrap();
        for i in 0..p {
            prop_assert!(t.row(i).iter().all(|&x| x >= 0.0));
            prop_assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_keeps_the_damage_simplex(
        counts in prop::collection::vec(prop::collection::vec(0u64..30, 3), 2..=2),
        q in prop::array::uniform3(0.01f64..1.0),
        r in prop::array::uniform4(0.01f64..1.0),
    ) {
        let names = |s: &str, n: usize| (0..n).map(|i| format!("{s}{i}")).collect::<Vec<_>>();
        let t = PartDamagePriorTable::from_counts(names("p", 2), names("d", 3), counts, 0.5).unwrap();
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let pred = InstancePrediction {
            mask: Tensor::ones(&[2, 2]),
            part_probs: norm(&q),
            damage_probs: norm(&r),
            score: 0.5,
            embedding: vec![],
        };
        let c = calibrate_instance(&pred, &t).unwrap();
        prop_assert!(c.damage_probs.iter().all(|&x| x >= 0.0));
        prop_assert!((c.damage_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
