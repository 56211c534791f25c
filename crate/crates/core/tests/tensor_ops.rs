use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slick_core::tensor::{gradcheck, naive_matmul, Result, Tape, Tensor, Var};

const SEEDS: u64 = 100;
const OP_TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random values bounded away from zero, so kinks (relu, abs) are not hit
/// by the finite-difference stencil.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
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
    Tensor::new(shape, data).unwrap()
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.2, 3.0, r)
}

/// Random linear functional of the output, so every output entry matters.
fn project(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xabcdef);
    let w = Tensor::uniform(t.shape(out), -1.0, 1.0, &mut r);
    let wv = t.constant(w);
    let p = t.mul(out, wv)?;
    t.sum(p)
}

fn assert_grad<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let inputs = make(&mut rng(seed));
        let err = gradcheck::check(&inputs, H, |t, v| {
            let out = f(t, v)?;
            if t.value(out).len() == 1 {
                Ok(out)
            } else {
                project(t, out, seed)
            }
        })
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < OP_TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn grad_elementwise_binary() {
    let two = |r: &mut ChaCha8Rng| vec![away_from_zero(&[3, 4], r), away_from_zero(&[3, 4], r)];
    assert_grad("add", two, |t, v| t.add(v[0], v[1]));
    assert_grad("sub", two, |t, v| t.sub(v[0], v[1]));
    assert_grad("mul", two, |t, v| t.mul(v[0], v[1]));
    assert_grad(
        "div",
        |r| vec![away_from_zero(&[5], r), positive(&[5], r)],
        |t, v| t.div(v[0], v[1]),
    );
}

#[test]
fn grad_elementwise_unary() {
    let one = |r: &mut ChaCha8Rng| vec![away_from_zero(&[2, 3, 2], r)];
    let pos = |r: &mut ChaCha8Rng| vec![positive(&[6], r)];
    assert_grad("scale", one, |t, v| t.scale(v[0], -1.7));
    assert_grad("add_scalar", one, |t, v| t.add_scalar(v[0], 0.3));
    assert_grad("sigmoid", one, |t, v| t.sigmoid(v[0]));
    assert_grad("relu", one, |t, v| t.relu(v[0]));
    assert_grad("exp", one, |t, v| t.exp(v[0]));
    assert_grad("square", one, |t, v| t.square(v[0]));
    assert_grad("abs", one, |t, v| t.abs(v[0]));
    assert_grad("log", pos, |t, v| t.ln(v[0]));
    assert_grad("sqrt", pos, |t, v| t.sqrt(v[0]));
    // Bounds sit between the sampled magnitudes' gaps only rarely; a wide
    // interval exercises the pass-through branch, a narrow one the clamp.
    assert_grad("clamp", one, |t, v| t.clamp(v[0], -5.0, 5.0));
    assert_grad("clamp-saturated", |r| vec![positive(&[4], r)], |t, v| {
        let s = t.add_scalar(v[0], 10.0)?;
        t.clamp(s, -1.0, 1.0)
    });
}

#[test]
fn grad_broadcast_and_reductions() {
    assert_grad(
        "add_row",
        |r| vec![away_from_zero(&[3, 2, 4], r), away_from_zero(&[4], r)],
        |t, v| t.add_row(v[0], v[1]),
    );
    assert_grad(
        "mul_row",
        |r| vec![away_from_zero(&[3, 2, 4], r), away_from_zero(&[4], r)],
        |t, v| t.mul_row(v[0], v[1]),
    );
    assert_grad(
        "mul_scalar_var",
        |r| vec![away_from_zero(&[3, 2], r), away_from_zero(&[], r)],
        |t, v| t.mul_scalar_var(v[0], v[1]),
    );
    let one = |r: &mut ChaCha8Rng| vec![away_from_zero(&[3, 2, 4], r)];
    assert_grad("sum", one, |t, v| t.sum(v[0]));
    assert_grad("mean", one, |t, v| t.mean(v[0]));
    assert_grad("mean_rows (gap)", one, |t, v| t.mean_rows(v[0]));
    assert_grad("sum_last", one, |t, v| t.sum_last(v[0]));
    assert_grad("l1 norm", one, |t, v| {
        let a = t.abs(v[0])?;
        t.sum(a)
    });
    assert_grad("l2 norm", one, |t, v| {
        let s = t.square(v[0])?;
        let s = t.sum(s)?;
        t.sqrt(s)
    });
}

#[test]
fn grad_linear_algebra() {
    assert_grad(
        "matmul",
        |r| vec![away_from_zero(&[4, 3], r), away_from_zero(&[3, 5], r)],
        |t, v| t.matmul(v[0], v[1]),
    );
    assert_grad("transpose", |r| vec![away_from_zero(&[2, 5], r)], |t, v| t.transpose(v[0]));
    assert_grad(
        "softmax",
        |r| vec![away_from_zero(&[3, 5], r)],
        |t, v| t.softmax(v[0], 1.0),
    );
    assert_grad(
        "softmax tau=2.5",
        |r| vec![away_from_zero(&[3, 5], r)],
        |t, v| t.softmax(v[0], 2.5),
    );
    assert_grad(
        "log_softmax",
        |r| vec![away_from_zero(&[2, 6], r)],
        |t, v| t.log_softmax(v[0], 0.7),
    );
    assert_grad(
        "kl divergence",
        |r| vec![away_from_zero(&[5], r), away_from_zero(&[5], r)],
        |t, v| {
            let p = t.softmax(v[0], 1.0)?;
            let lp = t.log_softmax(v[0], 1.0)?;
            let lq = t.log_softmax(v[1], 1.0)?;
            let d = t.sub(lp, lq)?;
            let k = t.mul(p, d)?;
            t.sum(k)
        },
    );
}

#[test]
fn grad_spatial() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        assert_grad(
            "conv2d",
            |r| {
                vec![
                    away_from_zero(&[5, 6, 2], r),
                    away_from_zero(&[k, k, 2, 3], r),
                    away_from_zero(&[3], r),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        );
    }
    assert_grad("avg_pool2", |r| vec![away_from_zero(&[5, 4, 2], r)], |t, v| t.avg_pool2(v[0]));
    assert_grad(
        "concat",
        |r| vec![away_from_zero(&[2, 3], r), away_from_zero(&[2, 1], r)],
        |t, v| t.concat(&[v[0], v[1]], 1),
    );
    assert_grad("gather", |r| vec![away_from_zero(&[6], r)], |t, v| {
        t.gather(v[0], vec![5, 0, 0, 3, 2], &[5])
    });
    assert_grad("reshape", |r| vec![away_from_zero(&[6], r)], |t, v| t.reshape(v[0], &[2, 3]));
}

#[test]
fn matmul_matches_triple_loop_exactly() {
    let mut r = rng(11);
    let a = Tensor::uniform(&[5, 7], -3.0, 3.0, &mut r);
    let b = Tensor::uniform(&[7, 3], -3.0, 3.0, &mut r);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(va, vb).unwrap();
    let oracle = naive_matmul(a.data(), b.data(), 5, 7, 3);
    assert_eq!(t.data(c), oracle.as_slice());

    // Larger shapes cross the internal block boundaries.
    let a = Tensor::uniform(&[130, 257], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[257, 9], -1.0, 1.0, &mut r);
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(va, vb).unwrap();
    assert_eq!(t.data(c), naive_matmul(a.data(), b.data(), 130, 257, 9).as_slice());
}

#[test]
fn softmax_two_logits_matches_high_precision() {
    // e/(e+1) and 1/(e+1) to 40 digits.
    const P0: f64 = 0.731_058_578_630_004_879_251_159_241_821_836_274_4;
    const P1: f64 = 0.268_941_421_369_995_120_748_840_758_178_163_725_6;
    let mut t = Tape::new();
    let z = t.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    let s = t.softmax(z, 1.0).unwrap();
    assert!((t.data(s)[0] - P0).abs() < 1e-15);
    assert!((t.data(s)[1] - P1).abs() < 1e-15);
}

#[test]
fn softmax_simplex_under_extreme_logits() {
    let mut r = rng(3);
    for _ in 0..200 {
        let k = r.random_range(1..12);
        let data: Vec<f64> = (0..k).map(|_| r.random_range(-1e4..1e4)).collect();
        let tau = r.random_range(0.01..10.0);
        let mut t = Tape::new();
        let z = t.constant(Tensor::new(&[k], data).unwrap());
        let s = t.softmax(z, tau).unwrap();
        let p = t.data(s);
        assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut r = rng(5);
        let x = Tensor::randn(&[8, 8, 3], 1.0, &mut r);
        let w = Tensor::randn(&[3, 3, 3, 4], 0.3, &mut r);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let wv = t.param(&w);
        let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = t.sigmoid(y).unwrap();
        let l = t.mean(y).unwrap();
        t.backward(l).unwrap();
        (t.value(y).checksum(), t.grad(wv).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}
