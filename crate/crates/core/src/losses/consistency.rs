use super::matching::{greedy_match, soft_iou};
use super::{LossError, Result};
use crate::blocks::{DamageHeatmap, ForwardOptions, SlickModel, StructuralPriorGraph};
use crate::params::ParamVars;
use crate::tensor::{Tape, Tensor, Var};

/// Geometric augmentations that permute the pixel grid. Rotations are
/// counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    HFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl Transform {
    pub const AUGMENTATIONS: [Transform; 4] = [Transform::HFlip, Transform::Rot90, Transform::Rot180, Transform::Rot270];

    pub fn inverse(self) -> Self {
        match self {
            Transform::Rot90 => Transform::Rot270,
            Transform::Rot270 => Transform::Rot90,
            t => t,
        }
    }

    pub fn output_size(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Rot90 | Transform::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// For every output element of a channel-last `[h, w, c]` map, the flat
    /// index of the input element it copies.
    pub fn source_index(self, h: usize, w: usize, c: usize) -> Vec<usize> {
        let (oh, ow) = self.output_size(h, w);
        let mut idx = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = match self {
                    Transform::Identity => (y, x),
                    Transform::HFlip => (y, w - 1 - x),
                    Transform::Rot90 => (x, w - 1 - y),
                    Transform::Rot180 => (h - 1 - y, w - 1 - x),
                    Transform::Rot270 => (h - 1 - x, y),
                };
                let base = (sy * w + sx) * c;
                idx.extend(base..base + c);
            }
        }
        idx
    }

    fn dims(t: &[usize]) -> (usize, usize, usize) {
        match *t {
            [h, w] => (h, w, 1),
            [h, w, c] => (h, w, c),
            _ => panic!("transform expects a rank-2 or rank-3 map, got {t:?}"),
        }
    }

    pub fn apply(self, t: &Tensor) -> Tensor {
        let (h, w, c) = Self::dims(t.shape());
        let (oh, ow) = self.output_size(h, w);
        let data = self.source_index(h, w, c).iter().map(|&i| t.data()[i]).collect();
        let shape: Vec<usize> = if t.rank() == 2 { vec![oh, ow] } else { vec![oh, ow, c] };
        Tensor::new(&shape, data).expect("transform shape")
    }

    pub fn apply_var(self, tape: &mut Tape, v: Var) -> Result<Var> {
        let shape = tape.shape(v).to_vec();
        let (h, w, c) = Self::dims(&shape);
        let (oh, ow) = self.output_size(h, w);
        let out_shape: Vec<usize> = if shape.len() == 2 { vec![oh, ow] } else { vec![oh, ow, c] };
        Ok(tape.gather(v, self.source_index(h, w, c), &out_shape)?)
    }
}

/// Mean squared difference between two `[H, W, N]` mask stacks after
/// pairing their instances greedily by soft IoU.
pub fn paired_mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 3 || sb.len() != 3 || sa[..2] != sb[..2] {
        return Err(LossError::Shape {
            op: "paired_mse",
            lhs: sa,
            rhs: sb,
        });
    }
    let (h, w, na, nb) = (sa[0], sa[1], sa[2], sb[2]);
    let column = |data: &[f64], n: usize, i: usize| -> Vec<f64> { (0..h * w).map(|px| data[px * n + i]).collect() };
    let (da, db) = (tape.data(a), tape.data(b));
    let cols_b: Vec<Vec<f64>> = (0..nb).map(|j| column(db, nb, j)).collect();
    let iou: Vec<Vec<f64>> = (0..na)
        .map(|i| {
            let ca = column(da, na, i);
            cols_b.iter().map(|cb| soft_iou(&ca, cb)).collect()
        })
        .collect();
    let mut pairs = greedy_match(&iou, nb, 0.0).pairs;
    if pairs.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    pairs.sort();
    let k = pairs.len();
    let ia = (0..h * w).flat_map(|px| pairs.iter().map(move |&(i, _)| px * na + i)).collect();
    let ib = (0..h * w).flat_map(|px| pairs.iter().map(move |&(_, j)| px * nb + j)).collect();
    let ga = tape.gather(a, ia, &[h, w, k])?;
    let gb = tape.gather(b, ib, &[h, w, k])?;
    let d = tape.sub(ga, gb)?;
    let d = tape.square(d)?;
    Ok(tape.mean(d)?)
}

/// Consistency of the model's masks under `transform`, measured against an
/// already computed untransformed mask stack `base_masks` (`[H, W, N]`).
#[allow(clippy::too_many_arguments)]
pub fn consistency_against(
    tape: &mut Tape,
    model: &SlickModel,
    p: &ParamVars,
    base_masks: Var,
    image: &Tensor,
    heat: &DamageHeatmap,
    graph: &StructuralPriorGraph,
    opts: &ForwardOptions,
    transform: Transform,
) -> Result<Var> {
    if transform == Transform::Identity {
        return Ok(tape.scalar(0.0));
    }
    let x = transform.apply(image);
    let hm = DamageHeatmap::new(transform.apply(heat.map()))?;
    let opts = ForwardOptions {
        token_parts: opts.token_parts.clone(),
        conditioning: opts.conditioning.as_ref().map(|c| transform.apply(c)),
    };
    let out = model.forward(tape, p, &x, &hm, graph, &opts)?;
    let back = transform.inverse().apply_var(tape, out.masks)?;
    paired_mse(tape, back, base_masks)
}

/// `mean((T⁻¹(model(T x)) - model(x))²)` over greedily paired instances.
pub fn consistency(
    tape: &mut Tape,
    model: &SlickModel,
    p: &ParamVars,
    image: &Tensor,
    heat: &DamageHeatmap,
    graph: &StructuralPriorGraph,
    opts: &ForwardOptions,
    transform: Transform,
) -> Result<Var> {
    let base = model.forward(tape, p, image, heat, graph, opts)?;
    consistency_against(tape, model, p, base.masks, image, heat, graph, opts, transform)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transforms_invert() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::randn(&[3, 5, 2], 1.0, &mut r);
        for tr in Transform::AUGMENTATIONS {
            assert_eq!(tr.inverse().apply(&tr.apply(&t)), t);
        }
        assert_eq!(Transform::Rot90.apply(&Transform::Rot90.apply(&t)), Transform::Rot180.apply(&t));
    }

    #[test]
    fn rot90_is_counter_clockwise() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Transform::Rot90.apply(&t).data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(Transform::HFlip.apply(&t).data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn paired_mse_ignores_instance_order() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(&[4, 4, 3], 0.0, 1.0, &mut r);
        let perm = Tensor::new(
            &[4, 4, 3],
            a.data().chunks(3).flat_map(|c| [c[2], c[0], c[1]]).collect(),
        )
        .unwrap();
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a), t.constant(perm));
        let l = paired_mse(&mut t, va, vb).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    fn setup() -> (SlickModel, Tensor, DamageHeatmap, StructuralPriorGraph) {
        let model = SlickModel::new(ModelConfig::student(), 11).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut r);
        let heat = DamageHeatmap::new(Tensor::uniform(&[16, 16, 1], 0.0, 1.0, &mut r)).unwrap();
        let g = StructuralPriorGraph::new((0..6).collect(), vec![(0, 1), (2, 3)], vec![(4, 5)], 1.0, -1.0).unwrap();
        (model, img, heat, g)
    }

    #[test]
    fn identity_transform_is_zero() {
        let (model, img, heat, g) = setup();
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, false);
        let l = consistency(&mut t, &model, &p, &img, &heat, &g, &ForwardOptions::default(), Transform::Identity).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn hflip_matches_explicit_recomputation() {
        let (model, img, heat, g) = setup();
        let opts = ForwardOptions::default();
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, false);
        let l = consistency(&mut t, &model, &p, &img, &heat, &g, &opts, Transform::HFlip).unwrap();

        let base = model.predict_instances(&img, &heat, &g, &opts).unwrap();
        let flipped_img = Tensor::new(
            &[16, 16, 3],
            (0..16)
                .flat_map(|y| (0..16).flat_map(move |x| (0..3).map(move |c| (y, 15 - x, c))))
                .map(|(y, x, c)| img.data()[(y * 16 + x) * 3 + c])
                .collect(),
        )
        .unwrap();
        let flipped_heat = DamageHeatmap::new(Transform::HFlip.apply(heat.map())).unwrap();
        let flipped = model.predict_instances(&flipped_img, &flipped_heat, &g, &opts).unwrap();
        let unflip = |m: &Tensor| -> Vec<f64> {
            (0..16).flat_map(|y| (0..16).map(move |x| (y, 15 - x))).map(|(y, x)| m.data()[y * 16 + x]).collect()
        };
        let back: Vec<Vec<f64>> = flipped.iter().map(|p| unflip(&p.mask)).collect();
        let iou: Vec<Vec<f64>> =
            back.iter().map(|b| base.iter().map(|a| soft_iou(b, a.mask.data())).collect()).collect();
        let pairs = greedy_match(&iou, base.len(), 0.0).pairs;
        let mut sum = 0.0;
        for &(i, j) in &pairs {
            for (x, y) in back[i].iter().zip(base[j].mask.data()) {
                sum += (x - y) * (x - y);
            }
        }
        let expected = sum / (pairs.len() * 256) as f64;
        assert!((t.value(l).item() - expected).abs() < 1e-12);
        assert!(expected > 0.0);
    }
}
