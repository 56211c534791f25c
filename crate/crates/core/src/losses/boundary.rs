use super::{soft_dice, LossError, Result};
use crate::tensor::{Tape, Tensor, Var};

fn dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [h, w, 1] => Ok((h, w)),
        _ => Err(LossError::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// Pixels set after 0.5 binarization that are not in the 4-neighbourhood
/// erosion of the mask. Pixels outside the grid count as unset.
pub fn boundary_pixels(mask: &[f64], h: usize, w: usize) -> Vec<bool> {
    let on = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] >= 0.5
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(y, x) {
                let interior = on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1);
                out[y as usize * w + x as usize] = !interior;
            }
        }
    }
    out
}

/// `1 - 2|∂a ∩ ∂b| / (|∂a| + |∂b|)`, zero when both boundaries are empty.
/// Both inputs are binarized at 0.5, so this is a metric rather than a
/// differentiable loss.
pub fn boundary(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w) = dims("boundary", pred)?;
    if dims("boundary", gt)? != (h, w) {
        return Err(LossError::Shape {
            op: "boundary",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let a = boundary_pixels(pred.data(), h, w);
    let b = boundary_pixels(gt.data(), h, w);
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    if na + nb == 0 {
        return Ok(0.0);
    }
    let inter = a.iter().zip(&b).filter(|(&x, &y)| x && y).count();
    Ok(1.0 - 2.0 * inter as f64 / (na + nb) as f64)
}

const SOBEL_EPS: f64 = 1e-6;

/// Sobel x/y filters as a `[3, 3, 1, 2]` correlation kernel, scaled so the
/// gradient magnitude of a unit step is at most 1.
fn sobel_kernel() -> Tensor {
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let data = gx.iter().zip(&gy).flat_map(|(&a, &b)| [a / 4.0, b / 4.0]).collect();
    Tensor::new(&[3, 3, 1, 2], data).expect("sobel shape")
}

fn sobel_magnitude(tape: &mut Tape, m: Var, h: usize, w: usize) -> Result<Var> {
    let x = tape.reshape(m, &[h, w, 1])?;
    let k = tape.constant(sobel_kernel());
    let g = tape.conv2d(x, k, None, 1, 1)?;
    let sq = tape.square(g)?;
    let s = tape.sum_last(sq)?;
    let s = tape.add_scalar(s, SOBEL_EPS)?;
    Ok(tape.sqrt(s)?)
}

fn sobel_magnitude_values(m: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = t.constant(m.reshape(&[h, w])?);
    let out = sobel_magnitude(&mut t, v, h, w)?;
    Ok(t.value(out).clone())
}

/// Differentiable stand-in for [`boundary`]: soft Dice between Sobel
/// gradient magnitude maps of the prediction and the target.
pub fn boundary_surrogate(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    let (h, w) = dims("boundary_surrogate", gt)?;
    if tape.value(pred).len() != h * w {
        return Err(LossError::Shape {
            op: "boundary_surrogate",
            lhs: tape.shape(pred).to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let target = sobel_magnitude_values(gt, h, w)?;
    let mag = sobel_magnitude(tape, pred, h, w)?;
    soft_dice(tape, mag, &target, 1e-3)
}
