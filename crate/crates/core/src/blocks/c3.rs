use super::ModelError;
use crate::tensor::{Tape, TensorError, Var};

/// Cross-channel calibration (squeeze-and-excitation):
/// `gate = σ(W₂ · relu(W₁ · GAP(F)))`, output channel `k` is `F[.., k] · gate_k`.
///
/// `f: [h, w, C]`, `w1: [C, C/r]`, `w2: [C/r, C]`. Returns `(output, gate)`.
pub fn c3_calibrate(tape: &mut Tape, f: Var, w1: Var, w2: Var) -> Result<(Var, Var), ModelError> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 3 {
        return Err(ModelError::BadInput(shape));
    }
    let c = shape[2];
    let (s1, s2) = (tape.shape(w1).to_vec(), tape.shape(w2).to_vec());
    let reduced = s1.get(1).copied().unwrap_or(0);
    if s1.len() != 2 || s1[0] != c || reduced == 0 || c % reduced != 0 || s2 != [reduced, c] {
        return Err(TensorError::ShapeMismatch {
            op: "c3_calibrate",
            lhs: s1,
            rhs: s2,
        }
        .into());
    }
    let pooled = tape.mean_rows(f)?;
    let pooled = tape.reshape(pooled, &[1, c])?;
    let hidden = tape.matmul(pooled, w1)?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.matmul(hidden, w2)?;
    let gate = tape.sigmoid(logits)?;
    let gate = tape.reshape(gate, &[c])?;
    Ok((tape.mul_row(f, gate)?, gate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_first_layer_halves_features() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::randn(&[3, 3, 4], 1.0, &mut r);
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let w1 = t.constant(Tensor::zeros(&[4, 2]));
        let w2 = t.constant(Tensor::randn(&[2, 4], 1.0, &mut r));
        let (out, gate) = c3_calibrate(&mut t, fv, w1, w2).unwrap();
        assert!(t.data(gate).iter().all(|&g| g == 0.5));
        assert_eq!(t.value(out).data(), f.map(|v| v / 2.0).data());
    }

    #[test]
    fn zero_features_stay_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let fv = t.constant(Tensor::zeros(&[2, 5, 4]));
        let w1 = t.constant(Tensor::randn(&[4, 1], 1.0, &mut r));
        let w2 = t.constant(Tensor::randn(&[1, 4], 1.0, &mut r));
        let (out, _) = c3_calibrate(&mut t, fv, w1, w2).unwrap();
        assert!(t.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduction_must_divide_channels() {
        let mut t = Tape::new();
        let fv = t.constant(Tensor::zeros(&[2, 2, 4]));
        let w1 = t.constant(Tensor::zeros(&[4, 3]));
        let w2 = t.constant(Tensor::zeros(&[3, 4]));
        assert!(c3_calibrate(&mut t, fv, w1, w2).is_err());
    }
}
