use super::ModelError;
use crate::tensor::{Tape, TensorError, Var};

/// Per-query mask logits and sigmoid masks, both `[h, w, N]`.
#[derive(Debug, Clone, Copy)]
pub struct IsrOutput {
    pub logits: Var,
    pub masks: Var,
    pub kernels: Var,
}

/// Instance-sensitive refinement head. Each query row of `queries: [N, d]`
/// is mapped by `phi` (`phi_w: [d, k·k·C]`, `phi_b: [k·k·C]`) to a `k×k×C`
/// kernel, cross-correlated ("same" zero padding) with `features: [h, w, C]`.
pub fn isr_masks(
    tape: &mut Tape,
    queries: Var,
    features: Var,
    phi_w: Var,
    phi_b: Var,
    kernel: usize,
) -> Result<IsrOutput, ModelError> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 3 {
        return Err(ModelError::BadInput(fs));
    }
    let c = fs[2];
    let n = tape.shape(queries)[0];
    let kdim = kernel * kernel * c;
    if tape.shape(phi_w).get(1) != Some(&kdim) {
        return Err(TensorError::ShapeMismatch {
            op: "isr_masks",
            lhs: vec![kernel, kernel, c],
            rhs: tape.shape(phi_w).to_vec(),
        }
        .into());
    }
    let kernels = tape.matmul(queries, phi_w)?;
    let kernels = tape.add_row(kernels, phi_b)?;
    // [N, k·k·C] -> [k, k, C, N]
    let kt = tape.transpose(kernels)?;
    let weight = tape.reshape(kt, &[kernel, kernel, c, n])?;
    let logits = tape.conv2d(features, weight, None, 1, kernel / 2)?;
    let masks = tape.sigmoid(logits)?;
    Ok(IsrOutput { logits, masks, kernels })
}
