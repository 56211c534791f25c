use super::model::nearest_index;
use super::{DamageHeatmap, ModelError, StructuralPriorGraph};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Projections for prior-constrained self-attention over `T` tokens of
/// width `C`: `wq, wk: [C, d_k]`, `wv: [C, C_v]`.
#[derive(Debug, Clone, Copy)]
pub struct PriorAttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Dense `[T, T]` structural bias for the given token part assignments.
pub fn attention_bias(graph: &StructuralPriorGraph, token_parts: &[Option<usize>]) -> Result<Tensor, ModelError> {
    let t = token_parts.len();
    let mut data = Vec::with_capacity(t * t);
    for &a in token_parts {
        for &b in token_parts {
            data.push(graph.bias(a, b)?);
        }
    }
    Ok(Tensor::new(&[t, t], data)?)
}

fn attend(tape: &mut Tape, tokens: Var, w: &PriorAttentionWeights, bias: Option<Tensor>) -> Result<(Var, Var), ModelError> {
    let q = tape.matmul(tokens, w.wq)?;
    let k = tape.matmul(tokens, w.wk)?;
    let v = tape.matmul(tokens, w.wv)?;
    let dk = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    if let Some(b) = bias {
        let bv = tape.constant(b);
        scores = tape.add(scores, bv)?;
    }
    let attn = tape.softmax(scores, 1.0)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

/// `softmax(Q Kᵀ / √d_k + Δ) V` where `Δ` comes from the structural prior
/// graph and each token's part. Returns the output and the attention rows.
pub fn prior_attention(
    tape: &mut Tape,
    tokens: Var,
    graph: &StructuralPriorGraph,
    token_parts: &[Option<usize>],
    w: &PriorAttentionWeights,
) -> Result<(Var, Var), ModelError> {
    let t = tape.shape(tokens)[0];
    if token_parts.len() != t {
        return Err(TensorError::InvalidArgument {
            op: "prior_attention",
            msg: format!("{} part labels for {t} tokens", token_parts.len()),
        }
        .into());
    }
    let bias = attention_bias(graph, token_parts)?;
    attend(tape, tokens, w, Some(bias))
}

/// Unbiased scaled dot-product self-attention.
pub fn plain_attention(tape: &mut Tape, tokens: Var, w: &PriorAttentionWeights) -> Result<(Var, Var), ModelError> {
    attend(tape, tokens, w, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// Per-pixel two-layer MLP over `[F, heat]`: `w1: [C+1, C_h]`, `w2: [C_h, C]`.
#[derive(Debug, Clone, Copy)]
pub struct LocMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub activation: Activation,
}

/// Localization-aware attention: `MLP(concat[F, heat])` applied at every
/// pixel. The heatmap is resampled (nearest) to the feature resolution.
pub fn loc_attention(tape: &mut Tape, f: Var, heat: &DamageHeatmap, mlp: &LocMlp) -> Result<Var, ModelError> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 3 {
        return Err(ModelError::BadInput(shape));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let hm = heat.map();
    let (hh, hw) = (hm.shape()[0], hm.shape()[1]);
    let resampled = if (hh, hw) == (h, w) {
        hm.clone()
    } else {
        let idx = nearest_index(hh, hw, h, w, 1);
        Tensor::new(&[h, w, 1], idx.iter().map(|&i| hm.data()[i]).collect())?
    };
    let rows_needed = tape.shape(mlp.w1)[0];
    if rows_needed != c + 1 {
        return Err(TensorError::ShapeMismatch {
            op: "loc_attention",
            lhs: vec![h * w, c + 1],
            rhs: tape.shape(mlp.w1).to_vec(),
        }
        .into());
    }
    let heat_v = tape.constant(resampled.reshape(&[h * w, 1])?);
    let flat = tape.reshape(f, &[h * w, c])?;
    let x = tape.concat(&[flat, heat_v], 1)?;
    let hidden = tape.matmul(x, mlp.w1)?;
    let hidden = tape.add_row(hidden, mlp.b1)?;
    let hidden = match mlp.activation {
        Activation::Relu => tape.relu(hidden)?,
        Activation::Linear => hidden,
    };
    let out = tape.matmul(hidden, mlp.w2)?;
    let out = tape.add_row(out, mlp.b2)?;
    let cout = tape.shape(out)[1];
    Ok(tape.reshape(out, &[h, w, cout])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(t: &mut Tape, c: usize, dk: usize, seed: u64) -> PriorAttentionWeights {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        PriorAttentionWeights {
            wq: t.constant(Tensor::randn(&[c, dk], 0.5, &mut r)),
            wk: t.constant(Tensor::randn(&[c, dk], 0.5, &mut r)),
            wv: t.constant(Tensor::randn(&[c, c], 0.5, &mut r)),
        }
    }

    #[test]
    fn zero_bias_reduces_to_plain_attention() {
        let mut t = Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = t.constant(Tensor::randn(&[5, 6], 1.0, &mut r));
        let w = weights(&mut t, 6, 4, 1);
        let g = StructuralPriorGraph::with_any_bias(vec![0, 1, 2], vec![(0, 1)], vec![], 0.0, 0.0).unwrap();
        let parts = [Some(0), Some(1), Some(2), None, Some(0)];
        let (a, _) = prior_attention(&mut t, x, &g, &parts, &w).unwrap();
        let (b, _) = plain_attention(&mut t, x, &w).unwrap();
        assert!(t.value(a).max_abs_diff(t.value(b)) <= 1e-12);
    }

    #[test]
    fn masking_bias_keeps_only_self() {
        let mut t = Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = t.constant(Tensor::randn(&[4, 3], 1.0, &mut r));
        let w = weights(&mut t, 3, 3, 2);
        let g = StructuralPriorGraph::with_any_bias(vec![0, 1, 2, 3], vec![], vec![], 0.0, -1e9).unwrap();
        let parts = [Some(0), Some(1), Some(2), Some(3)];
        let (out, _) = prior_attention(&mut t, x, &g, &parts, &w).unwrap();
        let v = t.matmul(x, w.wv).unwrap();
        assert!(t.value(out).max_abs_diff(t.value(v)) < 1e-6);
    }

    #[test]
    fn unknown_part_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[2, 3]));
        let w = weights(&mut t, 3, 2, 0);
        let g = StructuralPriorGraph::new(vec![0, 1], vec![], vec![], 1.0, -1.0).unwrap();
        assert!(prior_attention(&mut t, x, &g, &[Some(0), Some(7)], &w).is_err());
        assert!(prior_attention(&mut t, x, &g, &[Some(0)], &w).is_err());
    }

    #[test]
    fn identity_mlp_passes_features_through() {
        let (h, w, c) = (3, 4, 5);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let f = Tensor::randn(&[h, w, c], 1.0, &mut r);
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let mut w1 = Tensor::zeros(&[c + 1, c]);
        for i in 0..c {
            w1.data_mut()[i * c + i] = 1.0;
        }
        let mut w2 = Tensor::zeros(&[c, c]);
        for i in 0..c {
            w2.data_mut()[i * c + i] = 1.0;
        }
        let mlp = LocMlp {
            w1: t.constant(w1),
            b1: t.constant(Tensor::zeros(&[c])),
            w2: t.constant(w2),
            b2: t.constant(Tensor::zeros(&[c])),
            activation: Activation::Linear,
        };
        let heat = DamageHeatmap::new(Tensor::uniform(&[6, 8, 1], 0.0, 1.0, &mut r)).unwrap();
        let out = loc_attention(&mut t, fv, &heat, &mlp).unwrap();
        assert_eq!(t.value(out).data(), f.data());
    }
}
