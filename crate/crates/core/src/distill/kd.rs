use super::{DistillError, Result};
use crate::blocks::nearest_index;
use crate::tensor::{Tape, Tensor, Var};

const BN_EPS: f64 = 1e-5;

fn check_same(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(DistillError::Shape {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(DistillError::Temperature(tau))
    }
}

/// Nearest-neighbour resampling of a `[h, w, c]` variable.
pub fn resample(tape: &mut Tape, v: Var, oh: usize, ow: usize) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 3 {
        return Err(DistillError::Shape {
            op: "resample",
            lhs: s,
            rhs: vec![oh, ow],
        });
    }
    if (s[0], s[1]) == (oh, ow) {
        return Ok(v);
    }
    let idx = nearest_index(s[0], s[1], oh, ow, s[2]);
    Ok(tape.gather(v, idx, &[oh, ow, s[2]])?)
}

/// Row-wise `KL(softmax(a/τ) ‖ softmax(b/τ))` averaged over rows of `[R, K]`.
pub fn kl_rows(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    check_same("kl_rows", tape, a, b)?;
    check_temperature(tau)?;
    let lp = tape.log_softmax(a, tau)?;
    let lq = tape.log_softmax(b, tau)?;
    let p = tape.exp(lp)?;
    let d = tape.sub(lp, lq)?;
    let t = tape.mul(p, d)?;
    let per_row = tape.sum_last(t)?;
    Ok(tape.mean(per_row)?)
}

/// Per-pixel Bernoulli `KL(σ(m_T/τ) ‖ σ(m_S/τ))`, averaged over every pixel
/// of every instance.
pub fn mask_kd(tape: &mut Tape, m_t: Var, m_s: Var, tau: f64) -> Result<Var> {
    check_same("mask_kd", tape, m_t, m_s)?;
    let n = tape.value(m_t).len();
    // A Bernoulli with logit z is the two-way softmax over [z, 0].
    let zeros = tape.constant(Tensor::zeros(&[n, 1]));
    let a = tape.reshape(m_t, &[n, 1])?;
    let b = tape.reshape(m_s, &[n, 1])?;
    let a = tape.concat(&[a, zeros], 1)?;
    let b = tape.concat(&[b, zeros], 1)?;
    kl_rows(tape, a, b, tau)
}

/// `-Σ_k p_T,k log p_S,k` per row of `[R, K]` logits, averaged over rows.
pub fn class_kd(tape: &mut Tape, z_t: Var, z_s: Var, tau: f64) -> Result<Var> {
    check_same("class_kd", tape, z_t, z_s)?;
    check_temperature(tau)?;
    let p = tape.softmax(z_t, tau)?;
    let lq = tape.log_softmax(z_s, tau)?;
    let t = tape.mul(p, lq)?;
    let per_row = tape.sum_last(t)?;
    let m = tape.mean(per_row)?;
    Ok(tape.neg(m)?)
}

/// Per-channel standardization of `[R, C]` over the rows.
pub fn standardize(tape: &mut Tape, x: Var) -> Result<Var> {
    let c = tape.shape(x)[1];
    let mean = tape.mean_rows(x)?;
    let neg = tape.neg(mean)?;
    let centered = tape.add_row(x, neg)?;
    let sq = tape.square(centered)?;
    let var = tape.mean_rows(sq)?;
    let var = tape.add_scalar(var, BN_EPS)?;
    let sd = tape.sqrt(var)?;
    let ones = tape.constant(Tensor::ones(&[c]));
    let inv = tape.div(ones, sd)?;
    Ok(tape.mul_row(centered, inv)?)
}

/// Mean over levels' elements of `(norm(F_T) - norm(proj(F_S)))²`, summed
/// over levels. Levels are given already aligned; each student map is
/// resampled to the teacher's spatial size and projected by `proj[l]`
/// (`[C_S, C_T]`).
pub fn feature_kd(tape: &mut Tape, f_t: &[Var], f_s: &[Var], proj: &[Var]) -> Result<Var> {
    if f_t.len() != f_s.len() || f_t.len() != proj.len() {
        return Err(DistillError::Levels {
            teacher: f_t.len(),
            student: f_s.len(),
        });
    }
    let mut acc = tape.scalar(0.0);
    for ((&t, &s), &w) in f_t.iter().zip(f_s).zip(proj) {
        let ts = tape.shape(t).to_vec();
        let (h, wd, ct) = (ts[0], ts[1], ts[2]);
        let s = resample(tape, s, h, wd)?;
        let cs = tape.shape(s)[2];
        let s = tape.reshape(s, &[h * wd, cs])?;
        let s = tape.matmul(s, w)?;
        let t = tape.reshape(t, &[h * wd, ct])?;
        let nt = standardize(tape, t)?;
        let ns = standardize(tape, s)?;
        let d = tape.sub(nt, ns)?;
        let d = tape.square(d)?;
        let m = tape.mean(d)?;
        acc = tape.add(acc, m)?;
    }
    Ok(acc)
}

/// Mean node embeddings `[V, d]` from query embeddings `[N, d]` and the
/// node each query is assigned to (queries may feed several nodes). Nodes
/// without queries get the zero vector.
pub fn node_embeddings(tape: &mut Tape, queries: Var, assignment: &[Vec<usize>], nodes: usize) -> Result<Var> {
    let n = tape.shape(queries)[0];
    if assignment.len() != n {
        return Err(DistillError::Shape {
            op: "node_embeddings",
            lhs: vec![assignment.len()],
            rhs: vec![n],
        });
    }
    let mut a = Tensor::zeros(&[nodes, n]);
    let mut counts = vec![0usize; nodes];
    for (q, targets) in assignment.iter().enumerate() {
        for &v in targets {
            if v >= nodes {
                return Err(DistillError::Node(v));
            }
            a.data_mut()[v * n + q] = 1.0;
            counts[v] += 1;
        }
    }
    for (v, &c) in counts.iter().enumerate() {
        if c > 0 {
            a.data_mut()[v * n..(v + 1) * n].iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    let av = tape.constant(a);
    Ok(tape.matmul(av, queries)?)
}

/// Mean over edges and embedding dims of `((h_i - h_j) - (h'_i - h'_j))²`.
pub fn graph_kd(tape: &mut Tape, h: Var, h_prime: Var, edges: &[(usize, usize)]) -> Result<Var> {
    check_same("graph_kd", tape, h, h_prime)?;
    if edges.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let v = tape.shape(h)[0];
    let mut b = Tensor::zeros(&[edges.len(), v]);
    for (e, &(i, j)) in edges.iter().enumerate() {
        for n in [i, j] {
            if n >= v {
                return Err(DistillError::Node(n));
            }
        }
        b.data_mut()[e * v + i] += 1.0;
        b.data_mut()[e * v + j] -= 1.0;
    }
    let bv = tape.constant(b);
    let diff = tape.sub(h, h_prime)?;
    let rel = tape.matmul(bv, diff)?;
    let sq = tape.square(rel)?;
    Ok(tape.mean(sq)?)
}

fn normalized(tape: &mut Tape, a: Var) -> Result<Var> {
    let s = tape.sum(a)?;
    if tape.value(s).item() <= 0.0 {
        return Err(DistillError::EmptyAttention);
    }
    let one = tape.scalar(1.0);
    let inv = tape.div(one, s)?;
    Ok(tape.mul_scalar_var(a, inv)?)
}

/// `Σ_l ‖A_T/ΣA_T - A_S/ΣA_S‖₁` over aligned `[h, w]` maps; student maps
/// are resampled to the teacher's size first.
pub fn attn_transfer(tape: &mut Tape, a_t: &[Var], a_s: &[Var]) -> Result<Var> {
    if a_t.len() != a_s.len() {
        return Err(DistillError::Levels {
            teacher: a_t.len(),
            student: a_s.len(),
        });
    }
    let mut acc = tape.scalar(0.0);
    for (&t, &s) in a_t.iter().zip(a_s) {
        let ts = tape.shape(t).to_vec();
        let ss = tape.shape(s).to_vec();
        let s3 = tape.reshape(s, &[ss[0], ss[1], 1])?;
        let s3 = resample(tape, s3, ts[0], ts[1])?;
        let s = tape.reshape(s3, &ts)?;
        let nt = normalized(tape, t)?;
        let ns = normalized(tape, s)?;
        let d = tape.sub(nt, ns)?;
        let d = tape.abs(d)?;
        let l1 = tape.sum(d)?;
        acc = tape.add(acc, l1)?;
    }
    Ok(acc)
}
