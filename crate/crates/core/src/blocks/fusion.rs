use rand::Rng;

use super::{ModelConfig, ModelError, IMAGE_CHANNELS};
use crate::params::{glorot_normal, he_normal, ParamStore, ParamVars};
use crate::tensor::{Tape, Tensor, Var};

/// The three knowledge streams, in concatenation order.
pub const STREAMS: [&str; 3] = ["syn", "geom", "real"];

/// Two-layer perceptron `w2 · relu(w1 · x + b1) + b2` on a vector.
#[derive(Debug, Clone, Copy)]
pub struct MlpWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpWeights {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let n = tape.shape(x).iter().product();
        let row = tape.reshape(x, &[1, n])?;
        let h = tape.matmul(row, self.w1)?;
        let h = tape.reshape(h, &[tape.shape(self.b1)[0]])?;
        let h = tape.add(h, self.b1)?;
        let h = tape.relu(h)?;
        let hn = tape.shape(h)[0];
        let h = tape.reshape(h, &[1, hn])?;
        let o = tape.matmul(h, self.w2)?;
        let o = tape.reshape(o, &[tape.shape(self.b2)[0]])?;
        Ok(tape.add(o, self.b2)?)
    }
}

/// FiLM projections from the knowledge vector: `γ = z·wg + bg`,
/// `β = z·wb + bb`, each `[C]`.
#[derive(Debug, Clone, Copy)]
pub struct FilmWeights {
    pub wg: Var,
    pub bg: Var,
    pub wb: Var,
    pub bb: Var,
}

pub(crate) fn init(cfg: &ModelConfig, rng: &mut impl Rng, store: &mut ParamStore) {
    let fc = cfg.fusion_channels;
    for s in STREAMS {
        store.insert(format!("fuse.{s}.conv0.w"), he_normal(&[3, 3, IMAGE_CHANNELS, fc], 9 * IMAGE_CHANNELS, rng));
        store.insert(format!("fuse.{s}.conv0.b"), Tensor::zeros(&[fc]));
        store.insert(format!("fuse.{s}.conv1.w"), he_normal(&[3, 3, fc, fc], 9 * fc, rng));
        store.insert(format!("fuse.{s}.conv1.b"), Tensor::zeros(&[fc]));
    }
    let z = cfg.fusion_dim;
    store.insert("fuse.mlp.w1", glorot_normal(3 * fc, z, rng));
    store.insert("fuse.mlp.b1", Tensor::zeros(&[z]));
    store.insert("fuse.mlp.w2", glorot_normal(z, z, rng));
    store.insert("fuse.mlp.b2", Tensor::zeros(&[z]));
    // FiLM starts close to the identity modulation.
    let c = cfg.channels;
    store.insert("film.wg", Tensor::randn(&[z, c], 0.01, rng));
    store.insert("film.bg", Tensor::ones(&[c]));
    store.insert("film.wb", Tensor::randn(&[z, c], 0.01, rng));
    store.insert("film.bb", Tensor::zeros(&[c]));
}

/// One knowledge stream: two stride-2 3×3 convolutions and global average
/// pooling, `[H, W, 3] -> [fusion_channels]`.
pub fn knowledge_encoder(tape: &mut Tape, p: &ParamVars, stream: &str, x: Var) -> Result<Var, ModelError> {
    let mut f = x;
    for j in 0..2 {
        let w = p.get(&format!("fuse.{stream}.conv{j}.w"))?;
        let b = p.get(&format!("fuse.{stream}.conv{j}.b"))?;
        f = tape.conv2d(f, w, Some(b), 2, 1)?;
        f = tape.relu(f)?;
    }
    Ok(tape.mean_rows(f)?)
}

/// `MLP([syn; geom; real])`.
pub fn fuse_vectors(tape: &mut Tape, streams: [Var; 3], mlp: &MlpWeights) -> Result<Var, ModelError> {
    let cat = tape.concat(&streams, 0)?;
    mlp.apply(tape, cat)
}

/// Knowledge vector `z` for an image `[H, W, 3]`.
pub fn fuse_knowledge(tape: &mut Tape, p: &ParamVars, x: Var) -> Result<Var, ModelError> {
    let mut outs = [x; 3];
    for (slot, s) in outs.iter_mut().zip(STREAMS) {
        *slot = knowledge_encoder(tape, p, s, x)?;
    }
    let mlp = MlpWeights {
        w1: p.get("fuse.mlp.w1")?,
        b1: p.get("fuse.mlp.b1")?,
        w2: p.get("fuse.mlp.w2")?,
        b2: p.get("fuse.mlp.b2")?,
    };
    fuse_vectors(tape, outs, &mlp)
}

/// `γ(z) · F + β(z)`, broadcast over space.
pub fn film_modulate(tape: &mut Tape, f: Var, z: Var, w: &FilmWeights) -> Result<Var, ModelError> {
    let n = tape.shape(z).iter().product();
    let zr = tape.reshape(z, &[1, n])?;
    let c = tape.shape(w.bg)[0];
    let gamma = tape.matmul(zr, w.wg)?;
    let gamma = tape.reshape(gamma, &[c])?;
    let gamma = tape.add(gamma, w.bg)?;
    let beta = tape.matmul(zr, w.wb)?;
    let beta = tape.reshape(beta, &[c])?;
    let beta = tape.add(beta, w.bb)?;
    let scaled = tape.mul_row(f, gamma)?;
    Ok(tape.add_row(scaled, beta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn film(t: &mut Tape, z: usize, c: usize, wg: Tensor, bg: Tensor, wb: Tensor, bb: Tensor) -> FilmWeights {
        assert_eq!(wg.shape(), &[z, c]);
        FilmWeights {
            wg: t.constant(wg),
            bg: t.constant(bg),
            wb: t.constant(wb),
            bb: t.constant(bb),
        }
    }

    #[test]
    fn identity_modulation() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::randn(&[4, 3, 5], 1.0, &mut r);
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let z = t.constant(Tensor::randn(&[6], 1.0, &mut r));
        let w = film(&mut t, 6, 5, Tensor::zeros(&[6, 5]), Tensor::ones(&[5]), Tensor::zeros(&[6, 5]), Tensor::zeros(&[5]));
        let out = film_modulate(&mut t, fv, z, &w).unwrap();
        assert!(t.value(out).max_abs_diff(&f) <= 1e-15);
    }

    #[test]
    fn zero_gamma_broadcasts_beta() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let fv = t.constant(Tensor::randn(&[2, 2, 3], 1.0, &mut r));
        let z = t.constant(Tensor::ones(&[2]));
        let bb = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let w = film(&mut t, 2, 3, Tensor::zeros(&[2, 3]), Tensor::zeros(&[3]), Tensor::zeros(&[2, 3]), bb.clone());
        let out = film_modulate(&mut t, fv, z, &w).unwrap();
        for px in t.data(out).chunks(3) {
            assert_eq!(px, bb.data());
        }
    }

    #[test]
    fn zero_streams_and_bias_give_zero_knowledge() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let zero = t.constant(Tensor::zeros(&[4]));
        let mlp = MlpWeights {
            w1: t.constant(Tensor::randn(&[12, 5], 1.0, &mut r)),
            b1: t.constant(Tensor::zeros(&[5])),
            w2: t.constant(Tensor::randn(&[5, 5], 1.0, &mut r)),
            b2: t.constant(Tensor::zeros(&[5])),
        };
        let z = fuse_vectors(&mut t, [zero, zero, zero], &mlp).unwrap();
        assert!(t.data(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_order_is_syn_geom_real() {
        // Identity MLP (non-negative inputs survive the relu) makes the
        // concatenation visible in z.
        let mut t = Tape::new();
        let eye = |n: usize| {
            let mut m = Tensor::zeros(&[n, n]);
            for i in 0..n {
                m.data_mut()[i * n + i] = 1.0;
            }
            m
        };
        let mlp = MlpWeights {
            w1: t.constant(eye(6)),
            b1: t.constant(Tensor::zeros(&[6])),
            w2: t.constant(eye(6)),
            b2: t.constant(Tensor::zeros(&[6])),
        };
        let syn = t.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let geom = t.constant(Tensor::new(&[2], vec![0.0, 2.0]).unwrap());
        let real = t.constant(Tensor::new(&[2], vec![3.0, 0.0]).unwrap());
        let z = fuse_vectors(&mut t, [syn, geom, real], &mlp).unwrap();
        assert_eq!(t.data(z), &[1.0, 0.0, 0.0, 2.0, 3.0, 0.0]);
    }
}
