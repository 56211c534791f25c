use rand::Rng;

use super::{ModelConfig, ModelError, IMAGE_CHANNELS, STEM_CHANNELS};
use crate::params::{he_normal, ParamStore, ParamVars};
use crate::tensor::{Tape, Tensor, Var};

/// Multi-scale features `F_1..F_L`, each `[H_l, W_l, C]`, halving in size
/// (with ceiling) from one level to the next.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn last(&self) -> Var {
        *self.levels.last().expect("pyramid has at least two levels")
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub(crate) fn init(cfg: &ModelConfig, rng: &mut impl Rng, store: &mut ParamStore) {
    let c = cfg.channels;
    let mut stem = he_normal(&[3, 3, STEM_CHANNELS, c], 9 * IMAGE_CHANNELS, rng);
    // The conditioning channel starts disconnected so a zero or absent
    // conditioning map leaves predictions unchanged.
    for (i, w) in stem.data_mut().iter_mut().enumerate() {
        if (i / c) % STEM_CHANNELS == IMAGE_CHANNELS {
            *w = 0.0;
        }
    }
    store.insert("enc.stem.w", stem);
    store.insert("enc.stem.b", Tensor::zeros(&[c]));
    for level in 0..cfg.levels {
        if level > 0 {
            store.insert(format!("enc.l{level}.down.w"), he_normal(&[3, 3, c, c], 9 * c, rng));
            store.insert(format!("enc.l{level}.down.b"), Tensor::zeros(&[c]));
        }
        for j in 0..cfg.level_depth {
            store.insert(format!("enc.l{level}.conv{j}.w"), he_normal(&[3, 3, c, c], 9 * c, rng));
            store.insert(format!("enc.l{level}.conv{j}.b"), Tensor::zeros(&[c]));
        }
    }
}

fn conv_relu(tape: &mut Tape, p: &ParamVars, x: Var, name: &str, stride: usize) -> Result<Var, ModelError> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.conv2d(x, w, Some(b), stride, 1)?;
    Ok(tape.relu(y)?)
}

/// Maps an image `[H, W, 3]` (or `[H, W, 4]` with a conditioning channel)
/// to an `L`-level feature pyramid.
pub fn encode(tape: &mut Tape, p: &ParamVars, x: Var, cfg: &ModelConfig) -> Result<FeaturePyramid, ModelError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || !(shape[2] == IMAGE_CHANNELS || shape[2] == STEM_CHANNELS) {
        return Err(ModelError::BadInput(shape));
    }
    let (h, w) = (shape[0], shape[1]);
    let min = cfg.min_input_side();
    if h < min || w < min {
        return Err(ModelError::ImageTooSmall {
            h,
            w,
            levels: cfg.levels,
            min,
        });
    }
    let input = if shape[2] == IMAGE_CHANNELS {
        let zeros = tape.constant(Tensor::zeros(&[h, w, 1]));
        tape.concat(&[x, zeros], 2)?
    } else {
        x
    };
    let mut levels = Vec::with_capacity(cfg.levels);
    let mut f = conv_relu(tape, p, input, "enc.stem", cfg.stem_stride)?;
    for level in 0..cfg.levels {
        if level > 0 {
            f = conv_relu(tape, p, f, &format!("enc.l{level}.down"), 2)?;
        }
        for j in 0..cfg.level_depth {
            f = conv_relu(tape, p, f, &format!("enc.l{level}.conv{j}"), 1)?;
        }
        levels.push(f);
    }
    Ok(FeaturePyramid { levels })
}
