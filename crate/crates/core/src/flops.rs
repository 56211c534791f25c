//! Analytic multiply-accumulate counts of one inference forward pass.
//!
//! Only matrix products and convolutions are counted; element-wise work,
//! softmaxes and reductions are ignored.

use serde::{Deserialize, Serialize};

use crate::blocks::{ModelConfig, IMAGE_CHANNELS, STEM_CHANNELS};

/// Cost of one layer. `spatial` layers scale with the pixel count, the rest
/// depend only on the config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub spatial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub macs: u64,
    /// Part of `macs` proportional to the pixel count.
    pub spatial_macs: u64,
    /// Two floating-point operations per multiply-accumulate.
    pub flops: u64,
}

/// MACs of a `k×k` convolution producing an `ho×wo×cout` map.
pub fn conv_macs(ho: usize, wo: usize, k: usize, cin: usize, cout: usize) -> u64 {
    (ho * wo * k * k * cin * cout) as u64
}

fn stride2(side: usize) -> usize {
    side.div_ceil(2)
}

/// Per-layer costs for an `h×w` input, in execution order.
pub fn layer_costs(cfg: &ModelConfig, h: usize, w: usize) -> Vec<LayerCost> {
    let mut out = Vec::new();
    let mut push = |name: String, macs: u64, spatial: bool| out.push(LayerCost { name, macs, spatial });
    let c = cfg.channels;
    let size = |l: usize| (cfg.level_size(h, l), cfg.level_size(w, l));

    let (h0, w0) = size(0);
    push("enc.stem".into(), conv_macs(h0, w0, 3, STEM_CHANNELS, c), true);
    for l in 0..cfg.levels {
        let (hl, wl) = size(l);
        if l > 0 {
            push(format!("enc.l{l}.down"), conv_macs(hl, wl, 3, c, c), true);
        }
        for j in 0..cfg.level_depth {
            push(format!("enc.l{l}.conv{j}"), conv_macs(hl, wl, 3, c, c), true);
        }
    }
    let (hc, wc) = size(cfg.levels - 1);
    let px = (hc * wc) as u64;
    let (c64, d) = (c as u64, cfg.query_dim as u64);
    push("loc.mlp".into(), px * ((c64 + 1) * c64 + c64 * c64), true);
    let r = (c / cfg.se_reduction) as u64;
    push("c3.gate".into(), 2 * c64 * r, false);

    let fc = cfg.fusion_channels;
    let (q1h, q1w) = (stride2(h), stride2(w));
    let (q2h, q2w) = (stride2(q1h), stride2(q1w));
    for s in ["syn", "geom", "real"] {
        push(format!("fuse.{s}.conv0"), conv_macs(q1h, q1w, 3, IMAGE_CHANNELS, fc), true);
        push(format!("fuse.{s}.conv1"), conv_macs(q2h, q2w, 3, fc, fc), true);
    }
    let (fc64, z) = (fc as u64, cfg.fusion_dim as u64);
    push("fuse.mlp".into(), 3 * fc64 * z + z * z, false);
    push("film".into(), 2 * z * c64, false);

    let n = cfg.num_queries as u64;
    push("pool.keys".into(), px * c64 * d, true);
    push("pool.scores".into(), n * d * px, true);
    push("pool.mix".into(), n * px * c64, true);
    push("pool.out".into(), n * c64 * d, false);

    let classes = (cfg.part_logits() + cfg.damage_logits()) as u64;
    let head = n * d * d + n * d * classes;
    push("token_parts.head".into(), head, false);
    push("attn.qkv".into(), 3 * n * d * d, false);
    push("attn.mix".into(), 2 * n * n * d, false);
    push("cls.head".into(), head, false);
    let k = cfg.mask_kernel;
    push("isr.kernels".into(), n * d * (k * k * c) as u64, false);
    push("isr.conv".into(), conv_macs(hc, wc, k, c, cfg.num_queries), true);
    out
}

pub fn count(cfg: &ModelConfig, h: usize, w: usize) -> FlopCount {
    let layers = layer_costs(cfg, h, w);
    let macs = layers.iter().map(|l| l.macs).sum();
    let spatial_macs = layers.iter().filter(|l| l.spatial).map(|l| l.macs).sum();
    FlopCount {
        macs,
        spatial_macs,
        flops: 2 * macs,
    }
}

/// Least-squares slope of `ln macs` against `ln pixels`.
pub fn scaling_exponent(cfg: &ModelConfig, sides: &[usize]) -> f64 {
    let pts: Vec<(f64, f64)> = sides
        .iter()
        .map(|&s| (((s * s) as f64).ln(), (count(cfg, s, s).macs as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
