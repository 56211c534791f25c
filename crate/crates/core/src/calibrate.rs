//! Part-conditioned damage priors estimated from annotation counts, and
//! prior reweighting of predicted damage distributions and masks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::InstancePrediction;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("smoothing must be non-negative and finite, got {0}")]
    Alpha(f64),
    #[error("{kind} id {id} out of range ({len} known)")]
    UnknownId { kind: &'static str, id: usize, len: usize },
    #[error("count matrix is {rows}x{cols}, expected {parts}x{damages}")]
    CountShape {
        rows: usize,
        cols: usize,
        parts: usize,
        damages: usize,
    },
    #[error("table has no entry for {kind} class {index} present in the prediction")]
    MissingClass { kind: &'static str, index: usize },
    #[error("table io: {0}")]
    Io(#[from] std::io::Error),
    #[error("table json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

/// `P(d | p) = (count(d,p) + α) / (Σ_d' count(d',p) + α·|D|)`. Rows with no
/// observations and `α = 0` are uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableFile", into = "TableFile")]
pub struct PartDamagePriorTable {
    parts: Vec<String>,
    damages: Vec<String>,
    counts: Vec<Vec<u64>>,
    alpha: f64,
    probs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    parts: Vec<String>,
    damages: Vec<String>,
    counts: Vec<Vec<u64>>,
    alpha: f64,
}

impl TryFrom<TableFile> for PartDamagePriorTable {
    type Error = CalibrationError;
    fn try_from(f: TableFile) -> Result<Self> {
        PartDamagePriorTable::from_counts(f.parts, f.damages, f.counts, f.alpha)
    }
}

impl From<PartDamagePriorTable> for TableFile {
    fn from(t: PartDamagePriorTable) -> Self {
        TableFile {
            parts: t.parts,
            damages: t.damages,
            counts: t.counts,
            alpha: t.alpha,
        }
    }
}

pub const DEFAULT_ALPHA: f64 = 1.0;

fn row_probs(row: &[u64], alpha: f64) -> Vec<f64> {
    let total: u64 = row.iter().sum();
    let den = total as f64 + alpha * row.len() as f64;
    if den == 0.0 {
        return vec![1.0 / row.len() as f64; row.len()];
    }
    row.iter().map(|&c| (c as f64 + alpha) / den).collect()
}

impl PartDamagePriorTable {
    pub fn from_counts(parts: Vec<String>, damages: Vec<String>, counts: Vec<Vec<u64>>, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(CalibrationError::Alpha(alpha));
        }
        let bad_shape = counts.len() != parts.len() || counts.iter().any(|r| r.len() != damages.len());
        if bad_shape || damages.is_empty() {
            return Err(CalibrationError::CountShape {
                rows: counts.len(),
                cols: counts.first().map_or(0, Vec::len),
                parts: parts.len(),
                damages: damages.len(),
            });
        }
        let probs = counts.iter().map(|r| row_probs(r, alpha)).collect();
        Ok(Self {
            parts,
            damages,
            counts,
            alpha,
            probs,
        })
    }

    pub fn parts(&self) -> &[String] {
        &self.parts
    }

    pub fn damages(&self) -> &[String] {
        &self.damages
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `P(d | p)`.
    pub fn prob(&self, part: usize, damage: usize) -> f64 {
        self.probs[part][damage]
    }

    pub fn row(&self, part: usize) -> &[f64] {
        &self.probs[part]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Counts `(part, damage)` annotations and normalizes with smoothing `alpha`.
pub fn build_table(
    annotations: &[(usize, usize)],
    parts: Vec<String>,
    damages: Vec<String>,
    alpha: f64,
) -> Result<PartDamagePriorTable> {
    let mut counts = vec![vec![0u64; damages.len()]; parts.len()];
    for &(p, d) in annotations {
        if p >= parts.len() {
            return Err(CalibrationError::UnknownId {
                kind: "part",
                id: p,
                len: parts.len(),
            });
        }
        if d >= damages.len() {
            return Err(CalibrationError::UnknownId {
                kind: "damage",
                id: d,
                len: damages.len(),
            });
        }
        counts[p][d] += 1;
    }
    PartDamagePriorTable::from_counts(parts, damages, counts, alpha)
}

/// Number of real classes in a probability vector for a table with `known`
/// classes: either exactly `known`, or `known` plus one trailing
/// background entry.
fn real_len(kind: &'static str, len: usize, known: usize) -> Result<usize> {
    if len == known || len == known + 1 {
        Ok(known)
    } else {
        Err(CalibrationError::MissingClass {
            kind,
            index: known.min(len.saturating_sub(1)),
        })
    }
}

/// Reweights the damage distribution by the part-marginalized prior
/// `m(d) = Σ_p q(p)·P(d|p)`, keeping the total real-damage mass, and rescales
/// the mask by the ratio of peak damage confidences. A trailing "no damage"
/// entry is left untouched. When `m` is constant the prediction is returned
/// unchanged.
pub fn calibrate_instance(pred: &InstancePrediction, table: &PartDamagePriorTable) -> Result<InstancePrediction> {
    let np = real_len("part", pred.part_probs.len(), table.parts.len())?;
    let nd = real_len("damage", pred.damage_probs.len(), table.damages.len())?;
    let q = &pred.part_probs[..np];
    let mut m = vec![0.0; nd];
    for (d, md) in m.iter_mut().enumerate() {
        for (p, &qp) in q.iter().enumerate() {
            *md += qp * table.probs[p][d];
        }
    }
    if m.iter().all(|&v| v == m[0]) {
        return Ok(pred.clone());
    }
    let r = &pred.damage_probs[..nd];
    let mass: f64 = r.iter().sum();
    let weighted: Vec<f64> = r.iter().zip(&m).map(|(a, b)| a * b).collect();
    let z: f64 = weighted.iter().sum();
    if z <= 0.0 || mass <= 0.0 {
        return Ok(pred.clone());
    }
    let mut damage_probs: Vec<f64> = weighted.iter().map(|w| w / z * mass).collect();
    damage_probs.extend_from_slice(&pred.damage_probs[nd..]);

    let peak = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let (before, after) = (peak(r), peak(&damage_probs[..nd]));
    let ratio = if before > 0.0 { after / before } else { 1.0 };
    let mask = pred.mask.map(|v| (v * ratio).clamp(0.0, 1.0));
    Ok(InstancePrediction {
        score: InstancePrediction::compute_score(&pred.part_probs, &damage_probs),
        mask,
        part_probs: pred.part_probs.clone(),
        damage_probs,
        embedding: pred.embedding.clone(),
    })
}
