use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{generate, SceneSample, SynthError, Taxonomy};
use crate::blocks::{DamageHeatmap, ModelError};
use crate::tensor::io::{load, save, SlktError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Slkt(#[from] SlktError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed dataset: {0}")]
    Format(String),
}

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    /// Order-sensitive digest over every tensor and label.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for s in &self.samples {
            eat(s.seed);
            eat(s.difficulty.to_bits());
            for t in std::iter::once(&s.image)
                .chain(&s.part_masks)
                .chain(&s.damage_masks)
                .chain([s.heatmap.map(), &s.geometry])
            {
                eat(t.checksum());
            }
            for &l in s.part_labels.iter().chain(&s.damage_labels).chain(&s.damage_parts) {
                eat(l as u64);
            }
            for &(p, d) in &s.annotations {
                eat(p as u64);
                eat(d as u64);
            }
        }
        h
    }

    /// `counts[p][d]` of part/damage co-occurrences over all samples.
    pub fn annotations(&self) -> Vec<(usize, usize)> {
        self.samples.iter().flat_map(|s| s.annotations.iter().copied()).collect()
    }
}

/// `count` scenes whose seeds are drawn from a stream seeded by `seed`.
pub fn generate_dataset(seed: u64, count: usize, h: usize, w: usize, tax: &Taxonomy, difficulty: f64) -> Result<Dataset, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    let samples = seeds
        .into_iter()
        .map(|s| generate(s, h, w, tax, difficulty))
        .collect::<Result<_, _>>()?;
    Ok(Dataset {
        taxonomy: tax.clone(),
        samples,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    taxonomy: Taxonomy,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    dir: String,
    seed: u64,
    difficulty: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Labels {
    part_labels: Vec<usize>,
    damage_labels: Vec<usize>,
    damage_parts: Vec<usize>,
    annotations: Vec<(usize, usize)>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `manifest.json` and one directory per sample holding SLKT tensors
/// and `labels.json`.
pub fn export_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let name = format!("{i:06}");
        let sd = dir.join(&name);
        fs::create_dir_all(&sd).map_err(io_err(&sd))?;
        save(&s.image, sd.join("image.slkt"))?;
        save(s.heatmap.map(), sd.join("heatmap.slkt"))?;
        save(&s.geometry, sd.join("geometry.slkt"))?;
        for (k, m) in s.part_masks.iter().enumerate() {
            save(m, sd.join(format!("part_{k}.slkt")))?;
        }
        for (k, m) in s.damage_masks.iter().enumerate() {
            save(m, sd.join(format!("damage_{k}.slkt")))?;
        }
        let labels = Labels {
            part_labels: s.part_labels.clone(),
            damage_labels: s.damage_labels.clone(),
            damage_parts: s.damage_parts.clone(),
            annotations: s.annotations.clone(),
        };
        let path = sd.join("labels.json");
        fs::write(&path, serde_json::to_vec_pretty(&labels)?).map_err(io_err(&path))?;
        entries.push(ManifestEntry {
            dir: name,
            seed: s.seed,
            difficulty: s.difficulty,
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        taxonomy: ds.taxonomy.clone(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(())
}

pub fn import_dataset(dir: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)?;
    if manifest.format != FORMAT_VERSION {
        return Err(DatasetError::Format(format!("unsupported format {}", manifest.format)));
    }
    manifest.taxonomy.validate()?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        let sd = dir.join(&e.dir);
        let path = sd.join("labels.json");
        let labels: Labels = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)?;
        let image = load(sd.join("image.slkt"))?;
        if image.rank() != 3 || image.shape()[2] != 3 {
            return Err(DatasetError::Format(format!("{}: image must be [H, W, 3]", e.dir)));
        }
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let plane = |t: Tensor, what: &str| -> Result<Tensor, DatasetError> {
            if t.shape() != [h, w] {
                return Err(DatasetError::Format(format!("{}: {what} must be [{h}, {w}]", e.dir)));
            }
            Ok(t)
        };
        let masks = |prefix: &str, n: usize| -> Result<Vec<Tensor>, DatasetError> {
            (0..n).map(|k| plane(load(sd.join(format!("{prefix}_{k}.slkt")))?, prefix)).collect()
        };
        let part_masks = masks("part", labels.part_labels.len())?;
        let damage_masks = masks("damage", labels.damage_labels.len())?;
        if labels.damage_parts.len() != labels.damage_labels.len() {
            return Err(DatasetError::Format(format!("{}: damage_parts length mismatch", e.dir)));
        }
        let heat = load(sd.join("heatmap.slkt"))?;
        if heat.shape() != [h, w, 1] {
            return Err(DatasetError::Format(format!("{}: heatmap must be [{h}, {w}, 1]", e.dir)));
        }
        let heatmap = DamageHeatmap::new(heat)?;
        let geometry = plane(load(sd.join("geometry.slkt"))?, "geometry")?;
        samples.push(SceneSample {
            seed: e.seed,
            difficulty: e.difficulty,
            image,
            part_masks,
            part_labels: labels.part_labels,
            damage_masks,
            damage_labels: labels.damage_labels,
            damage_parts: labels.damage_parts,
            heatmap,
            geometry,
            annotations: labels.annotations,
        });
    }
    Ok(Dataset {
        taxonomy: manifest.taxonomy,
        samples,
    })
}
