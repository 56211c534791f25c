use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::blocks::{ModelConfig, SlickModel};
use crate::params::ParamStore;
use crate::tensor::io::{load, save};

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "checkpoint.json";

/// A model plus optional training-only parameters (such as the distillation
/// projection head), stored as `checkpoint.json` and one SLKT file per
/// tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SlickModel,
    pub extra: ParamStore,
    /// Optimizer steps taken so far.
    pub steps: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    config: ModelConfig,
    steps: usize,
    params: Vec<Entry>,
    extra: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn write_store(store: &ParamStore, dir: &Path, sub: &str) -> Result<Vec<Entry>> {
    let d = dir.join(sub);
    fs::create_dir_all(&d).map_err(|e| TrainError::io(&d, e))?;
    store
        .iter()
        .map(|(name, t)| {
            let file = format!("{sub}/{name}.slkt");
            save(t, dir.join(&file))?;
            Ok(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file,
            })
        })
        .collect()
}

fn read_store(entries: &[Entry], dir: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in entries {
        if e.file.contains("..") {
            return Err(TrainError::Checkpoint(format!("refusing path {}", e.file)));
        }
        let t = load(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(TrainError::Checkpoint(format!(
                "{}: manifest says {:?}, file holds {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        store.insert(e.name.clone(), t);
    }
    Ok(store)
}

impl Checkpoint {
    pub fn new(model: SlickModel) -> Self {
        Self {
            model,
            extra: ParamStore::new(),
            steps: 0,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        let manifest = Manifest {
            format: FORMAT_VERSION,
            config: self.model.config.clone(),
            steps: self.steps,
            params: write_store(&self.model.params, dir, "params")?,
            extra: write_store(&self.extra, dir, "extra")?,
        };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| TrainError::io(&path, e))
    }

    /// Loads and checks every parameter against a freshly built model of
    /// the stored config.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| TrainError::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported format {}", m.format)));
        }
        let params = read_store(&m.params, dir)?;
        let reference = SlickModel::new(m.config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(TrainError::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            params.expect_shape(name, t.shape())?;
        }
        Ok(Self {
            model: SlickModel {
                config: m.config,
                params,
            },
            extra: read_store(&m.extra, dir)?,
            steps: m.steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new(SlickModel::new(ModelConfig::student(), 11).unwrap());
        ck.extra.insert("proj.q.w", Tensor::full(&[2, 3], 0.1));
        ck.steps = 17;
        ck.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);
    }

    #[test]
    fn rejects_missing_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = SlickModel::new(ModelConfig::student(), 1).unwrap();
        let mut trimmed = ParamStore::new();
        for (n, t) in model.params.iter().skip(1) {
            trimmed.insert(n.clone(), t.clone());
        }
        model.params = trimmed;
        Checkpoint::new(model).save(dir.path()).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(TrainError::Checkpoint(_))));
    }
}
