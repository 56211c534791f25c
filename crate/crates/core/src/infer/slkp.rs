use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::InstancePrediction;
use crate::tensor::io::{read_tensor, write_tensor, SlktError};

const MAGIC: &[u8; 4] = b"SLKP";

#[derive(Debug, Error)]
pub enum SlkpError {
    #[error("prediction io: {0}")]
    Io(#[from] std::io::Error),
    #[error("prediction header: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] SlktError),
    #[error("not a prediction file")]
    BadMagic,
    #[error("invalid prediction file: {0}")]
    Invalid(String),
}

/// Predictions for one image plus the class names they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub parts: Vec<String>,
    pub damages: Vec<String>,
    pub image_size: [usize; 2],
    pub instances: Vec<InstancePrediction>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Classes {
    parts: Vec<String>,
    damages: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceHeader {
    score: f64,
    part_probs: Vec<f64>,
    damage_probs: Vec<f64>,
    mask_ref: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    classes: Classes,
    image_size: [usize; 2],
    instances: Vec<InstanceHeader>,
}

/// Layout: `b"SLKP"`, u64 LE header length, JSON header, then one SLKT
/// tensor per mask in `mask_ref` order. Query embeddings are not stored.
pub fn write_predictions(mut w: impl Write, f: &PredictionFile) -> Result<(), SlkpError> {
    let header = Header {
        classes: Classes {
            parts: f.parts.clone(),
            damages: f.damages.clone(),
        },
        image_size: f.image_size,
        instances: f
            .instances
            .iter()
            .enumerate()
            .map(|(i, p)| InstanceHeader {
                score: p.score,
                part_probs: p.part_probs.clone(),
                damage_probs: p.damage_probs.clone(),
                mask_ref: i,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in &f.instances {
        write_tensor(&p.mask, &mut w)?;
    }
    Ok(())
}

pub fn read_predictions(mut r: impl Read) -> Result<PredictionFile, SlkpError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SlkpError::BadMagic);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| SlkpError::Invalid("header too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let masks = (0..header.instances.len())
        .map(|_| read_tensor(&mut r))
        .collect::<Result<Vec<_>, _>>()?;
    let [h, w] = header.image_size;
    let mut instances = Vec::with_capacity(masks.len());
    for inst in header.instances {
        let mask = masks
            .get(inst.mask_ref)
            .ok_or_else(|| SlkpError::Invalid(format!("mask_ref {} out of range", inst.mask_ref)))?
            .clone();
        if mask.shape() != [h, w] {
            return Err(SlkpError::Invalid(format!("mask shape {:?} != image size {:?}", mask.shape(), [h, w])));
        }
        instances.push(InstancePrediction {
            mask,
            part_probs: inst.part_probs,
            damage_probs: inst.damage_probs,
            score: inst.score,
            embedding: Vec::new(),
        });
    }
    Ok(PredictionFile {
        parts: header.classes.parts,
        damages: header.classes.damages,
        image_size: header.image_size,
        instances,
    })
}

impl PredictionFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        write_predictions(&mut v, self).expect("writing to memory");
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SlkpError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SlkpError> {
        read_predictions(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_is_exact() {
        let f = PredictionFile {
            parts: vec!["door".into()],
            damages: vec!["dent".into(), "scratch".into()],
            image_size: [2, 3],
            instances: vec![InstancePrediction {
                mask: Tensor::new(&[2, 3], vec![0.1, 0.2, 1.0 / 3.0, 0.4, 0.5, 0.6]).unwrap(),
                part_probs: vec![0.7, 0.3],
                damage_probs: vec![0.1, 0.2, 0.7000000000000001],
                score: 0.1 + 0.2,
                embedding: vec![],
            }],
        };
        let bytes = f.to_bytes();
        let back = read_predictions(&bytes[..]).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(read_predictions(&b"NOPE"[..]), Err(SlkpError::BadMagic)));
    }
}
