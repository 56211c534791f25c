//! Deterministic synthetic vehicle scenes: coloured part rectangles with
//! injected damage, distractors and occluders, plus ground truth, heatmaps,
//! a geometry channel and part/damage co-occurrence annotations.

mod dataset;
mod scene;

pub use dataset::{export_dataset, generate_dataset, import_dataset, Dataset, DatasetError};
pub use scene::{generate, SceneSample, MIN_SIDE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{GraphError, StructuralPriorGraph};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("image {h}x{w} smaller than {min}x{min}")]
    TooSmall { h: usize, w: usize, min: usize },
    #[error("difficulty {0} not in [0, 1]")]
    Difficulty(f64),
    #[error("part {0:?} has no place in the layout")]
    UnknownPart(String),
    #[error("taxonomy needs at least one part and one damage class, with unique names")]
    BadTaxonomy,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Part and damage class names. Ids are indices into each list; damage
/// names starting with `fake_` are texture-only look-alikes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    pub parts: Vec<String>,
    pub damages: Vec<String>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            parts: s(&["hood", "door_l", "door_r", "bumper_f", "bumper_r", "roof"]),
            damages: s(&["dent", "scratch", "crack", "fake_mud"]),
        }
    }
}

impl Taxonomy {
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut all: Vec<&String> = self.parts.iter().chain(&self.damages).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        if self.parts.is_empty() || self.damages.is_empty() || all.len() != n {
            return Err(SynthError::BadTaxonomy);
        }
        Ok(())
    }

    pub fn is_fake(&self, damage: usize) -> bool {
        self.damages[damage].starts_with("fake_")
    }
}

/// Rectangle in normalized vehicle coordinates (`[0, 1]²`, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRect {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
}

const EPS: f64 = 1e-9;

impl NormRect {
    pub const fn new(y0: f64, x0: f64, y1: f64, x1: f64) -> Self {
        Self { y0, x0, y1, x1 }
    }

    fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
        a1.min(b1) - a0.max(b0)
    }

    /// Whether the two rectangles share a boundary segment of positive length.
    pub fn touches(&self, o: &NormRect) -> bool {
        let horizontal = ((self.y1 - o.y0).abs() < EPS || (o.y1 - self.y0).abs() < EPS)
            && Self::overlap(self.x0, self.x1, o.x0, o.x1) > EPS;
        let vertical = ((self.x1 - o.x0).abs() < EPS || (o.x1 - self.x0).abs() < EPS)
            && Self::overlap(self.y0, self.y1, o.y0, o.y1) > EPS;
        horizontal || vertical
    }

    pub fn mirrored(&self) -> NormRect {
        NormRect::new(self.y0, 1.0 - self.x1, self.y1, 1.0 - self.x0)
    }

    fn approx_eq(&self, o: &NormRect) -> bool {
        [(self.y0, o.y0), (self.x0, o.x0), (self.y1, o.y1), (self.x1, o.x1)]
            .iter()
            .all(|(a, b)| (a - b).abs() < EPS)
    }
}

/// Named part rectangles of the canonical top-down vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub parts: Vec<(String, NormRect)>,
}

impl Layout {
    pub fn canonical() -> Self {
        let p = |n: &str, r: NormRect| (n.to_string(), r);
        Self {
            parts: vec![
                p("bumper_f", NormRect::new(0.10, 0.25, 0.20, 0.75)),
                p("hood", NormRect::new(0.20, 0.25, 0.40, 0.75)),
                p("door_l", NormRect::new(0.40, 0.20, 0.65, 0.35)),
                p("roof", NormRect::new(0.40, 0.35, 0.65, 0.65)),
                p("door_r", NormRect::new(0.40, 0.65, 0.65, 0.80)),
                p("bumper_r", NormRect::new(0.65, 0.25, 0.78, 0.75)),
            ],
        }
    }

    pub fn rect(&self, name: &str) -> Option<NormRect> {
        self.parts.iter().find(|(n, _)| n == name).map(|(_, r)| *r)
    }

    /// Layout rectangles in taxonomy part order.
    pub fn rects_for(&self, tax: &Taxonomy) -> Result<Vec<NormRect>, SynthError> {
        tax.parts
            .iter()
            .map(|n| self.rect(n).ok_or_else(|| SynthError::UnknownPart(n.clone())))
            .collect()
    }
}

/// Adjacency from rectangle contact, symmetry from left/right mirror images.
pub fn make_graph(tax: &Taxonomy, layout: &Layout) -> Result<StructuralPriorGraph, SynthError> {
    let rects = layout.rects_for(tax)?;
    let (mut adjacency, mut symmetry) = (Vec::new(), Vec::new());
    for a in 0..rects.len() {
        for b in a + 1..rects.len() {
            if rects[a].touches(&rects[b]) {
                adjacency.push((a, b));
            }
            if rects[a].mirrored().approx_eq(&rects[b]) {
                symmetry.push((a, b));
            }
        }
    }
    Ok(StructuralPriorGraph::new(
        (0..rects.len()).collect(),
        adjacency,
        symmetry,
        StructuralPriorGraph::DEFAULT_BIAS_POS,
        StructuralPriorGraph::DEFAULT_BIAS_NEG,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_graph_matches_hand_enumeration() {
        let tax = Taxonomy::default();
        let g = make_graph(&tax, &Layout::canonical()).unwrap();
        let id = |n: &str| tax.parts.iter().position(|p| p == n).unwrap();
        let mut expected: Vec<(usize, usize)> = [
            ("bumper_f", "hood"),
            ("hood", "door_l"),
            ("hood", "roof"),
            ("hood", "door_r"),
            ("door_l", "roof"),
            ("roof", "door_r"),
            ("door_l", "bumper_r"),
            ("roof", "bumper_r"),
            ("door_r", "bumper_r"),
        ]
        .iter()
        .map(|(a, b)| (id(a).min(id(b)), id(a).max(id(b))))
        .collect();
        expected.sort();
        assert_eq!(g.adjacency().collect::<Vec<_>>(), expected);
        assert_eq!(g.symmetry().collect::<Vec<_>>(), vec![(id("door_l"), id("door_r"))]);
    }

    #[test]
    fn separated_parts_have_no_edges() {
        let tax = Taxonomy {
            parts: vec!["a".into(), "b".into()],
            damages: vec!["dent".into()],
        };
        let layout = Layout {
            parts: vec![
                ("a".into(), NormRect::new(0.0, 0.0, 0.2, 0.2)),
                ("b".into(), NormRect::new(0.5, 0.5, 0.7, 0.6)),
            ],
        };
        let g = make_graph(&tax, &layout).unwrap();
        assert_eq!(g.adjacency().count(), 0);
        assert_eq!(g.symmetry().count(), 0);
        let missing = Taxonomy {
            parts: vec!["wing".into()],
            damages: vec!["dent".into()],
        };
        assert!(matches!(make_graph(&missing, &layout), Err(SynthError::UnknownPart(_))));
    }

    #[test]
    fn corner_contact_is_not_adjacency() {
        let a = NormRect::new(0.0, 0.0, 0.5, 0.5);
        let b = NormRect::new(0.5, 0.5, 1.0, 1.0);
        assert!(!a.touches(&b));
        assert!(a.touches(&NormRect::new(0.5, 0.2, 0.9, 0.3)));
    }

    #[test]
    fn taxonomy_validation() {
        Taxonomy::default().validate().unwrap();
        assert!(Taxonomy::default().is_fake(3));
        let dup = Taxonomy {
            parts: vec!["x".into()],
            damages: vec!["x".into()],
        };
        assert!(dup.validate().is_err());
    }
}
