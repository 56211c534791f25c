use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("part {0} is not in the graph")]
    UnknownPart(usize),
    #[error("self edge on part {0}")]
    SelfEdge(usize),
    #[error("duplicate part id {0}")]
    DuplicatePart(usize),
    #[error("bias_pos must be > 0 > bias_neg, got pos={pos} neg={neg}")]
    BadBias { pos: f64, neg: f64 },
    #[error("graph io: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Part adjacency and left/right symmetry, plus the attention bias applied
/// between related and unrelated parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphFile", into = "GraphFile")]
pub struct StructuralPriorGraph {
    parts: Vec<usize>,
    adjacency: BTreeSet<(usize, usize)>,
    symmetry: BTreeSet<(usize, usize)>,
    pub bias_pos: f64,
    pub bias_neg: f64,
}

/// On-disk form: `{parts, adjacency, symmetry, bias_pos, bias_neg}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphFile {
    parts: Vec<usize>,
    adjacency: Vec<[usize; 2]>,
    symmetry: Vec<[usize; 2]>,
    bias_pos: f64,
    bias_neg: f64,
}

impl TryFrom<GraphFile> for StructuralPriorGraph {
    type Error = GraphError;
    fn try_from(f: GraphFile) -> Result<Self, GraphError> {
        let pairs = |v: Vec<[usize; 2]>| v.into_iter().map(|[a, b]| (a, b)).collect::<Vec<_>>();
        StructuralPriorGraph::new(f.parts, pairs(f.adjacency), pairs(f.symmetry), f.bias_pos, f.bias_neg)
    }
}

impl From<StructuralPriorGraph> for GraphFile {
    fn from(g: StructuralPriorGraph) -> Self {
        GraphFile {
            adjacency: g.adjacency.iter().map(|&(a, b)| [a, b]).collect(),
            symmetry: g.symmetry.iter().map(|&(a, b)| [a, b]).collect(),
            parts: g.parts,
            bias_pos: g.bias_pos,
            bias_neg: g.bias_neg,
        }
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl StructuralPriorGraph {
    pub const DEFAULT_BIAS_POS: f64 = 1.0;
    pub const DEFAULT_BIAS_NEG: f64 = -1.0;

    pub fn new(
        parts: Vec<usize>,
        adjacency: Vec<(usize, usize)>,
        symmetry: Vec<(usize, usize)>,
        bias_pos: f64,
        bias_neg: f64,
    ) -> Result<Self, GraphError> {
        if !(bias_pos > 0.0 && bias_neg < 0.0) {
            return Err(GraphError::BadBias {
                pos: bias_pos,
                neg: bias_neg,
            });
        }
        Self::build(parts, adjacency, symmetry, bias_pos, bias_neg)
    }

    /// Same as [`StructuralPriorGraph::new`] without the sign constraint on
    /// the biases, for reduction experiments (zero or masking biases).
    pub fn with_any_bias(
        parts: Vec<usize>,
        adjacency: Vec<(usize, usize)>,
        symmetry: Vec<(usize, usize)>,
        bias_pos: f64,
        bias_neg: f64,
    ) -> Result<Self, GraphError> {
        Self::build(parts, adjacency, symmetry, bias_pos, bias_neg)
    }

    fn build(
        parts: Vec<usize>,
        adjacency: Vec<(usize, usize)>,
        symmetry: Vec<(usize, usize)>,
        bias_pos: f64,
        bias_neg: f64,
    ) -> Result<Self, GraphError> {
        let mut seen = BTreeSet::new();
        for &p in &parts {
            if !seen.insert(p) {
                return Err(GraphError::DuplicatePart(p));
            }
        }
        let check = |edges: Vec<(usize, usize)>| -> Result<BTreeSet<(usize, usize)>, GraphError> {
            edges
                .into_iter()
                .map(|(a, b)| {
                    if a == b {
                        return Err(GraphError::SelfEdge(a));
                    }
                    for p in [a, b] {
                        if !seen.contains(&p) {
                            return Err(GraphError::UnknownPart(p));
                        }
                    }
                    Ok(ordered(a, b))
                })
                .collect()
        };
        let adjacency = check(adjacency)?;
        let symmetry = check(symmetry)?;
        Ok(Self {
            parts,
            adjacency,
            symmetry,
            bias_pos,
            bias_neg,
        })
    }

    pub fn parts(&self) -> &[usize] {
        &self.parts
    }

    pub fn adjacency(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency.iter().copied()
    }

    pub fn symmetry(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.symmetry.iter().copied()
    }

    pub fn contains(&self, part: usize) -> bool {
        self.parts.contains(&part)
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency.contains(&ordered(a, b))
    }

    pub fn is_symmetric(&self, a: usize, b: usize) -> bool {
        self.symmetry.contains(&ordered(a, b))
    }

    /// Structural bias between two tokens' parts: zero when either is
    /// unassigned, `bias_pos` for the same, adjacent or mirrored parts,
    /// `bias_neg` otherwise.
    pub fn bias(&self, a: Option<usize>, b: Option<usize>) -> Result<f64, GraphError> {
        let (Some(a), Some(b)) = (a, b) else {
            return Ok(0.0);
        };
        for p in [a, b] {
            if !self.contains(p) {
                return Err(GraphError::UnknownPart(p));
            }
        }
        if a == b || self.is_adjacent(a, b) || self.is_symmetric(a, b) {
            Ok(self.bias_pos)
        } else {
            Ok(self.bias_neg)
        }
    }

    /// Union of adjacency and symmetry edges, each once, in sorted order.
    pub fn relation_edges(&self) -> Vec<(usize, usize)> {
        self.adjacency.union(&self.symmetry).copied().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, GraphError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g() -> StructuralPriorGraph {
        StructuralPriorGraph::new(vec![0, 1, 2, 3], vec![(0, 1)], vec![(3, 2)], 1.0, -1.0).unwrap()
    }

    #[test]
    fn invariants_enforced() {
        assert!(matches!(
            StructuralPriorGraph::new(vec![0, 1], vec![(1, 1)], vec![], 1.0, -1.0),
            Err(GraphError::SelfEdge(1))
        ));
        assert!(matches!(
            StructuralPriorGraph::new(vec![0, 1], vec![(0, 5)], vec![], 1.0, -1.0),
            Err(GraphError::UnknownPart(5))
        ));
        assert!(matches!(
            StructuralPriorGraph::new(vec![0, 1], vec![], vec![], 0.0, -1.0),
            Err(GraphError::BadBias { .. })
        ));
        assert!(StructuralPriorGraph::with_any_bias(vec![0], vec![], vec![], 0.0, 0.0).is_ok());
    }

    #[test]
    fn bias_rules() {
        let g = g();
        assert_eq!(g.bias(Some(0), Some(1)).unwrap(), 1.0);
        assert_eq!(g.bias(Some(1), Some(0)).unwrap(), 1.0);
        assert_eq!(g.bias(Some(2), Some(3)).unwrap(), 1.0);
        assert_eq!(g.bias(Some(2), Some(2)).unwrap(), 1.0);
        assert_eq!(g.bias(Some(0), Some(3)).unwrap(), -1.0);
        assert_eq!(g.bias(None, Some(3)).unwrap(), 0.0);
        assert!(matches!(g.bias(Some(9), Some(0)), Err(GraphError::UnknownPart(9))));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let g = g();
        let back = StructuralPriorGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        let bad = r#"{"parts":[0],"adjacency":[[0,0]],"symmetry":[],"bias_pos":1.0,"bias_neg":-1.0}"#;
        assert!(StructuralPriorGraph::from_json(bad).is_err());
    }
}
