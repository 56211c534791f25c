use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::{Tensor, TensorError};

/// Intensity painted inside annotated damage boxes.
pub const BOX_INTENSITY: f64 = 0.7;

/// Spatial damage prior `[H, W, 1]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DamageHeatmap {
    map: Tensor,
}

impl DamageHeatmap {
    /// Wraps a `[H, W, 1]` (or `[H, W]`) map, clamping values to `[0, 1]`.
    pub fn new(map: Tensor) -> Result<Self, ModelError> {
        let map = match map.shape() {
            [h, w] => map.reshape(&[*h, *w, 1])?,
            [_, _, 1] => map,
            other => return Err(ModelError::BadInput(other.to_vec())),
        };
        Ok(Self {
            map: map.map(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            map: Tensor::zeros(&[h, w, 1]),
        }
    }

    pub fn map(&self) -> &Tensor {
        &self.map
    }

    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }
}

/// Axis-aligned box in pixel coordinates, half-open: rows `y0..y1`,
/// columns `x0..x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

/// Rasterizes damage annotations into a heatmap: the union of box interiors
/// at [`BOX_INTENSITY`], plus every scratch map, clamped to `[0, 1]`.
pub fn weak_heatmap(h: usize, w: usize, boxes: &[Rect], scratch_maps: &[Tensor]) -> Result<DamageHeatmap, ModelError> {
    for b in boxes {
        if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 > w || b.y1 > h {
            return Err(TensorError::InvalidArgument {
                op: "weak_heatmap",
                msg: format!("box {b:?} outside {h}x{w} image"),
            }
            .into());
        }
    }
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if boxes.iter().any(|b| b.contains(y, x)) {
                data[y * w + x] = BOX_INTENSITY;
            }
        }
    }
    for m in scratch_maps {
        let ok = matches!(m.shape(), [mh, mw] | [mh, mw, 1] if *mh == h && *mw == w);
        if !ok {
            return Err(ModelError::BadInput(m.shape().to_vec()));
        }
        for (d, v) in data.iter_mut().zip(m.data()) {
            *d += v;
        }
    }
    DamageHeatmap::new(Tensor::new(&[h, w, 1], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_annotations_give_zero_map() {
        let m = weak_heatmap(8, 6, &[], &[]).unwrap();
        assert!(m.map().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_image_box_is_constant() {
        let r = Rect { x0: 0, y0: 0, x1: 6, y1: 8 };
        let m = weak_heatmap(8, 6, &[r], &[]).unwrap();
        assert!(m.map().data().iter().all(|&v| v == BOX_INTENSITY));
    }

    #[test]
    fn overlap_clamps_to_one() {
        let r = Rect { x0: 1, y0: 1, x1: 3, y1: 3 };
        let mut scratch = Tensor::zeros(&[4, 4]);
        for x in 0..4 {
            scratch.data_mut()[2 * 4 + x] = 0.5;
        }
        let m = weak_heatmap(4, 4, &[r], &[scratch.clone()]).unwrap();
        // Pixel-wise oracle: box indicator * 0.7 + scratch, clamped.
        for y in 0..4 {
            for x in 0..4 {
                let expect = ((if r.contains(y, x) { 0.7 } else { 0.0 }) + scratch.data()[y * 4 + x]).min(1.0);
                assert_eq!(m.map().data()[y * 4 + x], expect);
            }
        }
        assert_eq!(m.map().data()[2 * 4 + 1], 1.0);
    }

    #[test]
    fn box_outside_image_rejected() {
        let r = Rect { x0: 0, y0: 0, x1: 9, y1: 2 };
        assert!(weak_heatmap(4, 4, &[r], &[]).is_err());
    }
}
