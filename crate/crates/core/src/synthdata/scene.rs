use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layout, SynthError, Taxonomy};
use crate::blocks::{weak_heatmap, DamageHeatmap, Rect};
use crate::losses::InstanceTarget;
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 32;

/// One synthetic scene with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub difficulty: f64,
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    /// Binary `[H, W]` masks of the visible parts.
    pub part_masks: Vec<Tensor>,
    pub part_labels: Vec<usize>,
    /// Binary `[H, W]` damage masks.
    pub damage_masks: Vec<Tensor>,
    pub damage_labels: Vec<usize>,
    /// Part id each damage lies on.
    pub damage_parts: Vec<usize>,
    pub heatmap: DamageHeatmap,
    /// Signed city-block distance to the nearest part boundary (positive on
    /// parts), lowered by one inside real damage. `[H, W]`.
    pub geometry: Tensor,
    /// `(part id, damage id)` co-occurrences.
    pub annotations: Vec<(usize, usize)>,
}

const PALETTE: [[f64; 3]; 8] = [
    [0.80, 0.22, 0.20],
    [0.22, 0.68, 0.30],
    [0.22, 0.40, 0.82],
    [0.86, 0.76, 0.22],
    [0.68, 0.30, 0.74],
    [0.30, 0.76, 0.80],
    [0.90, 0.55, 0.25],
    [0.55, 0.55, 0.60],
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum DamageKind {
    Dent,
    Scratch,
    Crack,
    Mud,
}

impl DamageKind {
    fn of(tax: &Taxonomy, d: usize) -> Self {
        let name = tax.damages[d].as_str();
        if tax.is_fake(d) {
            return DamageKind::Mud;
        }
        match name {
            "dent" => DamageKind::Dent,
            "scratch" => DamageKind::Scratch,
            "crack" => DamageKind::Crack,
            _ => [DamageKind::Dent, DamageKind::Scratch, DamageKind::Crack][d % 3],
        }
    }

    fn is_thin(self) -> bool {
        matches!(self, DamageKind::Scratch | DamageKind::Crack)
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn blend(&mut self, i: usize, c: [f64; 3], a: f64) {
        let p = &mut self.rgb[i];
        for k in 0..3 {
            p[k] = p[k] * (1.0 - a) + c[k] * a;
        }
    }
}

fn segment_distance(py: f64, px: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    ((py - qy).powi(2) + (px - qx).powi(2)).sqrt()
}

fn polyline_mask(h: usize, w: usize, pts: &[(f64, f64)], radius: f64) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            m[y * w + x] = pts.windows(2).any(|s| segment_distance(fy, fx, s[0], s[1]) <= radius);
        }
    }
    m
}

fn ellipse_mask(h: usize, w: usize, c: (f64, f64), ry: f64, rx: f64) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = ((y as f64 - c.0) / ry, (x as f64 - c.1) / rx);
            m[y * w + x] = dy * dy + dx * dx <= 1.0;
        }
    }
    m
}

fn signed_distance(labels: &[i32], h: usize, w: usize) -> Vec<f64> {
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = VecDeque::new();
    let neighbours = |i: usize| {
        let (y, x) = (i / w, i % w);
        let mut v = Vec::with_capacity(4);
        if y > 0 {
            v.push(i - w);
        }
        if y + 1 < h {
            v.push(i + w);
        }
        if x > 0 {
            v.push(i - 1);
        }
        if x + 1 < w {
            v.push(i + 1);
        }
        v
    };
    for i in 0..h * w {
        if neighbours(i).iter().any(|&j| labels[j] != labels[i]) {
            dist[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours(i) {
            if dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    labels
        .iter()
        .zip(&dist)
        .map(|(&l, &d)| {
            let d = if d == usize::MAX { (h + w) as f64 } else { d as f64 };
            if l >= 0 {
                d
            } else {
                -d
            }
        })
        .collect()
}

fn bbox(mask: &[bool], w: usize) -> Rect {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / w, i % w);
        y0 = y0.min(y);
        x0 = x0.min(x);
        y1 = y1.max(y + 1);
        x1 = x1.max(x + 1);
    }
    Rect { x0, y0, x1, y1 }
}

fn to_tensor(mask: &[bool], h: usize, w: usize) -> Tensor {
    Tensor::new(&[h, w], mask.iter().map(|&b| b as u8 as f64).collect()).expect("mask shape")
}

/// Renders one scene. Deterministic in `seed`; `difficulty` in `[0, 1]`
/// scales occlusion, distractor count, noise and shrinks damage.
pub fn generate(seed: u64, h: usize, w: usize, tax: &Taxonomy, difficulty: f64) -> Result<SceneSample, SynthError> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(SynthError::TooSmall { h, w, min: MIN_SIDE });
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(SynthError::Difficulty(difficulty));
    }
    tax.validate()?;
    let rects = Layout::canonical().rects_for(tax)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let scale = rng.random_range(0.9..1.15);
    let (oy, ox) = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
    let to_px = |v: f64, off: f64, n: usize| -> usize { (((v - 0.5) * scale + 0.5 + off) * n as f64).round().clamp(0.0, n as f64) as usize };

    let bg = {
        let g = rng.random_range(0.15..0.35);
        [g + rng.random_range(-0.03..0.03), g, g + rng.random_range(-0.03..0.03)]
    };
    let mut canvas = Canvas {
        h,
        w,
        rgb: vec![bg; h * w],
    };
    let mut labels = vec![-1i32; h * w];
    let (mut vy0, mut vx0, mut vy1, mut vx1) = (h, w, 0, 0);
    for (p, r) in rects.iter().enumerate() {
        let mut color = PALETTE[p % PALETTE.len()];
        for c in &mut color {
            *c = (*c + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0);
        }
        let (y0, y1) = (to_px(r.y0, oy, h), to_px(r.y1, oy, h));
        let (x0, x1) = (to_px(r.x0, ox, w), to_px(r.x1, ox, w));
        (vy0, vx0, vy1, vx1) = (vy0.min(y0), vx0.min(x0), vy1.max(y1), vx1.max(x1));
        for y in y0..y1 {
            let shade = 0.92 + 0.08 * (y - y0) as f64 / (y1 - y0).max(1) as f64;
            for x in x0..x1 {
                labels[y * w + x] = p as i32;
                canvas.rgb[y * w + x] = color.map(|c| c * shade);
            }
        }
    }

    // Distractors: glare streaks and decals, never labelled.
    let distractors = (3.0 * difficulty).round() as usize;
    for _ in 0..distractors {
        if rng.random_bool(0.5) {
            let a = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
            let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let len = rng.random_range(0.3..0.6) * w as f64;
            let b = (a.0 + len * ang.sin(), a.1 + len * ang.cos());
            let m = polyline_mask(h, w, &[a, b], 0.6);
            for i in (0..h * w).filter(|&i| m[i]) {
                canvas.blend(i, [1.0, 1.0, 0.97], 0.6);
            }
        } else {
            let (dh, dw) = (rng.random_range(3..7), rng.random_range(3..7));
            let y0 = rng.random_range(vy0..vy1.max(vy0 + 1)).min(h - dh);
            let x0 = rng.random_range(vx0..vx1.max(vx0 + 1)).min(w - dw);
            let color = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            for y in y0..y0 + dh {
                for x in x0..x0 + dw {
                    canvas.rgb[y * w + x] = color;
                }
            }
        }
    }

    // Occluder: a dark band entering the vehicle from one side.
    let mut occluder = vec![false; h * w];
    if difficulty > 0.0 {
        let frac = difficulty * rng.random_range(0.05..0.2);
        let (vh, vw) = (vy1.saturating_sub(vy0), vx1.saturating_sub(vx0));
        let side = rng.random_range(0..4);
        let (y0, y1, x0, x1) = match side {
            0 => (vy0, vy0 + (frac * vh as f64).ceil() as usize, vx0, vx1),
            1 => (vy1 - (frac * vh as f64).ceil() as usize, vy1, vx0, vx1),
            2 => (vy0, vy1, vx0, vx0 + (frac * vw as f64).ceil() as usize),
            _ => (vy0, vy1, vx1 - (frac * vw as f64).ceil() as usize, vx1),
        };
        for y in y0..y1.min(h) {
            for x in x0..x1.min(w) {
                occluder[y * w + x] = true;
                labels[y * w + x] = -1;
            }
        }
    }

    let visible: Vec<usize> = (0..rects.len()).filter(|&p| labels.contains(&(p as i32))).collect();

    let mut order: Vec<usize> = (0..tax.damages.len()).collect();
    order.shuffle(&mut rng);
    let count = rng.random_range(1..=tax.damages.len().min(3));
    let radius = h.min(w) as f64 * (0.11 - 0.05 * difficulty);
    let mut damages: Vec<(usize, usize, Vec<bool>, DamageKind)> = Vec::new();
    for &d in order.iter().take(if visible.is_empty() { 0 } else { count }) {
        let host = visible[rng.random_range(0..visible.len())];
        let pixels: Vec<usize> = (0..h * w).filter(|&i| labels[i] == host as i32).collect();
        let c = pixels[rng.random_range(0..pixels.len())];
        let centre = ((c / w) as f64, (c % w) as f64);
        let kind = DamageKind::of(tax, d);
        let shape = match kind {
            DamageKind::Dent => ellipse_mask(h, w, centre, rng.random_range(0.6..1.1) * radius, rng.random_range(0.6..1.1) * radius),
            DamageKind::Mud => ellipse_mask(h, w, centre, rng.random_range(0.7..1.3) * radius, rng.random_range(0.7..1.3) * radius),
            DamageKind::Scratch => {
                let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let half = rng.random_range(0.8..1.6) * radius;
                let (sy, sx) = (half * ang.sin(), half * ang.cos());
                polyline_mask(h, w, &[(centre.0 - sy, centre.1 - sx), (centre.0 + sy, centre.1 + sx)], 0.75)
            }
            DamageKind::Crack => {
                let mut pts = vec![centre];
                let mut ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                for _ in 0..3 {
                    ang += rng.random_range(-0.8..0.8);
                    let len = rng.random_range(0.5..0.9) * radius;
                    let last = *pts.last().expect("non-empty");
                    pts.push((last.0 + len * ang.sin(), last.1 + len * ang.cos()));
                }
                polyline_mask(h, w, &pts, 0.6)
            }
        };
        let mask: Vec<bool> = shape.iter().zip(&labels).map(|(&s, &l)| s && l == host as i32).collect();
        if mask.iter().any(|&m| m) {
            damages.push((d, host, mask, kind));
        }
    }

    for (_, _, mask, kind) in &damages {
        for i in (0..h * w).filter(|&i| mask[i]) {
            match kind {
                DamageKind::Dent => canvas.rgb[i] = canvas.rgb[i].map(|c| c * 0.55),
                DamageKind::Scratch => canvas.blend(i, [0.95, 0.95, 0.9], 0.85),
                DamageKind::Crack => canvas.blend(i, [0.05, 0.05, 0.05], 0.9),
                DamageKind::Mud => {
                    let speckle = rng.random_range(-0.06..0.06);
                    canvas.rgb[i] = [0.42 + speckle, 0.30 + speckle, 0.16 + speckle];
                }
            }
        }
    }
    let occ = rng.random_range(0.08..0.15);
    for i in (0..h * w).filter(|&i| occluder[i]) {
        canvas.rgb[i] = [occ, occ, occ + 0.02];
    }

    let noise = 0.02 + 0.03 * difficulty;
    let mut image = Vec::with_capacity(h * w * 3);
    for p in &canvas.rgb {
        for &c in p {
            image.push((c + rng.random_range(-noise..noise)).clamp(0.0, 1.0));
        }
    }

    let mut geometry = signed_distance(&labels, canvas.h, canvas.w);
    for (_, _, mask, kind) in &damages {
        if *kind != DamageKind::Mud {
            for i in (0..h * w).filter(|&i| mask[i]) {
                geometry[i] -= 1.0;
            }
        }
    }

    let boxes: Vec<Rect> = damages.iter().map(|(_, _, m, _)| bbox(m, w)).collect();
    let scratch_maps: Vec<Tensor> = damages
        .iter()
        .filter(|(_, _, _, k)| k.is_thin())
        .map(|(_, _, m, _)| to_tensor(m, h, w).map(|v| 0.5 * v))
        .collect();
    let heatmap = weak_heatmap(h, w, &boxes, &scratch_maps).expect("boxes lie inside the image");

    Ok(SceneSample {
        seed,
        difficulty,
        image: Tensor::new(&[h, w, 3], image).expect("image shape"),
        part_masks: visible
            .iter()
            .map(|&p| to_tensor(&labels.iter().map(|&l| l == p as i32).collect::<Vec<_>>(), h, w))
            .collect(),
        part_labels: visible,
        damage_masks: damages.iter().map(|(_, _, m, _)| to_tensor(m, h, w)).collect(),
        damage_labels: damages.iter().map(|x| x.0).collect(),
        damage_parts: damages.iter().map(|x| x.1).collect(),
        annotations: damages.iter().map(|x| (x.1, x.0)).collect(),
        heatmap,
        geometry: Tensor::new(&[h, w], geometry).expect("geometry shape"),
    })
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Part instances `(part, none)` followed by damage instances
    /// `(host part, damage)`.
    pub fn targets(&self) -> Vec<InstanceTarget> {
        let parts = self.part_masks.iter().zip(&self.part_labels).map(|(m, &p)| InstanceTarget {
            mask: m.clone(),
            part: p,
            damage: None,
        });
        let damages = self
            .damage_masks
            .iter()
            .zip(self.damage_parts.iter().zip(&self.damage_labels))
            .map(|(m, (&p, &d))| InstanceTarget {
                mask: m.clone(),
                part: p,
                damage: Some(d),
            });
        parts.chain(damages).collect()
    }

    /// Co-occurrences recovered from the masks alone: for each damage, the
    /// part whose mask contains it.
    pub fn annotations_from_masks(&self) -> Vec<Option<(usize, usize)>> {
        self.damage_masks
            .iter()
            .zip(&self.damage_labels)
            .map(|(dm, &d)| {
                self.part_masks.iter().zip(&self.part_labels).find_map(|(pm, &p)| {
                    let inside = dm.data().iter().zip(pm.data()).all(|(&a, &b)| a == 0.0 || b == 1.0);
                    inside.then_some((p, d))
                })
            })
            .collect()
    }

    /// Checks binary masks, disjoint parts, damage containment, valid labels
    /// and annotation consistency.
    pub fn check_invariants(&self, tax: &Taxonomy) -> Result<(), String> {
        let px = self.height() * self.width();
        let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0) && t.len() == px;
        if !self.part_masks.iter().chain(&self.damage_masks).all(binary) {
            return Err("masks must be binary [H, W]".into());
        }
        let mut cover = vec![0u32; px];
        for m in &self.part_masks {
            for (c, &v) in cover.iter_mut().zip(m.data()) {
                *c += v as u32;
            }
        }
        if cover.iter().any(|&c| c > 1) {
            return Err("part masks overlap".into());
        }
        for m in &self.damage_masks {
            if m.data().iter().zip(&cover).any(|(&v, &c)| v == 1.0 && c == 0) {
                return Err("damage outside the parts".into());
            }
        }
        if self.part_labels.iter().any(|&p| p >= tax.parts.len()) || self.damage_labels.iter().any(|&d| d >= tax.damages.len()) {
            return Err("label outside taxonomy".into());
        }
        let rebuilt: Vec<Option<(usize, usize)>> = self.annotations.iter().map(|&a| Some(a)).collect();
        if rebuilt != self.annotations_from_masks() {
            return Err("annotations disagree with masks".into());
        }
        Ok(())
    }
}
