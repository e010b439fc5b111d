//! Procedural shape-world images with exact instance masks.
//!
//! Every class is a (shape kind, colour) pair. Generation is a pure function
//! of the config and the image index, so a stage can re-read any image and
//! the same underlying picture can appear in several stages with different
//! visible label sets.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub type ClassId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Diamond];

    /// Whether the pixel centre offset `(dx, dy)` from the shape centre lies inside.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            // apex at dy = -r, base of width 2r at dy = +r
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
        }
    }

    pub fn area(self, r: f64) -> f64 {
        match self {
            ShapeKind::Square => 4.0 * r * r,
            ShapeKind::Circle => std::f64::consts::PI * r * r,
            ShapeKind::Triangle => 2.0 * r * r,
            ShapeKind::Diamond => 2.0 * r * r,
        }
    }

    pub fn perimeter(self, r: f64) -> f64 {
        match self {
            ShapeKind::Square => 8.0 * r,
            ShapeKind::Circle => 2.0 * std::f64::consts::PI * r,
            ShapeKind::Triangle => 2.0 * r + 2.0 * (r * r + 4.0 * r * r).sqrt(),
            ShapeKind::Diamond => 4.0 * std::f64::consts::SQRT_2 * r,
        }
    }
}

const PALETTE: [[f64; 3]; 4] = [[0.9, 0.15, 0.15], [0.15, 0.85, 0.2], [0.2, 0.3, 0.95], [0.95, 0.85, 0.1]];

/// Catalog entry for class `id`: shapes vary fastest.
pub fn class_appearance(id: ClassId) -> (ShapeKind, [f64; 3]) {
    let kind = ShapeKind::ALL[id as usize % 4];
    let colour = PALETTE[(id as usize / 4) % PALETTE.len()];
    (kind, colour)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeWorldConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Relative sampling weight per class; empty means uniform.
    pub class_weights: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ShapeWorldConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: 16,
            min_instances: 1,
            max_instances: 3,
            min_radius: 4.0,
            max_radius: 6.0,
            class_weights: Vec::new(),
            noise: 0.04,
            seed: 0,
        }
    }
}

impl ShapeWorldConfig {
    pub fn weights(&self) -> Vec<f64> {
        if self.class_weights.is_empty() {
            vec![1.0; self.num_classes]
        } else {
            self.class_weights.clone()
        }
    }

    /// Expected probability that one instance draw picks each class.
    pub fn class_probabilities(&self) -> Vec<f64> {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }
}

/// RGB image stored spatial-major: row `h·W + w` holds the channels of pixel `(h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Tensor,
}

impl Image {
    pub fn channels(&self) -> usize {
        self.pixels.cols()
    }

    /// Channel-first view `[C × H × W]` flattened.
    pub fn to_chw(&self) -> Vec<f64> {
        let c = self.channels();
        let hw = self.height * self.width;
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                out[ch * hw + p] = self.pixels.get(p, ch);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub class_id: ClassId,
    pub mask: Vec<bool>,
}

impl Segment {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub segments: Vec<Segment>,
}

impl Annotation {
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.segments.iter().map(|s| s.class_id).collect()
    }

    /// Semantic label map; `None` where no segment covers the pixel.
    pub fn label_map(&self) -> Vec<Option<ClassId>> {
        let mut out = vec![None; self.height * self.width];
        for s in &self.segments {
            for (o, &m) in out.iter_mut().zip(&s.mask) {
                if m {
                    *o = Some(s.class_id);
                }
            }
        }
        out
    }

    /// Pixels covered by any segment.
    pub fn covered(&self) -> Vec<bool> {
        let mut out = vec![false; self.height * self.width];
        for s in &self.segments {
            for (o, &m) in out.iter_mut().zip(&s.mask) {
                *o |= m;
            }
        }
        out
    }
}

/// Parameters of one drawn instance, kept for geometry checks.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawnShape {
    pub class_id: ClassId,
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub radius: f64,
}

fn image_rng(cfg: &ShapeWorldConfig, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    rng
}

fn pick_class(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> ClassId {
    let total = *cumulative.last().unwrap();
    let u = rng.random_range(0.0..total);
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1) as ClassId
}

/// Draws image `index`. Identical `(cfg, index)` always yields identical output.
pub fn generate(cfg: &ShapeWorldConfig, index: u64) -> (Image, Annotation) {
    let (img, ann, _) = generate_with_shapes(cfg, index);
    (img, ann)
}

pub fn generate_with_shapes(cfg: &ShapeWorldConfig, index: u64) -> (Image, Annotation, Vec<DrawnShape>) {
    let size = cfg.image_size;
    let mut rng = image_rng(cfg, index);
    let mut cumulative = Vec::with_capacity(cfg.num_classes);
    let mut acc = 0.0;
    for w in cfg.weights() {
        acc += w;
        cumulative.push(acc);
    }
    let count = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut occupied = vec![false; size * size];
    let mut segments = Vec::new();
    let mut shapes = Vec::new();
    let mut pixels = Tensor::zeros(size * size, 3);
    let bg = [rng.random_range(0.0..0.25), rng.random_range(0.0..0.25), rng.random_range(0.0..0.25)];
    for p in 0..size * size {
        for (c, b) in bg.iter().enumerate() {
            pixels.set(p, c, b + rng.random_range(-cfg.noise..=cfg.noise));
        }
    }
    for _ in 0..count {
        let class_id = pick_class(&mut rng, &cumulative);
        let (kind, colour) = class_appearance(class_id);
        // rejection-sample a placement that neither overlaps nor touches another shape
        let r0 = rng.random_range(cfg.min_radius..=cfg.max_radius);
        for attempt in 0..256 {
            // shrink towards min_radius when the canvas is crowded
            let r = (r0 - (r0 - cfg.min_radius) * attempt as f64 / 128.0).max(cfg.min_radius);
            let cx = rng.random_range(r..size as f64 - r);
            let cy = rng.random_range(r..size as f64 - r);
            let mut mask = vec![false; size * size];
            for h in 0..size {
                for w in 0..size {
                    if kind.contains(w as f64 + 0.5 - cx, h as f64 + 0.5 - cy, r) {
                        mask[h * size + w] = true;
                    }
                }
            }
            let clash = (0..size * size).any(|p| {
                let (h, w) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
                occupied[p] && kind.contains(w - cx, h - cy, r + 1.0)
            });
            if clash || !mask.iter().any(|&m| m) {
                continue;
            }
            for (p, &m) in mask.iter().enumerate() {
                if m {
                    occupied[p] = true;
                    for (c, col) in colour.iter().enumerate() {
                        pixels.set(p, c, (col + rng.random_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0));
                    }
                }
            }
            segments.push(Segment { class_id, mask });
            shapes.push(DrawnShape { class_id, kind, center: (cx, cy), radius: r });
            break;
        }
    }
    for v in pixels.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let id = format!("shape-{}-{index}", cfg.seed);
    let image = Image { id: id.clone(), height: size, width: size, pixels };
    let ann = Annotation { image_id: id, height: size, width: size, segments };
    (image, ann, shapes)
}

/// Keeps only segments whose class is visible; hidden objects become background.
pub fn stage_view(annotation: &Annotation, visible: &BTreeSet<ClassId>) -> Annotation {
    Annotation {
        image_id: annotation.image_id.clone(),
        height: annotation.height,
        width: annotation.width,
        segments: annotation.segments.iter().filter(|s| visible.contains(&s.class_id)).cloned().collect(),
    }
}

/// Per-class instance counts over images `0..n`.
pub fn class_histogram(cfg: &ShapeWorldConfig, images: impl IntoIterator<Item = u64>) -> Vec<usize> {
    let mut hist = vec![0; cfg.num_classes];
    for i in images {
        let (_, ann) = generate(cfg, i);
        for s in &ann.segments {
            hist[s.class_id as usize] += 1;
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = ShapeWorldConfig::default();
        assert_eq!(generate(&cfg, 17), generate(&cfg, 17));
        assert_ne!(generate(&cfg, 17).0, generate(&cfg, 18).0);
    }

    #[test]
    fn fixed_instance_count_is_honoured() {
        let cfg = ShapeWorldConfig { min_instances: 3, max_instances: 3, ..Default::default() };
        for i in 0..50 {
            assert_eq!(generate(&cfg, i).1.segments.len(), 3, "image {i}");
        }
    }

    #[test]
    fn masks_do_not_overlap_and_pixels_are_in_range() {
        let cfg = ShapeWorldConfig { min_instances: 3, max_instances: 4, ..Default::default() };
        for i in 0..30 {
            let (img, ann) = generate(&cfg, i);
            let mut seen = vec![false; 32 * 32];
            for s in &ann.segments {
                for (p, &m) in s.mask.iter().enumerate() {
                    if m {
                        assert!(!seen[p]);
                        seen[p] = true;
                    }
                }
            }
            assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mask_area_matches_analytic_area_within_perimeter() {
        let cfg = ShapeWorldConfig { min_instances: 2, max_instances: 3, ..Default::default() };
        for i in 0..40 {
            let (_, ann, shapes) = generate_with_shapes(&cfg, i);
            for (seg, shape) in ann.segments.iter().zip(&shapes) {
                let analytic = shape.kind.area(shape.radius);
                let err = (seg.area() as f64 - analytic).abs();
                assert!(err <= shape.kind.perimeter(shape.radius), "{shape:?}: {} vs {analytic}", seg.area());
            }
        }
    }

    #[test]
    fn stage_view_filters_segments() {
        let cfg = ShapeWorldConfig { min_instances: 3, max_instances: 3, ..Default::default() };
        let (_, ann) = generate(&cfg, 3);
        let all: BTreeSet<ClassId> = (0..16).collect();
        assert_eq!(stage_view(&ann, &all), ann);
        assert!(stage_view(&ann, &BTreeSet::new()).segments.is_empty());
        let keep = ann.segments[1].class_id;
        let v = stage_view(&ann, &BTreeSet::from([keep]));
        assert!(v.segments.iter().all(|s| s.class_id == keep));
        assert!(v.segments.contains(&ann.segments[1]));
    }

    #[test]
    fn chw_view_transposes_channels() {
        let (img, _) = generate(&ShapeWorldConfig::default(), 0);
        let chw = img.to_chw();
        assert_eq!(chw.len(), 3 * 32 * 32);
        assert_eq!(chw[2 * 1024 + 5], img.pixels.get(5, 2));
    }
}
