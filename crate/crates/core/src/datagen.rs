//! Synthetic registered RGB / thermal scene pairs.
//!
//! Every object carries a visibility mode: it is drawn into the RGB image,
//! the thermal image, or both. Ground truth always lists every object, so a
//! single-modality detector has a recall ceiling while a fused detector can
//! see everything.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::Modality;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::matching::GroundTruth;
use crate::raster::Image;

pub const CLASS_NAMES: [&str; 3] = ["disk", "square", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Visibility {
    RgbOnly,
    TirOnly,
    Both,
}

impl Visibility {
    pub fn visible_in(self, modality: Modality) -> bool {
        matches!(
            (self, modality),
            (Visibility::Both, _) | (Visibility::RgbOnly, Modality::Rgb) | (Visibility::TirOnly, Modality::Tir)
        )
    }
}

/// Probabilities of the three visibility modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilityMix {
    pub rgb_only: f64,
    pub tir_only: f64,
    pub both: f64,
}

impl Default for VisibilityMix {
    fn default() -> Self {
        Self { rgb_only: 0.3, tir_only: 0.3, both: 0.4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub num_classes: usize,
    pub visibility: VisibilityMix,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 4,
            min_size: 12.0,
            max_size: 22.0,
            num_classes: 3,
            visibility: VisibilityMix::default(),
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let v = self.visibility;
        let sum = v.rgb_only + v.tir_only + v.both;
        if [v.rgb_only, v.tir_only, v.both].iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("visibility probabilities must be nonnegative and sum to 1, got {sum}")));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::Config("object size range is empty".into()));
        }
        if self.max_size >= self.height.min(self.width) as f64 {
            return Err(Error::Config("objects do not fit in the image".into()));
        }
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!("num_classes must be in 1..={}", CLASS_NAMES.len())));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config("noise must be in [0, 0.5]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
    pub visibility: Visibility,
}

impl Annotation {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth { bbox: self.bbox, class_id: self.class_id }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: u64,
    pub rgb: Image,
    pub tir: Image,
    pub annotations: Vec<Annotation>,
    /// Objects that could not be placed without heavy overlap.
    pub dropped: usize,
}

impl PairedSample {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.annotations.iter().map(Annotation::ground_truth).collect()
    }

    pub fn image(&self, modality: Modality) -> &Image {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Tir => &self.tir,
        }
    }

    /// One modality of the pair. With `visible_only`, labels of objects not
    /// drawn in that modality are left out.
    pub fn single(&self, modality: Modality, visible_only: bool) -> Sample {
        Sample {
            id: self.id,
            image: self.image(modality).clone(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| !visible_only || a.visibility.visible_in(modality))
                .copied()
                .collect(),
        }
    }
}

/// A single-modality training or test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.annotations.iter().map(Annotation::ground_truth).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    cx: f64,
    cy: f64,
    half: f64,
    class_id: usize,
    visibility: Visibility,
    color: [f64; 3],
    heat: f64,
}

/// Signed distance (pixels, negative inside) from `(x, y)` to the shape.
fn signed_distance(p: &Placed, x: f64, y: f64) -> f64 {
    let (dx, dy) = (x - p.cx, y - p.cy);
    match p.class_id {
        0 => (dx * dx + dy * dy).sqrt() - p.half,
        1 => dx.abs().max(dy.abs()) - p.half,
        _ => {
            // apex at the top edge, base on the bottom edge of the box
            let r = p.half;
            let slope = (dx.abs() - 0.5 * (dy + r)) / (1.0 + 0.25f64).sqrt();
            slope.max(dy - r).max(-r - dy)
        }
    }
}

fn coverage(distance: f64, softness: f64) -> f64 {
    (0.5 - distance / softness).clamp(0.0, 1.0)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn pick_visibility(rng: &mut ChaCha8Rng, mix: VisibilityMix) -> Visibility {
    let u: f64 = rng.gen();
    if u < mix.rgb_only {
        Visibility::RgbOnly
    } else if u < mix.rgb_only + mix.tir_only {
        Visibility::TirOnly
    } else {
        Visibility::Both
    }
}

const PLACEMENT_RETRIES: usize = 50;

/// Renders one paired scene. The result is a pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<PairedSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);

    let mut placed: Vec<Placed> = Vec::new();
    let mut dropped = 0;
    for _ in 0..count {
        let mut ok = None;
        for _ in 0..PLACEMENT_RETRIES {
            let size = rng.gen_range(spec.min_size..=spec.max_size);
            let half = 0.5 * size;
            let cx = rng.gen_range(half..w as f64 - half);
            let cy = rng.gen_range(half..h as f64 - half);
            let b = BBox::new(cx, cy, size, size);
            if placed.iter().all(|p| iou(&b, &BBox::new(p.cx, p.cy, 2.0 * p.half, 2.0 * p.half)) < 0.05) {
                ok = Some((cx, cy, half));
                break;
            }
        }
        let Some((cx, cy, half)) = ok else {
            dropped += 1;
            continue;
        };
        let class_id = rng.gen_range(0..spec.num_classes);
        let visibility = pick_visibility(&mut rng, spec.visibility);
        // light, tinted objects: luminance always stands out from the background
        let bright = rng.gen_range(0.85..1.0);
        let mut color = [bright; 3];
        color[rng.gen_range(0..3)] *= rng.gen_range(0.6..0.8);
        let heat = rng.gen_range(0.75..0.95);
        placed.push(Placed { cx, cy, half, class_id, visibility, color, heat });
    }

    // Textured RGB background: a base color modulated by a few low-frequency waves.
    let base: [f64; 3] = [rng.gen_range(0.3..0.5), rng.gen_range(0.3..0.5), rng.gen_range(0.3..0.5)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.0..6.3), rng.gen_range(0.01..0.04)))
        .collect();
    let tir_base = rng.gen_range(0.15..0.3);
    let tir_tilt = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));

    let mut rgb = Array3::zeros((h, w, 3));
    let mut tir = Array3::zeros((h, w, 1));
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * px + fy * py + ph).sin()).sum();
            let mut c = [base[0] + texture, base[1] + 0.5 * texture, base[2] - texture];
            let mut t = tir_base + tir_tilt.0 * (px / w as f64 - 0.5) + tir_tilt.1 * (py / h as f64 - 0.5);
            for p in &placed {
                let d = signed_distance(p, px, py);
                if p.visibility.visible_in(Modality::Rgb) {
                    let a = coverage(d, 1.0);
                    for ch in 0..3 {
                        c[ch] = (1.0 - a) * c[ch] + a * p.color[ch];
                    }
                }
                if p.visibility.visible_in(Modality::Tir) {
                    let a = coverage(d, 3.0);
                    t = (1.0 - a) * t + a * p.heat;
                }
            }
            for ch in 0..3 {
                rgb[[y, x, ch]] = quantize(c[ch] + rng.gen_range(-spec.noise..=spec.noise));
            }
            tir[[y, x, 0]] = quantize(t + rng.gen_range(-spec.noise..=spec.noise));
        }
    }

    let annotations = placed
        .iter()
        .map(|p| Annotation {
            bbox: BBox::new(p.cx / w as f64, p.cy / h as f64, 2.0 * p.half / w as f64, 2.0 * p.half / h as f64),
            class_id: p.class_id,
            visibility: p.visibility,
        })
        .collect();
    Ok(PairedSample { id: 0, rgb: Image::new(rgb), tir: Image::new(tir), annotations, dropped })
}

/// Seed of sample `index` in a dataset seeded with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.gen()
}

/// `count` scenes with ids `first_id..first_id + count`.
pub fn generate_dataset(spec: &SceneSpec, count: usize, first_id: u64) -> Result<Vec<PairedSample>> {
    (0..count as u64)
        .map(|i| {
            let id = first_id + i;
            let s = SceneSpec { seed: sample_seed(spec.seed, id), ..spec.clone() };
            let mut sample = generate_scene(&s)?;
            sample.id = id;
            Ok(sample)
        })
        .collect()
}

/// `mean + factor * (image - mean)`; factor 0 flattens the image to its mean.
pub fn degrade_contrast(image: &Image, factor: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&factor) {
        return Err(Error::ContrastFactor(factor));
    }
    let mean = image.mean();
    Ok(Image::new(image.data.mapv(|v| mean + factor * (v - mean))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene() {
        let spec = SceneSpec { min_objects: 0, max_objects: 0, ..SceneSpec::default() };
        let s = generate_scene(&spec).unwrap();
        assert!(s.annotations.is_empty());
        assert_eq!(s.rgb.data.dim(), (64, 64, 3));
        assert_eq!(s.tir.data.dim(), (64, 64, 1));
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec { seed: 42, ..SceneSpec::default() };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let other = SceneSpec { seed: 43, ..SceneSpec::default() };
        assert_ne!(generate_scene(&spec).unwrap(), generate_scene(&other).unwrap());
    }

    #[test]
    fn rgb_only_objects_leave_tir_at_background() {
        let vis = VisibilityMix { rgb_only: 1.0, tir_only: 0.0, both: 0.0 };
        let spec = SceneSpec { visibility: vis, min_objects: 3, max_objects: 4, seed: 9, ..SceneSpec::default() };
        let with = generate_scene(&spec).unwrap();
        let without = generate_scene(&SceneSpec { min_objects: 0, max_objects: 0, ..spec.clone() }).unwrap();
        assert!(!with.annotations.is_empty());
        // the background is a smooth ramp; every TIR pixel stays within the
        // noise band of it, far below the object intensities
        let lo = without.tir.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = without.tir.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let t = &with.tir.data;
        assert!(t.iter().all(|&v| v <= hi + 2.0 * spec.noise + 0.3 && v < 0.6), "{lo} {hi}");
        let mean = with.tir.mean();
        assert!(mean < 0.4);
    }

    #[test]
    fn boxes_stay_inside_and_ids_are_sequential() {
        let data = generate_dataset(&SceneSpec { seed: 3, ..SceneSpec::default() }, 30, 100).unwrap();
        for (i, s) in data.iter().enumerate() {
            assert_eq!(s.id, 100 + i as u64);
            for a in &s.annotations {
                let (x1, y1, x2, y2) = a.bbox.to_corners();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
            }
        }
    }

    #[test]
    fn complementary_visibility() {
        let data = generate_dataset(&SceneSpec { seed: 5, ..SceneSpec::default() }, 50, 0).unwrap();
        let count = |m: Modality| {
            data.iter().flat_map(|s| &s.annotations).filter(|a| a.visibility.visible_in(m)).count()
        };
        let total: usize = data.iter().map(|s| s.annotations.len()).sum();
        assert!(count(Modality::Rgb) < total && count(Modality::Tir) < total);
        let single = data[0].single(Modality::Tir, true);
        assert!(single.annotations.iter().all(|a| a.visibility != Visibility::RgbOnly));
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let bad = SceneSpec { visibility: VisibilityMix { rgb_only: 0.5, tir_only: 0.5, both: 0.5 }, ..SceneSpec::default() };
        assert!(matches!(generate_scene(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn contrast_degradation() {
        let img = Image::new(Array3::from_shape_fn((2, 2, 1), |(y, x, _)| ((x + y) % 2) as f64));
        assert_eq!(degrade_contrast(&img, 1.0).unwrap(), img);
        let flat = degrade_contrast(&img, 0.0).unwrap();
        assert!(flat.data.iter().all(|&v| v == 0.5));
        let half = degrade_contrast(&img, 0.5).unwrap();
        let mut vals: Vec<f64> = half.data.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, vec![0.25, 0.25, 0.75, 0.75]);
        assert!(matches!(degrade_contrast(&img, 1.5), Err(Error::ContrastFactor(_))));
    }
}
