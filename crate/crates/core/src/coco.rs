//! COCO-detection JSON and PNG import/export for paired datasets.
//!
//! A dataset directory holds `rgb/` and `tir/` PNG folders, one annotation
//! file per modality (`annotations_rgb.json`, `annotations_tir.json`) sharing
//! image ids, and `pairs.json`, a list of `{image_id, rgb_file, tir_file}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::datagen::{Annotation, PairedSample, Sample, Visibility, CLASS_NAMES};
use crate::detector::Modality;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Image;

pub const PAIRS_FILE: &str = "pairs.json";

pub fn annotation_file(modality: Modality) -> String {
    format!("annotations_{}.json", modality.as_str())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// COCO category ids start at 1.
    pub category_id: usize,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<Visibility>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub image_id: u64,
    pub rgb_file: String,
    pub tir_file: String,
}

fn image_name(id: u64) -> String {
    format!("{id:06}.png")
}

fn to_pixels(b: &BBox, w: usize, h: usize) -> [f64; 4] {
    let (x1, y1, x2, y2) = b.to_corners();
    [x1 * w as f64, y1 * h as f64, (x2 - x1) * w as f64, (y2 - y1) * h as f64]
}

fn from_pixels(b: &[f64; 4], w: usize, h: usize) -> BBox {
    BBox::from_corners(b[0] / w as f64, b[1] / h as f64, (b[0] + b[2]) / w as f64, (b[1] + b[3]) / h as f64)
}

pub(crate) fn write_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = image.data.dim();
    let bytes: Vec<u8> = image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer(path, &bytes, w as u32, h as u32, color)?;
    Ok(())
}

fn read_png(path: &Path, channels: usize) -> Result<Image> {
    if !path.is_file() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match channels {
        1 => img.into_luma8().into_raw(),
        _ => img.into_rgb8().into_raw(),
    };
    let c = if channels == 1 { 1 } else { 3 };
    let data = Array3::from_shape_vec((h, w, c), raw.into_iter().map(|b| b as f64 / 255.0).collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Image::new(data))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| Error::MalformedJson { path: path.to_path_buf(), source })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn categories() -> Vec<CocoCategory> {
    CLASS_NAMES.iter().enumerate().map(|(i, n)| CocoCategory { id: i + 1, name: n.to_string() }).collect()
}

/// Writes both modalities of `samples` under `dir`. Every annotation file
/// lists every object, whichever modality it is visible in.
pub fn export_coco(samples: &[PairedSample], dir: &Path) -> Result<()> {
    for m in [Modality::Rgb, Modality::Tir] {
        fs::create_dir_all(dir.join(m.as_str()))?;
    }
    let mut images = Vec::with_capacity(samples.len());
    let mut annotations = Vec::new();
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w) = (s.rgb.height(), s.rgb.width());
        let name = image_name(s.id);
        write_png(&s.rgb, &dir.join("rgb").join(&name))?;
        write_png(&s.tir, &dir.join("tir").join(&name))?;
        images.push(CocoImage { id: s.id, file_name: name.clone(), width: w, height: h });
        pairs.push(PairEntry { image_id: s.id, rgb_file: format!("rgb/{name}"), tir_file: format!("tir/{name}") });
        for a in &s.annotations {
            let bbox = to_pixels(&a.bbox, w, h);
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: s.id,
                category_id: a.class_id + 1,
                bbox,
                area: bbox[2] * bbox[3],
                iscrowd: 0,
                visibility: Some(a.visibility),
            });
        }
    }
    let file = CocoFile { images, annotations, categories: categories() };
    for m in [Modality::Rgb, Modality::Tir] {
        let mut f = file.clone();
        for img in &mut f.images {
            img.file_name = format!("{}/{}", m.as_str(), img.file_name);
        }
        write_json(&f, &dir.join(annotation_file(m)))?;
    }
    write_json(&pairs, &dir.join(PAIRS_FILE))
}

/// Annotations of one modality file, grouped by image id.
fn load_annotations(dir: &Path, modality: Modality) -> Result<(CocoFile, BTreeMap<u64, Vec<Annotation>>)> {
    let path = dir.join(annotation_file(modality));
    let file: CocoFile = read_json(&path)?;
    let sizes: BTreeMap<u64, (usize, usize)> = file.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
    let mut by_image: BTreeMap<u64, Vec<Annotation>> = sizes.keys().map(|&id| (id, Vec::new())).collect();
    for a in &file.annotations {
        let &(w, h) = sizes.get(&a.image_id).ok_or_else(|| {
            Error::Config(format!("{}: annotation {} references unknown image {}", path.display(), a.id, a.image_id))
        })?;
        if a.category_id == 0 {
            return Err(Error::UnknownClass(0));
        }
        by_image.entry(a.image_id).or_default().push(Annotation {
            bbox: from_pixels(&a.bbox, w, h),
            class_id: a.category_id - 1,
            visibility: a.visibility.unwrap_or(Visibility::Both),
        });
    }
    Ok((file, by_image))
}

/// Loads a paired dataset through its pairing manifest, in manifest order.
pub fn import_coco(dir: &Path) -> Result<Vec<PairedSample>> {
    let pairs: Vec<PairEntry> = read_json(&dir.join(PAIRS_FILE))?;
    let (_, rgb_ann) = load_annotations(dir, Modality::Rgb)?;
    let (_, tir_ann) = load_annotations(dir, Modality::Tir)?;
    pairs
        .iter()
        .map(|p| {
            let annotations = rgb_ann.get(&p.image_id).ok_or(Error::DanglingPair(p.image_id))?;
            if !tir_ann.contains_key(&p.image_id) {
                return Err(Error::DanglingPair(p.image_id));
            }
            let rgb_path = dir.join(&p.rgb_file);
            let tir_path = dir.join(&p.tir_file);
            if !tir_path.is_file() {
                return Err(Error::DanglingPair(p.image_id));
            }
            if !rgb_path.is_file() {
                return Err(Error::DanglingPair(p.image_id));
            }
            Ok(PairedSample {
                id: p.image_id,
                rgb: read_png(&rgb_path, 3)?,
                tir: read_png(&tir_path, 1)?,
                annotations: annotations.clone(),
                dropped: 0,
            })
        })
        .collect()
}

/// Loads one modality alone, without a pairing manifest. With
/// `visible_only`, labels marked invisible in this modality are dropped.
pub fn import_single(dir: &Path, modality: Modality, visible_only: bool) -> Result<Vec<Sample>> {
    let (file, mut by_image) = load_annotations(dir, modality)?;
    let channels = match modality {
        Modality::Rgb => 3,
        Modality::Tir => 1,
    };
    file.images
        .iter()
        .map(|img| {
            let path: PathBuf = dir.join(&img.file_name);
            let annotations = by_image
                .remove(&img.id)
                .unwrap_or_default()
                .into_iter()
                .filter(|a| !visible_only || a.visibility.visible_in(modality))
                .collect();
            Ok(Sample { id: img.id, image: read_png(&path, channels)?, annotations })
        })
        .collect()
}
