//! Single-file parameter archives.
//!
//! Layout: the 8-byte magic `MDQFCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor as
//! raw little-endian `f64` in header order. Values round-trip bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::detector::{BranchDetector, DetectorConfig, Modality};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::MdqfModel;
use crate::nn::ParamSet;

pub const MAGIC: &[u8; 8] = b"MDQFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchMeta {
    pub modality: Modality,
    pub width: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub stages: usize,
    pub config: DetectorConfig,
}

impl BranchMeta {
    fn of(b: &BranchDetector) -> Self {
        let c = &b.config;
        Self {
            modality: b.modality,
            width: c.width,
            num_queries: c.num_queries,
            num_classes: c.num_classes,
            stages: c.stages,
            config: c.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Metadata {
    Branch(BranchMeta),
    Composite { rgb: BranchMeta, tir: BranchMeta, fusion: FusionConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: Metadata,
    tensors: Vec<TensorEntry>,
}

fn write_archive(path: &Path, metadata: Metadata, tensors: Vec<(String, &Array2<f64>)>) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        metadata,
        tensors: tensors
            .iter()
            .map(|(n, a)| TensorEntry { name: n.clone(), rows: a.nrows(), cols: a.ncols() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = tensors.iter().map(|(_, a)| a.len()).sum();
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, a) in &tensors {
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn read_archive(path: &Path) -> Result<(Metadata, Vec<(String, Array2<f64>)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut offset = 20 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n = t.rows * t.cols;
        let raw = bytes.get(offset..offset + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let values: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let a = Array2::from_shape_vec((t.rows, t.cols), values).map_err(|e| bad(&e.to_string()))?;
        tensors.push((t.name, a));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header.metadata, tensors))
}

fn prefixed<'a>(prefix: &str, ps: &'a ParamSet) -> impl Iterator<Item = (String, &'a Array2<f64>)> + 'a {
    let prefix = prefix.to_string();
    ps.iter().map(move |(n, a)| (format!("{prefix}{n}"), a))
}

/// Collects the tensors under `prefix` into a parameter set.
fn take(tensors: &[(String, Array2<f64>)], prefix: &str) -> ParamSet {
    let mut ps = ParamSet::new(0);
    for (n, a) in tensors {
        if let Some(rest) = n.strip_prefix(prefix) {
            ps.add(rest, a.clone());
        }
    }
    ps
}

fn build_branch(meta: &BranchMeta, params: &ParamSet) -> Result<BranchDetector> {
    let mut b = BranchDetector::new(meta.modality, meta.config.clone())?;
    b.load_params_from(params)?;
    Ok(b)
}

pub fn save_branch(branch: &BranchDetector, path: &Path) -> Result<()> {
    write_archive(path, Metadata::Branch(BranchMeta::of(branch)), prefixed("", &branch.params).collect())
}

pub fn save_model(model: &MdqfModel, path: &Path) -> Result<()> {
    let meta = Metadata::Composite {
        rgb: BranchMeta::of(&model.rgb),
        tir: BranchMeta::of(&model.tir),
        fusion: model.fusion.clone(),
    };
    let tensors = prefixed("rgb/", &model.rgb.params)
        .chain(prefixed("tir/", &model.tir.params))
        .chain(prefixed("adapters/", &model.adapters.params))
        .collect();
    write_archive(path, meta, tensors)
}

pub fn read_metadata(path: &Path) -> Result<Metadata> {
    Ok(read_archive(path)?.0)
}

/// Loads a branch archive, or extracts the branch of `modality` from a
/// composite archive. A branch archive of the other modality is an error.
pub fn load_branch(path: &Path, modality: Modality) -> Result<BranchDetector> {
    let (meta, tensors) = read_archive(path)?;
    match meta {
        Metadata::Branch(m) if m.modality == modality => build_branch(&m, &take(&tensors, "")),
        Metadata::Branch(m) => Err(Error::Checkpoint(format!(
            "{} holds a {} branch, not {}",
            path.display(),
            m.modality.as_str(),
            modality.as_str()
        ))),
        Metadata::Composite { rgb, tir, .. } => {
            let (m, prefix) = match modality {
                Modality::Rgb => (rgb, "rgb/"),
                Modality::Tir => (tir, "tir/"),
            };
            build_branch(&m, &take(&tensors, prefix))
        }
    }
}

pub fn load_model(path: &Path) -> Result<MdqfModel> {
    let (meta, tensors) = read_archive(path)?;
    let Metadata::Composite { rgb, tir, fusion } = meta else {
        return Err(Error::Checkpoint(format!("{} is a branch archive, not a composite", path.display())));
    };
    let r = build_branch(&rgb, &take(&tensors, "rgb/"))?;
    let t = build_branch(&tir, &take(&tensors, "tir/"))?;
    let mut model = MdqfModel::new(r, t, fusion, 0)?;
    let adapters = take(&tensors, "adapters/");
    model.adapters.params.assign_from(&adapters)?;
    Ok(model)
}
