//! On-disk dataset layout.
//!
//! ```text
//! <root>/
//!   manifest.json
//!   source_train/ img_00000.cvi lbl_00000.pgm ...
//!   source_val/   ...
//!   target_train/ ...
//!   target_val/   ...
//! ```
//!
//! Images use a float raster format (`.cvi`): magic `b"COVIMG\0\0"`,
//! `u32` version (1), `u32` channels, `u32` height, `u32` width, then
//! `channels*h*w` little-endian `f64` values in channel-major order.
//! Labels are binary 8-bit PGM (`P5`, maxval 255) with 255 reserved for
//! ignore. The manifest records the generating specs, seed, config hash,
//! and every sample path, so a dataset round-trips bit-exactly.

use super::{DomainSpec, ImageBuf, LabelMap, SceneSample};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

const IMG_MAGIC: &[u8; 8] = b"COVIMG\0\0";
const IMG_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn malformed(path: &Path, reason: &str) -> DataError {
    DataError::Malformed {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

pub fn write_float_image(path: &Path, img: &ImageBuf) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(24 + img.data.len() * 8);
    buf.extend_from_slice(IMG_MAGIC);
    buf.extend_from_slice(&IMG_VERSION.to_le_bytes());
    buf.extend_from_slice(&(img.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(img.h as u32).to_le_bytes());
    buf.extend_from_slice(&(img.w as u32).to_le_bytes());
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(io_err(path))
}

pub fn read_float_image(path: &Path) -> Result<ImageBuf, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() < 24 || &bytes[..8] != IMG_MAGIC {
        return Err(malformed(path, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if u32_at(8) != IMG_VERSION as usize {
        return Err(malformed(path, "unsupported version"));
    }
    let (channels, h, w) = (u32_at(12), u32_at(16), u32_at(20));
    let n = channels * h * w;
    if bytes.len() != 24 + n * 8 {
        return Err(malformed(path, "size does not match header"));
    }
    let data: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ImageBuf {
        channels,
        h,
        w,
        data,
    })
}

/// Binary 8-bit PGM with maxval 255.
pub fn write_pgm(path: &Path, h: usize, w: usize, data: &[u8]) -> Result<(), DataError> {
    assert_eq!(data.len(), h * w, "pgm size mismatch");
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(data);
    std::fs::write(path, buf).map_err(io_err(path))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    // header: P5, whitespace-separated width, height, maxval, one byte, raster
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() != 4 || fields[0] != b"P5" {
        return Err(malformed(path, "not a binary PGM"));
    }
    let parse = |b: &[u8]| -> Option<usize> { std::str::from_utf8(b).ok()?.parse().ok() };
    let w = parse(fields[1]).ok_or_else(|| malformed(path, "bad width"))?;
    let h = parse(fields[2]).ok_or_else(|| malformed(path, "bad height"))?;
    let maxval = parse(fields[3]).ok_or_else(|| malformed(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(malformed(path, "maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() != pos + w * h {
        return Err(malformed(path, "raster size mismatch"));
    }
    Ok((h, w, bytes[pos..].to_vec()))
}

/// The four sample sets of one generated benchmark.
pub struct DatasetSplits {
    pub source_train: Vec<SceneSample>,
    pub source_val: Vec<SceneSample>,
    pub target_train: Vec<SceneSample>,
    pub target_val: Vec<SceneSample>,
}

pub const SPLIT_NAMES: [&str; 4] = ["source_train", "source_val", "target_train", "target_val"];

impl DatasetSplits {
    pub fn split(&self, name: &str) -> &[SceneSample] {
        match name {
            "source_train" => &self.source_train,
            "source_val" => &self.source_val,
            "target_train" => &self.target_train,
            "target_val" => &self.target_val,
            other => panic!("unknown split {other}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub labels: String,
    pub domain: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub source_spec: DomainSpec,
    pub target_spec: DomainSpec,
    pub splits: std::collections::BTreeMap<String, Vec<ManifestEntry>>,
}

/// Write all splits plus the manifest under `root`.
pub fn save_dataset(
    root: &Path,
    splits: &DatasetSplits,
    source_spec: &DomainSpec,
    target_spec: &DomainSpec,
    seed: u64,
    config_hash: &str,
) -> Result<(), DataError> {
    let mut manifest_splits = std::collections::BTreeMap::new();
    for name in SPLIT_NAMES {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut entries = Vec::new();
        for (i, sample) in splits.split(name).iter().enumerate() {
            let img_rel = format!("{name}/img_{i:05}.cvi");
            let lbl_rel = format!("{name}/lbl_{i:05}.pgm");
            write_float_image(&root.join(&img_rel), &sample.image)?;
            write_pgm(
                &root.join(&lbl_rel),
                sample.labels.h,
                sample.labels.w,
                sample.labels.pixels(),
            )?;
            entries.push(ManifestEntry {
                image: img_rel,
                labels: lbl_rel,
                domain: sample.domain.clone(),
                seed: sample.seed,
            });
        }
        manifest_splits.insert(name.to_string(), entries);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        source_spec: source_spec.clone(),
        target_spec: target_spec.clone(),
        splits: manifest_splits,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(io_err(&path))
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(root: &Path) -> Result<(DatasetSplits, Manifest), DataError> {
    let path = root.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| malformed(&path, &format!("bad manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(malformed(&path, "unsupported manifest version"));
    }
    let mut loaded: std::collections::BTreeMap<String, Vec<SceneSample>> = Default::default();
    for name in SPLIT_NAMES {
        let entries = manifest
            .splits
            .get(name)
            .ok_or_else(|| malformed(&path, &format!("missing split {name}")))?;
        let mut samples = Vec::with_capacity(entries.len());
        for e in entries {
            let image = read_float_image(&root.join(&e.image))?;
            let lbl_path = root.join(&e.labels);
            let (h, w, data) = read_pgm(&lbl_path)?;
            if (h, w) != (image.h, image.w) {
                return Err(malformed(&lbl_path, "label extent differs from image"));
            }
            samples.push(SceneSample {
                image,
                labels: LabelMap::new(h, w, data),
                domain: e.domain.clone(),
                seed: e.seed,
            });
        }
        loaded.insert(name.to_string(), samples);
    }
    Ok((
        DatasetSplits {
            source_train: loaded.remove("source_train").unwrap(),
            source_val: loaded.remove("source_val").unwrap(),
            target_train: loaded.remove("target_train").unwrap(),
            target_val: loaded.remove("target_val").unwrap(),
        },
        manifest,
    ))
}

/// Non-hidden directory entries, for overwrite refusal checks.
pub fn dir_is_nonempty(path: &Path) -> bool {
    match std::fs::read_dir(path) {
        Ok(mut entries) => entries.next().is_some(),
        Err(_) => false,
    }
}

/// Dump one pseudo-label map in the dataset's label format.
pub fn write_pseudo_labels(
    path: &Path,
    h: usize,
    w: usize,
    labels: &[u8],
) -> Result<(), DataError> {
    write_pgm(path, h, w, labels)
}
