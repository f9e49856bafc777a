//! Single-file bundle container: magic, JSON manifest, raw float64 arrays and
//! a trailing SHA-256 digest.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::appearance::AppearanceModel;
use crate::error::{AamError, Result};
use crate::model::{AamBundle, FeatureExtractor, ScaleLevel, TrainingInfo};
use crate::shape::{Shape, ShapeModel};

pub const MAGIC: &[u8; 8] = b"AAMCGDB1";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Byte order of the array payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ByteOrder {
    Little,
    Big,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LevelEntry {
    scale: f64,
    shape_noise: f64,
    image_noise: f64,
    channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    byte_order: ByteOrder,
    feature_id: FeatureExtractor,
    face_size: f64,
    margin: usize,
    training: TrainingInfo,
    levels: Vec<LevelEntry>,
    arrays: Vec<ArrayEntry>,
}

struct Writer {
    order: ByteOrder,
    payload: Vec<u8>,
    arrays: Vec<ArrayEntry>,
}

impl Writer {
    /// Appends a matrix in row-major order.
    fn push(&mut self, name: String, m: &DMatrix<f64>) {
        self.arrays.push(ArrayEntry {
            name,
            rows: m.nrows(),
            cols: m.ncols(),
            offset: self.payload.len(),
        });
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                let bytes = match self.order {
                    ByteOrder::Little => v.to_le_bytes(),
                    ByteOrder::Big => v.to_be_bytes(),
                };
                self.payload.extend_from_slice(&bytes);
            }
        }
    }

    fn push_vec(&mut self, name: String, v: &DVector<f64>) {
        self.push(name, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
    }
}

/// Serializes a bundle with the given payload byte order.
pub fn encode_bundle(bundle: &AamBundle, order: ByteOrder) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut w = Writer {
        order,
        payload: Vec::new(),
        arrays: Vec::new(),
    };
    let mut levels = Vec::new();
    for (i, level) in bundle.levels.iter().enumerate() {
        w.push_vec(format!("level{i}/shape_mean"), level.shape.mean.as_vector());
        w.push(format!("level{i}/shape_basis"), &level.shape.basis);
        w.push_vec(format!("level{i}/shape_eigenvalues"), &level.shape.eigenvalues);
        w.push_vec(format!("level{i}/appearance_mean"), &level.appearance.mean);
        w.push(format!("level{i}/appearance_basis"), &level.appearance.basis);
        w.push_vec(format!("level{i}/appearance_eigenvalues"), &level.appearance.eigenvalues);
        w.push_vec(format!("level{i}/appearance_prior_mean"), &level.appearance.prior_mean);
        levels.push(LevelEntry {
            scale: level.scale,
            shape_noise: level.shape.shape_noise,
            image_noise: level.appearance.image_noise,
            channels: level.appearance.channels,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        byte_order: order,
        feature_id: bundle.extractor,
        face_size: bundle.face_size,
        margin: bundle.margin,
        training: bundle.training.clone(),
        levels,
        arrays: w.arrays,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| AamError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + w.payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    order: ByteOrder,
    payload: &'a [u8],
    arrays: &'a [ArrayEntry],
}

impl Reader<'_> {
    fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let e = self
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| AamError::Format(format!("missing array {name}")))?;
        let len = e
            .rows
            .checked_mul(e.cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| AamError::Format(format!("array {name} too large")))?;
        let bytes = e
            .offset
            .checked_add(len)
            .and_then(|end| self.payload.get(e.offset..end))
            .ok_or_else(|| AamError::Format(format!("array {name} out of bounds")))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| {
                let b: [u8; 8] = c.try_into().expect("chunk of 8");
                match self.order {
                    ByteOrder::Little => f64::from_le_bytes(b),
                    ByteOrder::Big => f64::from_be_bytes(b),
                }
            })
            .collect();
        Ok(DMatrix::from_row_slice(e.rows, e.cols, &values))
    }

    fn vector(&self, name: &str) -> Result<DVector<f64>> {
        let m = self.matrix(name)?;
        if m.ncols() != 1 {
            return Err(AamError::Format(format!("array {name} is not a vector")));
        }
        Ok(m.column(0).into_owned())
    }
}

/// Parses and validates a serialized bundle.
pub fn decode_bundle(bytes: &[u8]) -> Result<AamBundle> {
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(AamError::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(AamError::Checksum);
    }
    if &body[..MAGIC.len()] != MAGIC {
        return Err(AamError::Format("not a bundle file".into()));
    }
    let len_bytes: [u8; 8] = body[MAGIC.len()..MAGIC.len() + 8].try_into().expect("8 bytes");
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let json_start = MAGIC.len() + 8;
    let json = json_start
        .checked_add(json_len)
        .and_then(|end| body.get(json_start..end))
        .ok_or_else(|| AamError::Format("manifest length out of bounds".into()))?;
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| AamError::Format(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| AamError::Format("manifest lacks format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(AamError::Version {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| AamError::Format(e.to_string()))?;
    let reader = Reader {
        order: manifest.byte_order,
        payload: &body[json_start + json_len..],
        arrays: &manifest.arrays,
    };
    let mut levels = Vec::with_capacity(manifest.levels.len());
    for (i, entry) in manifest.levels.iter().enumerate() {
        let shape = ShapeModel {
            mean: Shape::new(reader.vector(&format!("level{i}/shape_mean"))?)?,
            basis: reader.matrix(&format!("level{i}/shape_basis"))?,
            eigenvalues: reader.vector(&format!("level{i}/shape_eigenvalues"))?,
            shape_noise: entry.shape_noise,
        };
        let appearance = AppearanceModel {
            mean: reader.vector(&format!("level{i}/appearance_mean"))?,
            basis: reader.matrix(&format!("level{i}/appearance_basis"))?,
            eigenvalues: reader.vector(&format!("level{i}/appearance_eigenvalues"))?,
            image_noise: entry.image_noise,
            prior_mean: reader.vector(&format!("level{i}/appearance_prior_mean"))?,
            channels: entry.channels,
        };
        shape.validate()?;
        appearance.validate()?;
        levels.push(ScaleLevel::new(entry.scale, shape, appearance, manifest.margin)?);
    }
    let bundle = AamBundle {
        levels,
        extractor: manifest.feature_id,
        face_size: manifest.face_size,
        margin: manifest.margin,
        training: manifest.training,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &AamBundle, path: &Path) -> Result<()> {
    save_bundle_with_order(bundle, path, ByteOrder::Little)
}

pub fn save_bundle_with_order(bundle: &AamBundle, path: &Path, order: ByteOrder) -> Result<()> {
    let bytes = encode_bundle(bundle, order)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<AamBundle> {
    decode_bundle(&fs::read(path)?)
}
