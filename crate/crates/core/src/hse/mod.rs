//! Hierarchical semantic targets: masked average pooling of dense per-pixel
//! embeddings, per-pixel averaging across every mask that covers the pixel,
//! and a small autoencoder that compresses 512-d embeddings to 3-d.

mod autoencoder;
pub mod provider;

pub use autoencoder::{ae_loss, Autoencoder};
pub use provider::{PixelLabel, SyntheticProvider};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::par;

pub const SEMANTIC_DIM: usize = 512;
pub const COMPACT_DIM: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HseError {
    #[error("mask {0} is empty")]
    EmptyMask(u32),
    #[error("no pooled vector for mask {0}")]
    MissingPart(u32),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("provider file: {0}")]
    Format(String),
}

/// Dense H×W×dim map, pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self { width, height, dim, data: vec![0.0; width * height * dim] }
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskLevel {
    Object,
    Part,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartMask {
    pub part_id: u32,
    pub level: MaskLevel,
    /// Row-major H×W.
    pub pixels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    pub width: usize,
    pub height: usize,
    pub masks: Vec<PartMask>,
}

impl MaskStack {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, masks: Vec::new() }
    }

    pub fn push(&mut self, part_id: u32, level: MaskLevel, pixels: Vec<bool>) -> Result<(), HseError> {
        if pixels.len() != self.width * self.height {
            return Err(HseError::Shape(format!(
                "mask of {} pixels for a {}x{} stack",
                pixels.len(),
                self.width,
                self.height
            )));
        }
        self.masks.push(PartMask { part_id, level, pixels });
        Ok(())
    }
}

/// Mask-mean of per-pixel normalized features. Zero-norm feature pixels
/// contribute a zero vector but still count toward the mask size.
pub fn masked_average_pool(mask: &[bool], feat: &FeatureMap) -> Result<Vec<f64>, HseError> {
    if mask.len() != feat.pixel_count() {
        return Err(HseError::Shape(format!("mask of {} pixels for a {}-pixel map", mask.len(), feat.pixel_count())));
    }
    let mut acc = vec![0.0; feat.dim];
    let mut count = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let f = feat.pixel(i);
        let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            for (a, v) in acc.iter_mut().zip(f) {
                *a += v / n;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(HseError::EmptyMask(u32::MAX));
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    Ok(acc)
}

/// Pools every mask of the stack, keyed by `part_id`.
pub fn pool_stack(stack: &MaskStack, feat: &FeatureMap) -> Result<BTreeMap<u32, Vec<f64>>, HseError> {
    let mut out = BTreeMap::new();
    for m in &stack.masks {
        let v = masked_average_pool(&m.pixels, feat).map_err(|e| match e {
            HseError::EmptyMask(_) => HseError::EmptyMask(m.part_id),
            other => other,
        })?;
        out.insert(m.part_id, v);
    }
    Ok(out)
}

/// Mean of the pooled vectors of all masks containing `pixel = (x, y)`;
/// the zero vector if none does.
pub fn aggregate_hierarchical(
    pixel: (usize, usize),
    stack: &MaskStack,
    pooled: &BTreeMap<u32, Vec<f64>>,
) -> Result<Vec<f64>, HseError> {
    let idx = pixel.1 * stack.width + pixel.0;
    aggregate_at(idx, stack, pooled)
}

fn aggregate_at(idx: usize, stack: &MaskStack, pooled: &BTreeMap<u32, Vec<f64>>) -> Result<Vec<f64>, HseError> {
    let dim = pooled.values().next().map_or(0, Vec::len);
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for m in stack.masks.iter().filter(|m| m.pixels[idx]) {
        let v = pooled.get(&m.part_id).ok_or(HseError::MissingPart(m.part_id))?;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    if count > 0 {
        for a in &mut acc {
            *a /= count as f64;
        }
    }
    Ok(acc)
}

/// The full per-pixel hierarchical map.
pub fn hierarchical_map(
    stack: &MaskStack,
    pooled: &BTreeMap<u32, Vec<f64>>,
    parallel: bool,
) -> Result<FeatureMap, HseError> {
    let dim = pooled.values().next().map_or(SEMANTIC_DIM, Vec::len);
    let rows: Vec<Result<Vec<f64>, HseError>> =
        par::map_indexed(stack.width * stack.height, parallel, |i| aggregate_at(i, stack, pooled));
    let mut map = FeatureMap::zeros(stack.width, stack.height, dim);
    for (i, r) in rows.into_iter().enumerate() {
        map.pixel_mut(i).copy_from_slice(&r?);
    }
    Ok(map)
}

/// Compact 3-d targets for every pixel. Pixels sharing the same set of
/// covering masks share one encoded vector; uncovered pixels stay zero.
pub fn compact_targets(
    stack: &MaskStack,
    pooled: &BTreeMap<u32, Vec<f64>>,
    ae: &Autoencoder,
) -> Result<FeatureMap, HseError> {
    let n = stack.width * stack.height;
    let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let key: Vec<u32> = stack.masks.iter().filter(|m| m.pixels[i]).map(|m| m.part_id).collect();
        if !key.is_empty() {
            groups.entry(key).or_default().push(i);
        }
    }
    let mut out = FeatureMap::zeros(stack.width, stack.height, COMPACT_DIM);
    for pixels in groups.values() {
        let code = ae.encode(&aggregate_at(pixels[0], stack, pooled)?);
        for &i in pixels {
            out.pixel_mut(i).copy_from_slice(&code);
        }
    }
    Ok(out)
}
