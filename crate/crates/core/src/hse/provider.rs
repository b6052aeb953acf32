//! Feature providers: the seeded synthetic stand-in, and the on-disk
//! per-view container shared by synthetic and external providers.
//!
//! A view `stem` is stored as three files:
//!
//! ```text
//! stem.feat   feature planes (see raster::dump), channels = embedding dim
//! stem.masks  b"QGFSMASK" | u32 width | u32 height | u32 count
//!             count × height rows of ceil(width/8) bytes, MSB-first bits
//! stem.json   [{"part_id": u32, "level": "object" | "part"}, ...] in mask order
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureMap, HseError, MaskLevel, MaskStack, SEMANTIC_DIM};
use crate::raster::dump;

const MASK_MAGIC: &[u8; 8] = b"QGFSMASK";

/// Ground-truth label of the surface visible at a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PixelLabel {
    pub instance: u32,
    pub class: u32,
    pub part: u32,
}

/// Mask ids: `4·instance` for the object, `4·instance + 1 + part` for parts.
pub fn object_mask_id(instance: u32) -> u32 {
    instance * 4
}

pub fn part_mask_id(instance: u32, part: u32) -> u32 {
    instance * 4 + 1 + part
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticProvider {
    pub seed: u64,
    pub dim: usize,
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl SyntheticProvider {
    pub fn new(seed: u64) -> Self {
        Self { seed, dim: SEMANTIC_DIM }
    }

    /// Fixed unit vector for a (class, part) pair.
    pub fn part_vector(&self, class: u32, part: u32) -> Vec<f64> {
        let key = mix(mix(self.seed) ^ ((class as u64) << 32 | part as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    /// Dense features plus object- and part-level masks for a labeled view.
    pub fn synth_features(
        &self,
        width: usize,
        height: usize,
        labels: &[Option<PixelLabel>],
    ) -> Result<(FeatureMap, MaskStack), HseError> {
        if labels.len() != width * height {
            return Err(HseError::Shape(format!("{} labels for a {width}x{height} view", labels.len())));
        }
        let present: BTreeSet<PixelLabel> = labels.iter().flatten().copied().collect();
        let mut feat = FeatureMap::zeros(width, height, self.dim);
        for l in &present {
            let v = self.part_vector(l.class, l.part);
            for (i, _) in labels.iter().enumerate().filter(|(_, p)| **p == Some(*l)) {
                feat.pixel_mut(i).copy_from_slice(&v);
            }
        }
        let mut stack = MaskStack::new(width, height);
        let instances: BTreeSet<u32> = present.iter().map(|l| l.instance).collect();
        for inst in instances {
            let obj = labels.iter().map(|p| p.is_some_and(|l| l.instance == inst)).collect();
            stack.push(object_mask_id(inst), MaskLevel::Object, obj)?;
            let parts: BTreeSet<u32> = present.iter().filter(|l| l.instance == inst).map(|l| l.part).collect();
            for part in parts {
                let m = labels.iter().map(|p| p.is_some_and(|l| l.instance == inst && l.part == part)).collect();
                stack.push(part_mask_id(inst, part), MaskLevel::Part, m)?;
            }
        }
        Ok((feat, stack))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskEntry {
    part_id: u32,
    level: MaskLevel,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HseError {
    HseError::Format(format!("{}: {e}", path.display()))
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn write_view(stem: &Path, feat: &FeatureMap, stack: &MaskStack) -> Result<(), HseError> {
    if (feat.width, feat.height) != (stack.width, stack.height) {
        return Err(HseError::Shape("feature map and masks differ in size".into()));
    }
    let fp = with_ext(stem, "feat");
    let f = File::create(&fp).map_err(|e| io_err(&fp, e))?;
    let mut w = BufWriter::new(f);
    dump::write_planes(&mut w, feat.width, feat.height, feat.dim, &feat.data).map_err(|e| io_err(&fp, e))?;
    w.flush().map_err(|e| io_err(&fp, e))?;

    let mp = with_ext(stem, "masks");
    let row_bytes = stack.width.div_ceil(8);
    let mut buf = Vec::with_capacity(20 + stack.masks.len() * row_bytes * stack.height);
    buf.extend_from_slice(MASK_MAGIC);
    for v in [stack.width, stack.height, stack.masks.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for m in &stack.masks {
        for y in 0..stack.height {
            let mut row = vec![0u8; row_bytes];
            for x in 0..stack.width {
                if m.pixels[y * stack.width + x] {
                    row[x / 8] |= 0x80 >> (x % 8);
                }
            }
            buf.extend_from_slice(&row);
        }
    }
    std::fs::write(&mp, buf).map_err(|e| io_err(&mp, e))?;

    let jp = with_ext(stem, "json");
    let entries: Vec<MaskEntry> =
        stack.masks.iter().map(|m| MaskEntry { part_id: m.part_id, level: m.level }).collect();
    let json = serde_json::to_string_pretty(&entries).map_err(|e| io_err(&jp, e))?;
    std::fs::write(&jp, json).map_err(|e| io_err(&jp, e))
}

pub fn read_view(stem: &Path) -> Result<(FeatureMap, MaskStack), HseError> {
    let fp = with_ext(stem, "feat");
    let planes =
        dump::read_planes(BufReader::new(File::open(&fp).map_err(|e| io_err(&fp, e))?)).map_err(|e| io_err(&fp, e))?;
    let feat = FeatureMap {
        width: planes.width,
        height: planes.height,
        dim: planes.channels,
        data: planes.data.iter().map(|v| *v as f64).collect(),
    };

    let mp = with_ext(stem, "masks");
    let mut raw = Vec::new();
    File::open(&mp).and_then(|mut f| f.read_to_end(&mut raw)).map_err(|e| io_err(&mp, e))?;
    if raw.len() < 20 || &raw[..8] != MASK_MAGIC {
        return Err(io_err(&mp, "bad mask header"));
    }
    let rd = |o: usize| u32::from_le_bytes(raw[o..o + 4].try_into().unwrap()) as usize;
    let (width, height, count) = (rd(8), rd(12), rd(16));
    let row_bytes = width.div_ceil(8);
    if raw.len() != 20 + count * height * row_bytes {
        return Err(io_err(&mp, "mask payload has the wrong length"));
    }
    let jp = with_ext(stem, "json");
    let text = std::fs::read_to_string(&jp).map_err(|e| io_err(&jp, e))?;
    let entries: Vec<MaskEntry> = serde_json::from_str(&text).map_err(|e| io_err(&jp, e))?;
    if entries.len() != count {
        return Err(io_err(&jp, format!("{} entries for {count} masks", entries.len())));
    }
    let mut stack = MaskStack::new(width, height);
    for (k, e) in entries.into_iter().enumerate() {
        let base = 20 + k * height * row_bytes;
        let pixels = (0..width * height)
            .map(|i| {
                let (x, y) = (i % width, i / width);
                raw[base + y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0
            })
            .collect();
        stack.push(e.part_id, e.level, pixels)?;
    }
    if (feat.width, feat.height) != (width, height) {
        return Err(HseError::Shape("feature map and masks differ in size".into()));
    }
    Ok((feat, stack))
}
