//! Debug dumps: 8-bit PPM color images and raw float feature planes.
//!
//! Feature plane layout (little-endian):
//!
//! ```text
//! b"QGFS" | u32 height | u32 width | u32 channels | f32 × channels × height × width
//! ```
//!
//! Planes are stored channel-major.

use std::io::{self, Read, Write};

pub const PLANE_MAGIC: &[u8; 4] = b"QGFS";

/// Quantizes a [0,1] value to 8 bits with round-to-nearest.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Converts an interleaved H×W×3 float image to 8-bit RGB bytes.
pub fn rgb_bytes(color: &[f64]) -> Vec<u8> {
    color.iter().map(|v| to_u8(*v)).collect()
}

pub fn write_ppm<W: Write>(mut w: W, width: usize, height: usize, color: &[f64]) -> io::Result<()> {
    assert_eq!(color.len(), width * height * 3);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(&rgb_bytes(color))
}

/// Writes an interleaved H×W×C map as channel-major f32 planes.
pub fn write_planes<W: Write>(mut w: W, width: usize, height: usize, channels: usize, data: &[f64]) -> io::Result<()> {
    assert_eq!(data.len(), width * height * channels);
    w.write_all(PLANE_MAGIC)?;
    for v in [height, width, channels] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for c in 0..channels {
        for p in 0..width * height {
            buf.extend_from_slice(&(data[p * channels + c] as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}

/// Planes read back from [`write_planes`], re-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn read_planes<R: Read>(mut r: R) -> io::Result<Planes> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PLANE_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad feature plane magic"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [height, width, channels] = dims;
    let n = width * height;
    let mut raw = vec![0u8; n * channels * 4];
    r.read_exact(&mut raw)?;
    let mut data = vec![0f32; n * channels];
    for c in 0..channels {
        for p in 0..n {
            let o = (c * n + p) * 4;
            data[p * channels + c] = f32::from_le_bytes(raw[o..o + 4].try_into().unwrap());
        }
    }
    Ok(Planes { width, height, channels, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_size() {
        let mut buf = Vec::new();
        write_ppm(&mut buf, 2, 1, &[1.0, 0.0, 0.5, 0.2, 2.0, -1.0]).unwrap();
        assert!(buf.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&buf[buf.len() - 6..], &[255, 0, 128, 51, 255, 0]);
    }

    #[test]
    fn planes_round_trip() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.25 - 2.0).collect();
        let mut buf = Vec::new();
        write_planes(&mut buf, 4, 2, 3, &data).unwrap();
        assert_eq!(&buf[..4], b"QGFS");
        assert_eq!(buf.len(), 16 + 24 * 4);
        let p = read_planes(&buf[..]).unwrap();
        assert_eq!((p.width, p.height, p.channels), (4, 2, 3));
        assert_eq!(p.data, data.iter().map(|v| *v as f32).collect::<Vec<_>>());
        assert!(read_planes(&b"XXXX"[..]).is_err());
    }
}
