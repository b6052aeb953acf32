//! Named-tensor checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"QGFSCKPT" | u32 version | u32 meta_len | meta JSON (string map)
//! u32 tensor_count
//! repeated: u16 name_len | name | u8 ndim | u32 dims[ndim] | f64 data[prod(dims)]
//! u32 crc32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{NnError, Tensor};

const MAGIC: &[u8; 8] = b"QGFSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn err(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end =
            self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| err("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("string map serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, NnError> {
        if buf.len() < MAGIC.len() + 8 {
            return Err(err("truncated checkpoint"));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(err("checksum mismatch"));
        }
        let mut c = Cursor { buf: body, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let meta_len = c.u32()? as usize;
        let meta = serde_json::from_slice(c.take(meta_len)?).map_err(|e| err(format!("metadata: {e}")))?;
        let count = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(c.take(nl)?.to_vec()).map_err(|_| err("tensor name is not utf-8"))?;
            let ndim = c.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(c.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = c.take(n.checked_mul(8).ok_or_else(|| err("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if c.pos != body.len() {
            return Err(err("trailing bytes after tensors"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| err(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let buf = std::fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    /// Copies stored tensors into `targets`, matching by name and shape.
    pub fn restore(&self, targets: Vec<(String, &mut Tensor)>) -> Result<(), NnError> {
        if targets.len() != self.tensors.len() {
            return Err(err(format!("checkpoint has {} tensors, model expects {}", self.tensors.len(), targets.len())));
        }
        for (name, t) in targets {
            let src = self.get(&name).ok_or_else(|| err(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(err(format!("tensor {name}: stored {:?}, model {:?}", src.shape(), t.shape())));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.meta.insert("latent_dim".into(), "128".into());
        c.insert("a.weight", Tensor::from_vec(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 0.1]).unwrap());
        c.insert("a.bias", Tensor::zeros(&[3]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta["latent_dim"], "128");
        assert_eq!(back.get("a.weight").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(NnError::Checkpoint(_))));
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let c = sample();
        let mut w = Tensor::zeros(&[2, 3]);
        let mut b = Tensor::zeros(&[3]);
        c.restore(vec![("a.weight".into(), &mut w), ("a.bias".into(), &mut b)]).unwrap();
        assert_eq!(w.data()[4], -7.5);
        let mut wrong = Tensor::zeros(&[3, 2]);
        assert!(c.restore(vec![("a.weight".into(), &mut wrong), ("a.bias".into(), &mut b)]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(vals in prop::collection::vec(any::<f64>(), 0..40), name in "[a-z.]{1,12}") {
            let mut c = Checkpoint::default();
            c.insert(name, Tensor::from_vec(&[vals.len()], vals).unwrap());
            let bytes = c.to_bytes();
            prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        }
    }
}
