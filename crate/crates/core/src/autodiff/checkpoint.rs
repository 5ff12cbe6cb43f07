//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "T1QCKPT\0"
//! version   u32      1
//! meta_len  u32, then meta_len bytes of UTF-8 (free-form, JSON by convention)
//! count     u32
//! count x { name_len u32, name bytes, dtype u8 (64 = f64), rank u8,
//!           rank x u64 dims, product(dims) x f64 payload }
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::tensor::Tensor;
use super::AdError;

pub const MAGIC: &[u8; 8] = b"T1QCKPT\0";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    // Writes into a Vec cannot fail.
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u32::<LittleEndian>(ckpt.meta.len() as u32).unwrap();
    out.extend_from_slice(ckpt.meta.as_bytes());
    out.write_u32::<LittleEndian>(ckpt.tensors.len() as u32).unwrap();
    for (name, t) in &ckpt.tensors {
        out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(5);
        for d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &v in t.data() {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> AdError + '_ {
    move |_| AdError::Checkpoint(format!("truncated while reading {what}"))
}

fn read_string(cur: &mut Cursor<&[u8]>, what: &str) -> Result<String, AdError> {
    let len = cur.read_u32::<LittleEndian>().map_err(truncated(what))? as usize;
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(AdError::Checkpoint(format!("truncated while reading {what}")));
    }
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf).map_err(truncated(what))?;
    String::from_utf8(buf).map_err(|_| AdError::Checkpoint(format!("{what} is not UTF-8")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, AdError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(AdError::Checkpoint("bad magic".into()));
    }
    let mut cur = Cursor::new(bytes);
    cur.set_position(8);
    let version = cur.read_u32::<LittleEndian>().map_err(truncated("version"))?;
    if version != VERSION {
        return Err(AdError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta = read_string(&mut cur, "metadata")?;
    let count = cur.read_u32::<LittleEndian>().map_err(truncated("tensor count"))?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = read_string(&mut cur, "tensor name")?;
        let dtype = cur.read_u8().map_err(truncated(&name))?;
        if dtype != DTYPE_F64 {
            return Err(AdError::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank = cur.read_u8().map_err(truncated(&name))?;
        if rank != 5 {
            return Err(AdError::Checkpoint(format!("{name}: rank {rank}, expected 5")));
        }
        let mut shape = [0usize; 5];
        for d in &mut shape {
            *d = cur.read_u64::<LittleEndian>().map_err(truncated(&name))? as usize;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| AdError::Checkpoint(format!("{name}: shape overflow")))?;
        let remaining = bytes.len() - cur.position() as usize;
        if n.checked_mul(8).is_none_or(|b| b > remaining) {
            return Err(AdError::Checkpoint(format!("truncated while reading {name}")));
        }
        let mut data = vec![0.0; n];
        cur.read_f64_into::<LittleEndian>(&mut data).map_err(truncated(&name))?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(AdError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), AdError> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| AdError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, AdError> {
    let bytes = std::fs::read(path).map_err(|e| AdError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{purpose, Stream};

    fn sample() -> Checkpoint {
        let mut rng = Stream::new(0, purpose::TEST_DATA, 0);
        Checkpoint {
            meta: r#"{"depth":2}"#.into(),
            tensors: vec![
                ("w".into(), Tensor::randn([2, 3, 3, 3, 3], 1.0, &mut rng)),
                (
                    "b".into(),
                    Tensor::new([1, 2, 1, 1, 1], vec![f64::MIN_POSITIVE, -0.0]).unwrap(),
                ),
            ],
        }
    }

    #[test]
    fn roundtrip_bit_exact() {
        let c = sample();
        let back = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((na, a), (nb, b)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
