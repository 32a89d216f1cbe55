//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"A3CK"
//! version u32 = 1
//! count   u32
//! count × {
//!     name_len u32, name utf-8 bytes,
//!     rank u32, rank × dim u64,
//!     product(dims) × f64 (IEEE-754 bits, little-endian)
//! }
//! ```
//!
//! Values are stored as raw bits, so a write/read cycle is bit-exact.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"A3CK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[NamedTensor]) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = e.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in e.tensor.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("tensor name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.push(NamedTensor { name, tensor });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            values in prop::collection::vec(any::<f64>(), 1..40),
            name in "[A-Za-z0-9_.]{1,12}",
        ) {
            let n = values.len();
            let entries = vec![
                NamedTensor { name: name.clone(), tensor: Tensor::matrix(1, n, values.clone()) },
                NamedTensor { name: "scalar".into(), tensor: Tensor::new(vec![], vec![-0.0]).unwrap() },
            ];
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &entries).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].name, &name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back[0].tensor), bits(&entries[0].tensor));
            prop_assert_eq!(bits(&back[1].tensor), bits(&entries[1].tensor));
        }
    }

    #[test]
    fn truncated_input_is_an_error() {
        let entries = vec![NamedTensor {
            name: "w".into(),
            tensor: Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]),
        }];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
        assert!(matches!(
            read_checkpoint(&b"NOPE\x01\0\0\0"[..]),
            Err(CheckpointError::Magic)
        ));
    }
}
