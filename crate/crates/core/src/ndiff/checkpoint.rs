//! Binary parameter checkpoints.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! "HELM"            magic, 4 bytes
//! version: u16      currently 1
//! count:   u32      number of entries
//! repeated count times:
//!   name_len: u32, name: UTF-8 bytes
//!   rank: u32, extents: rank x u32
//!   values: product(extents) x f64
//! ```
//!
//! Values are written as raw IEEE-754 bits so a round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use super::{Array, Params};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HELM";
pub const VERSION: u16 = 1;

pub fn write_to<W: Write>(mut w: W, entries: &Params) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, array) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(array.rank() as u32).to_le_bytes())?;
        for &d in array.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("extent {d} too large")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in array.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_from<R: Read>(mut r: R) -> Result<Params> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut vb = [0u8; 2];
    r.read_exact(&mut vb)?;
    let version = u16::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Params::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.insert(name, Array::from_parts(shape, data));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &Params) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_to(std::io::BufWriter::new(file), entries)
}

pub fn load(path: &Path) -> Result<Params> {
    let file = std::fs::File::open(path)?;
    read_from(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut p = Params::new();
        p.insert("b".into(), Array::vector(vec![1.0]));
        let mut buf = Vec::new();
        write_to(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], b"HELM");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 1);
        // name_len + "b" + rank + extent + one f64
        assert_eq!(buf.len(), 10 + 4 + 1 + 4 + 4 + 8);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_from(&b"NOPE\x01\x00\x00\x00\x00\x00"[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 0..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            let data = values[..rows * cols].to_vec();
            let mut p = Params::new();
            p.insert("w".into(), Array::from_parts(vec![rows, cols], data.clone()));
            p.insert("s".into(), Array::scalar(-0.0));
            let mut buf = Vec::new();
            write_to(&mut buf, &p).unwrap();
            let back = read_from(&buf[..]).unwrap();
            let got: Vec<u64> = back["w"].data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back["w"].shape(), &[rows, cols][..]);
            prop_assert_eq!(back["s"].data()[0].to_bits(), (-0.0f64).to_bits());
        }
    }
}
