//! Binary formats.
//!
//! FVT1 (one tensor):
//!
//! ```text
//! b"FVT1" | rank: u8 | rank x extent: u32 LE | row-major payload: f32 LE
//! ```
//!
//! FVCK (named tensors):
//!
//! ```text
//! b"FVCK" | count: u32 LE | count x (name_len: u16 LE | name: UTF-8 | FVT1)
//! ```
//!
//! Storage precision is f32; tensors are widened back to f64 on read.
//! Entries are written in lexicographic name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FVT_MAGIC: [u8; 4] = *b"FVT1";
pub const FVCK_MAGIC: [u8; 4] = *b"FVCK";

/// Upper bound on elements accepted from a file, to reject corrupt extents
/// before allocating.
const MAX_ELEMENTS: u64 = 1 << 31;

pub type NamedTensors = BTreeMap<String, Tensor>;

pub fn write_fvt<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    t.ensure_finite("tensor being written")?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::ExtentOverflow(format!("rank {}", t.rank())))?;
    w.write_all(&FVT_MAGIC)?;
    w.write_all(&[rank])?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::ExtentOverflow(format!("extent {e}")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_fvt<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic = read_array::<4, _>(r, "FVT1 magic")?;
    if magic != FVT_MAGIC {
        return Err(Error::BadMagic {
            expected: FVT_MAGIC,
            found: magic,
        });
    }
    let [rank] = read_array::<1, _>(r, "FVT1 rank")?;
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let e = u32::from_le_bytes(read_array::<4, _>(r, "FVT1 extent")?);
        if e == 0 {
            return Err(Error::ExtentOverflow("zero extent".into()));
        }
        count = count
            .checked_mul(u64::from(e))
            .filter(|&c| c <= MAX_ELEMENTS)
            .ok_or_else(|| Error::ExtentOverflow(format!("shape {shape:?} x {e}")))?;
        shape.push(e as usize);
    }
    let mut bytes = vec![0u8; count as usize * 4];
    r.read_exact(&mut bytes).map_err(|e| truncated(e, "FVT1 payload"))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_named<W: Write>(w: &mut W, entries: &NamedTensors) -> Result<()> {
    let count = u32::try_from(entries.len()).map_err(|_| Error::ExtentOverflow("entry count".into()))?;
    w.write_all(&FVCK_MAGIC)?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::ExtentOverflow(format!("name `{name}`")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_fvt(w, t).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!("entry `{name}`")),
            other => other,
        })?;
    }
    Ok(())
}

pub fn read_named<R: Read>(r: &mut R) -> Result<NamedTensors> {
    let magic = read_array::<4, _>(r, "FVCK magic")?;
    if magic != FVCK_MAGIC {
        return Err(Error::BadMagic {
            expected: FVCK_MAGIC,
            found: magic,
        });
    }
    let count = u32::from_le_bytes(read_array::<4, _>(r, "FVCK count")?);
    let mut out = NamedTensors::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array::<2, _>(r, "FVCK name length")?);
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(|e| truncated(e, "FVCK name"))?;
        let name = String::from_utf8(name).map_err(|_| Error::invalid("entry name is not UTF-8"))?;
        let t = read_fvt(r)?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn save_fvt(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fvt(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_fvt(path: &Path) -> Result<Tensor> {
    read_fvt(&mut BufReader::new(File::open(path)?))
}

pub fn save_named(path: &Path, entries: &NamedTensors) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_named(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_named(path: &Path) -> Result<NamedTensors> {
    read_named(&mut BufReader::new(File::open(path)?))
}

/// Map a value in `[-1, 1]` to an 8-bit gray level.
pub fn pgm_level(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Binary (P5) PGM of a `side x side` frame stored row-major.
pub fn write_pgm<W: Write>(w: &mut W, frame: &[f64], width: usize, height: usize) -> Result<()> {
    if frame.len() != width * height {
        return Err(Error::ShapeMismatch {
            op: "write_pgm",
            lhs: vec![height, width],
            rhs: vec![frame.len()],
        });
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = frame.iter().map(|&v| pgm_level(v)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn save_pgm(path: &Path, frame: &[f64], width: usize, height: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pgm(&mut w, frame, width, height)?;
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| truncated(e, what))?;
    Ok(buf)
}

fn truncated(e: std::io::Error, what: &'static str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated(what)
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_exact(t: &Tensor) -> Tensor {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f64::from(v as f32)).collect()).unwrap()
    }

    #[test]
    fn fvt_round_trip_is_f32_exact() {
        let t = Tensor::seeded_randn(&[3, 5], 11);
        let mut buf = Vec::new();
        write_fvt(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"FVT1");
        assert_eq!(buf[4], 2);
        assert_eq!(buf.len(), 4 + 1 + 8 + 15 * 4);
        let back = read_fvt(&mut buf.as_slice()).unwrap();
        assert!(back.bit_eq(&f32_exact(&t)));
    }

    #[test]
    fn scalar_round_trip() {
        let mut buf = Vec::new();
        write_fvt(&mut buf, &Tensor::scalar(2.0)).unwrap();
        let back = read_fvt(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.item(), 2.0);
    }

    #[test]
    fn corrupt_magic_is_reported() {
        let mut buf = Vec::new();
        write_fvt(&mut buf, &Tensor::ones(&[2])).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_fvt(&mut buf.as_slice()), Err(Error::BadMagic { .. })));
        let mut ck = Vec::new();
        write_named(&mut ck, &NamedTensors::new()).unwrap();
        ck[3] = b'Z';
        assert!(matches!(read_named(&mut ck.as_slice()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut buf = Vec::new();
        write_fvt(&mut buf, &Tensor::ones(&[4, 4])).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_fvt(&mut buf.as_slice()), Err(Error::Truncated(_))));
    }

    #[test]
    fn huge_extent_is_rejected() {
        let mut buf = b"FVT1".to_vec();
        buf.push(3);
        for _ in 0..3 {
            buf.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(read_fvt(&mut buf.as_slice()), Err(Error::ExtentOverflow(_))));
    }

    #[test]
    fn non_finite_is_refused() {
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(write_fvt(&mut Vec::new(), &t), Err(Error::NonFinite(_))));
    }

    #[test]
    fn named_round_trip() {
        let mut m = NamedTensors::new();
        m.insert("b.w".into(), Tensor::seeded_randn(&[2, 2], 1));
        m.insert("a".into(), Tensor::scalar(3.0));
        let mut buf = Vec::new();
        write_named(&mut buf, &m).unwrap();
        let back = read_named(&mut buf.as_slice()).unwrap();
        assert_eq!(back.keys().collect::<Vec<_>>(), vec!["a", "b.w"]);
        assert!(back["b.w"].bit_eq(&f32_exact(&m["b.w"])));
    }

    #[test]
    fn pgm_mapping_endpoints() {
        assert_eq!(pgm_level(-1.0), 0);
        assert_eq!(pgm_level(1.0), 255);
        let mut buf = Vec::new();
        write_pgm(&mut buf, &[-1.0, 1.0, 0.0, 1.0], 2, 2).unwrap();
        assert!(buf.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&buf[buf.len() - 4..], &[0, 255, 128, 255]);
    }
}
