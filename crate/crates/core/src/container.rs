//! Named-tensor container file (`.csml`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CSML"            4 bytes magic
//! version           u16
//! entry count       u16
//! per entry:
//!   name length     u16
//!   name            UTF-8 bytes
//!   rank            u8
//!   dims            rank × u32
//!   payload         product(dims) × f64, row-major
//! ```
//!
//! Entries keep insertion order, so writing the same container twice yields
//! identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSML";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry. Replacing keeps the original position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.entries.push((name, tensor));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`Container::get`] but reports a missing entry as a data error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("container has no entry named {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u16::try_from(self.entries.len())
            .map_err(|_| Error::Data("more than 65535 container entries".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let nlen = u16::try_from(name.len())
                .map_err(|_| Error::Data(format!("entry name too long: {name}")))?;
            out.extend_from_slice(&nlen.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Data(format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Data(format!("dimension too large for {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a container; `path` is only used to label errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.err(0, format!("bad magic {magic:?}, expected \"CSML\"")));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.err(4, format!("unsupported version {version}")));
        }
        let count = r.u16()?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| r.err(at, "entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let at = r.pos;
            let payload = r.take(n.checked_mul(8).ok_or_else(|| r.err(at, "payload size overflow".into()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::new(shape, data).expect("length checked")));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset,
            msg,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(
                self.pos,
                format!("unexpected end of file, needed {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("w", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, 1e-300]).unwrap());
        c.insert("s", Tensor::scalar(0.5));
        c
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..4], b"CSML");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), VERSION);
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 2);
        assert_eq!(u16::from_le_bytes([b[8], b[9]]), 1);
        assert_eq!(b[10], b'w');
        assert_eq!(b[11], 2);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut b = sample().to_bytes().unwrap();
        b[0] = b'X';
        let e = Container::from_bytes(&b, Path::new("x.csml")).unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 0, .. }), "{e}");
    }

    #[test]
    fn truncation_reports_offset() {
        let b = sample().to_bytes().unwrap();
        let cut = &b[..b.len() - 3];
        match Container::from_bytes(cut, Path::new("x.csml")).unwrap_err() {
            Error::Parse { offset, .. } => assert!(offset > 8 && offset < cut.len()),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn insert_replaces_in_place() {
        let mut c = sample();
        c.insert("w", Tensor::scalar(1.0));
        assert_eq!(c.names().collect::<Vec<_>>(), ["w", "s"]);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 0..40), cols in 1usize..5) {
            let rows = vals.len() / cols;
            let data = vals[..rows * cols].to_vec();
            let mut c = Container::new();
            c.insert("m", Tensor::matrix(rows, cols, data).unwrap());
            c.insert("v", Tensor::vector(vals.clone()));
            let b = c.to_bytes().unwrap();
            let back = Container::from_bytes(&b, Path::new("p")).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes().unwrap(), b);
        }
    }
}
