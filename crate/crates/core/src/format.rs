//! Little-endian binary primitives and the `LATTEMDL` checkpoint container.
//!
//! Checkpoint layout:
//!
//! ```text
//! magic    8 bytes  "LATTEMDL"
//! version  u32      1
//! arch     u32 length + UTF-8 tag ("P3", "P4", "STB", ...)
//! hyper    u32 count, then (u32 length + UTF-8 name, f64 value) pairs
//! sections u32 count, then per section:
//!            u32 length + UTF-8 name, u32 rank, rank x u64 dims,
//!            product(dims) x f64 payload
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LATTEMDL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated or malformed payload: {0}")]
    Malformed(String),
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_i64<W: Write>(w: &mut W, v: i64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f32<W: Write>(w: &mut W, v: f32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N], FormatError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::Malformed(format!("unexpected end of data reading {what}")),
        _ => FormatError::Io(e),
    })?;
    Ok(buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, FormatError> {
    Ok(u32::from_le_bytes(read_exact(r, what)?))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64, FormatError> {
    Ok(u64::from_le_bytes(read_exact(r, what)?))
}

pub(crate) fn read_i64<R: Read>(r: &mut R, what: &str) -> Result<i64, FormatError> {
    Ok(i64::from_le_bytes(read_exact(r, what)?))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64, FormatError> {
    Ok(f64::from_le_bytes(read_exact(r, what)?))
}

pub(crate) fn read_f32<R: Read>(r: &mut R, what: &str) -> Result<f32, FormatError> {
    Ok(f32::from_le_bytes(read_exact(r, what)?))
}

/// Upper bound on any length-prefixed string, to reject garbage headers early.
const MAX_STR: u32 = 1 << 20;

pub(crate) fn read_str<R: Read>(r: &mut R, what: &str) -> Result<String, FormatError> {
    let len = read_u32(r, what)?;
    if len > MAX_STR {
        return Err(FormatError::Malformed(format!("{what}: string length {len} too large")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|_| FormatError::Malformed(format!("unexpected end of data reading {what}")))?;
    String::from_utf8(buf).map_err(|_| FormatError::Malformed(format!("{what}: invalid UTF-8")))
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<(), FormatError> {
    let found: [u8; 8] = read_exact(r, "magic")?;
    if &found != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    Ok(())
}

/// Named parameter block inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub hyper: Vec<(String, f64)>,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn hyper_value(&self, name: &str) -> Option<f64> {
        self.hyper.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    /// Stores a `u64` exactly as two 32-bit halves.
    pub fn push_u64(&mut self, name: &str, v: u64) {
        self.hyper.push((format!("{name}_hi"), (v >> 32) as f64));
        self.hyper.push((format!("{name}_lo"), (v & 0xffff_ffff) as f64));
    }

    pub fn u64_value(&self, name: &str) -> Option<u64> {
        let hi = self.hyper_value(&format!("{name}_hi"))?;
        let lo = self.hyper_value(&format!("{name}_lo"))?;
        Some(((hi as u64) << 32) | lo as u64)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), FormatError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION)?;
        write_str(w, &self.arch)?;
        write_u32(w, self.hyper.len() as u32)?;
        for (k, v) in &self.hyper {
            write_str(w, k)?;
            write_f64(w, *v)?;
        }
        write_u32(w, self.sections.len() as u32)?;
        for s in &self.sections {
            let expected: usize = s.shape.iter().product();
            if expected != s.data.len() {
                return Err(FormatError::Malformed(format!(
                    "section {} has shape {:?} but {} values",
                    s.name,
                    s.shape,
                    s.data.len()
                )));
            }
            write_str(w, &s.name)?;
            write_u32(w, s.shape.len() as u32)?;
            for &dim in &s.shape {
                write_u64(w, dim as u64)?;
            }
            for &x in &s.data {
                write_f64(w, x)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FormatError> {
        expect_magic(r, CHECKPOINT_MAGIC)?;
        let version = read_u32(r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version(version));
        }
        let arch = read_str(r, "arch tag")?;
        let n_hyper = read_u32(r, "hyper count")?;
        let mut hyper = Vec::with_capacity(n_hyper.min(1024) as usize);
        for _ in 0..n_hyper {
            let k = read_str(r, "hyper name")?;
            let v = read_f64(r, "hyper value")?;
            hyper.push((k, v));
        }
        let n_sections = read_u32(r, "section count")?;
        let mut sections = Vec::with_capacity(n_sections.min(1024) as usize);
        for _ in 0..n_sections {
            let name = read_str(r, "section name")?;
            let rank = read_u32(r, "section rank")?;
            if rank > 8 {
                return Err(FormatError::Malformed(format!("section {name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(read_u64(r, "section dim")? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FormatError::Malformed(format!("section {name}: shape overflow")))?;
            let mut data = Vec::with_capacity(len.min(1 << 24));
            for _ in 0..len {
                data.push(read_f64(r, "section payload")?);
            }
            sections.push(Section { name, shape, data });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(FormatError::Malformed("trailing bytes after checkpoint".into()));
        }
        Ok(Self { arch, hyper, sections })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, FormatError> {
        Self::read_from(&mut bytes)
    }
}
