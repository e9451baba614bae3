//! Flat binary record for mel grids and latents.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    4 bytes  "TGRD"
//! version  u16      1
//! kind     u8       0 = mel, 1 = latent
//! ndim     u8
//! dims     ndim x u32
//! meta_len u32      length of the metadata block in bytes
//! meta     utf-8    "key=value\n" lines (extraction config, codec params)
//! data     f32      row-major, product(dims) values
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"TGRD";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("not a grid record (bad magic)")]
    BadMagic,
    #[error("unsupported record version {0}")]
    Version(u16),
    #[error("expected a {expected:?} record, found {found:?}")]
    Kind {
        expected: RecordKind,
        found: RecordKind,
    },
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Mel,
    Latent,
}

impl RecordKind {
    fn code(self) -> u8 {
        match self {
            RecordKind::Mel => 0,
            RecordKind::Latent => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self, RecordError> {
        match code {
            0 => Ok(RecordKind::Mel),
            1 => Ok(RecordKind::Latent),
            other => Err(RecordError::Malformed(format!("unknown kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRecord {
    pub kind: RecordKind,
    pub dims: Vec<usize>,
    pub meta: Vec<(String, String)>,
    pub data: Vec<f32>,
}

impl GridRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(meta, "{k}={v}");
        }
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + meta.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RecordError> {
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(RecordError::BadMagic);
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(RecordError::Version(version));
        }
        let kind = RecordKind::from_code(cur.take(1)?[0])?;
        let ndim = cur.take(1)?[0] as usize;
        let dims = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let meta_len = cur.u32()? as usize;
        let meta_text = std::str::from_utf8(cur.take(meta_len)?)
            .map_err(|e| RecordError::Malformed(e.to_string()))?;
        let meta = meta_text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| RecordError::Malformed(format!("bad meta line {l:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let count: usize = dims.iter().product();
        let raw = cur.take(count * 4)?;
        if cur.pos != bytes.len() {
            return Err(RecordError::Malformed("trailing bytes".into()));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            kind,
            dims,
            meta,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self, RecordError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), RecordError> {
        crate::io::atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, RecordError> {
        self.meta(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| RecordError::Malformed(format!("bad value for {key}: {v:?}")))
            })
            .transpose()
    }

    pub fn expect_kind(&self, expected: RecordKind) -> Result<(), RecordError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(RecordError::Kind {
                expected,
                found: self.kind,
            })
        }
    }

    /// Human-readable dump: header lines, then one line per innermost row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# kind: {:?}", self.kind);
        let _ = writeln!(out, "# dims: {:?}", self.dims);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k} = {v}");
        }
        let row = self.dims.last().copied().unwrap_or(0).max(1);
        for chunk in self.data.chunks(row) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RecordError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| RecordError::Malformed("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, RecordError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(
            dims in proptest::collection::vec(1usize..6, 1..4),
            seed in any::<u32>(),
        ) {
            let count: usize = dims.iter().product();
            let rec = GridRecord {
                kind: if seed % 2 == 0 { RecordKind::Mel } else { RecordKind::Latent },
                dims,
                meta: vec![("hop".into(), "256".into()), ("note".into(), "a b".into())],
                data: (0..count).map(|i| (i as f32 + seed as f32).sin()).collect(),
            };
            prop_assert_eq!(GridRecord::from_bytes(&rec.to_bytes()).unwrap(), rec);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(GridRecord::from_bytes(b"nope"), Err(RecordError::BadMagic)));
        let rec = GridRecord {
            kind: RecordKind::Mel,
            dims: vec![2, 2],
            meta: vec![],
            data: vec![0.0; 4],
        };
        let bytes = rec.to_bytes();
        assert!(GridRecord::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(rec.expect_kind(RecordKind::Latent).is_err());
        assert!(rec.to_text().contains("# dims: [2, 2]"));
    }
}
