//! Binary container shared by checkpoints and the native dataset format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TENT"                      magic
//! u32 version                 currently 1
//! u32 len, [u8; len]          UTF-8 descriptor
//! repeated until the trailer:
//!   u32 len, [u8; len]        tensor name
//!   u32 rank, [u32; rank]     extents
//!   [f32; prod(extents)]      payload
//! u32 crc32                   over every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TENT";
pub const VERSION: u32 = 1;

/// One named f32 tensor inside a container.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub descriptor: String,
    pub records: Vec<Record>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Format("string longer than u32::MAX".into()))?;
    put_u32(buf, len);
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_str(&mut buf, &self.descriptor)?;
        for r in &self.records {
            if r.shape.iter().product::<usize>() != r.data.len() {
                return Err(Error::Format(format!("record `{}`: shape {:?} vs {} values", r.name, r.shape, r.data.len())));
            }
            put_str(&mut buf, &r.name)?;
            put_u32(&mut buf, r.shape.len() as u32);
            for &e in &r.shape {
                put_u32(&mut buf, u32::try_from(e).map_err(|_| Error::Format("extent exceeds u32".into()))?);
            }
            buf.reserve(r.data.len() * 4);
            for v in &r.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        Ok(buf)
    }

    /// Checks magic, then version, then the checksum, then parses.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                expected: u32::from_be_bytes(*MAGIC),
                found: u32::from_be_bytes(bytes[..4].try_into().unwrap()),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated("missing descriptor or checksum".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut cur = Cursor { buf: body, pos: 8 };
        let descriptor = cur.string()?;
        let mut records = Vec::new();
        while cur.pos < body.len() {
            let name = cur.string()?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = cur.take(len.checked_mul(4).ok_or_else(|| Error::Format("payload size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            records.push(Record { name, shape, data });
        }
        Ok(Self { descriptor, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("record overruns the body at offset {} (+{n})", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }
}
