//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TPLF" | version u32 | config_len u64 | config (UTF-8 JSON)
//! | n_arrays u32 | { name_len u32 | name | dtype u8 | ndim u8 | dims u64* | payload }*
//! | crc32 u32   (over every preceding byte)
//! ```
//!
//! The only on-disk dtype is f32 (tag 0).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::Parameters;

pub const MAGIC: &[u8; 4] = b"TPLF";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// A config blob plus uniquely named f32 arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub arrays: BTreeMap<String, Array2<f32>>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(config: &C) -> Result<Self> {
        Ok(Self {
            config: serde_json::to_string(config)?,
            arrays: BTreeMap::new(),
        })
    }

    pub fn with_params<P: Parameters<f32>>(mut self, params: &P) -> Result<Self> {
        self.insert_all(params.to_map())?;
        Ok(self)
    }

    pub fn insert_all(&mut self, arrays: BTreeMap<String, Array2<f32>>) -> Result<()> {
        for (k, v) in arrays {
            if self.arrays.contains_key(&k) {
                return Err(Error::config(format!("duplicate array name {k}")));
            }
            self.arrays.insert(k, v);
        }
        Ok(())
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_str(&self.config)?)
    }

    /// Arrays whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> BTreeMap<String, Array2<f32>> {
        self.arrays
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(2);
            out.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a whole file image. The CRC is checked before any array is
    /// decoded.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        read_preamble(&mut r)?;
        if bytes.len() < 4 + 4 + 4 {
            return Err(Error::Corrupt("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("CRC-32 mismatch".into()));
        }
        let mut r = Cursor::new(body);
        read_preamble(&mut r)?;
        let config = read_config(&mut r)?;
        let n = r.u32()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corrupt("array name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Corrupt(format!("{name}: unknown dtype tag {dtype}")));
            }
            let ndim = r.u8()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let shape = match dims.as_slice() {
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => return Err(Error::Corrupt(format!("{name}: unsupported rank {ndim}"))),
            };
            let count = shape
                .0
                .checked_mul(shape.1)
                .ok_or_else(|| Error::Corrupt(format!("{name}: shape overflow")))?;
            let payload = r.take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| Error::Corrupt("payload overflow".into()))?,
            )?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let arr = Array2::from_shape_vec(shape, data).expect("length checked");
            if arrays.insert(name.clone(), arr).is_some() {
                return Err(Error::Corrupt(format!("duplicate array {name}")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes before CRC".into()));
        }
        Ok(Self { config, arrays })
    }

    /// Atomic write: temp file in the same directory, fsync, rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Reads only the header and config section.
pub fn peek_config(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head)
        .map_err(|_| Error::Corrupt("file too short".into()))?;
    let mut r = Cursor::new(&head);
    read_preamble(&mut r)?;
    let len = r.u64()?;
    let file_len = f.metadata()?.len();
    if len > file_len {
        return Err(Error::Corrupt("config length exceeds file".into()));
    }
    let mut cfg = vec![0u8; len as usize];
    f.read_exact(&mut cfg)
        .map_err(|_| Error::Corrupt("truncated config".into()))?;
    String::from_utf8(cfg).map_err(|_| Error::Corrupt("config is not UTF-8".into()))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} has no file name", path.display())))?;
    let mut tmp = PathBuf::from(dir);
    tmp.push(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// SHA-256 over names, shapes and little-endian values, in name order.
pub fn params_hash<P: Parameters<f32>>(params: &P) -> String {
    let mut h = Sha256::new();
    for (name, a) in params.to_map() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((a.nrows() as u64).to_le_bytes());
        h.update((a.ncols() as u64).to_le_bytes());
        for v in a.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn read_preamble(r: &mut Cursor<'_>) -> Result<()> {
    let magic = r
        .take(4)
        .map_err(|_| Error::Corrupt("file too short".into()))?;
    if magic != MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version > FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if version == 0 {
        return Err(Error::Corrupt("version 0".into()));
    }
    Ok(())
}

fn read_config(r: &mut Cursor<'_>) -> Result<String> {
    let len = r.u64()? as usize;
    let bytes = r.take(len)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt("config is not UTF-8".into()))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
