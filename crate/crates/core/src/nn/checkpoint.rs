//! Versioned binary container for named tensors plus a JSON config echo.
//!
//! Layout (little endian):
//! `b"LQSGCKPT"`, `u32` version, `u32`-prefixed UTF-8 kind, `u32`-prefixed
//! JSON config, `u32` tensor count, then per tensor: `u32`-prefixed name,
//! `u32` rank, `u64` dims, `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LQSGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: serde_json::Value) -> Self {
        Self { kind: kind.into(), config, tensors: Vec::new() }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_str(w, &self.kind)?;
        write_str(w, &self.config.to_string())?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let io = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a liquidseg checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let kind = read_str(r).map_err(io)?;
        let config = serde_json::from_str(&read_str(r).map_err(io)?)?;
        let count = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_str(r).map_err(io)?;
            let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            if rank > 8 {
                return Err(bad(format!("tensor `{name}` has implausible rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            let len: usize = shape.iter().product();
            let mut data = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
            tensors.push((name, Tensor::from_vec(&shape, data)));
        }
        Ok(Self { kind, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }

    /// Entries whose name starts with `prefix/`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn push_section(&mut self, prefix: &str, params: &super::ParamSet<f32>) {
        for (name, t) in params.iter() {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut c = Checkpoint::new("test", serde_json::json!({"seed": 7}));
        c.tensors.push(("a/w".into(), Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5])));
        c.tensors.push(("b".into(), Tensor::scalar(0.25)));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.section("a").len(), 1);
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(Checkpoint::read_from(&mut &b"NOTACKPT\x01\0\0\0"[..]).is_err());
        let mut c = Checkpoint::new("t", serde_json::Value::Null);
        c.tensors.push(("x".into(), Tensor::zeros(&[4])));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
