//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SFCK" | version u32 | config hash u64 | entry count u32
//! per entry: name length u32 | name utf-8 | dtype u8 | rank u8 | dims u64×rank | payload
//! CRC32 of every preceding byte, u32
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64, 3 = u8.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::Config;
use crate::encoder::{EncoderPair, ModelKind, NetParams};
use crate::engine::{DType, Scalar, Tensor};
use crate::error::{Result, SfcError};

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const VERSION: u32 = 1;
const U8_CODE: u8 = 3;

const CONFIG_ENTRY: &str = "meta.config";
const KIND_ENTRY: &str = "meta.kind";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => DType::F32.code(),
            Payload::F64(_) => DType::F64.code(),
            Payload::U8(_) => U8_CODE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.f64() as f32).collect()),
            DType::F64 => Payload::F64(t.data().iter().map(|v| v.f64()).collect()),
        };
        Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn bytes(name: impl Into<String>, b: &[u8]) -> Self {
        Entry {
            name: name.into(),
            shape: vec![b.len()],
            payload: Payload::U8(b.to_vec()),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| T::c(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::c(x)).collect(),
            Payload::U8(_) => {
                return Err(SfcError::Checkpoint(format!("entry `{}` is not a float tensor", self.name)))
            }
        };
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SfcError::Checkpoint(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(SfcError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(SfcError::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(SfcError::Checkpoint(format!(
                "unsupported version {version}; this build reads {VERSION}"
            )));
        }
        let config_hash = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| SfcError::Checkpoint("entry name is not utf-8".into()))?
                .to_string();
            let code = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| SfcError::Checkpoint(format!("entry `{name}` is too large")))?;
            let payload = match code {
                1 => Payload::F32(
                    r.take(n.saturating_mul(4))?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                2 => Payload::F64(
                    r.take(n.saturating_mul(8))?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                U8_CODE => Payload::U8(r.take(n)?.to_vec()),
                c => return Err(SfcError::Checkpoint(format!("entry `{name}`: unknown dtype code {c}"))),
            };
            debug_assert_eq!(payload.len(), n);
            entries.push(Entry { name, shape, payload });
        }
        if r.pos != body.len() {
            return Err(SfcError::Checkpoint(format!(
                "{} trailing bytes after the entry table",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint { config_hash, entries })
    }

    /// Write to a temporary sibling, sync, then rename over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_file_name(format!(
            ".{}.tmp{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint"),
            std::process::id()
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            SfcError::io(path, e)
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| SfcError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            SfcError::Checkpoint(m) => SfcError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Online and target networks plus the resolved config.
    pub fn from_pair<T: Scalar>(pair: &EncoderPair<T>, config: &Config) -> Self {
        let mut entries = vec![
            Entry::bytes(CONFIG_ENTRY, config.serialize().as_bytes()),
            Entry::bytes(KIND_ENTRY, pair.config.kind.name().as_bytes()),
        ];
        for (prefix, net) in [("online", &pair.online), ("target", &pair.target)] {
            for (n, t) in net.weights.iter() {
                entries.push(Entry::tensor(format!("{prefix}.weight.{n}"), t));
            }
            for (n, t) in net.buffers.iter() {
                entries.push(Entry::tensor(format!("{prefix}.buffer.{n}"), t));
            }
        }
        Checkpoint {
            config_hash: config.architecture_hash(),
            entries,
        }
    }

    fn text(&self, name: &str) -> Result<String> {
        match self.get(name).map(|e| &e.payload) {
            Some(Payload::U8(b)) => String::from_utf8(b.clone())
                .map_err(|_| SfcError::Checkpoint(format!("`{name}` is not utf-8"))),
            _ => Err(SfcError::Checkpoint(format!("missing `{name}` entry"))),
        }
    }

    pub fn config(&self) -> Result<Config> {
        let text = self.text(CONFIG_ENTRY)?;
        let mut c = Config::default();
        c.merge_text(&text, CONFIG_ENTRY)?;
        if c.architecture_hash() != self.config_hash {
            return Err(SfcError::Checkpoint("stored config does not match the config hash".into()));
        }
        Ok(c)
    }

    pub fn kind(&self) -> Result<ModelKind> {
        let t = self.text(KIND_ENTRY)?;
        ModelKind::parse(&t).ok_or_else(|| SfcError::Checkpoint(format!("unknown model kind `{t}`")))
    }

    /// Rebuild the networks; every tensor must be present with its
    /// initialized shape and no extra tensors are allowed.
    pub fn to_pair<T: Scalar>(&self) -> Result<(Config, EncoderPair<T>)> {
        let config = self.config()?;
        let mut pair = EncoderPair::<T>::init(&config.encoder(self.kind()?), 0)?;
        let mut used = 2;
        for (prefix, net) in [("online", &mut pair.online), ("target", &mut pair.target)] {
            used += fill(self, prefix, net)?;
        }
        if used != self.entries.len() {
            return Err(SfcError::Checkpoint(format!(
                "{} unexpected entries",
                self.entries.len() - used
            )));
        }
        Ok((config, pair))
    }
}

fn fill<T: Scalar>(ck: &Checkpoint, prefix: &str, net: &mut NetParams<T>) -> Result<usize> {
    let mut n = 0;
    for (kind, store) in [("weight", &mut net.weights), ("buffer", &mut net.buffers)] {
        for i in 0..store.len() {
            let name = format!("{prefix}.{kind}.{}", store.names()[i]);
            let e = ck
                .get(&name)
                .ok_or_else(|| SfcError::Checkpoint(format!("missing entry `{name}`")))?;
            let t = e.to_tensor::<T>()?;
            let dst = &mut store.tensors_mut()[i];
            if t.shape() != dst.shape() {
                return Err(SfcError::Checkpoint(format!(
                    "`{name}`: stored shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t;
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Config, EncoderPair<f32>) {
        let mut c = Config::default();
        c.backbone.widths = vec![4, 6];
        c.backbone.strides = vec![2, 2];
        c.backbone.kernels = vec![3, 1];
        c.backbone.input_size = 16;
        c.heads.hidden = 8;
        c.heads.out = 4;
        let mut pair = EncoderPair::init(&c.encoder(ModelKind::Joint), 3).unwrap();
        pair.online.weights.tensors_mut()[0].data_mut()[0] = 0.123_456_79;
        pair.target.buffers.tensors_mut()[0].data_mut()[0] = -1e-30;
        (c, pair)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (c, pair) = sample();
        let ck = Checkpoint::from_pair(&pair, &c);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        let (c2, p2) = back.to_pair::<f32>().unwrap();
        assert_eq!(c2, c);
        assert_eq!(p2, pair);
    }

    #[test]
    fn corruption_and_version_are_refused() {
        let (c, pair) = sample();
        let bytes = Checkpoint::from_pair(&pair, &c).encode();
        for pos in [5, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(Checkpoint::decode(&bad).is_err(), "flip at {pos}");
        }
        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        match Checkpoint::decode(&v2) {
            Err(SfcError::Checkpoint(m)) => assert!(m.contains("version")),
            other => panic!("{other:?}"),
        }
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let (c, pair) = sample();
        let ck = Checkpoint::from_pair(&pair, &c);
        let path = dir.path().join("model.sfck");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
