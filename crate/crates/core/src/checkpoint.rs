//! Binary checkpoint container for a trained [`Reasoner`].
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "LMXG"  u32 version (=1)
//! u32 × 10  input_dim hidden layers num_relations type_dim relation_dim
//!           score_dim message_hidden attention_hidden activation_code
//! f64 dropout   u64 seed
//! u32 tensor_count, then per tensor: u32 len, len × f64   (GAT order)
//! "LMXH"  u32 lm_dim  u32 head_hidden
//! u32 tensor_count, then per tensor: u32 len, len × f64   (head order)
//! "LMXC"  u32 byte_len  UTF-8 `key=value` lines (config echo)
//! 32 bytes  SHA-256 of everything above
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gat::GatConfig;
use crate::nn::{Activation, Parameters};
use crate::reasoner::{Reasoner, ReasonerConfig};

const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Ordered `key=value` pairs echoed into the checkpoint.
pub type ConfigEcho = Vec<(String, String)>;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: usize) {
        self.buf.extend((v as u32).to_le_bytes());
    }

    fn tensors(&mut self, tensors: Vec<&[f64]>) {
        self.u32(tensors.len());
        for t in tensors {
            self.u32(t.len());
            for v in t {
                self.buf.extend(v.to_le_bytes());
            }
        }
    }
}

pub fn encode(reasoner: &Reasoner, echo: &ConfigEcho) -> Vec<u8> {
    let c = &reasoner.config.gat;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend(b"LMXG");
    w.u32(VERSION as usize);
    for v in [
        c.input_dim,
        c.hidden,
        c.layers,
        c.num_relations,
        c.type_dim,
        c.relation_dim,
        c.score_dim,
        c.message_hidden,
        c.attention_hidden,
        c.activation.code() as usize,
    ] {
        w.u32(v);
    }
    w.buf.extend(c.dropout.to_le_bytes());
    w.buf.extend(c.seed.to_le_bytes());
    w.tensors(reasoner.gat.tensors());

    w.buf.extend(b"LMXH");
    w.u32(reasoner.config.lm_dim);
    w.u32(reasoner.config.head_hidden);
    w.tensors(reasoner.head.tensors());

    let text: String = echo.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    w.buf.extend(b"LMXC");
    w.u32(text.len());
    w.buf.extend(text.as_bytes());
    let digest = Sha256::digest(&w.buf);
    w.buf.extend(digest);
    w.buf
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<(), CheckpointError> {
        let got = self.take(4)?;
        if got != m {
            return Err(CheckpointError::Corrupt(format!(
                "expected section `{}` at byte {}",
                String::from_utf8_lossy(m),
                self.pos - 4
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self, mut dst: Vec<&mut [f64]>, what: &str) -> Result<(), CheckpointError> {
        let count = self.u32()?;
        if count != dst.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{what}: {count} tensors stored, architecture has {}",
                dst.len()
            )));
        }
        for (i, t) in dst.iter_mut().enumerate() {
            let len = self.u32()?;
            if len != t.len() {
                return Err(CheckpointError::Corrupt(format!(
                    "{what}: tensor {i} has {len} values, expected {}",
                    t.len()
                )));
            }
            for v in t.iter_mut() {
                *v = self.f64()?;
            }
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Reasoner, ConfigEcho), CheckpointError> {
    if bytes.len() < 32 {
        return Err(CheckpointError::Corrupt("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { data: body, pos: 0 };
    r.magic(b"LMXG")?;
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 10];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let activation = Activation::from_code(dims[9] as u32)
        .ok_or_else(|| CheckpointError::Corrupt(format!("unknown activation code {}", dims[9])))?;
    let mut gat = GatConfig::new(dims[0], dims[1], dims[2], dims[3]);
    gat.type_dim = dims[4];
    gat.relation_dim = dims[5];
    gat.score_dim = dims[6];
    gat.message_hidden = dims[7];
    gat.attention_hidden = dims[8];
    gat.activation = activation;
    gat.dropout = r.f64()?;
    gat.seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let gat_pos = r.pos;

    // Skip to the head section to learn the full architecture first.
    let mut probe = Reader { data: body, pos: gat_pos };
    let count = probe.u32()?;
    for _ in 0..count {
        let len = probe.u32()?;
        probe.take(len.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("tensor too large".into()))?)?;
    }
    probe.magic(b"LMXH")?;
    let lm_dim = probe.u32()?;
    let head_hidden = probe.u32()?;

    let config = ReasonerConfig {
        gat,
        lm_dim,
        head_hidden,
    };
    let mut reasoner = Reasoner::new(config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    r.tensors(reasoner.gat.tensors_mut(), "graph network")?;
    r.magic(b"LMXH")?;
    r.take(8)?;
    r.tensors(reasoner.head.tensors_mut(), "answer head")?;
    r.magic(b"LMXC")?;
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| CheckpointError::Corrupt("config echo is not UTF-8".into()))?;
    let echo = text
        .lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CheckpointError::Corrupt(format!("bad config echo line `{l}`")))
        })
        .collect::<Result<_, _>>()?;
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((reasoner, echo))
}

pub fn save(path: &Path, reasoner: &Reasoner, echo: &ConfigEcho) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(reasoner, echo))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Reasoner, ConfigEcho), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
