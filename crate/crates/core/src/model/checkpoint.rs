//! Binary checkpoint format (`.ckpt`).
//!
//! All integers little-endian.
//!
//! ```text
//! magic        8 bytes   "COOPCKPT"
//! version      u32       1
//! config       6 × u32   n_layers, hidden_dim, n_heads, vocab_size,
//!                        context_length, freeze_depth
//! arrays       u32 count, then per array in layout order:
//!                u16 name length, name (UTF-8), u64 element count,
//!                elements as f64
//! provenance   u8 flag [+ 32-byte base digest]
//!              u64 seed, u64 train_steps
//!              u8 flag [+ u16 length + UTF-8 domain label]
//!              u8 flag [+ u16 length + UTF-8 method]
//!              u32 annotation count, then (u16 len + key, u16 len + value) pairs
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest as _, Sha256};

use super::{layout, ModelConfig};
use crate::error::{CoopError, Result};

pub const MAGIC: &[u8; 8] = b"COOPCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "ckpt";

/// SHA-256 content digest, printed as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> std::result::Result<Self, CheckpointError> {
        let bytes = hex::decode(s.trim()).map_err(|_| CheckpointError::BadDigestHex(s.to_string()))?;
        let arr: [u8; 32] =
            bytes.try_into().map_err(|_| CheckpointError::BadDigestHex(s.to_string()))?;
        Ok(Digest(arr))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("tampered or corrupt checkpoint: digest mismatch (stored {stored}, computed {computed})")]
    DigestMismatch { stored: String, computed: String },
    #[error("weight layout mismatch: {0}")]
    Layout(String),
    #[error("invalid UTF-8 in {0}")]
    Utf8(&'static str),
    #[error("invalid config block: {0}")]
    Config(String),
    #[error("{0} trailing bytes after digest")]
    TrailingBytes(usize),
    #[error("invalid digest hex `{0}`")]
    BadDigestHex(String),
    #[error("string field too long ({0} bytes)")]
    StringTooLong(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub base_digest: Option<Digest>,
    pub seed: u64,
    pub train_steps: u64,
    pub domain_label: Option<String>,
    pub method: Option<String>,
    pub annotations: BTreeMap<String, String>,
}

/// Immutable model weights with their config, provenance and digest.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    weights: Vec<WeightArray>,
    provenance: Provenance,
    digest: Digest,
}

impl Checkpoint {
    /// Validates the arrays against the config layout and stamps the digest.
    pub fn assemble(config: ModelConfig, weights: Vec<WeightArray>, provenance: Provenance) -> Result<Self> {
        config.validate()?;
        check_layout(&config, &weights)?;
        for (key, value) in provenance
            .domain_label
            .iter()
            .chain(&provenance.method)
            .map(|s| (s, s))
            .chain(provenance.annotations.iter())
        {
            if key.len() > u16::MAX as usize || value.len() > u16::MAX as usize {
                return Err(CheckpointError::StringTooLong(key.len().max(value.len())).into());
            }
        }
        if let Some(w) = weights.iter().find(|w| w.data.iter().any(|v| !v.is_finite())) {
            return Err(CoopError::InvalidInput(format!("non-finite weights in `{}`", w.name)));
        }
        let mut ckpt = Self { config, weights, provenance, digest: Digest([0; 32]) };
        let body = ckpt.body_bytes();
        ckpt.digest = Digest::of(&body);
        Ok(ckpt)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &[WeightArray] {
        &self.weights
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.data.len()).sum()
    }

    pub fn into_parts(self) -> (ModelConfig, Vec<WeightArray>, Provenance) {
        (self.config, self.weights, self.provenance)
    }

    /// Same weights, different provenance (new digest).
    pub fn with_provenance(&self, provenance: Provenance) -> Result<Self> {
        Self::assemble(self.config, self.weights.clone(), provenance)
    }

    /// Same weights, different config (e.g. another freeze depth).
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        Self::assemble(config, self.weights.clone(), self.provenance.clone())
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.param_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.n_layers, c.hidden_dim, c.n_heads, c.vocab_size, c.context_length, c.freeze_depth] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for w in &self.weights {
            put_str(&mut out, &w.name);
            out.extend_from_slice(&(w.data.len() as u64).to_le_bytes());
            for v in &w.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let p = &self.provenance;
        match &p.base_digest {
            Some(d) => {
                out.push(1);
                out.extend_from_slice(&d.0);
            }
            None => out.push(0),
        }
        out.extend_from_slice(&p.seed.to_le_bytes());
        out.extend_from_slice(&p.train_steps.to_le_bytes());
        for field in [&p.domain_label, &p.method] {
            match field {
                Some(s) => {
                    out.push(1);
                    put_str(&mut out, s);
                }
                None => out.push(0),
            }
        }
        out.extend_from_slice(&(p.annotations.len() as u32).to_le_bytes());
        for (k, v) in &p.annotations {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body_bytes();
        out.extend_from_slice(&self.digest.0);
        out
    }

    /// Parses and verifies a serialized checkpoint.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            n_layers: dims[0],
            hidden_dim: dims[1],
            n_heads: dims[2],
            vocab_size: dims[3],
            context_length: dims[4],
            freeze_depth: dims[5],
        };
        config.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
        let expected = layout::layout(&config);
        // Reject before allocating if the stream cannot possibly hold the weights.
        let min_bytes = config.param_count().saturating_mul(8);
        if min_bytes > r.remaining() {
            return Err(CheckpointError::Truncated {
                offset: r.pos,
                needed: min_bytes,
                available: r.remaining(),
            });
        }
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(CheckpointError::Layout(format!(
                "{count} arrays stored, config implies {}",
                expected.len()
            )));
        }
        let mut weights = Vec::with_capacity(count);
        for (name, shape) in expected {
            let stored = r.string("array name")?;
            if stored != name {
                return Err(CheckpointError::Layout(format!("expected `{name}`, found `{stored}`")));
            }
            let n = r.u64()? as usize;
            let want: usize = shape.iter().product();
            if n != want {
                return Err(CheckpointError::Layout(format!("`{name}` has {n} elements, expected {want}")));
            }
            let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Layout("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            weights.push(WeightArray { name, shape, data });
        }
        let base_digest = match r.flag("base digest")? {
            false => None,
            true => Some(Digest(r.take(32)?.try_into().expect("32 bytes"))),
        };
        let seed = r.u64()?;
        let train_steps = r.u64()?;
        let domain_label = r.opt_string("domain label")?;
        let method = r.opt_string("method")?;
        let n_ann = r.u32()? as usize;
        let mut annotations = BTreeMap::new();
        for _ in 0..n_ann {
            let k = r.string("annotation key")?;
            let v = r.string("annotation value")?;
            if annotations.last_key_value().is_some_and(|(last, _)| *last >= k) {
                return Err(CheckpointError::Layout(format!("annotation `{k}` out of order or repeated")));
            }
            annotations.insert(k, v);
        }
        let body_end = r.pos;
        let stored = Digest(r.take(32)?.try_into().expect("32 bytes"));
        if r.remaining() != 0 {
            return Err(CheckpointError::TrailingBytes(r.remaining()));
        }
        let computed = Digest::of(&bytes[..body_end]);
        if computed != stored {
            return Err(CheckpointError::DigestMismatch {
                stored: stored.to_hex(),
                computed: computed.to_hex(),
            });
        }
        let provenance = Provenance { base_digest, seed, train_steps, domain_label, method, annotations };
        Ok(Self { config, weights, provenance, digest: stored })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CoopError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoopError::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn check_layout(config: &ModelConfig, weights: &[WeightArray]) -> Result<()> {
    let expected = layout::layout(config);
    if expected.len() != weights.len() {
        return Err(CheckpointError::Layout(format!(
            "{} arrays given, config implies {}",
            weights.len(),
            expected.len()
        ))
        .into());
    }
    for ((name, shape), w) in expected.iter().zip(weights) {
        let n: usize = shape.iter().product();
        if &w.name != name || &w.shape != shape || w.data.len() != n {
            return Err(CheckpointError::Layout(format!(
                "array `{}` {:?} ({} values) where `{name}` {shape:?} expected",
                w.name,
                w.shape,
                w.data.len()
            ))
            .into());
        }
    }
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> std::result::Result<String, CheckpointError> {
        let n = self.u16()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Utf8(what))
    }

    fn flag(&mut self, what: &'static str) -> std::result::Result<bool, CheckpointError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CheckpointError::Layout(format!("presence flag for {what} is {b}"))),
        }
    }

    fn opt_string(&mut self, what: &'static str) -> std::result::Result<Option<String>, CheckpointError> {
        if self.flag(what)? {
            self.string(what).map(Some)
        } else {
            Ok(None)
        }
    }
}
