//! Binary checkpoint format.
//!
//! Layout: the magic bytes `QNCKPT`, a little-endian `u32` version, four
//! length-prefixed (`u64` LE) UTF-8 blocks (config TOML, vocabulary JSON,
//! parameter manifest JSON, RNG state JSON), then every parameter's values
//! as little-endian `f64` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::math::{ParamStore, Tensor};
use crate::model::QuesNet;

pub const MAGIC: &[u8; 6] = b"QNCKPT";
pub const VERSION: u32 = 1;

/// Seed and optimizer step from which the training randomness continues.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub rng: RngState,
}

fn put_block(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(data);
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn block(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u64(what)? as usize;
        let b = self.take(n, what)?;
        std::str::from_utf8(b).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_block(&mut out, self.config.to_toml().as_bytes());
        put_block(&mut out, self.vocab.to_json().as_bytes());
        let manifest: Vec<ManifestEntry> = self
            .params
            .ids()
            .map(|id| ManifestEntry {
                name: self.params.name(id).to_string(),
                shape: self.params.value(id).shape().to_vec(),
            })
            .collect();
        put_block(&mut out, serde_json::to_string(&manifest).expect("manifest serializes").as_bytes());
        put_block(&mut out, serde_json::to_string(&self.rng).expect("rng serializes").as_bytes());
        for id in self.params.ids() {
            for v in self.params.value(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let config = Config::from_toml(r.block("config")?)?;
        let vocab = Vocabulary::from_json(r.block("vocabulary")?)?;
        let manifest: Vec<ManifestEntry> = serde_json::from_str(r.block("manifest")?)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let rng: RngState =
            serde_json::from_str(r.block("rng state")?).map_err(|e| Error::Checkpoint(format!("rng state: {e}")))?;
        let mut params = ParamStore::new();
        for entry in manifest {
            let n: usize = entry.shape.iter().product();
            let raw = r.take(n * 8, &entry.name)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, values).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if params.id(&entry.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", entry.name)));
            }
            params.add(entry.name, t);
        }
        if r.pos != data.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            vocab,
            params,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; a missing file is reported as a missing artifact.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the model from the stored config and vocabulary size and
    /// fills it with the stored parameter values.
    pub fn model(&self) -> Result<QuesNet> {
        let mut m = QuesNet::new(&self.config.model, self.vocab.len(), self.config.train.seed)?;
        m.load_params(&self.params)?;
        Ok(m)
    }
}
