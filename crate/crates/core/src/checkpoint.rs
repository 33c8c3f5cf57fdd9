//! Binary checkpoints: `"DAAE"`, a little-endian `u32` format version, a
//! length-prefixed JSON header, then one record per tensor (name, rank, dims,
//! little-endian `f64` data) until end of file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::experiment::ExperimentManifest;
use crate::objectives::Trainer;
use crate::seqmodel::SeqAutoencoder;
use crate::tensor::{Adam, Tensor};

pub const MAGIC: &[u8; 4] = b"DAAE";
pub const FORMAT_VERSION: u32 = 1;

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    /// Training stopped on an error; tensors hold the last good state.
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    manifest: ExperimentManifest,
    manifest_hash: String,
    vocab: Vec<String>,
    variational: bool,
    epoch: usize,
    zero_reparam_noise: bool,
    generator_steps: u64,
    discriminator_steps: u64,
    status: RunStatus,
    tensors: usize,
}

/// Model, optimizer state and provenance of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: ExperimentManifest,
    pub vocab: Vocab,
    pub model: SeqAutoencoder,
    pub trainer: Trainer,
    pub status: RunStatus,
}

fn opt_records(prefix: &str, opt: &Adam, model: &SeqAutoencoder, out: &mut Vec<(String, Tensor)>) {
    let (m, v) = opt.moments();
    for (i, &id) in opt.ids().iter().enumerate() {
        let shape = model.store.value(id).shape().to_vec();
        let name = model.store.name(id);
        out.push((format!("{prefix}.m:{name}"), Tensor::new(shape.clone(), m[i].clone()).expect("moment matches parameter")));
        out.push((format!("{prefix}.v:{name}"), Tensor::new(shape, v[i].clone()).expect("moment matches parameter")));
    }
}

impl Checkpoint {
    pub fn manifest_hash(&self) -> Result<String> {
        self.manifest.hash()
    }

    fn records(&self) -> Vec<(String, Tensor)> {
        let store = &self.model.store;
        let mut out: Vec<(String, Tensor)> = store.ids().map(|id| (format!("param:{}", store.name(id)), store.value(id).clone())).collect();
        opt_records("generator", &self.trainer.generator_opt, &self.model, &mut out);
        opt_records("discriminator", &self.trainer.discriminator_opt, &self.model, &mut out);
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records = self.records();
        let header = Header {
            manifest: self.manifest.clone(),
            manifest_hash: self.manifest.hash()?,
            vocab: self.vocab.tokens().to_vec(),
            variational: self.model.variational,
            epoch: self.trainer.epoch,
            zero_reparam_noise: self.trainer.zero_reparam_noise,
            generator_steps: self.trainer.generator_opt.step_count(),
            discriminator_steps: self.trainer.discriminator_opt.step_count(),
            status: self.status.clone(),
            tensors: records.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 64 + records.iter().map(|(_, t)| 8 * t.numel() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in &records {
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.shape().len())?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d)?.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::UnsupportedFormat("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedFormat(format!("checkpoint format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::UnsupportedFormat(format!("checkpoint header: {e}")))?;
        let mut records = Vec::with_capacity(header.tensors);
        while r.pos < bytes.len() {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::UnsupportedFormat("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor size overflows"))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt("tensor size overflows"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            records.push((name, Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?));
        }
        if records.len() != header.tensors {
            return Err(corrupt(&format!("header lists {} tensors, file holds {}", header.tensors, records.len())));
        }
        if header.manifest.hash()? != header.manifest_hash {
            return Err(corrupt("manifest hash mismatch"));
        }
        Self::assemble(header, records)
    }

    fn assemble(header: Header, records: Vec<(String, Tensor)>) -> Result<Self> {
        let vocab = Vocab::from_list(header.vocab)?;
        let config = &header.manifest.config;
        let mut model = SeqAutoencoder::new(config.model, header.variational, &mut <crate::SeededRng as rand::SeedableRng>::seed_from_u64(0))?;
        let mut trainer = Trainer::new(config.train, &model, &vocab)?;
        trainer.epoch = header.epoch;
        trainer.zero_reparam_noise = header.zero_reparam_noise;
        let mut by_name: std::collections::HashMap<String, Tensor> = records.into_iter().collect();
        let mut take = |key: String| by_name.remove(&key).ok_or_else(|| corrupt(&format!("missing tensor {key}")));
        let ids: Vec<_> = model.store.ids().collect();
        for &id in &ids {
            let t = take(format!("param:{}", model.store.name(id)))?;
            model.store.set(id, t).map_err(|e| corrupt(&e.to_string()))?;
        }
        for (prefix, opt, steps) in [
            ("generator", &mut trainer.generator_opt, header.generator_steps),
            ("discriminator", &mut trainer.discriminator_opt, header.discriminator_steps),
        ] {
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for &id in opt.ids() {
                let name = model.store.name(id);
                m.push(take(format!("{prefix}.m:{name}"))?.into_data());
                v.push(take(format!("{prefix}.v:{name}"))?.into_data());
            }
            opt.restore(steps, m, v).map_err(|e| corrupt(&e.to_string()))?;
        }
        drop(take);
        if let Some(extra) = by_name.keys().next() {
            return Err(corrupt(&format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint { manifest: header.manifest, vocab, model, trainer, status: header.status })
    }

    /// Writes atomically: a temporary sibling file is renamed over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn corrupt(msg: &str) -> Error {
    Error::UnsupportedFormat(format!("corrupt checkpoint: {msg}"))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("length {n} does not fit the checkpoint format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = path.file_name().ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
