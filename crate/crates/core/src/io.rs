//! On-disk formats: the tensor archive, the utterance manifest and model files.
//!
//! Tensor archive layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "EAS1"
//! count        u32
//! per entry:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rank       u32
//!   extents    rank x u64
//!   payload    product(extents) x f32 (IEEE-754, little-endian), row-major
//! ```
//!
//! The manifest is JSON lines, one utterance per line:
//! `{"features": "features.eas#utt0000", "duration_seconds": 1.9, "reference_text": "..."}`.
//! The archive path in `features` is relative to the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::normalize_words;
use crate::model::{Model, ModelConfig, ModelWeights, Vocab};
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"EAS1";

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut a = Self::new();
        for (name, t) in entries {
            a.insert(name, t)?;
        }
        Ok(a)
    }

    /// Append an entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Data(format!("archive: duplicate entry {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse an archive. Any defect is reported with its byte offset and
    /// nothing is returned.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != ARCHIVE_MAGIC {
            return Err(Error::Data(format!("archive: bad magic {magic:?} at byte 0")));
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for i in 0..count {
            let start = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Data(format!("archive: entry {i} name is not UTF-8 (byte {start})")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Data(format!(
                    "archive: duplicate entry {name:?} at byte {start}"
                )));
            }
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                let d = r.u64("extent")?;
                shape.push(usize::try_from(d).map_err(|_| r.error("extent too large"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.error("payload size overflows"))?;
            let payload = r.take(numel, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| {
                Error::Data(format!("archive: entry {name:?} at byte {start}: {e}"))
            })?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "archive: {} trailing bytes at byte {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(&path, self.to_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.as_ref().display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, what: &str) -> Error {
        Error::Data(format!("archive: {what} at byte {}", self.pos))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Data(format!(
                "archive: truncated {what} at byte {} (need {n}, have {})",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// `<archive path>#<entry name>`.
    pub features: String,
    pub duration_seconds: f64,
    pub reference_text: String,
}

impl ManifestRecord {
    pub fn feature_ref(&self) -> Result<(&str, &str)> {
        self.features.rsplit_once('#').ok_or_else(|| {
            Error::Data(format!(
                "features: {:?} is not of the form <archive>#<entry>",
                self.features
            ))
        })
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        if !(rec.duration_seconds > 0.0 && rec.duration_seconds.is_finite()) {
            return Err(Error::Data(format!(
                "{}:{}: duration_seconds must be positive, got {}",
                path.display(),
                i + 1,
                rec.duration_seconds
            )));
        }
        rec.feature_ref()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// One utterance ready for inference.
#[derive(Debug, Clone)]
pub struct TaskExample {
    pub id: String,
    /// `[frames, n_mel]`
    pub features: Tensor,
    pub duration_seconds: f64,
    pub reference_text: String,
}

impl TaskExample {
    pub fn reference_words(&self) -> Vec<String> {
        normalize_words(&self.reference_text)
    }
}

/// Load every utterance of a manifest, resolving archive paths relative to it.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<TaskExample>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?;
    let mut archives: HashMap<PathBuf, TensorArchive> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let (file, entry) = rec.feature_ref()?;
        let path = base.join(file);
        if !archives.contains_key(&path) {
            archives.insert(path.clone(), TensorArchive::load(&path)?);
        }
        let features = archives[&path].get(entry).cloned().ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: features entry {entry:?} not found in {}",
                manifest.display(),
                i + 1,
                path.display()
            ))
        })?;
        out.push(TaskExample {
            id: entry.to_string(),
            features,
            duration_seconds: rec.duration_seconds,
            reference_text: rec.reference_text,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    config: ModelConfig,
    vocab: Vec<String>,
}

/// Sidecar path holding config and vocabulary: the archive path with a
/// `.json` extension.
pub fn model_sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

pub fn save_model(model: &Model, archive: impl AsRef<Path>) -> Result<()> {
    let archive = archive.as_ref();
    TensorArchive::from_entries(model.weights.to_entries())?.save(archive)?;
    let sidecar = ModelSidecar {
        config: model.config.clone(),
        vocab: model.vocab.tokens.clone(),
    };
    let side = model_sidecar_path(archive);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_model(archive: impl AsRef<Path>) -> Result<Model> {
    let archive = archive.as_ref();
    let side = model_sidecar_path(archive);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: ModelSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", side.display())))?;
    let entries = TensorArchive::load(archive)?.into_entries();
    let weights = ModelWeights::from_entries(&sidecar.config, entries)
        .map_err(|e| Error::Data(format!("{}: {e}", archive.display())))?;
    Model::new(
        sidecar.config,
        weights,
        Vocab {
            tokens: sidecar.vocab,
        },
    )
}
