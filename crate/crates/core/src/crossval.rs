//! Cross-checking importance and top-k against tensors exported from an
//! external reference implementation.
//!
//! Bundle layout (one directory):
//!
//! * `<clip>.eas` per clip, with `attn.layer{l}` `[H, T, T]` and
//!   `hidden.layer{l}` `[T, N]` for each exported layer;
//! * `manifest.jsonl` whose `features` fields point at `<clip>.eas#hidden.layer{l}`;
//! * `importance.eas` holding the exporter's values: `<clip>.importance.layer{l}`
//!   `[T]`, and optionally `<clip>.kept.layer{l}.s{tenths}` with the kept
//!   indices (as floats) at sparsity `tenths / 10`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_manifest, TensorArchive};
use crate::sparsifier::{importance_mean_with_tolerance, keep_count, Importance};
use crate::tensor::topk_indices;

/// Row-sum tolerance accepted for exported attention.
pub const EXPORT_ROW_TOLERANCE: f32 = 1e-4;
/// Allowed deviation from the exporter's importance values.
pub const IMPORTANCE_TOLERANCE: f32 = 1e-5;

pub const VALUES_FILE: &str = "importance.eas";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub clip: String,
    pub layer: usize,
    pub seq_len: usize,
    pub max_importance_error: f32,
    /// Sparsities (in tenths) whose kept sets were compared.
    pub kept_compared: Vec<u32>,
    pub kept_mismatches: Vec<u32>,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_importance_error <= IMPORTANCE_TOLERANCE && self.kept_mismatches.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub checks: Vec<LayerCheck>,
}

impl CrossvalReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(LayerCheck::passed)
    }
    pub fn clips(&self) -> usize {
        self.checks.iter().map(|c| &c.clip).collect::<BTreeSet<_>>().len()
    }
    pub fn layers(&self) -> usize {
        self.checks.iter().map(|c| c.layer).collect::<BTreeSet<_>>().len()
    }
}

fn layer_of(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.parse().ok()
}

/// Verify every clip archive listed in `<dir>/manifest.jsonl`.
pub fn crossval_bundle(dir: &Path) -> Result<CrossvalReport> {
    let records = read_manifest(dir.join("manifest.jsonl"))?;
    let values = TensorArchive::load(dir.join(VALUES_FILE))?;
    let mut clips: Vec<PathBuf> = Vec::new();
    for r in &records {
        let (file, _) = r.feature_ref()?;
        let p = dir.join(file);
        if !clips.contains(&p) {
            clips.push(p);
        }
    }
    let mut checks = Vec::new();
    for path in clips {
        let clip = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("{}: bad clip name", path.display())))?
            .to_string();
        let archive = TensorArchive::load(&path)?;
        for (name, attn) in archive.entries() {
            let Some(layer) = layer_of(name, "attn.layer") else {
                continue;
            };
            let ctx = |m: String| Error::Data(format!("{}: {name}: {m}", path.display()));
            let (_, t, t2) = attn.dims3().map_err(|e| ctx(e.to_string()))?;
            if t != t2 {
                return Err(ctx(format!("attention is not square ({t} x {t2})")));
            }
            if let Some(hidden) = archive.get(&format!("hidden.layer{layer}")) {
                let (th, _) = hidden.dims2().map_err(|e| ctx(e.to_string()))?;
                if th != t {
                    return Err(ctx(format!("hidden has {th} steps, attention {t}")));
                }
            }
            let ours = importance_mean_with_tolerance(attn, EXPORT_ROW_TOLERANCE)
                .map_err(|e| ctx(e.to_string()))?;
            let key = format!("{clip}.importance.layer{layer}");
            let theirs = values
                .get(&key)
                .ok_or_else(|| Error::Data(format!("{VALUES_FILE}: missing {key}")))?;
            if theirs.len() != t {
                return Err(Error::Data(format!(
                    "{VALUES_FILE}: {key} has {} values, expected {t}",
                    theirs.len()
                )));
            }
            let max_err = ours
                .values()
                .iter()
                .zip(theirs.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);

            let mut kept_compared = Vec::new();
            let mut kept_mismatches = Vec::new();
            for tenths in 1..=9u32 {
                let key = format!("{clip}.kept.layer{layer}.s{tenths}");
                let Some(expected) = values.get(&key) else {
                    continue;
                };
                kept_compared.push(tenths);
                if !kept_matches(&ours, f64::from(tenths) / 10.0, expected.data()) {
                    kept_mismatches.push(tenths);
                }
            }
            checks.push(LayerCheck {
                clip: clip.clone(),
                layer,
                seq_len: t,
                max_importance_error: max_err,
                kept_compared,
                kept_mismatches,
            });
        }
    }
    Ok(CrossvalReport { checks })
}

fn kept_matches(importance: &Importance, sparsity: f64, expected: &[f32]) -> bool {
    let k = keep_count(importance.len(), sparsity);
    let Ok(ours) = topk_indices(importance.values(), k) else {
        return false;
    };
    ours.len() == expected.len() && ours.iter().zip(expected).all(|(&a, &b)| a as f32 == b)
}
