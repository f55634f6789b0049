//! Model files: a JSON manifest plus raw little-endian `f64` blobs.
//!
//! A model is a directory:
//!
//! ```text
//! model/
//!   manifest.json
//!   factor0_mean.f64   I x R, row-major
//!   factor0_cov.f64    IR x IR, row-major
//!   ...
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FactorPosterior, GammaPosterior, ModelState, NormalizationRecord, Priors};
use crate::vi::{FitConfig, FitTrace};

pub const FORMAT_NAME: &str = "btnv-model";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// How a model was fitted; kept alongside the state for reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub config: FitConfig,
    pub trace: FitTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub state: ModelState,
    pub fit: Option<FitInfo>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    file: String,
    shape: [usize; 2],
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    format_version: u32,
    order: usize,
    memory: usize,
    rank: usize,
    priors: Priors,
    normalization: NormalizationRecord,
    delta_learned: bool,
    lambda: Vec<GammaPosterior>,
    delta: Vec<GammaPosterior>,
    tau: GammaPosterior,
    log_det: Vec<f64>,
    blobs: Vec<BlobEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fit: Option<FitInfo>,
}

fn encode(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 8);
    for row in m.row_iter() {
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode(bytes: &[u8], shape: [usize; 2]) -> DMatrix<f64> {
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    DMatrix::from_row_slice(shape[0], shape[1], &vals)
}

pub fn save_model(artifact: &ModelArtifact, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let state = &artifact.state;
    state.validate()?;
    fs::create_dir_all(dir)?;
    let mut blobs = Vec::new();
    for (d, f) in state.factors.iter().enumerate() {
        for (kind, m) in [("mean", &f.mean), ("cov", &f.cov)] {
            let name = format!("factor{d}_{kind}");
            let file = format!("{name}.f64");
            let bytes = encode(m);
            fs::write(dir.join(&file), &bytes)?;
            blobs.push(BlobEntry {
                name,
                file,
                shape: [m.nrows(), m.ncols()],
                bytes: bytes.len() as u64,
            });
        }
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        format_version: FORMAT_VERSION,
        order: state.order(),
        memory: state.memory,
        rank: state.rank(),
        priors: state.priors,
        normalization: state.normalization,
        delta_learned: state.delta_learned,
        lambda: state.lambda.clone(),
        delta: state.delta.clone(),
        tau: state.tau,
        log_det: state.factors.iter().map(|f| f.log_det).collect(),
        blobs,
        fit: artifact.fit.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelArtifact> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT_NAME) {
        return Err(Error::Format(format!("not a {FORMAT_NAME} manifest")));
    }
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("manifest lacks format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::Format(e.to_string()))?;

    let (i, r) = (m.memory + 1, m.rank);
    if m.log_det.len() != m.order || m.blobs.len() != 2 * m.order {
        return Err(Error::Format("manifest lists the wrong number of factors".into()));
    }
    let mut factors = Vec::with_capacity(m.order);
    for d in 0..m.order {
        let read = |kind: &str, shape: [usize; 2]| -> Result<DMatrix<f64>> {
            let name = format!("factor{d}_{kind}");
            let entry = m
                .blobs
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::Format(format!("missing blob {name}")))?;
            if entry.shape != shape {
                return Err(Error::Format(format!(
                    "blob {name} declares shape {:?}, expected {shape:?}",
                    entry.shape
                )));
            }
            let expected = (shape[0] * shape[1] * 8) as u64;
            let bytes = fs::read(dir.join(&entry.file))?;
            if entry.bytes != expected || bytes.len() as u64 != expected {
                return Err(Error::Format(format!(
                    "blob {name} holds {} bytes, expected {expected}",
                    bytes.len()
                )));
            }
            Ok(decode(&bytes, shape))
        };
        let mean = read("mean", [i, r])?;
        let cov = read("cov", [i * r, i * r])?;
        factors.push(FactorPosterior {
            mean,
            cov,
            log_det: m.log_det[d],
        });
    }
    let state = ModelState {
        factors,
        lambda: m.lambda,
        delta: m.delta,
        tau: m.tau,
        memory: m.memory,
        priors: m.priors,
        normalization: m.normalization,
        delta_learned: m.delta_learned,
    };
    state.validate()?;
    Ok(ModelArtifact { state, fit: m.fit })
}
