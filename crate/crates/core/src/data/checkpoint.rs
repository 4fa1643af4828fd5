//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `STZCKPT1`, a little-endian `u64` header
//! length, a compact JSON header (config, seed, dims, optimizer step,
//! tensor manifest), then every tensor's values as little-endian `f32`,
//! row-major, in manifest order, with no padding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raw::{decode_f32, encode_f32};
use crate::error::{Error, Result};
use crate::model::{DataDims, Model};
use crate::nd::{ParamSet, Tensor};
use crate::train::{AdamW, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"STZCKPT1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    config: TrainConfig,
    dims: DataDims,
    epochs_done: usize,
    optimizer_step: u64,
    manifest: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub seed: u64,
    pub dims: DataDims,
    pub epochs_done: usize,
    pub optimizer_step: u64,
    /// Model tensors followed by optimizer moments (`opt.m.*`, `opt.v.*`).
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        let mut tensors: Vec<(String, Tensor)> = state
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        for (prefix, moments) in [
            ("opt.m.", &state.optimizer.m),
            ("opt.v.", &state.optimizer.v),
        ] {
            for (n, t) in names.iter().zip(moments) {
                tensors.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        for (_, t) in &mut tensors {
            t.quantize_f32();
            t.requires_grad = false;
            t.grad = None;
        }
        Self {
            config: state.config.clone(),
            seed: state.config.seed,
            dims: state.model.dims(),
            epochs_done: state.epochs_done,
            optimizer_step: state.optimizer.step,
            tensors,
        }
    }

    /// Restores model and optimizer state.
    pub fn to_state(&self) -> Result<TrainState> {
        let n_model = self.tensors.len() / 3;
        if n_model * 3 != self.tensors.len() {
            return Err(Error::Corruption(
                "tensor count is not model + two moment sets".into(),
            ));
        }
        let model = Model::from_named(&self.config, self.dims, self.tensors[..n_model].to_vec())?;
        let mut optimizer = AdamW::new(self.config.lr, self.config.weight_decay, &[]);
        optimizer.step = self.optimizer_step;
        for (i, (name, _)) in self.tensors[..n_model].iter().enumerate() {
            let m = &self.tensors[n_model + i];
            let v = &self.tensors[2 * n_model + i];
            if m.0 != format!("opt.m.{name}") || v.0 != format!("opt.v.{name}") {
                return Err(Error::Corruption(format!(
                    "optimizer moments for {name} missing"
                )));
            }
            optimizer.m.push(m.1.clone());
            optimizer.v.push(v.1.clone());
        }
        Ok(TrainState {
            config: self.config.clone(),
            model,
            optimizer,
            epochs_done: self.epochs_done,
        })
    }

    pub fn model(&self) -> Result<Model> {
        Ok(self.to_state()?.model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: 1,
            seed: self.seed,
            config: self.config.clone(),
            dims: self.dims,
            epochs_done: self.epochs_done,
            optimizer_step: self.optimizer_step,
            manifest: self
                .tensors
                .iter()
                .map(|(n, t)| ManifestEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            encode_f32(t.data(), &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::Corruption(msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if header_len > body.len() {
            return Err(corrupt(format!("header length {header_len} exceeds file")));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        if header.format_version != 1 {
            return Err(corrupt(format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        let payload = &body[header_len..];
        let expected: usize = header
            .manifest
            .iter()
            .map(|m| m.shape.iter().product::<usize>())
            .sum();
        if payload.len() != expected * 4 {
            return Err(corrupt(format!(
                "payload is {} bytes, manifest declares {}",
                payload.len(),
                expected * 4
            )));
        }
        let values = decode_f32(payload);
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(corrupt(format!("non-finite payload value at element {i}")));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for m in header.manifest {
            let len: usize = m.shape.iter().product();
            let t = Tensor::new(m.shape, values[offset..offset + len].to_vec())
                .map_err(|e| corrupt(format!("tensor {}: {e}", m.name)))?;
            offset += len;
            tensors.push((m.name, t));
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            dims: header.dims,
            epochs_done: header.epochs_done,
            optimizer_step: header.optimizer_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFile(path.to_path_buf()))
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        Self::from_bytes(&bytes)
    }
}
