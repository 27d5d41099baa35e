//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `MOLECKPT`, a little-endian `u32` version, a
//! `u64` header length, the JSON header, then every stored vector as
//! little-endian `f64` in the order parameters, EMA shadow, first moment,
//! second moment. Maps in the header are ordered, so equal state encodes to
//! equal bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mole::{MergedModel, RouterOutput};
use crate::params::{ParamSpec, ParamStore};
use crate::potential::{ModelConfig, PotentialModel};
use crate::reference::ReferenceScheme;
use crate::systems::SystemHeader;
use crate::train::{Stage, TrainState};

pub const MAGIC: &[u8; 8] = b"MOLECKPT";
pub const VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MergedHeader {
    header: SystemHeader,
    alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    stage: Stage,
    seed: u64,
    step: usize,
    tensors: Vec<ParamSpec>,
    reference: Option<ReferenceScheme>,
    merged: Option<MergedHeader>,
    ema: bool,
    optimizer: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PotentialModel,
    pub stage: Stage,
    pub seed: u64,
    pub step: usize,
    pub reference: Option<ReferenceScheme>,
    pub ema: Option<Vec<f64>>,
    /// AdamW first and second moments.
    pub optimizer: Option<(Vec<f64>, Vec<f64>)>,
    /// Set when `model` has been merged for one system header.
    pub merged: Option<(SystemHeader, RouterOutput)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            model: state.model.clone(),
            stage: state.stage,
            seed: state.seed,
            step: state.step,
            reference: state.reference.clone(),
            ema: Some(state.ema.clone()),
            optimizer: Some((state.m.clone(), state.v.clone())),
            merged: None,
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        if self.merged.is_some() {
            return Err(Error::Checkpoint("merged checkpoints cannot resume training".into()));
        }
        let mut state = TrainState::new(self.model, self.stage, self.seed);
        state.step = self.step;
        state.reference = self.reference;
        if let Some(ema) = self.ema {
            state.ema = ema;
        }
        if let Some((m, v)) = self.optimizer {
            state.m = m;
            state.v = v;
        }
        Ok(state)
    }

    pub fn from_merged(merged: &MergedModel, stage: Stage, seed: u64, reference: Option<ReferenceScheme>) -> Self {
        Self {
            model: merged.model().clone(),
            stage,
            seed,
            step: 0,
            reference,
            ema: None,
            optimizer: None,
            merged: Some((merged.header().clone(), merged.alpha().clone())),
        }
    }

    pub fn into_merged(self) -> Result<MergedModel> {
        let (header, alpha) = self.merged.ok_or_else(|| Error::Checkpoint("checkpoint is not merged".into()))?;
        MergedModel::from_parts(self.model, header, alpha)
    }

    /// Parameters for evaluation: the raw weights.
    pub fn model(&self) -> &PotentialModel {
        &self.model
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config.clone(),
            stage: self.stage,
            seed: self.seed,
            step: self.step,
            tensors: self.model.params.specs.clone(),
            reference: self.reference.clone(),
            merged: self.merged.as_ref().map(|(h, a)| MergedHeader { header: h.clone(), alpha: a.alpha().to_vec() }),
            ema: self.ema.is_some(),
            optimizer: self.optimizer.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + json.len() + 8 * self.model.params.total() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(&self.model.params.data);
        if let Some(e) = &self.ema {
            put(e);
        }
        if let Some((m, v)) = &self.optimizer {
            put(m);
            put(v);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < PREFIX || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let rest = &bytes[PREFIX..];
        if hlen > rest.len() as u64 {
            return Err(bad(format!("header length {hlen} exceeds file size")));
        }
        let (json, payload) = rest.split_at(hlen as usize);
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate()?;

        // Specs must tile the parameter vector contiguously.
        let mut total = 0usize;
        for s in &header.tensors {
            let len = s.rows.checked_mul(s.cols).ok_or_else(|| bad(format!("tensor `{}` is too large", s.name)))?;
            if s.offset != total {
                return Err(bad(format!("tensor `{}` has offset {} but {} expected", s.name, s.offset, total)));
            }
            if let Some((o, i)) = s.experts {
                if o.checked_mul(i) != Some(s.cols) {
                    return Err(bad(format!("tensor `{}` expert shape does not match its columns", s.name)));
                }
            }
            total = total.checked_add(len).ok_or_else(|| bad("parameter count overflows".into()))?;
        }
        let copies = 1 + usize::from(header.ema) + 2 * usize::from(header.optimizer);
        let expected = total.checked_mul(copies).and_then(|n| n.checked_mul(8));
        if expected != Some(payload.len()) {
            return Err(bad(format!("payload is {} bytes, expected {} vectors of {} values", payload.len(), copies, total)));
        }
        let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = || chunks.by_ref().take(total).collect::<Vec<f64>>();

        let params = ParamStore { specs: header.tensors, data: take() };
        let model = PotentialModel::from_params(header.config, params)?;
        let ema = header.ema.then(&mut take);
        let optimizer = header.optimizer.then(|| (take(), take()));
        let merged = match header.merged {
            Some(m) => {
                let alpha = RouterOutput::new(m.alpha)?;
                if model.has_router() {
                    return Err(bad("merged checkpoint still has a router".into()));
                }
                Some((m.header, alpha))
            }
            None => None,
        };
        Ok(Self { model, stage: header.stage, seed: header.seed, step: header.step, reference: header.reference, ema, optimizer, merged })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
