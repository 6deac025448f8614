//! Versioned, portable checkpoints.
//!
//! A checkpoint is one JSON document. Tensors are stored as base64 of their
//! little-endian bytes together with the named layout, so a checkpoint
//! round-trips bit-exactly across machines. Random streams are stored as
//! their full generator state.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::float::Real;
use crate::optim::Adam;
use crate::rng::Rng;
use crate::segnet::{Network, NetworkConfig, ParamEntry, ParamVector};
use crate::trainer::{BestEpoch, Cursors, EpochRecord, StateSnapshot, TrainConfig, TrainState};

pub const CHECKPOINT_FORMAT: u32 = 1;

fn precision_name<T: Real>() -> &'static str {
    match T::BYTES {
        4 => "f32",
        8 => "f64",
        _ => "unknown",
    }
}

/// Hex SHA-256 of the canonical JSON of the training configuration and fold.
pub fn config_hash(config: &TrainConfig, fold: usize) -> String {
    let json = serde_json::to_string(&(config, fold)).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_values<T: Real>(values: &[T]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * T::BYTES);
    for &v in values {
        v.to_le(&mut bytes);
    }
    B64.encode(bytes)
}

fn decode_values<T: Real>(data: &str, expected: usize, what: &str) -> Result<Vec<T>> {
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::Format(format!("{what}: invalid base64 ({e})")))?;
    if bytes.len() != expected * T::BYTES {
        return Err(Error::Format(format!(
            "{what}: {} bytes for {expected} values of {} bytes",
            bytes.len(),
            T::BYTES
        )));
    }
    Ok(bytes.chunks_exact(T::BYTES).map(T::from_le).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedParams {
    pub entries: Vec<ParamEntry>,
    /// Base64 of the concatenated little-endian values.
    pub data: String,
}

impl EncodedParams {
    pub fn encode<T: Real>(p: &ParamVector<T>) -> Self {
        EncodedParams {
            entries: p.entries.clone(),
            data: encode_values(&p.values),
        }
    }

    pub fn decode<T: Real>(&self, what: &str) -> Result<ParamVector<T>> {
        let total: usize = self.entries.iter().map(|e| e.len).sum();
        let mut offset = 0;
        for e in &self.entries {
            if e.offset != offset || e.len != e.shape.iter().product::<usize>() {
                return Err(Error::Format(format!("{what}: inconsistent layout at `{}`", e.name)));
            }
            offset += e.len;
        }
        Ok(ParamVector {
            entries: self.entries.clone(),
            values: decode_values(&self.data, total, what)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedNetwork {
    pub config: NetworkConfig,
    pub params: EncodedParams,
    pub buffers: EncodedParams,
}

impl EncodedNetwork {
    fn encode<T: Real>(net: &Network<T>) -> Self {
        EncodedNetwork {
            config: net.config().clone(),
            params: EncodedParams::encode(net.params()),
            buffers: EncodedParams::encode(net.buffers()),
        }
    }

    fn decode<T: Real>(&self, what: &str) -> Result<Network<T>> {
        let mut net = Network::build(&self.config)?;
        net.set_params(&self.params.decode(what)?)?;
        net.set_buffers(&self.buffers.decode(what)?)?;
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub len: usize,
    pub m: String,
    pub v: String,
}

impl EncodedAdam {
    fn encode<T: Real>(a: &Adam<T>) -> Self {
        EncodedAdam {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
            len: a.m.len(),
            m: encode_values(&a.m),
            v: encode_values(&a.v),
        }
    }

    fn decode<T: Real>(&self, what: &str) -> Result<Adam<T>> {
        Ok(Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            step: self.step,
            m: decode_values(&self.m, self.len, what)?,
            v: decode_values(&self.v, self.len, what)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedEma {
    pub alpha: f64,
    pub step: u64,
    pub params: EncodedParams,
    pub buffers: EncodedParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub precision: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub fold: usize,
    pub epoch: usize,
    pub student: EncodedNetwork,
    pub student_opt: EncodedAdam,
    pub inter_teacher: Option<EncodedNetwork>,
    pub inter_opt: Option<EncodedAdam>,
    pub ema: Option<EncodedEma>,
    pub cursors: Cursors,
    pub noise_rng: Rng,
    pub augment_rng: Rng,
    pub metrics_log: Vec<EpochRecord>,
    pub best: Option<BestEpoch>,
}

impl Checkpoint {
    pub fn from_state<T: Real>(state: &TrainState<T>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            precision: precision_name::<T>().to_string(),
            config_hash: config_hash(&state.config, state.fold),
            config: state.config.clone(),
            fold: state.fold,
            epoch: state.epoch,
            student: EncodedNetwork::encode(&state.student),
            student_opt: EncodedAdam::encode(&state.student_opt),
            inter_teacher: state.inter_teacher.as_ref().map(EncodedNetwork::encode),
            inter_opt: state.inter_opt.as_ref().map(EncodedAdam::encode),
            ema: state.ema_state.as_ref().map(|e| EncodedEma {
                alpha: e.alpha,
                step: e.step,
                params: EncodedParams::encode(&e.teacher_params),
                buffers: EncodedParams::encode(&e.teacher_buffers),
            }),
            cursors: state.cursors.clone(),
            noise_rng: state.noise_rng.clone(),
            augment_rng: state.augment_rng.clone(),
            metrics_log: state.metrics_log.clone(),
            best: state.best,
        }
    }

    /// Structural checks that do not depend on the scalar type.
    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
                self.format
            )));
        }
        let hash = config_hash(&self.config, self.fold);
        if hash != self.config_hash {
            return Err(Error::Format("checkpoint config hash does not match its own config".into()));
        }
        Ok(())
    }

    pub fn into_snapshot<T: Real>(self) -> Result<StateSnapshot<T>> {
        self.validate()?;
        if self.precision != precision_name::<T>() {
            return Err(Error::Format(format!(
                "checkpoint holds {} values, loader expects {}",
                self.precision,
                precision_name::<T>()
            )));
        }
        let ema_state = match &self.ema {
            Some(e) => Some(EmaState {
                alpha: e.alpha,
                step: e.step,
                teacher_params: e.params.decode("ema params")?,
                teacher_buffers: e.buffers.decode("ema buffers")?,
            }),
            None => None,
        };
        Ok(StateSnapshot {
            student: self.student.decode("student")?,
            student_opt: self.student_opt.decode("student optimizer")?,
            inter_teacher: self.inter_teacher.as_ref().map(|n| n.decode("inter-teacher")).transpose()?,
            inter_opt: self.inter_opt.as_ref().map(|a| a.decode("inter-teacher optimizer")).transpose()?,
            ema_state,
            config: self.config,
            fold: self.fold,
            epoch: self.epoch,
            metrics_log: self.metrics_log,
            best: self.best,
            cursors: self.cursors,
            noise_rng: self.noise_rng,
            augment_rng: self.augment_rng,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Format(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        ck.validate()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_bit_exactly() {
        let net = Network::<f32>::build(&NetworkConfig::default()).unwrap();
        let enc = EncodedParams::encode(net.params());
        let json = serde_json::to_string(&enc).unwrap();
        let back: EncodedParams = serde_json::from_str(&json).unwrap();
        let p: ParamVector<f32> = back.decode("test").unwrap();
        assert_eq!(p.entries, net.params().entries);
        assert!(p.values.iter().zip(&net.params().values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_data_is_rejected() {
        let net = Network::<f64>::build(&NetworkConfig::default()).unwrap();
        let mut enc = EncodedParams::encode(net.params());
        enc.data = B64.encode([0u8; 12]);
        assert!(matches!(enc.decode::<f64>("x"), Err(Error::Format(_))));
    }

    #[test]
    fn hash_depends_on_config_and_fold() {
        use crate::trainer::Method;
        let a = TrainConfig::new(Method::DualTeacher, 0);
        let b = TrainConfig::new(Method::DualTeacher, 1);
        assert_ne!(config_hash(&a, 0), config_hash(&b, 0));
        assert_ne!(config_hash(&a, 0), config_hash(&a, 1));
        assert_eq!(config_hash(&a, 0), config_hash(&a.clone(), 0));
    }
}
