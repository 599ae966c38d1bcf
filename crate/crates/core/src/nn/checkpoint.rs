use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::batchnorm::{BatchNormState, BnStats};
use super::params::{Layout, ParameterVector};
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::optim::EpochHistory;

pub const CHECKPOINT_VERSION: u32 = 1;

/// A saved network: spec, parameters, batch-norm statistics and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParameterVector,
    pub bn: BatchNormState,
    pub rng_seed: u64,
    pub history: Option<EpochHistory>,
}

#[derive(Serialize, Deserialize)]
struct BnLayerRecord {
    running_mean: String,
    running_var: String,
}

#[derive(Serialize, Deserialize)]
struct BnRecord {
    momentum: f64,
    epsilon: f64,
    layers: Vec<Option<BnLayerRecord>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    version: u32,
    spec: NetworkSpec,
    layout: Layout,
    /// Base64 of little-endian IEEE-754 doubles.
    values: String,
    bn_state: BnRecord,
    rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training_history: Option<EpochHistory>,
}

pub(crate) fn encode_f64s(xs: &[f64]) -> String {
    let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub(crate) fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::config(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::config("float payload length is not a multiple of 8"));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let bn_state = BnRecord {
            momentum: self.bn.momentum,
            epsilon: self.bn.epsilon,
            layers: self
                .bn
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|s| BnLayerRecord {
                        running_mean: encode_f64s(&s.running_mean),
                        running_var: encode_f64s(&s.running_var),
                    })
                })
                .collect(),
        };
        let rec = CheckpointRecord {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            layout: (**self.params.layout()).clone(),
            values: encode_f64s(self.params.values()),
            bn_state,
            rng_seed: self.rng_seed,
            training_history: self.history.clone(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: CheckpointRecord = serde_json::from_str(s)?;
        if rec.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!("unsupported checkpoint version {}", rec.version)));
        }
        rec.spec.validate()?;
        if rec.layout != Layout::for_spec(&rec.spec) {
            return Err(Error::LayoutMismatch);
        }
        let params = ParameterVector::new(decode_f64s(&rec.values)?, Arc::new(rec.layout))?;
        let layers = rec
            .bn_state
            .layers
            .into_iter()
            .map(|l| {
                l.map(|r| {
                    Ok(BnStats {
                        running_mean: decode_f64s(&r.running_mean)?,
                        running_var: decode_f64s(&r.running_var)?,
                    })
                })
                .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            spec: rec.spec,
            params,
            bn: BatchNormState { layers, momentum: rec.bn_state.momentum, epsilon: rec.bn_state.epsilon },
            rng_seed: rec.rng_seed,
            history: rec.training_history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{initialize, Activation, LossKind};

    #[test]
    fn json_round_trip_is_bit_exact() {
        let spec = NetworkSpec::new(vec![4, 6, 3], Activation::Sigmoid, LossKind::SoftmaxCrossEntropy)
            .with_batch_norm(true);
        let (mut params, mut bn) = initialize(&spec, 5).unwrap();
        params.values_mut()[0] = std::f64::consts::PI * 1e-300;
        params.values_mut()[1] = -0.0;
        bn.layers[0].as_mut().unwrap().running_var[2] = 1.0 / 3.0;
        let ck = Checkpoint { spec, params, bn, rng_seed: 5, history: None };
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let bits = |p: &ParameterVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&ck.params));
        assert_eq!(back.bn, ck.bn);
        assert_eq!(back.spec, ck.spec);
    }

    #[test]
    fn rejects_unknown_version() {
        let spec = NetworkSpec::new(vec![2, 2], Activation::Identity, LossKind::Mse);
        let (params, bn) = initialize(&spec, 0).unwrap();
        let ck = Checkpoint { spec, params, bn, rng_seed: 0, history: None };
        let json = ck.to_json().unwrap().replace("\"version\": 1", "\"version\": 99");
        assert!(Checkpoint::from_json(&json).is_err());
    }
}
