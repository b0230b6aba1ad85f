//! Exact on-disk snapshots of a training session.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, Model};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

use super::optim::{AdamW, AdamWConfig, Moments};
use super::trainer::{Progress, Session, Stages};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl StoredTensor {
    fn from_tensor<S: Scalar>(t: &Tensor2<S>) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    fn to_tensor<S: Scalar>(&self) -> Result<Tensor2<S>> {
        Tensor2::from_vec(self.rows, self.cols, self.data.iter().map(|&v| S::lit(v)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub decay: bool,
    pub value: StoredTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredMoments {
    pub m: StoredTensor,
    pub v: StoredTensor,
    pub t: u64,
}

/// Everything needed to continue a run bit-for-bit: parameters, optimizer
/// moments, stage bookkeeping and the position inside the current phase.
/// Batch sampling is a pure function of `(seed, step)`, so no sampler state
/// beyond the step is stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: EncoderConfig,
    pub stages: Stages,
    pub progress: Option<Progress>,
    pub checksum: String,
    pub params: BTreeMap<String, StoredParam>,
    pub optimizer: AdamWConfig,
    pub moments: BTreeMap<String, StoredMoments>,
}

impl Checkpoint {
    pub fn capture<S: Scalar>(session: &Session<S>) -> Self {
        Self {
            seed: session.seed,
            config: session.model.config.clone(),
            stages: session.stages.clone(),
            progress: session.progress.clone(),
            checksum: session.model.checksum(),
            params: session
                .model
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.to_string(),
                        StoredParam {
                            decay: p.decay,
                            value: StoredTensor::from_tensor(&p.value),
                        },
                    )
                })
                .collect(),
            optimizer: session.optimizer.config.clone(),
            moments: session
                .optimizer
                .state
                .iter()
                .map(|(k, m)| {
                    (
                        k.clone(),
                        StoredMoments {
                            m: StoredTensor::from_tensor(&m.m),
                            v: StoredTensor::from_tensor(&m.v),
                            t: m.t,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Rebuilds the session and verifies the stored parameter checksum.
    pub fn restore<S: Scalar>(&self) -> Result<Session<S>> {
        self.config.validate()?;
        let mut params = ParamStore::new();
        for (k, p) in &self.params {
            params.insert(k.clone(), p.value.to_tensor()?, p.decay);
        }
        let model = Model {
            config: self.config.clone(),
            params,
        };
        let mut optimizer = AdamW::new(self.optimizer.clone());
        for (k, m) in &self.moments {
            optimizer.state.insert(
                k.clone(),
                Moments {
                    m: m.m.to_tensor()?,
                    v: m.v.to_tensor()?,
                    t: m.t,
                },
            );
        }
        let got = model.checksum();
        if got != self.checksum {
            return Err(Error::Invalid(format!(
                "checkpoint checksum mismatch: stored {} but parameters hash to {got}",
                self.checksum
            )));
        }
        Ok(Session {
            model,
            optimizer,
            stages: self.stages.clone(),
            progress: self.progress.clone(),
            seed: self.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            serde_json::to_writer(&mut w, self)?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }
}
