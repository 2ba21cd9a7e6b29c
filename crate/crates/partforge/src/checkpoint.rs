//! Checkpoint files: one line of JSON header, then every tensor as
//! little-endian `f32` in header order.
//!
//! The header lists model parameters first, then the Adam moments as
//! `adam.m.<name>` and `adam.v.<name>`.

use std::io::{BufRead, Write};

use partforge_core::flow::{AdamState, TrainingPlan};
use partforge_core::{Denoiser, DenoiserConfig, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "partforge-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Model(#[from] partforge_core::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub config: DenoiserConfig,
    /// Model initialization seed.
    pub seed: u64,
    /// Seed of the condition projection the model was trained against.
    pub condition_seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
    /// Optimizer and batching recipe of the run that produced the weights.
    pub plan: TrainingPlan,
    pub tensors: Vec<TensorEntry>,
}

/// Model and optimizer state at some step.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub adam: AdamState,
    pub seed: u64,
    pub condition_seed: u64,
    pub plan: TrainingPlan,
}

fn entries<'a>(prefix: &'a str, store: &'a ParamStore) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    store.iter().map(move |(n, t)| (format!("{prefix}{n}"), t))
}

impl Checkpoint {
    fn all_tensors(&self) -> Vec<(String, &Tensor)> {
        entries("", self.model.params())
            .chain(entries("adam.m.", &self.adam.m))
            .chain(entries("adam.v.", &self.adam.v))
            .collect()
    }

    pub fn header(&self) -> Header {
        Header {
            format: FORMAT.into(),
            version: VERSION,
            config: self.model.config().clone(),
            seed: self.seed,
            condition_seed: self.condition_seed,
            step: self.adam.step,
            plan: self.plan.clone(),
            tensors: self
                .all_tensors()
                .into_iter()
                .map(|(name, t)| TensorEntry { name, shape: t.shape().to_vec() })
                .collect(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let header = serde_json::to_string(&self.header()).map_err(|e| CheckpointError::Header(e.to_string()))?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        for (_, t) in self.all_tensors() {
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(CheckpointError::Header(format!("unsupported format {} v{}", header.format, header.version)));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = header.tensors.iter().find(|t| !seen.insert(t.name.as_str())) {
            return Err(CheckpointError::Header(format!("tensor {} listed twice", dup.name)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != 4 * expected {
            return Err(CheckpointError::Payload(format!("{} bytes for {expected} values", payload.len())));
        }
        let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for entry in &header.tensors {
            let n = entry.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            let tensor = Tensor::new(entry.shape.clone(), data)?;
            if let Some(name) = entry.name.strip_prefix("adam.m.") {
                m.register(name, tensor);
            } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
                v.register(name, tensor);
            } else {
                params.register(entry.name.clone(), tensor);
            }
        }
        params.check_layout(&m).map_err(|e| CheckpointError::Payload(format!("first moments: {e}")))?;
        params.check_layout(&v).map_err(|e| CheckpointError::Payload(format!("second moments: {e}")))?;
        let model = Denoiser::with_params(header.config, params)?;
        Ok(Self {
            model,
            adam: AdamState { step: header.step, m, v },
            seed: header.seed,
            condition_seed: header.condition_seed,
            plan: header.plan,
        })
    }
}
