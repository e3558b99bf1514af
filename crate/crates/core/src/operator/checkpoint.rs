//! Parameter checkpoints: one JSON header line, a newline, then every
//! parameter as little-endian `f64` in declaration order.

use super::{NeuralOperator, OperatorSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload that follows the header line.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub spec: OperatorSpec,
    pub seed: u64,
    pub parameters: Vec<ParamEntry>,
}

impl NeuralOperator {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let parameters = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(name, p)| {
                let e = ParamEntry {
                    name: name.clone(),
                    shape: p.shape().to_vec(),
                    offset,
                };
                offset += 8 * p.numel();
                e
            })
            .collect();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            parameters,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(offset);
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint has no header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let payload = &bytes[nl + 1..];
        let mut params = Vec::with_capacity(header.parameters.len());
        for e in &header.parameters {
            let n: usize = e.shape.iter().product();
            let chunk = payload
                .get(e.offset..e.offset + 8 * n)
                .ok_or_else(|| Error::Format(format!("parameter {} is truncated", e.name)))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(Tensor::from_vec(&e.shape, data)?);
        }
        let op = NeuralOperator::from_parameters(header.spec, header.seed, params)?;
        if op.names.iter().ne(header.parameters.iter().map(|e| &e.name)) {
            return Err(Error::Format("parameter names do not match the spec".into()));
        }
        Ok(op)
    }
}

pub fn save_checkpoint(op: &NeuralOperator, path: &Path) -> Result<()> {
    std::fs::write(path, op.to_checkpoint_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NeuralOperator> {
    NeuralOperator::from_checkpoint_bytes(&std::fs::read(path)?)
}
