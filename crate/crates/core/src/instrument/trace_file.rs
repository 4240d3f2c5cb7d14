//! JSON trace documents: config digest, component address strings, step
//! indices and base64 little-endian f64 payloads. Norm traces are stored
//! as plain arrays.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ActivationRecord, ComponentId, HeadOutputs, NormTrace};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Matrix;

pub const TRACE_FORMAT: &str = "asrlens-trace/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub rows: usize,
    pub cols: usize,
    /// base64 of row-major little-endian f64
    pub data: String,
}

impl EncodedTensor {
    pub fn encode(m: &Matrix) -> Self {
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for v in m.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Matrix> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Parse(format!("base64 payload: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::Parse(format!(
                "payload has {} bytes, expected {}",
                bytes.len(),
                self.rows * self.cols * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub component: ComponentId,
    pub step: usize,
    pub tensor: EncodedTensor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_projection: Option<EncodedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceDocument {
    pub format: String,
    pub config_digest: String,
    #[serde(default)]
    pub tokens: Vec<u32>,
    pub records: Vec<TraceEntry>,
    #[serde(default)]
    pub norm_traces: Vec<NormTrace>,
}

impl TraceDocument {
    pub fn new(
        config: &ModelConfig,
        tokens: &[u32],
        records: &[ActivationRecord],
        norm_traces: Vec<NormTrace>,
    ) -> Self {
        Self {
            format: TRACE_FORMAT.to_string(),
            config_digest: config.digest(),
            tokens: tokens.to_vec(),
            records: records
                .iter()
                .map(|r| TraceEntry {
                    component: r.component,
                    step: r.step,
                    tensor: EncodedTensor::encode(&r.tensor),
                    n_heads: r.pre_projection.as_ref().map(|p| p.n_heads),
                    pre_projection: r
                        .pre_projection
                        .as_ref()
                        .map(|p| EncodedTensor::encode(&p.concat)),
                })
                .collect(),
            norm_traces,
        }
    }

    pub fn records(&self) -> Result<Vec<ActivationRecord>> {
        self.records
            .iter()
            .map(|e| {
                let pre_projection = match (&e.pre_projection, e.n_heads) {
                    (Some(t), Some(n_heads)) => Some(HeadOutputs {
                        n_heads,
                        concat: t.decode()?,
                    }),
                    (None, _) => None,
                    (Some(_), None) => {
                        return Err(Error::Parse(format!(
                            "{}: pre-projection payload without head count",
                            e.component
                        )))
                    }
                };
                Ok(ActivationRecord {
                    component: e.component,
                    step: e.step,
                    tensor: e.tensor.decode()?,
                    pre_projection,
                })
            })
            .collect()
    }

    /// Records, after checking the trace was produced by `config`.
    pub fn records_for(&self, config: &ModelConfig) -> Result<Vec<ActivationRecord>> {
        if self.config_digest != config.digest() {
            return Err(Error::Parse(format!(
                "trace digest {} does not match model {}",
                self.config_digest,
                config.digest()
            )));
        }
        self.records()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(s)?;
        if doc.format != TRACE_FORMAT {
            return Err(Error::Parse(format!(
                "unknown trace format {:?}",
                doc.format
            )));
        }
        Ok(doc)
    }
}
