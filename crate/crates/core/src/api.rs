//! Request and response bodies of the HTTP/JSON service.

use serde::{Deserialize, Serialize};

use crate::certifier::Mode;
use crate::cex::SearchConfig;
use crate::network::{ModelFile, Network};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

/// Summary of a model held by the service. `id` is the SHA-256 digest of
/// the canonical model serialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub format: String,
    pub n_in: usize,
    pub n_out: usize,
    pub depth: usize,
    pub widths: Vec<u64>,
    pub gram_iters: u32,
}

impl ModelInfo {
    pub fn of(id: String, net: &Network) -> Self {
        ModelInfo {
            id,
            format: net.format().to_string(),
            n_in: net.n_in(),
            n_out: net.n_out(),
            depth: net.depth(),
            widths: net.widths(),
            gram_iters: net.gram_iters(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UploadQuery {
    pub gram_iters: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyRequest {
    pub model_id: String,
    /// Dataset CSV text: label, then one decimal per input.
    pub data_csv: String,
    /// Rational or decimal literal.
    pub eps: String,
    /// Execution format; defaults to the model's storage format.
    #[serde(default)]
    pub format: Option<String>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub hi_format: Option<String>,
    #[serde(default)]
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchCexRequest {
    pub model_id: String,
    pub data_csv: String,
    #[serde(default)]
    pub format: Option<String>,
    pub n: usize,
    #[serde(default)]
    pub config: Option<SearchConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRequest {
    pub model_id: String,
    /// Bias `B`, a rational or decimal literal representable in the model's
    /// storage format.
    pub bias: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialResponse {
    pub model: ModelInfo,
    pub file: ModelFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsLinfRequest {
    pub eps: String,
    pub n_in: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsLinfResponse {
    /// Exact value as a fraction.
    pub eps_linf: String,
    pub approx: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
