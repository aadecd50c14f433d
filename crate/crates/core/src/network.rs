//! Dense feed-forward networks and their JSON interchange format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exact::{default_rel_tol, l2_norm_up, linf_norm, parse_rat, rat_to_string, Dyadic, RMat, RVec, Rat};
use crate::exec::{decimal_round_trip, shortest_decimal, FpValue};
use crate::format::{FormatName, FpFormat};
use crate::norms::{layer_norms, pair_norms, LayerNorms, PairNorms};

/// Gram iterations used when neither the model file nor the caller picks a count.
pub const DEFAULT_GRAM_ITERS: u32 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    /// Lipschitz constant, 1 for both supported activations.
    pub fn lipschitz(self) -> Rat {
        Rat::from_integer(1.into())
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" | "none" => Ok(Activation::Identity),
            other @ ("sigmoid" | "tanh" | "softmax" | "gelu" | "elu" | "softplus" | "swish") => Err(Error::Structural(format!(
                "activation {other:?} is not exactly computable in floating point; only relu and identity are supported"
            ))),
            other => Err(Error::Parse(format!("unknown activation {other:?}"))),
        }
    }
}

/// One affine layer followed by its activation.
#[derive(Clone, Debug)]
pub struct Layer {
    w: RMat,
    b: RVec,
    wf: Vec<f64>,
    bf: Vec<f64>,
    act: Activation,
    norms: LayerNorms,
}

impl Layer {
    pub fn weights(&self) -> &RMat {
        &self.w
    }

    pub fn bias(&self) -> &[Dyadic] {
        &self.b
    }

    /// Row-major weights as binary64 carriers.
    pub fn weights_f64(&self) -> &[f64] {
        &self.wf
    }

    pub fn bias_f64(&self) -> &[f64] {
        &self.bf
    }

    pub fn activation(&self) -> Activation {
        self.act
    }

    pub fn norms(&self) -> &LayerNorms {
        &self.norms
    }

    /// Dot-product length `n_l`.
    pub fn n_in(&self) -> usize {
        self.w.cols()
    }

    /// Number of outputs `m_l`.
    pub fn n_out(&self) -> usize {
        self.w.rows()
    }
}

/// Weights, bias and activation of one layer, before validation.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> Self {
        LayerSpec { weights, bias, activation }
    }
}

/// Immutable network with cached norm bounds.
#[derive(Debug)]
pub struct Network {
    format: FpFormat,
    layers: Vec<Layer>,
    gram_iters: u32,
    rel_tol: Rat,
    hidden_spec_product: Rat,
    pairs: Vec<OnceLock<PairNorms>>,
    metadata: BTreeMap<String, String>,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            format: self.format,
            layers: self.layers.clone(),
            gram_iters: self.gram_iters,
            rel_tol: self.rel_tol.clone(),
            hidden_spec_product: self.hidden_spec_product.clone(),
            pairs: self.pairs.clone(),
            metadata: self.metadata.clone(),
        }
    }
}

impl Network {
    /// Validate and build a network, computing every norm bound.
    pub fn new(format: FpFormat, layers: Vec<LayerSpec>, gram_iters: u32) -> Result<Network> {
        Network::build(format, layers, gram_iters, None)
    }

    fn build(format: FpFormat, specs: Vec<LayerSpec>, gram_iters: u32, embedded: Option<Vec<Option<LayerNorms>>>) -> Result<Network> {
        if !format.fits_binary64() {
            return Err(Error::Config(format!("storage format {format} does not fit inside binary64")));
        }
        if specs.is_empty() {
            return Err(Error::Structural("network has no layers".into()));
        }
        let last = specs.len() - 1;
        for (l, s) in specs.iter().enumerate() {
            let want = if l == last { Activation::Identity } else { Activation::Relu };
            if s.activation != want {
                return Err(Error::Structural(format!(
                    "layer {} has activation {}, expected {want} (hidden layers use relu, the output layer identity)",
                    l + 1,
                    s.activation
                )));
            }
            let cols = s.weights.first().map_or(0, Vec::len);
            if s.weights.is_empty() || cols == 0 {
                return Err(Error::Structural(format!("layer {} has an empty weight matrix", l + 1)));
            }
            if s.weights.iter().any(|r| r.len() != cols) {
                return Err(Error::Structural(format!("layer {} has ragged weight rows", l + 1)));
            }
            if s.bias.len() != s.weights.len() {
                return Err(Error::Structural(format!(
                    "layer {} has {} rows but {} biases",
                    l + 1,
                    s.weights.len(),
                    s.bias.len()
                )));
            }
            if l > 0 && cols != specs[l - 1].weights.len() {
                return Err(Error::Structural(format!(
                    "layer {} expects {cols} inputs but layer {} has {} outputs",
                    l + 1,
                    l,
                    specs[l - 1].weights.len()
                )));
            }
            let bad = s.weights.iter().flatten().chain(&s.bias).find(|v| !format.contains(**v));
            if let Some(v) = bad {
                return Err(Error::NotRepresentable { value: format!("{v:e}"), format: format.to_string() });
            }
        }
        if specs[last].weights.len() < 2 {
            return Err(Error::Structural("the output layer needs at least two classes".into()));
        }
        let rel_tol = default_rel_tol();
        let embedded = embedded.unwrap_or_else(|| vec![None; specs.len()]);
        let layers = specs
            .into_par_iter()
            .zip(embedded)
            .map(|(s, emb)| {
                let w = RMat::from_f64_rows(&s.weights)?;
                let b: RVec = s.bias.iter().map(|&v| Dyadic::from_f64(v).expect("finite")).collect();
                let computed = layer_norms(&w, &b, gram_iters, &rel_tol)?;
                let norms = match emb {
                    Some(e) => merge_norms(computed, e)?,
                    None => computed,
                };
                Ok(Layer {
                    wf: s.weights.iter().flatten().map(|v| v + 0.0).collect(),
                    bf: s.bias.iter().map(|v| v + 0.0).collect(),
                    w,
                    b,
                    act: s.activation,
                    norms,
                })
            })
            .collect::<Result<Vec<Layer>>>()?;
        let hidden_spec_product = layers[..last].iter().map(|l| l.norms.spec_up.clone()).product();
        let n_out = layers[last].n_out();
        Ok(Network {
            format,
            layers,
            gram_iters,
            rel_tol,
            hidden_spec_product,
            pairs: (0..n_out * n_out).map(|_| OnceLock::new()).collect(),
            metadata: BTreeMap::new(),
        })
    }

    pub fn format(&self) -> &FpFormat {
        &self.format
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().n_out()
    }

    pub fn gram_iters(&self) -> u32 {
        self.gram_iters
    }

    pub fn rel_tol(&self) -> &Rat {
        &self.rel_tol
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: &str, value: String) {
        self.metadata.insert(key.to_string(), value);
    }

    /// Dot-product lengths `n_1, ..., n_L`.
    pub fn widths(&self) -> Vec<u64> {
        self.layers.iter().map(|l| l.n_in() as u64).collect()
    }

    /// Whether every weight and bias is a member of `fmt`.
    pub fn executable_in(&self, fmt: &FpFormat) -> bool {
        if !fmt.fits_binary64() {
            return false;
        }
        let s = &self.format;
        let superset = fmt.p >= s.p && fmt.emax >= s.emax && fmt.emin <= s.emin && fmt.min_quantum_exp() <= s.min_quantum_exp();
        superset
            || self
                .layers
                .iter()
                .all(|l| l.wf.iter().chain(&l.bf).all(|&v| fmt.contains(v)))
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec {
                weights: l.wf.chunks(l.n_in()).map(<[f64]>::to_vec).collect(),
                bias: l.bf.clone(),
                activation: l.act,
            })
            .collect()
    }

    /// Copy with every weight and bias rounded to `fmt`, which becomes the
    /// storage format.
    pub fn cast(&self, fmt: &FpFormat) -> Result<Network> {
        let round = |v: f64| -> Result<f64> {
            let r = crate::exec::fp_round_dyadic(&Dyadic::from_f64(v).expect("finite"), fmt);
            if r.is_finite() {
                Ok(r.value())
            } else {
                Err(Error::Domain(format!("weight {v:e} overflows {fmt}")))
            }
        };
        let specs = self
            .layer_specs()
            .into_iter()
            .map(|s| {
                Ok(LayerSpec {
                    weights: s.weights.iter().map(|r| r.iter().map(|&v| round(v)).collect()).collect::<Result<_>>()?,
                    bias: s.bias.iter().map(|&v| round(v)).collect::<Result<_>>()?,
                    activation: s.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = Network::new(*fmt, specs, self.gram_iters)?;
        net.metadata = self.metadata.clone();
        Ok(net)
    }

    /// Same weights with different biases; weight norms are reused.
    pub fn with_biases(&self, biases: Vec<Vec<f64>>) -> Result<Network> {
        if biases.len() != self.layers.len() {
            return Err(Error::Structural("one bias vector per layer is required".into()));
        }
        let mut net = self.clone();
        for (l, (layer, bf)) in net.layers.iter_mut().zip(biases).enumerate() {
            if bf.len() != layer.n_out() {
                return Err(Error::Structural(format!("layer {} needs {} biases", l + 1, layer.n_out())));
            }
            if let Some(v) = bf.iter().find(|v| !self.format.contains(**v)) {
                return Err(Error::NotRepresentable { value: format!("{v:e}"), format: self.format.to_string() });
            }
            layer.b = bf.iter().map(|&v| Dyadic::from_f64(v).expect("finite")).collect();
            layer.bf = bf.iter().map(|v| v + 0.0).collect();
            layer.norms.bias_l2_up = l2_norm_up(&layer.b, &self.rel_tol);
            layer.norms.bias_linf = linf_norm(&layer.b).to_rat();
        }
        net.pairs = (0..self.pairs.len()).map(|_| OnceLock::new()).collect();
        Ok(net)
    }

    fn check_pair(&self, i_star: usize, j: usize) -> Result<()> {
        let n = self.n_out();
        if i_star == j {
            return Err(Error::Argument(format!("classes must differ, got ({i_star}, {j})")));
        }
        if i_star >= n || j >= n {
            return Err(Error::Argument(format!("class pair ({i_star}, {j}) out of range for {n} outputs")));
        }
        Ok(())
    }

    /// Final-layer quantities for the ordered pair `(i_star, j)`, computed once.
    pub fn pair_norms(&self, i_star: usize, j: usize) -> Result<&PairNorms> {
        self.check_pair(i_star, j)?;
        let slot = &self.pairs[i_star * self.n_out() + j];
        if let Some(p) = slot.get() {
            return Ok(p);
        }
        let last = self.layers.last().unwrap();
        let p = pair_norms(&last.w, &last.b, i_star, j, &self.rel_tol)?;
        Ok(slot.get_or_init(|| p))
    }

    /// Upper bound on the Lipschitz constant of `y_{i*} - y_j`.
    pub fn margin_lipschitz(&self, i_star: usize, j: usize) -> Result<Rat> {
        Ok(&self.pair_norms(i_star, j)?.diff_row_l2_up * &self.hidden_spec_product)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Network> {
        let text = std::fs::read_to_string(path)?;
        Network::from_json_str(&text, None)
    }

    pub fn from_json_str(text: &str, gram_iters: Option<u32>) -> Result<Network> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse(format!("model file: {e}")))?;
        Network::from_model_file(file, gram_iters)
    }

    /// Build from the parsed file; `gram_iters` overrides the file's count.
    pub fn from_model_file(file: ModelFile, gram_iters: Option<u32>) -> Result<Network> {
        let format = file.format.resolve()?;
        let iters = gram_iters.or(file.gram_iters).unwrap_or(DEFAULT_GRAM_ITERS);
        let mut specs = Vec::with_capacity(file.layers.len());
        let mut embedded = Vec::with_capacity(file.layers.len());
        for (l, lf) in file.layers.into_iter().enumerate() {
            let activation: Activation = lf.activation.parse()?;
            let weights = match (&lf.weights_hex, &lf.weights) {
                (Some(h), _) => h.iter().map(|r| decode_hex_row(r, &format)).collect::<Result<Vec<_>>>()?,
                (None, Some(d)) => d.iter().map(|r| decode_decimal_row(r, &format)).collect::<Result<Vec<_>>>()?,
                (None, None) => return Err(Error::Parse(format!("layer {} has no weights", l + 1))),
            };
            let bias = match (&lf.bias_hex, &lf.bias) {
                (Some(h), _) => decode_hex_row(h, &format)?,
                (None, Some(d)) => decode_decimal_row(d, &format)?,
                (None, None) => vec![0.0; weights.len()],
            };
            // embedded bounds are only trusted for the iteration count that produced them
            let emb = match lf.norms {
                Some(n) if gram_iters.is_none() || n.gram_iters == Some(iters) => Some(n.to_norms()?),
                _ => None,
            };
            embedded.push(emb);
            specs.push(LayerSpec { weights, bias, activation });
        }
        let mut net = Network::build(format, specs, iters, Some(embedded))?;
        net.metadata = file.metadata;
        Ok(net)
    }

    pub fn to_model_file(&self, include_norms: bool, include_decimals: bool) -> ModelFile {
        let fmt = &self.format;
        let hex = |v: f64| format!("{:0width$x}", fmt.encode_bits(v).expect("member"), width = fmt.hex_digits().unwrap());
        let dec = |v: f64| Value::String(shortest_decimal(FpValue::from_raw(v), fmt));
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let rows: Vec<&[f64]> = l.wf.chunks(l.n_in()).collect();
                LayerFile {
                    weights_hex: Some(rows.iter().map(|r| r.iter().map(|&v| hex(v)).collect()).collect()),
                    bias_hex: Some(l.bf.iter().map(|&v| hex(v)).collect()),
                    activation: l.act.as_str().to_string(),
                    weights: include_decimals.then(|| rows.iter().map(|r| r.iter().map(|&v| dec(v)).collect()).collect()),
                    bias: include_decimals.then(|| l.bf.iter().map(|&v| dec(v)).collect()),
                    norms: include_norms.then(|| NormsFile::from_norms(&l.norms, self.gram_iters)),
                }
            })
            .collect();
        ModelFile {
            format: FormatSpec::from_format(fmt),
            gram_iters: Some(self.gram_iters),
            metadata: self.metadata.clone(),
            layers,
        }
    }

    pub fn to_json_string(&self, include_norms: bool) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_model_file(include_norms, true))?)
    }

    pub fn save(&self, path: impl AsRef<Path>, include_norms: bool) -> Result<()> {
        std::fs::write(path, self.to_json_string(include_norms)? + "\n")?;
        Ok(())
    }
}

/// Combine freshly computed bounds with embedded ones, keeping the larger of
/// each pair. Embedded row maxima are exact quantities, so values below ours
/// mean the cache belongs to other weights.
fn merge_norms(computed: LayerNorms, embedded: LayerNorms) -> Result<LayerNorms> {
    if embedded.row_l2_up.len() != computed.row_l2_up.len() || embedded.row_linf.len() != computed.row_linf.len() {
        return Err(Error::Structural("embedded norm cache has the wrong number of rows".into()));
    }
    let max = |a: &Rat, b: &Rat| if a >= b { a.clone() } else { b.clone() };
    let rows = |a: &[Rat], b: &[Rat]| a.iter().zip(b).map(|(x, y)| max(x, y)).collect::<Vec<_>>();
    if embedded.row_linf.iter().zip(&computed.row_linf).any(|(e, c)| e < c) {
        return Err(Error::Structural("embedded row maxima are below the exact values".into()));
    }
    let row_l2_up = rows(&computed.row_l2_up, &embedded.row_l2_up);
    let row_linf = rows(&computed.row_linf, &embedded.row_linf);
    Ok(LayerNorms {
        spec_up: max(&computed.spec_up, &embedded.spec_up),
        abs_spec_up: max(&computed.abs_spec_up, &embedded.abs_spec_up),
        max_row_l2_up: row_l2_up.iter().max().cloned().unwrap(),
        max_row_linf: row_linf.iter().max().cloned().unwrap(),
        row_l2_up,
        row_linf,
        bias_l2_up: max(&computed.bias_l2_up, &embedded.bias_l2_up),
        bias_linf: max(&computed.bias_linf, &embedded.bias_linf),
    })
}

fn decode_hex_row(row: &[String], fmt: &FpFormat) -> Result<Vec<f64>> {
    let digits = fmt.hex_digits()?;
    row.iter()
        .map(|h| {
            let t = h.trim().trim_start_matches("0x");
            if t.is_empty() || t.len() > digits {
                return Err(Error::Parse(format!("hex value {h:?} does not have {digits} digits for {fmt}")));
            }
            let bits = u64::from_str_radix(t, 16).map_err(|_| Error::Parse(format!("bad hex value {h:?}")))?;
            Ok(fmt.decode_bits(bits)? + 0.0)
        })
        .collect()
}

fn decode_decimal_row(row: &[Value], fmt: &FpFormat) -> Result<Vec<f64>> {
    row.iter()
        .map(|v| {
            let text = match v {
                Value::String(s) => s.clone(),
                Value::Number(n) => n.to_string(),
                other => return Err(Error::Parse(format!("expected a decimal, found {other}"))),
            };
            let q = parse_rat(&text)?;
            decimal_round_trip(&q, fmt)
                .map(FpValue::value)
                .ok_or_else(|| Error::NotRepresentable { value: text, format: fmt.to_string() })
        })
        .collect()
}

/// Format field of a model file: a name or explicit parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum FormatSpec {
    Named(FormatName),
    Custom { p: u32, emin: i32, emax: i32 },
}

impl FormatSpec {
    pub fn resolve(&self) -> Result<FpFormat> {
        match self {
            FormatSpec::Named(n) => crate::format::make_format(*n),
            FormatSpec::Custom { p, emin, emax } => FpFormat::custom(*p, *emin, *emax),
        }
    }

    pub fn from_format(f: &FpFormat) -> Self {
        match f.name {
            FormatName::Custom => FormatSpec::Custom { p: f.p, emin: f.emin, emax: f.emax },
            n => FormatSpec::Named(n),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelFile {
    pub format: FormatSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram_iters: Option<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
    pub layers: Vec<LayerFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayerFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_hex: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_hex: Option<Vec<String>>,
    pub activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<Value>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norms: Option<NormsFile>,
}

/// Serialised [`LayerNorms`], rationals written as `p/q` strings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram_iters: Option<u32>,
    pub spec_up: String,
    pub abs_spec_up: String,
    pub row_l2_up: Vec<String>,
    pub row_linf: Vec<String>,
    pub bias_l2_up: String,
    pub bias_linf: String,
}

impl NormsFile {
    pub fn from_norms(n: &LayerNorms, gram_iters: u32) -> Self {
        NormsFile {
            gram_iters: Some(gram_iters),
            spec_up: rat_to_string(&n.spec_up),
            abs_spec_up: rat_to_string(&n.abs_spec_up),
            row_l2_up: n.row_l2_up.iter().map(rat_to_string).collect(),
            row_linf: n.row_linf.iter().map(rat_to_string).collect(),
            bias_l2_up: rat_to_string(&n.bias_l2_up),
            bias_linf: rat_to_string(&n.bias_linf),
        }
    }

    pub fn to_norms(&self) -> Result<LayerNorms> {
        let row_l2_up = self.row_l2_up.iter().map(|s| parse_rat(s)).collect::<Result<Vec<_>>>()?;
        let row_linf = self.row_linf.iter().map(|s| parse_rat(s)).collect::<Result<Vec<_>>>()?;
        let zero = Rat::from_integer(0.into());
        Ok(LayerNorms {
            spec_up: parse_rat(&self.spec_up)?,
            abs_spec_up: parse_rat(&self.abs_spec_up)?,
            max_row_l2_up: row_l2_up.iter().max().cloned().unwrap_or_else(|| zero.clone()),
            max_row_linf: row_linf.iter().max().cloned().unwrap_or(zero),
            row_l2_up,
            row_linf,
            bias_l2_up: parse_rat(&self.bias_l2_up)?,
            bias_linf: parse_rat(&self.bias_linf)?,
        })
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
