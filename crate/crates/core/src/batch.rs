//! Dataset ingestion and the batch operations behind the command line and
//! the HTTP service: certification runs with evaluation metrics,
//! counterexample search, the adversarial-bias model and the ℓ∞ radius
//! conversion.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certifier::{real_arith_certify, Certifier, Mode, Verdict};
use crate::cex::{search_many, verify_triple, SearchConfig};
use crate::error::{Error, Result};
use crate::exact::{parse_rat, rat_int, rat_to_f64, rat_to_string, sqrt_up, Dyadic, Rat};
use crate::exec::{quantize_input, FpValue};
use crate::format::{FormatName, FpFormat};
use crate::network::{sha256_hex, Network};

/// Labelled inputs, already rounded to the execution format.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub labels: Vec<usize>,
    pub inputs: Vec<Vec<FpValue>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn parse_feature(s: &str, fmt: &FpFormat) -> Result<FpValue> {
    let bad = || Error::Parse(format!("bad feature {s:?}"));
    let v = match fmt.name {
        // the standard library parsers round correctly to these formats
        FormatName::Float32 => s.parse::<f32>().map_err(|_| bad())? as f64,
        FormatName::Float64 => s.parse::<f64>().map_err(|_| bad())?,
        _ => return Ok(quantize_input(&[parse_rat(s)?], fmt)?[0]),
    };
    if !v.is_finite() {
        return Err(Error::Domain(format!("feature {s:?} is not finite in {fmt}")));
    }
    Ok(FpValue::new(v, fmt).expect("parsed in the format"))
}

/// CSV with one instance per row: the label, then `n_in` decimal features.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_csv(text: &str, n_in: usize, fmt: &FpFormat) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut labels = Vec::new();
    let mut inputs = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("dataset row {}: {e}", row + 1)))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() != n_in + 1 {
            return Err(Error::Structural(format!("dataset row {} has {} features, expected {n_in}", row + 1, rec.len() - 1)));
        }
        let label = rec[0].parse::<usize>().map_err(|_| Error::Parse(format!("dataset row {}: bad label {:?}", row + 1, &rec[0])))?;
        let x = rec.iter().skip(1).map(|s| parse_feature(s, fmt)).collect::<Result<Vec<_>>>()?;
        labels.push(label);
        inputs.push(x);
    }
    Ok(Dataset { labels, inputs })
}

/// Lowercase hex bit patterns of `x` in `fmt`.
pub fn to_hex(x: &[FpValue], fmt: &FpFormat) -> Vec<String> {
    let width = fmt.hex_digits().expect("executable format");
    x.iter().map(|v| format!("{:0width$x}", fmt.encode_bits(v.value()).expect("member"))).collect()
}

/// Digest of the canonical serialization of a model (without norm cache).
pub fn model_hash(net: &Network) -> String {
    sha256_hex(net.to_json_string(false).expect("serializable").as_bytes())
}

/// Network in `fmt`: `net` itself when its weights already belong to `fmt`,
/// otherwise a copy with every weight rounded to `fmt`.
pub fn network_in(net: &Network, fmt: &FpFormat) -> Result<Option<Network>> {
    if net.format() == fmt {
        Ok(None)
    } else {
        net.cast(fmt).map(Some)
    }
}

#[derive(Clone, Debug)]
pub struct CertifyOptions {
    pub eps: Rat,
    pub format: FpFormat,
    pub mode: Mode,
    pub hi_format: Option<FpFormat>,
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub eps: String,
    pub format: String,
    pub mode: Mode,
    pub hi_format: Option<String>,
    pub gram_iters: u32,
    pub model_sha256: String,
    pub cast_from: Option<String>,
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub true_label: usize,
    /// Floating-point prediction; absent when the overflow check failed.
    pub predicted: Option<usize>,
    pub real_predicted: usize,
    pub real_certified: bool,
    pub verdict: Verdict,
    pub eps: String,
    pub slack_min: Option<f64>,
    #[serde(rename = "E_ctr_max")]
    pub e_ctr_max: Option<f64>,
    #[serde(rename = "E_ball_max")]
    pub e_ball_max: Option<f64>,
    pub overflow_layer: Option<usize>,
    pub hybrid_fallback: bool,
    pub input_hex: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub time_ns: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub instances: usize,
    pub accuracy: f64,
    pub verified_robustness_real: f64,
    pub verified_robustness_fp: f64,
    /// Real minus floating-point verified robustness, in percentage points.
    pub delta_robustness: f64,
    /// Mean `E_ctr + E_ball` over mean `eps L`, both over every instance and
    /// competing class; overflow-risk instances are left out.
    pub margin_increase: Option<f64>,
    pub vra: f64,
    pub certified: usize,
    pub not_certified: usize,
    pub vacuous: usize,
    pub overflow_risk: usize,
    pub overflow_excluded: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_time_ns: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: CertifyConfig,
    pub instances: Vec<InstanceRecord>,
    pub aggregates: Option<Aggregates>,
}

struct Outcome {
    record: InstanceRecord,
    degradation_sum: Dyadic,
    lipschitz_sum: Rat,
}

fn certify_one(cert: &Certifier<'_>, index: usize, label: usize, x: &[FpValue], opts: &CertifyOptions) -> Result<Outcome> {
    let real = real_arith_certify(cert.network(), x, &opts.eps)?;
    let start = Instant::now();
    let c = cert.certify(x, &opts.eps, opts.mode)?;
    let elapsed = start.elapsed().as_nanos() as u64;
    let degradation_sum = c.classes.iter().map(|b| &b.e_ctr + &b.e_ball).sum();
    let lipschitz_sum = c.classes.iter().map(|b| b.lipschitz.clone()).sum();
    let record = InstanceRecord {
        index,
        true_label: label,
        predicted: c.predicted,
        real_predicted: real.predicted,
        real_certified: real.certified,
        verdict: c.verdict,
        eps: rat_to_string(&opts.eps),
        slack_min: c.slack_min().map(rat_to_f64),
        e_ctr_max: c.classes.iter().map(|b| &b.e_ctr).max().map(Dyadic::to_f64_approx),
        e_ball_max: c.classes.iter().map(|b| &b.e_ball).max().map(Dyadic::to_f64_approx),
        overflow_layer: c.overflow.as_ref().map(|f| f.layer),
        hybrid_fallback: c.hybrid_fallback,
        input_hex: to_hex(x, cert.format()),
        time_ns: opts.timing.then_some(elapsed),
    };
    Ok(Outcome { record, degradation_sum, lipschitz_sum })
}

fn fraction(k: usize, n: usize) -> f64 {
    k as f64 / n as f64
}

/// Certify every instance of `data` (already quantized to `opts.format`)
/// against `net`, whose weights must belong to `opts.format`.
pub fn run_certify(net: &Network, data: &Dataset, opts: &CertifyOptions, cast_from: Option<&FpFormat>) -> Result<Report> {
    if opts.eps <= rat_int(0) {
        return Err(Error::Argument("eps must be positive".into()));
    }
    let hi = match opts.mode {
        Mode::Hybrid => Some(opts.hi_format.unwrap_or(FpFormat::FLOAT64)),
        Mode::Standard => opts.hi_format,
    };
    let cert = Certifier::new(net, &opts.format, hi.as_ref())?;
    let outcomes: Vec<Outcome> = data
        .inputs
        .par_iter()
        .zip(&data.labels)
        .enumerate()
        .map(|(i, (x, &label))| certify_one(&cert, i, label, x, opts))
        .collect::<Result<_>>()?;

    let config = CertifyConfig {
        eps: rat_to_string(&opts.eps),
        format: opts.format.to_string(),
        mode: opts.mode,
        hi_format: hi.map(|h| h.to_string()),
        gram_iters: net.gram_iters(),
        model_sha256: model_hash(net),
        cast_from: cast_from.map(|f| f.to_string()),
        timing: opts.timing,
    };
    let n = outcomes.len();
    let aggregates = (n > 0).then(|| {
        let count = |v: Verdict| outcomes.iter().filter(|o| o.record.verdict == v).count();
        let real = outcomes.iter().filter(|o| o.record.real_certified).count();
        let correct = outcomes.iter().filter(|o| o.record.predicted == Some(o.record.true_label)).count();
        let certified = count(Verdict::Certified);
        let vra = outcomes
            .iter()
            .filter(|o| o.record.verdict == Verdict::Certified && o.record.predicted == Some(o.record.true_label))
            .count();
        let usable: Vec<&Outcome> = outcomes.iter().filter(|o| o.record.verdict != Verdict::OverflowRisk).collect();
        let deg: Dyadic = usable.iter().map(|o| &o.degradation_sum).sum();
        let lip: Rat = usable.iter().map(|o| &o.lipschitz_sum).sum();
        let margin_increase = (lip > rat_int(0)).then(|| rat_to_f64(&(deg.to_rat() / (lip * &opts.eps))));
        let real_frac = fraction(real, n);
        let fp_frac = fraction(certified, n);
        Aggregates {
            instances: n,
            accuracy: fraction(correct, n),
            verified_robustness_real: real_frac,
            verified_robustness_fp: fp_frac,
            delta_robustness: rat_to_f64(&(Rat::new((real as i64 - certified as i64).into(), (n as i64).into()) * rat_int(100))),
            margin_increase,
            vra: fraction(vra, n),
            certified,
            not_certified: count(Verdict::NotCertified),
            vacuous: count(Verdict::Vacuous),
            overflow_risk: count(Verdict::OverflowRisk),
            overflow_excluded: n - usable.len(),
            mean_time_ns: opts.timing.then(|| outcomes.iter().filter_map(|o| o.record.time_ns).sum::<u64>() / n as u64),
        }
    });
    Ok(Report { config, instances: outcomes.into_iter().map(|o| o.record).collect(), aggregates })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CexSearchConfig {
    pub format: String,
    pub requested: usize,
    pub starts: usize,
    pub search: SearchConfig,
    pub model_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CexRecord {
    pub start_index: usize,
    pub start_label: Option<usize>,
    pub class0: usize,
    pub class1: usize,
    /// Exact radius, a binary64 value written as a fraction.
    pub eps: String,
    pub eps_approx: f64,
    pub eps_before_expansion: f64,
    pub x0_hex: Vec<String>,
    pub x1_hex: Vec<String>,
    pub verified: bool,
    pub fp_standard: Verdict,
    pub fp_hybrid: Option<Verdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CexReport {
    pub config: CexSearchConfig,
    pub found: usize,
    pub warning: Option<String>,
    pub triples: Vec<CexRecord>,
}

/// Run the counterexample search from every instance of `data` and keep the
/// first `n` verified triples in dataset order. Each triple is also run
/// through the floating-point certificate, which should reject it.
pub fn search_cex(net: &Network, data: &Dataset, fmt: &FpFormat, n: usize, cfg: &SearchConfig) -> Result<CexReport> {
    if n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    let found = search_many(net, &data.inputs, fmt, cfg, n)?;
    let std_cert = Certifier::new(net, fmt, None)?;
    let hybrid_cert = if fmt.p < FpFormat::FLOAT64.p { Some(Certifier::new(net, fmt, Some(&FpFormat::FLOAT64))?) } else { None };
    let triples = found
        .par_iter()
        .map(|f| {
            let t = &f.triple;
            let fp_standard = std_cert.certify(&t.x0, &t.eps, Mode::Standard)?.verdict;
            let fp_hybrid = match &hybrid_cert {
                Some(c) => Some(c.certify(&t.x0, &t.eps, Mode::Hybrid)?.verdict),
                None => None,
            };
            Ok(CexRecord {
                start_index: f.start,
                start_label: data.labels.get(f.start).copied(),
                class0: t.class0,
                class1: t.class1,
                eps: rat_to_string(&t.eps),
                eps_approx: rat_to_f64(&t.eps),
                eps_before_expansion: rat_to_f64(&f.eps_init),
                x0_hex: to_hex(&t.x0, fmt),
                x1_hex: to_hex(&t.x1, fmt),
                verified: verify_triple(net, fmt, t).is_ok(),
                fp_standard,
                fp_hybrid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let warning = (triples.len() < n).then(|| format!("found {} of {n} requested triples", triples.len()));
    Ok(CexReport {
        config: CexSearchConfig {
            format: fmt.to_string(),
            requested: n,
            starts: data.len(),
            search: cfg.clone(),
            model_sha256: model_hash(net),
        },
        found: triples.len(),
        warning,
        triples,
    })
}

/// The compensating-bias model, tagged with the digest of its source.
pub fn make_adversarial(net: &Network, b: &Rat) -> Result<Network> {
    let mut out = crate::cex::inject_bias_adversary(net, b)?;
    out.set_metadata("source_sha256", model_hash(net));
    Ok(out)
}

/// `eps / sqrt_up(n_in)`: never above `eps / sqrt(n_in)`, so the ℓ∞ ball of
/// that radius lies inside the ℓ2 ball of radius `eps`.
pub fn eps_linf_of_l2(eps: &Rat, n_in: usize) -> Result<Rat> {
    if n_in == 0 {
        return Err(Error::Argument("n_in must be at least 1".into()));
    }
    if eps < &rat_int(0) {
        return Err(Error::Argument("eps must be nonnegative".into()));
    }
    let root = sqrt_up(&rat_int(n_in as i64), &crate::exact::default_rel_tol())?;
    Ok(eps / root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, LayerSpec};

    const F32: FpFormat = FpFormat::FLOAT32;

    fn q(s: &str) -> Rat {
        parse_rat(s).unwrap()
    }

    #[test]
    fn csv_parsing() {
        let d = parse_csv("# label, x1, x2\n1, 0.1, 2\n\n0,-3.5e-1, 1e-50\n", 2, &F32).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.inputs[0][0].value(), 0.1f32 as f64);
        assert_eq!(d.inputs[1][1].value(), 0.0);
        assert!(parse_csv("1, 0.1\n", 2, &F32).is_err());
        assert!(parse_csv("x, 0.1, 2\n", 2, &F32).is_err());
        assert!(parse_csv("1, 1e39, 2\n", 2, &F32).is_err());
        let h = parse_csv("0, 0.1, 70000\n", 2, &FpFormat::FLOAT16);
        assert!(h.is_err());
        let h = parse_csv("0, 0.1, 3\n", 2, &FpFormat::FLOAT16).unwrap();
        assert_eq!(h.inputs[0][0].value(), 0.0999755859375);
    }

    #[test]
    fn float32_parser_agrees_with_exact_rounding() {
        for s in ["0.1", "3.4028235677973366e38", "1.4e-45", "7.006492321624085e-46", "0.30000001192092896", "-123.456"] {
            let fast = parse_feature(s, &F32).ok().map(|v| v.value());
            let slow = quantize_input(&[q(s)], &F32).ok().map(|v| v[0].value());
            assert_eq!(fast, slow, "{s}");
        }
    }

    #[test]
    fn eps_linf_examples() {
        assert_eq!(eps_linf_of_l2(&q("0.3"), 1).unwrap(), q("0.3"));
        let v = eps_linf_of_l2(&q("0.3"), 784).unwrap();
        assert!(v <= q("0.3") / rat_int(28));
        assert!((rat_to_f64(&v) - 0.0107142857).abs() < 1e-9);
        let v = eps_linf_of_l2(&q("0.141"), 3072).unwrap();
        assert!(&v * &v * rat_int(3072) <= q("0.141") * q("0.141"));
        assert!((rat_to_f64(&v) - 0.002544).abs() < 1e-5);
        assert!(eps_linf_of_l2(&q("0.3"), 0).is_err());
    }

    fn tiny_net() -> Network {
        Network::new(F32, vec![LayerSpec::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], Activation::Identity)], 6).unwrap()
    }

    fn opts(eps: &str) -> CertifyOptions {
        CertifyOptions { eps: q(eps), format: F32, mode: Mode::Standard, hi_format: None, timing: false }
    }

    #[test]
    fn empty_dataset_has_no_aggregates() {
        let d = parse_csv("", 2, &F32).unwrap();
        let r = run_certify(&tiny_net(), &d, &opts("0.1"), None).unwrap();
        assert!(r.instances.is_empty());
        assert!(r.aggregates.is_none());
    }

    #[test]
    fn single_certified_instance() {
        let net = tiny_net();
        let d = parse_csv("0, 1, 0\n", 2, &F32).unwrap();
        let r = run_certify(&net, &d, &opts("0.1"), None).unwrap();
        let a = r.aggregates.unwrap();
        assert_eq!(r.instances[0].verdict, Verdict::Certified);
        assert_eq!((a.vra, a.verified_robustness_fp, a.verified_robustness_real, a.delta_robustness), (1.0, 1.0, 1.0, 0.0));
        assert!(a.margin_increase.unwrap() > 0.0);
        assert_eq!(r.instances[0].input_hex, vec!["3f800000", "00000000"]);

        let wrong = parse_csv("1, 1, 0\n", 2, &F32).unwrap();
        let a = run_certify(&net, &wrong, &opts("0.1"), None).unwrap().aggregates.unwrap();
        assert_eq!((a.vra, a.verified_robustness_fp), (0.0, 1.0));
    }

    #[test]
    fn reports_are_deterministic() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let net = crate::synth::random_network(&mut rng, &[6, 10, 4], 1.0, 0.2, &F32, 6).unwrap();
        let rows: String = (0..30)
            .map(|i| {
                let x = crate::synth::random_input(&mut rng, 6, -1.0, 1.0, &F32);
                format!("{},{}\n", i % 4, x.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","))
            })
            .collect();
        let d = parse_csv(&rows, 6, &F32).unwrap();
        for mode in [Mode::Standard, Mode::Hybrid] {
            let o = CertifyOptions { mode, ..opts("0.01") };
            let a = serde_json::to_string(&run_certify(&net, &d, &o, None).unwrap()).unwrap();
            let b = serde_json::to_string(&run_certify(&net, &d, &o, None).unwrap()).unwrap();
            assert_eq!(a, b);
            let r: Report = serde_json::from_str(&a).unwrap();
            let agg = r.aggregates.unwrap();
            assert!(agg.vra <= agg.verified_robustness_fp);
            assert!((agg.delta_robustness - 100.0 * (agg.verified_robustness_real - agg.verified_robustness_fp)).abs() < 1e-9);
        }
    }

    #[test]
    fn adversarial_model_records_its_source() {
        let net = Network::new(
            F32,
            vec![
                LayerSpec::new(vec![vec![1.0, 0.5], vec![0.25, 1.0]], vec![0.0; 2], Activation::Relu),
                LayerSpec::new(vec![vec![1.0, -1.0], vec![-0.5, 2.0]], vec![0.0; 2], Activation::Identity),
            ],
            4,
        )
        .unwrap();
        let adv = make_adversarial(&net, &rat_int(1_000_000)).unwrap();
        assert_eq!(adv.metadata().get("source_sha256"), Some(&model_hash(&net)));
        let back = Network::from_json_str(&adv.to_json_string(true).unwrap(), None).unwrap();
        assert_eq!(back.to_json_string(true).unwrap(), adv.to_json_string(true).unwrap());
        assert!(make_adversarial(&net, &q("0.1")).is_err());
    }
}
