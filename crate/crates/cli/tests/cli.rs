use std::path::PathBuf;
use std::process::Command;

use fpcert_core::batch::{CexReport, Report};
use fpcert_core::certifier::Verdict;
use fpcert_core::network::{Activation, LayerSpec};
use fpcert_core::synth::{random_input, random_network};
use fpcert_core::{FpFormat, Network};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Dir(PathBuf);

impl Dir {
    fn new(tag: &str) -> Self {
        let p = std::env::temp_dir().join(format!("fpcert-cli-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&p).unwrap();
        Dir(p)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }
}

impl Drop for Dir {
    fn drop(&mut self) {
        std::fs::remove_dir_all(&self.0).ok();
    }
}

fn fpcert(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fpcert")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fpcert(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_dataset(path: &PathBuf, rows: &[(usize, Vec<f64>)]) {
    let text: String = rows
        .iter()
        .map(|(l, x)| format!("{l},{}\n", x.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")))
        .collect();
    std::fs::write(path, text).unwrap();
}

#[test]
fn certify_writes_a_deterministic_report() {
    let dir = Dir::new("certify");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f32 = FpFormat::FLOAT32;
    let net = random_network(&mut rng, &[5, 12, 3], 1.0, 0.2, &f32, 8).unwrap();
    net.save(dir.path("m.json"), false).unwrap();
    let rows: Vec<(usize, Vec<f64>)> = (0..12).map(|i| (i % 3, random_input(&mut rng, 5, -1.0, 1.0, &f32).iter().map(|v| v.value()).collect())).collect();
    write_dataset(&dir.path("d.csv"), &rows);

    let m = dir.path("m.json");
    let d = dir.path("d.csv");
    let (r1, r2) = (dir.path("r1.json"), dir.path("r2.json"));
    for (out, mode) in [(&r1, "standard"), (&r2, "standard")] {
        ok(&["certify", "--model", m.to_str().unwrap(), "--data", d.to_str().unwrap(), "--eps", "0.01", "--mode", mode, "--out", out.to_str().unwrap()]);
    }
    let a = std::fs::read(&r1).unwrap();
    assert_eq!(a, std::fs::read(&r2).unwrap());
    let report: Report = serde_json::from_slice(&a).unwrap();
    assert_eq!(report.instances.len(), 12);
    assert_eq!(report.config.eps, "1/100");
    let agg = report.aggregates.unwrap();
    assert!(agg.vra <= agg.verified_robustness_fp);

    let hybrid = ok(&["certify", "--model", m.to_str().unwrap(), "--data", d.to_str().unwrap(), "--eps", "1/100", "--mode", "hybrid", "--format", "float16"]);
    let report: Report = serde_json::from_str(&hybrid).unwrap();
    assert_eq!(report.config.format, "float16");
    assert_eq!(report.config.cast_from.as_deref(), Some("float32"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = Dir::new("errors");
    std::fs::write(dir.path("bad.json"), "{\"format\": \"float32\", \"layers\": []").unwrap();
    std::fs::write(dir.path("d.csv"), "0,1\n").unwrap();
    let out = fpcert(&["certify", "--model", dir.path("bad.json").to_str().unwrap(), "--data", dir.path("d.csv").to_str().unwrap(), "--eps", "0.1"]);
    assert!(!out.status.success());
    let out = fpcert(&["certify", "--model", dir.path("missing.json").to_str().unwrap(), "--data", "x", "--eps", "0.1"]);
    assert!(!out.status.success());

    let sig = r#"{"format": "float32", "layers": [{"weights_hex": [["3f800000"], ["3f800000"]], "activation": "sigmoid"}]}"#;
    std::fs::write(dir.path("sig.json"), sig).unwrap();
    let out = fpcert(&["norms", "--model", dir.path("sig.json").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigmoid"));
}

#[test]
fn eps_linf_prints_the_exact_radius() {
    let out = ok(&["eps-linf", "--eps", "0.3", "--n-in", "1"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["eps_linf"], "3/10");
    let out = ok(&["eps-linf", "--eps", "0.3", "--n-in", "784"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["approx"].as_f64().unwrap() - 0.3 / 28.0).abs() < 1e-12);
}

#[test]
fn norms_and_adversarial_models_round_trip() {
    let dir = Dir::new("models");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = random_network(&mut rng, &[4, 6, 6, 3], 1.0, 0.0, &FpFormat::FLOAT32, 6).unwrap();
    net.save(dir.path("m.json"), false).unwrap();
    let m = dir.path("m.json");
    ok(&["norms", "--model", m.to_str().unwrap(), "--out", dir.path("n.json").to_str().unwrap()]);
    let with_norms = Network::load(dir.path("n.json")).unwrap();
    for (a, b) in net.layers().iter().zip(with_norms.layers()) {
        assert_eq!(a.norms(), b.norms());
    }

    ok(&["make-adversarial", "--model", m.to_str().unwrap(), "--bias", "1e6", "--out", dir.path("adv.json").to_str().unwrap()]);
    let adv = Network::load(dir.path("adv.json")).unwrap();
    assert!(adv.layers()[1].bias_f64().iter().all(|&b| b == 1e6));
    assert!(adv.metadata().contains_key("source_sha256"));
    assert_eq!(adv.margin_lipschitz(0, 1).unwrap(), net.margin_lipschitz(0, 1).unwrap());
    let text = std::fs::read_to_string(dir.path("adv.json")).unwrap();
    assert_eq!(text, adv.to_json_string(true).unwrap() + "\n");

    ok(&["make-adversarial", "--model", m.to_str().unwrap(), "--bias", "0", "--out", dir.path("zero.json").to_str().unwrap()]);
    let zero = Network::load(dir.path("zero.json")).unwrap();
    assert!(zero.layers().iter().all(|l| l.bias_f64().iter().all(|&b| b == 0.0)));

    let out = fpcert(&["make-adversarial", "--model", m.to_str().unwrap(), "--bias", "0.1", "--out", dir.path("bad.json").to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn search_cex_on_an_absorbing_net() {
    let dir = Dir::new("cex");
    let f32 = FpFormat::FLOAT32;
    let net = Network::new(
        f32,
        vec![
            LayerSpec::new(vec![vec![1.0]], vec![1024.0], Activation::Relu),
            LayerSpec::new(vec![vec![1.0], vec![-1.0]], vec![-1024.0, 1024.0], Activation::Identity),
        ],
        8,
    )
    .unwrap();
    net.save(dir.path("m.json"), false).unwrap();
    write_dataset(&dir.path("d.csv"), &[(0, vec![0.3]), (0, vec![0.7])]);
    let out = ok(&["search-cex", "--model", dir.path("m.json").to_str().unwrap(), "--data", dir.path("d.csv").to_str().unwrap(), "--n", "2"]);
    let report: CexReport = serde_json::from_str(&out).unwrap();
    assert!(report.found >= 1);
    for t in &report.triples {
        assert!(t.verified);
        assert_ne!(t.fp_standard, Verdict::Certified);
        assert_ne!(t.fp_hybrid, Some(Verdict::Certified));
    }

    let constant = Network::new(f32, vec![LayerSpec::new(vec![vec![0.0]; 2], vec![1.0, 0.0], Activation::Identity)], 2).unwrap();
    constant.save(dir.path("c.json"), false).unwrap();
    let out = ok(&["search-cex", "--model", dir.path("c.json").to_str().unwrap(), "--data", dir.path("d.csv").to_str().unwrap(), "--n", "1"]);
    let report: CexReport = serde_json::from_str(&out).unwrap();
    assert_eq!(report.found, 0);
    assert!(report.warning.is_some());
}
