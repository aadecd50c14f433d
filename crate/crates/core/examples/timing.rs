//! Per-instance certification time on a random MNIST-shaped float32 net.

use std::time::Instant;

use fpcert_core::certifier::{Certifier, Mode};
use fpcert_core::exact::parse_rat;
use fpcert_core::synth::{random_input, random_network};
use fpcert_core::FpFormat;
use rand::SeedableRng;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let f32 = FpFormat::FLOAT32;
    let mut dims = vec![784];
    dims.extend([128; 8]);
    dims.push(10);

    let t = Instant::now();
    let net = random_network(&mut rng, &dims, 0.1, 0.01, &f32, 20).unwrap();
    println!("norms: {:?}", t.elapsed());
    let t = Instant::now();
    let cert = Certifier::new(&net, &f32, Some(&FpFormat::FLOAT64)).unwrap();
    for j in 1..10 {
        cert.pair_coeffs(0, j).unwrap();
    }
    println!("setup: {:?}", t.elapsed());

    let inputs: Vec<_> = (0..20).map(|_| random_input(&mut rng, 784, 0.0, 1.0, &f32)).collect();
    let eps = parse_rat("0.3").unwrap();
    for mode in [Mode::Standard, Mode::Hybrid] {
        let t = Instant::now();
        for x in &inputs {
            std::hint::black_box(cert.certify(x, &eps, mode).unwrap());
        }
        println!("{mode:?}: {:?} per instance", t.elapsed() / inputs.len() as u32);
    }
}
