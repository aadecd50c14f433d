use fpcert_client::{Client, ClientError};
use fpcert_core::api::{AdversarialRequest, CertifyRequest, EpsLinfRequest, SearchCexRequest};
use fpcert_core::batch::{self, CertifyOptions};
use fpcert_core::certifier::Mode;
use fpcert_core::exact::parse_rat;
use fpcert_core::synth::{random_input, random_network};
use fpcert_core::{FpFormat, Network};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

async fn client() -> Client {
    let addr = fpcert_service::spawn("127.0.0.1:0").await.unwrap();
    Client::new(format!("http://{addr}/"))
}

fn dataset(rng: &mut ChaCha8Rng, n_in: usize, rows: usize, fmt: &FpFormat) -> String {
    (0..rows)
        .map(|i| {
            let x = random_input(rng, n_in, 0.0, 1.0, fmt);
            format!("{},{}\n", i % 3, x.iter().map(|v| format!("{:?}", v.value())).collect::<Vec<_>>().join(","))
        })
        .collect()
}

fn status(e: ClientError) -> u16 {
    match e {
        ClientError::Api { status, .. } => status,
        other => panic!("unexpected {other}"),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_model_registry() {
    let c = client().await;
    assert_eq!(c.health().await.unwrap().status, "ok");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = random_network(&mut rng, &[4, 8, 3], 1.0, 0.1, &FpFormat::FLOAT32, 6).unwrap();
    let info = c.upload_model(&net.to_model_file(false, false), None).await.unwrap();
    assert_eq!(info.id, batch::model_hash(&net));
    assert_eq!((info.n_in, info.n_out, info.depth, info.gram_iters), (4, 3, 2, 6));
    assert_eq!(c.upload_model(&net.to_model_file(false, false), None).await.unwrap(), info);

    let file = c.model_file(&info.id).await.unwrap();
    assert_eq!(file, net.to_model_file(true, true));
    let again = Network::from_model_file(file, None).unwrap();
    assert_eq!(again.margin_lipschitz(0, 2).unwrap(), net.margin_lipschitz(0, 2).unwrap());

    let other = c.upload_model(&net.to_model_file(false, false), Some(2)).await.unwrap();
    assert_eq!(other.gram_iters, 2);

    assert_eq!(status(c.model_file("nope").await.unwrap_err()), 404);
    let mut bad = net.to_model_file(false, false);
    bad.layers[1].activation = "sigmoid".into();
    assert_eq!(status(c.upload_model(&bad, None).await.unwrap_err()), 400);
}

#[tokio::test(flavor = "multi_thread")]
async fn certify_matches_the_library() {
    let c = client().await;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f32 = FpFormat::FLOAT32;
    let net = random_network(&mut rng, &[6, 16, 16, 3], 1.0, 0.1, &f32, 8).unwrap();
    let info = c.upload_model(&net.to_model_file(false, false), None).await.unwrap();
    let csv = dataset(&mut rng, 6, 20, &f32);

    for mode in [Mode::Standard, Mode::Hybrid] {
        let req = CertifyRequest {
            model_id: info.id.clone(),
            data_csv: csv.clone(),
            eps: "1/50".into(),
            format: None,
            mode,
            hi_format: None,
            timing: false,
        };
        let remote = c.certify(&req).await.unwrap();
        let data = batch::parse_csv(&csv, 6, &f32).unwrap();
        let opts = CertifyOptions { eps: parse_rat("0.02").unwrap(), format: f32, mode, hi_format: None, timing: false };
        let local = batch::run_certify(&net, &data, &opts, None).unwrap();
        assert_eq!(serde_json::to_value(&remote).unwrap(), serde_json::to_value(&local).unwrap());
    }

    let cast = CertifyRequest {
        model_id: info.id.clone(),
        data_csv: csv.clone(),
        eps: "0.02".into(),
        format: Some("bfloat16".into()),
        mode: Mode::Standard,
        hi_format: None,
        timing: true,
    };
    let r = c.certify(&cast).await.unwrap();
    assert_eq!(r.config.format, "bfloat16");
    assert_eq!(r.config.cast_from.as_deref(), Some("float32"));
    assert!(r.instances.iter().all(|i| i.time_ns.is_some()));

    let bad_eps = CertifyRequest { eps: "-1".into(), ..cast.clone() };
    assert_eq!(status(c.certify(&bad_eps).await.unwrap_err()), 400);
    let bad_csv = CertifyRequest { data_csv: "0,1,2\n".into(), ..cast.clone() };
    assert_eq!(status(c.certify(&bad_csv).await.unwrap_err()), 400);
    let missing = CertifyRequest { model_id: "x".into(), ..cast };
    assert_eq!(status(c.certify(&missing).await.unwrap_err()), 404);
}

#[tokio::test(flavor = "multi_thread")]
async fn adversarial_search_and_eps_linf() {
    let c = client().await;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f32 = FpFormat::FLOAT32;
    let net = random_network(&mut rng, &[3, 8, 8, 3], 1.0, 0.0, &f32, 6).unwrap();
    let info = c.upload_model(&net.to_model_file(false, false), None).await.unwrap();

    let adv = c.adversarial(&AdversarialRequest { model_id: info.id.clone(), bias: "1000000".into() }).await.unwrap();
    assert_ne!(adv.model.id, info.id);
    assert_eq!(c.model_file(&adv.model.id).await.unwrap(), adv.file);
    let local = batch::make_adversarial(&net, &parse_rat("1000000").unwrap()).unwrap();
    assert_eq!(adv.file, local.to_model_file(true, true));
    let bad = AdversarialRequest { model_id: info.id.clone(), bias: "0.1".into() };
    assert_eq!(status(c.adversarial(&bad).await.unwrap_err()), 400);

    let csv = dataset(&mut rng, 3, 4, &f32);
    let req = SearchCexRequest { model_id: info.id.clone(), data_csv: csv, format: None, n: 1, config: None };
    let report = c.search_cex(&req).await.unwrap();
    assert!(report.found <= 1);
    assert!(report.triples.iter().all(|t| t.verified));

    let r = c.eps_linf(&EpsLinfRequest { eps: "1".into(), n_in: 4 }).await.unwrap();
    assert_eq!(r.eps_linf, "1/2");
    assert_eq!(r.approx, 0.5);
    assert_eq!(status(c.eps_linf(&EpsLinfRequest { eps: "1".into(), n_in: 0 }).await.unwrap_err()), 400);
}
