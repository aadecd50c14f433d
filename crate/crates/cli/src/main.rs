use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fpcert_client::Client;
use fpcert_core::api::{AdversarialRequest, CertifyRequest, EpsLinfRequest, ModelInfo, SearchCexRequest};
use fpcert_core::certifier::Mode;
use fpcert_core::cex::SearchConfig;
use fpcert_core::network::ModelFile;

/// Sound l2 robustness certification of ReLU networks under floating-point
/// execution.
#[derive(Parser, Debug)]
#[command(name = "fpcert", version)]
struct Cli {
    /// Use a running service instead of an in-process one.
    #[arg(long, global = true, value_name = "URL")]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certify every instance of a dataset and write a JSON report.
    Certify(CertifyArgs),
    /// Search for inputs that real-arithmetic certification wrongly accepts.
    SearchCex(SearchArgs),
    /// Write the compensating-bias adversarial copy of a model.
    MakeAdversarial(AdversarialArgs),
    /// Compute the norm cache and write the model with it embedded.
    Norms(NormsArgs),
    /// Largest l∞ radius whose ball fits in an l2 ball.
    EpsLinf(EpsLinfArgs),
    /// Run the HTTP service in the foreground.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct CertifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Radius, as a decimal or a fraction.
    #[arg(long)]
    eps: String,
    /// Execution format; defaults to the model's storage format.
    #[arg(long)]
    format: Option<String>,
    #[arg(long, default_value = "standard")]
    mode: Mode,
    /// Reference format for hybrid mode.
    #[arg(long)]
    hi_format: Option<String>,
    #[arg(long)]
    gram_iters: Option<u32>,
    /// Record per-instance wall-clock time (makes the report nondeterministic).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Starting points, in the dataset CSV format.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    format: Option<String>,
    /// Number of triples wanted.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long)]
    gram_iters: Option<u32>,
    #[arg(long, default_value_t = 200)]
    max_deepfool_iters: u32,
    #[arg(long, default_value_t = 0.02)]
    overshoot: f64,
    #[arg(long, default_value_t = 64)]
    bisection_iters: u32,
    #[arg(long, default_value_t = 48)]
    expansion_iters: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AdversarialArgs {
    #[arg(long)]
    model: PathBuf,
    /// Bias B added to every unit of the last hidden layer.
    #[arg(long, default_value = "1000000")]
    bias: String,
    #[arg(long)]
    gram_iters: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct NormsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    gram_iters: Option<u32>,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EpsLinfArgs {
    #[arg(long)]
    eps: String,
    #[arg(long)]
    n_in: usize,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_model(path: &Path) -> Result<ModelFile> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing model {}", path.display()))
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

async fn upload(client: &Client, model: &Path, gram_iters: Option<u32>) -> Result<ModelInfo> {
    Ok(client.upload_model(&read_model(model)?, gram_iters).await?)
}

async fn run(client: &Client, command: Command) -> Result<()> {
    match command {
        Command::Certify(a) => {
            let info = upload(client, &a.model, a.gram_iters).await?;
            let req = CertifyRequest {
                model_id: info.id,
                data_csv: read(&a.data)?,
                eps: a.eps,
                format: a.format,
                mode: a.mode,
                hi_format: a.hi_format,
                timing: a.timing,
            };
            let report = client.certify(&req).await?;
            if let Some(g) = &report.aggregates {
                eprintln!(
                    "{} instances: real {:.2}%, fp {:.2}%, delta {:.2} pp, vra {:.2}%, {} vacuous, {} overflow",
                    g.instances,
                    100.0 * g.verified_robustness_real,
                    100.0 * g.verified_robustness_fp,
                    g.delta_robustness,
                    100.0 * g.vra,
                    g.vacuous,
                    g.overflow_risk
                );
            }
            emit(&report, a.out.as_deref())
        }
        Command::SearchCex(a) => {
            let info = upload(client, &a.model, a.gram_iters).await?;
            let config = SearchConfig {
                max_deepfool_iters: a.max_deepfool_iters,
                overshoot: a.overshoot,
                bisection_iters: a.bisection_iters,
                expansion_iters: a.expansion_iters,
            };
            let req = SearchCexRequest { model_id: info.id, data_csv: read(&a.data)?, format: a.format, n: a.n, config: Some(config) };
            let report = client.search_cex(&req).await?;
            if let Some(w) = &report.warning {
                eprintln!("warning: {w}");
            }
            let rejected = report.triples.iter().filter(|t| t.fp_standard != fpcert_core::certifier::Verdict::Certified).count();
            eprintln!("{} triples, {rejected} rejected by the floating-point certificate", report.found);
            emit(&report, a.out.as_deref())
        }
        Command::MakeAdversarial(a) => {
            let info = upload(client, &a.model, a.gram_iters).await?;
            let resp = client.adversarial(&AdversarialRequest { model_id: info.id, bias: a.bias }).await?;
            eprintln!("adversarial model {}", resp.model.id);
            emit(&resp.file, Some(&a.out))
        }
        Command::Norms(a) => {
            let info = upload(client, &a.model, a.gram_iters).await?;
            let file = client.model_file(&info.id).await?;
            emit(&file, a.out.as_deref())
        }
        Command::EpsLinf(a) => {
            let resp = client.eps_linf(&EpsLinfRequest { eps: a.eps, n_in: a.n_in }).await?;
            emit(&resp, None)
        }
        Command::Serve(_) => bail!("serve runs without a client"),
    }
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Command::Serve(a) = &cli.command {
        let listener = tokio::net::TcpListener::bind(&a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        fpcert_service::serve(listener).await?;
        return Ok(());
    }
    let client = match &cli.server {
        Some(url) => Client::new(url.clone()),
        None => Client::new(format!("http://{}", fpcert_service::spawn("127.0.0.1:0").await?)),
    };
    run(&client, cli.command).await
}
