//! HTTP/JSON front end for `fpcert-core`.
//!
//! Models are uploaded once and addressed by the SHA-256 digest of their
//! canonical serialization; norm bounds are computed at upload and reused by
//! every later request. All numeric work runs on the blocking pool.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/health` | | `Health` |
//! | POST | `/models?gram_iters=K` | model file | `ModelInfo` |
//! | GET | `/models/{id}` | | model file with embedded norms |
//! | POST | `/certify` | `CertifyRequest` | `Report` |
//! | POST | `/search-cex` | `SearchCexRequest` | `CexReport` |
//! | POST | `/adversarial` | `AdversarialRequest` | `AdversarialResponse` |
//! | POST | `/eps-linf` | `EpsLinfRequest` | `EpsLinfResponse` |

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;

use fpcert_core::api::{
    AdversarialRequest, AdversarialResponse, CertifyRequest, EpsLinfRequest, EpsLinfResponse, ErrorBody, Health, ModelInfo,
    SearchCexRequest, UploadQuery,
};
use fpcert_core::batch::{self, CertifyOptions, CexReport, Report};
use fpcert_core::exact::{parse_rat, rat_to_f64, rat_to_string};
use fpcert_core::network::ModelFile;
use fpcert_core::{Error, FpFormat, Network};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(what: String) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, message: what }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            Error::Overflow { .. } | Error::SearchFailure(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError { status, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Uploaded models, plus copies rounded to other execution formats.
#[derive(Default)]
pub struct AppState {
    models: RwLock<HashMap<String, Arc<Network>>>,
    casts: RwLock<HashMap<(String, String), Arc<Network>>>,
}

impl AppState {
    fn model(&self, id: &str) -> Result<Arc<Network>, ApiError> {
        self.models
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no model with id {id}")))
    }

    fn insert(&self, net: Network) -> ModelInfo {
        let id = batch::model_hash(&net);
        let info = ModelInfo::of(id.clone(), &net);
        self.models.write().unwrap().entry(id).or_insert_with(|| Arc::new(net));
        info
    }

    /// `id` executed in `fmt`, and the format it was rounded from if a cast
    /// was needed.
    fn model_in(&self, id: &str, fmt: Option<&FpFormat>) -> Result<(Arc<Network>, Option<FpFormat>), ApiError> {
        let net = self.model(id)?;
        let Some(fmt) = fmt.filter(|f| *f != net.format()) else { return Ok((net, None)) };
        let key = (id.to_string(), fmt.to_string());
        if let Some(c) = self.casts.read().unwrap().get(&key) {
            return Ok((c.clone(), Some(*net.format())));
        }
        let cast = Arc::new(net.cast(fmt)?);
        self.casts.write().unwrap().insert(key, cast.clone());
        Ok((cast, Some(*net.format())))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json),
        Err(e) => Err(ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: format!("worker failed: {e}") }),
    }
}

fn parse_format(s: &Option<String>) -> Result<Option<FpFormat>, ApiError> {
    s.as_deref().map(str::parse::<FpFormat>).transpose().map_err(ApiError::from)
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into(), version: env!("CARGO_PKG_VERSION").into() })
}

async fn upload(State(st): State<Arc<AppState>>, Query(q): Query<UploadQuery>, Json(file): Json<ModelFile>) -> ApiResult<ModelInfo> {
    blocking(move || {
        let net = Network::from_model_file(file, q.gram_iters)?;
        let info = st.insert(net);
        tracing::info!(id = %info.id, depth = info.depth, "model loaded");
        Ok(info)
    })
    .await
}

async fn model_file(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<ModelFile> {
    let net = st.model(&id)?;
    blocking(move || Ok(net.to_model_file(true, true))).await
}

async fn certify(State(st): State<Arc<AppState>>, Json(req): Json<CertifyRequest>) -> ApiResult<Report> {
    blocking(move || {
        let fmt = parse_format(&req.format)?;
        let (net, cast_from) = st.model_in(&req.model_id, fmt.as_ref())?;
        let format = *net.format();
        let data = batch::parse_csv(&req.data_csv, net.n_in(), &format)?;
        let opts = CertifyOptions {
            eps: parse_rat(&req.eps)?,
            format,
            mode: req.mode,
            hi_format: parse_format(&req.hi_format)?,
            timing: req.timing,
        };
        Ok(batch::run_certify(&net, &data, &opts, cast_from.as_ref())?)
    })
    .await
}

async fn search_cex(State(st): State<Arc<AppState>>, Json(req): Json<SearchCexRequest>) -> ApiResult<CexReport> {
    blocking(move || {
        let fmt = parse_format(&req.format)?;
        let (net, _) = st.model_in(&req.model_id, fmt.as_ref())?;
        let format = *net.format();
        let data = batch::parse_csv(&req.data_csv, net.n_in(), &format)?;
        let cfg = req.config.unwrap_or_default();
        Ok(batch::search_cex(&net, &data, &format, req.n, &cfg)?)
    })
    .await
}

async fn adversarial(State(st): State<Arc<AppState>>, Json(req): Json<AdversarialRequest>) -> ApiResult<AdversarialResponse> {
    let net = st.model(&req.model_id)?;
    blocking(move || {
        let adv = batch::make_adversarial(&net, &parse_rat(&req.bias)?)?;
        let file = adv.to_model_file(true, true);
        let model = st.insert(adv);
        Ok(AdversarialResponse { model, file })
    })
    .await
}

async fn eps_linf(Json(req): Json<EpsLinfRequest>) -> ApiResult<EpsLinfResponse> {
    let q = batch::eps_linf_of_l2(&parse_rat(&req.eps)?, req.n_in)?;
    Ok(Json(EpsLinfResponse { eps_linf: rat_to_string(&q), approx: rat_to_f64(&q) }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", post(upload))
        .route("/models/{id}", get(model_file))
        .route("/certify", post(certify))
        .route("/search-cex", post(search_cex))
        .route("/adversarial", post(adversarial))
        .route("/eps-linf", post(eps_linf))
        .layer(DefaultBodyLimit::disable())
        .with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(AppState::default()))).await
}

/// Bind `addr` and serve in a background task; returns the bound address.
pub async fn spawn(addr: &str) -> std::io::Result<std::net::SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener).await {
            tracing::error!("server stopped: {e}");
        }
    });
    Ok(local)
}
