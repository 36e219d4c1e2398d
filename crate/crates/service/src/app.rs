use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};

use car_core::TrialConfig;

use crate::error::ApiError;
use crate::store::{Enrolled, Trial, TrialMeta, SCHEMA_VERSION};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// When set, every request must carry `Authorization: Bearer <token>`.
    pub bearer_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateTrialRequest {
    pub config: TrialConfig,
    /// Repeating a create with the same token returns the same trial.
    #[serde(default)]
    pub client_token: Option<String>,
    /// Seed of the uniform stream; drawn from the OS when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialCreated {
    pub schema_version: u32,
    pub id: String,
    pub seed: u64,
    pub config: TrialConfig,
    pub created_at: chrono::DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollRequest {
    pub covariates: Vec<f64>,
    /// May also be sent as an `Idempotency-Key` header.
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

type Shared<T> = Arc<Mutex<T>>;

/// Open trials. Each trial has its own mutex, so enrollments on one trial
/// are strictly serial while different trials proceed in parallel.
pub struct AppState {
    root: PathBuf,
    token: Option<String>,
    trials: RwLock<HashMap<String, Shared<Trial>>>,
    client_tokens: Mutex<HashMap<String, String>>,
}

impl AppState {
    /// Opens the data directory, replaying every stored trial.
    pub fn open(config: &ServiceConfig) -> car_core::Result<Self> {
        let root = config.data_dir.join("trials");
        std::fs::create_dir_all(&root)?;
        let mut trials = HashMap::new();
        let mut client_tokens = HashMap::new();
        let mut dirs: Vec<_> = std::fs::read_dir(&root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("meta.json").exists())
            .collect();
        dirs.sort();
        for dir in dirs {
            let trial = Trial::open(&dir)?;
            let id = trial.meta().id.clone();
            if let Some(tok) = &trial.meta().client_token {
                client_tokens.insert(tok.clone(), id.clone());
            }
            trials.insert(id, Arc::new(Mutex::new(trial)));
        }
        Ok(Self {
            root,
            token: config.bearer_token.clone(),
            trials: RwLock::new(trials),
            client_tokens: Mutex::new(client_tokens),
        })
    }

    fn authorize(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        let Some(expected) = &self.token else {
            return Ok(());
        };
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given == Some(expected.as_str()) {
            Ok(())
        } else {
            Err(ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                None,
                "missing or wrong bearer token",
            ))
        }
    }

    fn trial(&self, id: &str) -> Result<Shared<Trial>, ApiError> {
        self.trials
            .read()
            .expect("trial map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    fn create(&self, req: CreateTrialRequest) -> Result<(StatusCode, TrialCreated), ApiError> {
        // Held across creation so two requests with one token cannot both create.
        let mut tokens = self.client_tokens.lock().expect("token lock");
        if let Some(tok) = &req.client_token {
            if let Some(id) = tokens.get(tok) {
                let trial = self.trial(id)?;
                let trial = trial.lock().expect("trial lock");
                let meta = trial.meta();
                if meta.config != req.config || req.seed.is_some_and(|s| s != meta.seed) {
                    return Err(ApiError::conflict(
                        "client_token",
                        "client token was already used for a different trial",
                    ));
                }
                return Ok((StatusCode::OK, created(meta)));
            }
        }
        let meta = TrialMeta {
            schema_version: SCHEMA_VERSION,
            id: uuid::Uuid::new_v4().simple().to_string(),
            config: req.config,
            seed: req.seed.unwrap_or_else(rand::random),
            client_token: req.client_token.clone(),
            created_at: Utc::now(),
        };
        let trial = Trial::create(&self.root, meta)?;
        let body = created(trial.meta());
        self.trials
            .write()
            .expect("trial map lock")
            .insert(body.id.clone(), Arc::new(Mutex::new(trial)));
        if let Some(tok) = req.client_token {
            tokens.insert(tok, body.id.clone());
        }
        Ok((StatusCode::CREATED, body))
    }
}

fn created(meta: &TrialMeta) -> TrialCreated {
    TrialCreated {
        schema_version: meta.schema_version,
        id: meta.id.clone(),
        seed: meta.seed,
        config: meta.config.clone(),
        created_at: meta.created_at,
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", None, e.to_string())
    })
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::storage(format!("worker failed: {e}")))?
}

async fn create_trial(
    State(app): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    app.authorize(&headers)?;
    let req: CreateTrialRequest = parse(&body)?;
    let (status, created) = blocking(move || app.create(req)).await?;
    Ok((status, Json(created)).into_response())
}

async fn enroll(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    app.authorize(&headers)?;
    let trial = app.trial(&id)?;
    let req: EnrollRequest = parse(&body)?;
    let header_key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let key = match (req.idempotency_key, header_key) {
        (Some(a), Some(b)) if a != b => {
            return Err(ApiError::invalid(
                "idempotency_key",
                "body and Idempotency-Key header disagree",
            ))
        }
        (Some(k), _) | (None, Some(k)) if !k.is_empty() => k,
        _ => return Err(ApiError::invalid("idempotency_key", "an idempotency key is required")),
    };
    let covariates = req.covariates;
    let outcome = blocking(move || trial.lock().expect("trial lock").enroll(&covariates, &key)).await?;
    Ok(match outcome {
        Enrolled::New(r) => (StatusCode::CREATED, Json(r)).into_response(),
        Enrolled::Replayed(r) => (StatusCode::OK, Json(r)).into_response(),
    })
}

async fn status(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    app.authorize(&headers)?;
    let trial = app.trial(&id)?;
    let snapshot = trial.lock().expect("trial lock").status();
    Ok(Json(snapshot).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/trials", post(create_trial))
        .route("/trials/{id}/enrollments", post(enroll))
        .route("/trials/{id}/status", get(status))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let state = Arc::new(AppState::open(&config).map_err(std::io::Error::other)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, data = %config.data_dir.display(), "allocation service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Runs [`serve`] on a fresh multi-threaded runtime.
pub fn serve_blocking(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(config, addr))
}
