//! Wire-compatible HTTP frontend for the scripted backend.
//!
//! Serializes the same request/response structs as [`crate::client`], so
//! integration tests drive real HTTP round-trips against the exact
//! protocol a production endpoint speaks. By default the server strips
//! matched stop strings from output, like vLLM, which exercises the
//! client's synthetic re-append path.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tracing::info;

use crate::client::{
    prob_to_logprob, Choice, CompletionsRequest, CompletionsResponse, ErrorBody, ErrorResponse,
    ModelEntry, ModelsResponse, StopReason, WireLogProbs, WireUsage,
};
use crate::error::{Error, Result};

use super::MockBackend;

#[derive(Debug, Clone, Copy, Default)]
pub struct ServeOptions {
    /// 0 binds an ephemeral port.
    pub port: u16,
    /// Emit matched stop strings in the response instead of stripping
    /// them. Off by default to mirror common server behavior.
    pub include_stop_in_output: bool,
}

struct ServerState {
    backend: Arc<MockBackend>,
    include_stop_in_output: bool,
}

/// Running server plus its shutdown handle. Dropping the handle stops
/// the server.
pub struct MockServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl MockServerHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for MockServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

/// Start the server on a background thread with its own runtime and
/// return once the listener is bound.
pub fn spawn_server(backend: Arc<MockBackend>, opts: ServeOptions) -> Result<MockServerHandle> {
    let (addr_tx, addr_rx) = std::sync::mpsc::channel::<Result<SocketAddr>>();
    let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let runtime = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = addr_tx.send(Err(Error::Endpoint(format!("runtime: {e}"))));
                return;
            }
        };
        runtime.block_on(async move {
            let bind = SocketAddr::from(([127, 0, 0, 1], opts.port));
            let listener = match tokio::net::TcpListener::bind(bind).await {
                Ok(l) => l,
                Err(e) => {
                    let _ = addr_tx.send(Err(Error::Endpoint(format!("bind {bind}: {e}"))));
                    return;
                }
            };
            let addr = listener.local_addr().expect("bound listener has an address");
            let _ = addr_tx.send(Ok(addr));
            let app = router(backend, opts.include_stop_in_output);
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = shutdown_rx.await;
                })
                .await;
        });
    });
    let addr = addr_rx
        .recv()
        .map_err(|_| Error::Endpoint("mock server thread died before binding".into()))??;
    Ok(MockServerHandle {
        addr,
        shutdown: Some(shutdown_tx),
        thread: Some(thread),
    })
}

/// Run the server on the current thread until interrupted. Used by the
/// `mock-serve` CLI command.
pub fn serve_blocking(backend: Arc<MockBackend>, opts: ServeOptions) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Endpoint(format!("runtime: {e}")))?;
    runtime.block_on(async move {
        let bind = SocketAddr::from(([127, 0, 0, 1], opts.port));
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| Error::Endpoint(format!("bind {bind}: {e}")))?;
        let addr = listener.local_addr().expect("bound listener has an address");
        info!(%addr, models = ?backend.model_ids(), "mock server listening");
        let app = router(backend, opts.include_stop_in_output);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::Endpoint(format!("serve: {e}")))
    })
}

fn router(backend: Arc<MockBackend>, include_stop_in_output: bool) -> Router {
    let state = Arc::new(ServerState {
        backend,
        include_stop_in_output,
    });
    Router::new()
        .route("/v1/completions", post(completions))
        .route("/v1/models", get(models))
        .with_state(state)
}

async fn models(State(state): State<Arc<ServerState>>) -> Json<ModelsResponse> {
    Json(ModelsResponse {
        data: state
            .backend
            .model_ids()
            .into_iter()
            .map(|id| ModelEntry { id })
            .collect(),
    })
}

async fn completions(
    State(state): State<Arc<ServerState>>,
    Json(request): Json<CompletionsRequest>,
) -> Response {
    let result = if request.echo {
        echo_response(&state, &request)
    } else {
        generate_response(&state, &request).await
    };
    match result {
        Ok(response) => Json(response).into_response(),
        Err(err) => error_response(err),
    }
}

async fn generate_response(
    state: &ServerState,
    request: &CompletionsRequest,
) -> Result<CompletionsResponse> {
    let top_k = request.logprobs.unwrap_or(2);
    let served = state.backend.generate(
        &request.model,
        &request.prompt,
        &request.stop,
        request.max_tokens,
        top_k,
        state.include_stop_in_output,
    )?;
    if !served.per_token_latency.is_zero() {
        tokio::time::sleep(served.per_token_latency * served.tokens.len() as u32).await;
    }

    let (finish_reason, stop_reason) = match &served.stop_reason {
        StopReason::StopSurface(surface) => ("stop", Some(surface.clone())),
        StopReason::MaxTokens => ("length", None),
        StopReason::EndOfSequence => ("stop", None),
    };
    let tokens: Vec<String> = served.tokens.iter().map(|t| t.surface.clone()).collect();
    let top_logprobs: Vec<Option<BTreeMap<String, f64>>> = served
        .tokens
        .iter()
        .map(|t| Some(logprob_map(&t.top_probs)))
        .collect();
    let token_logprobs: Vec<Option<f64>> = served
        .tokens
        .iter()
        .map(|t| Some(prob_to_logprob(t.top_probs[0].1)))
        .collect();
    let completion_tokens = tokens.len();

    Ok(CompletionsResponse {
        model: request.model.clone(),
        choices: vec![Choice {
            index: 0,
            text: tokens.concat(),
            finish_reason: finish_reason.to_string(),
            stop_reason,
            logprobs: Some(WireLogProbs {
                tokens,
                token_logprobs,
                top_logprobs,
            }),
        }],
        usage: WireUsage {
            prompt_tokens: served.prompt_tokens,
            completion_tokens,
            total_tokens: served.prompt_tokens + completion_tokens,
        },
    })
}

/// Echo mode: score the prompt itself, position 0 reported as null.
fn echo_response(state: &ServerState, request: &CompletionsRequest) -> Result<CompletionsResponse> {
    let top_k = request.logprobs.unwrap_or(2);
    let scored = state.backend.rescore(&request.model, &request.prompt, top_k)?;

    let tokens: Vec<String> = scored.iter().map(|(s, _)| s.clone()).collect();
    let top_logprobs: Vec<Option<BTreeMap<String, f64>>> = scored
        .iter()
        .map(|(_, top)| top.as_ref().map(|t| logprob_map(t)))
        .collect();
    let token_logprobs: Vec<Option<f64>> = scored
        .iter()
        .map(|(_, top)| top.as_ref().map(|t| prob_to_logprob(t[0].1)))
        .collect();
    let prompt_tokens = tokens.len();

    Ok(CompletionsResponse {
        model: request.model.clone(),
        choices: vec![Choice {
            index: 0,
            text: request.prompt.clone(),
            finish_reason: "stop".to_string(),
            stop_reason: None,
            logprobs: Some(WireLogProbs {
                tokens,
                token_logprobs,
                top_logprobs,
            }),
        }],
        usage: WireUsage {
            prompt_tokens,
            completion_tokens: 0,
            total_tokens: prompt_tokens,
        },
    })
}

fn logprob_map(top_probs: &[(String, f64)]) -> BTreeMap<String, f64> {
    top_probs
        .iter()
        .map(|(s, p)| (s.clone(), prob_to_logprob(*p)))
        .collect()
}

fn error_response(err: Error) -> Response {
    let (status, kind) = match &err {
        Error::ModelNotFound(_) => (StatusCode::NOT_FOUND, "model_not_found"),
        Error::ScriptMiss(_) => (StatusCode::BAD_REQUEST, "script_miss"),
        Error::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    };
    let body = ErrorResponse {
        error: ErrorBody {
            message: err.to_string(),
            kind: kind.to_string(),
        },
    };
    (status, Json(body)).into_response()
}
