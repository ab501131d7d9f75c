//! In-process OpenAI-compatible stub server for integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;

#[derive(Debug, Clone)]
pub enum Step {
    Status(u16),
    Reply(String),
    /// Reply with an explicit finish reason.
    Finish(String, &'static str),
    /// Sleep before answering with the default reply.
    Stall(Duration),
}

#[derive(Default)]
pub struct StubState {
    pub bodies: Mutex<Vec<Vec<u8>>>,
    pub auth: Mutex<Vec<Option<String>>>,
    pub script: Mutex<VecDeque<Step>>,
    pub hits: AtomicUsize,
    pub inflight: AtomicUsize,
    pub peak: AtomicUsize,
    pub delay: Mutex<Duration>,
    pub default_reply: Mutex<String>,
}

pub struct Stub {
    pub url: String,
    pub state: Arc<StubState>,
}

impl Stub {
    pub async fn start() -> Stub {
        let state = Arc::new(StubState::default());
        *state.default_reply.lock().unwrap() = "positive".into();
        let app = Router::new()
            .route("/v1/chat/completions", post(handle))
            .route("/v1/completions", post(handle))
            .with_state(state.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        Stub {
            url: format!("http://{addr}/v1/chat/completions"),
            state,
        }
    }

    pub fn push(&self, steps: impl IntoIterator<Item = Step>) {
        self.state.script.lock().unwrap().extend(steps);
    }

    pub fn set_delay(&self, d: Duration) {
        *self.state.delay.lock().unwrap() = d;
    }

    pub fn set_reply(&self, reply: &str) {
        *self.state.default_reply.lock().unwrap() = reply.into();
    }

    pub fn hits(&self) -> usize {
        self.state.hits.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.state.peak.load(Ordering::SeqCst)
    }

    pub fn bodies(&self) -> Vec<Vec<u8>> {
        self.state.bodies.lock().unwrap().clone()
    }

    pub fn auth(&self) -> Vec<Option<String>> {
        self.state.auth.lock().unwrap().clone()
    }
}

fn completion(body: &[u8], content: &str, finish: &str) -> Response {
    let raw = serde_json::from_slice::<serde_json::Value>(body)
        .map(|v| v.get("prompt").is_some())
        .unwrap_or(false);
    let choice = if raw {
        serde_json::json!({"index": 0, "text": content, "finish_reason": finish})
    } else {
        serde_json::json!({
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": finish
        })
    };
    axum::Json(serde_json::json!({"id": "stub", "choices": [choice]})).into_response()
}

async fn handle(State(state): State<Arc<StubState>>, headers: HeaderMap, body: Bytes) -> Response {
    state.hits.fetch_add(1, Ordering::SeqCst);
    let now = state.inflight.fetch_add(1, Ordering::SeqCst) + 1;
    state.peak.fetch_max(now, Ordering::SeqCst);
    state.bodies.lock().unwrap().push(body.to_vec());
    state.auth.lock().unwrap().push(
        headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string),
    );
    let step = state.script.lock().unwrap().pop_front();
    let delay = *state.delay.lock().unwrap();
    if !delay.is_zero() {
        tokio::time::sleep(delay).await;
    }
    let default_reply = state.default_reply.lock().unwrap().clone();
    let response = match step {
        Some(Step::Status(code)) => {
            (StatusCode::from_u16(code).unwrap(), "stub error").into_response()
        }
        Some(Step::Reply(text)) => completion(&body, &text, "stop"),
        Some(Step::Finish(text, finish)) => completion(&body, &text, finish),
        Some(Step::Stall(d)) => {
            tokio::time::sleep(d).await;
            completion(&body, &default_reply, "stop")
        }
        None => completion(&body, &default_reply, "stop"),
    };
    state.inflight.fetch_sub(1, Ordering::SeqCst);
    response
}
