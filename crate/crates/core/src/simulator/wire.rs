//! Serves a [`SimWorld`] over the generic microblog wire schema, so the HTTP
//! transport can be exercised against the reference model.

use std::convert::Infallible;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream;
use serde::Deserialize;

use super::SimWorld;
use crate::dispatch::OutboundReply;
use crate::domain::{Channel, Handle};
use crate::transport::{WireDirectMessage, WireEnvelope, WireMessage, WirePosted, WireStatus};

#[derive(Clone)]
pub struct WireServer {
    world: SimWorld,
    throttled: Arc<AtomicBool>,
}

impl WireServer {
    pub fn new(world: SimWorld) -> Self {
        WireServer {
            world,
            throttled: Arc::new(AtomicBool::new(false)),
        }
    }

    /// While set, every endpoint answers 429.
    pub fn set_throttled(&self, throttled: bool) {
        self.throttled.store(throttled, Ordering::SeqCst);
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/mentions", get(mentions))
            .route("/direct_messages", get(direct_messages).post(post_dm))
            .route("/statuses", post(post_status))
            .route("/stream", get(open_stream))
            .with_state(self.clone())
    }

    fn gate(&self) -> Result<(), StatusCode> {
        if self.throttled.load(Ordering::SeqCst) {
            return Err(StatusCode::TOO_MANY_REQUESTS);
        }
        if !self.world.state.lock().available {
            return Err(StatusCode::SERVICE_UNAVAILABLE);
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct SinceQuery {
    #[serde(default)]
    since_id: u64,
}

fn envelope(world: &SimWorld, channel: Channel, since_id: u64) -> WireEnvelope {
    WireEnvelope {
        messages: world
            .messages(channel)
            .iter()
            .filter(|m| m.id > since_id)
            .map(|m| WireMessage::from_message(m, false))
            .collect(),
    }
}

async fn mentions(State(s): State<WireServer>, Query(q): Query<SinceQuery>) -> Response {
    if let Err(code) = s.gate() {
        return code.into_response();
    }
    Json(envelope(&s.world, Channel::Mention, q.since_id)).into_response()
}

async fn direct_messages(State(s): State<WireServer>, Query(q): Query<SinceQuery>) -> Response {
    if let Err(code) = s.gate() {
        return code.into_response();
    }
    Json(envelope(&s.world, Channel::DirectMessage, q.since_id)).into_response()
}

fn record(world: &SimWorld, reply: OutboundReply) -> u64 {
    let mut st = world.state.lock();
    let id = st.issue_id();
    let posted_at = st.clock;
    st.outbox.push(super::PostedReply {
        id,
        reply,
        posted_at,
    });
    id
}

async fn post_status(State(s): State<WireServer>, Json(body): Json<WireStatus>) -> Response {
    if let Err(code) = s.gate() {
        return code.into_response();
    }
    // The recipient of a mention reply is the handle the text opens with.
    let recipient = body
        .text
        .split_whitespace()
        .next()
        .and_then(|t| t.strip_prefix('@'))
        .and_then(|h| Handle::new(h).ok());
    let Some(recipient) = recipient else {
        return (StatusCode::BAD_REQUEST, "status must open with @recipient").into_response();
    };
    let id = record(
        &s.world,
        OutboundReply {
            recipient,
            channel: Channel::Mention,
            text: body.text,
            in_reply_to: body.in_reply_to,
        },
    );
    Json(WirePosted { id }).into_response()
}

async fn post_dm(State(s): State<WireServer>, Json(body): Json<WireDirectMessage>) -> Response {
    if let Err(code) = s.gate() {
        return code.into_response();
    }
    let Ok(recipient) = Handle::new(&body.recipient) else {
        return (StatusCode::BAD_REQUEST, "bad recipient").into_response();
    };
    // The DM wire shape carries no in_reply_to.
    let id = record(
        &s.world,
        OutboundReply {
            recipient,
            channel: Channel::DirectMessage,
            text: body.text,
            in_reply_to: 0,
        },
    );
    Json(WirePosted { id }).into_response()
}

async fn open_stream(State(s): State<WireServer>) -> Response {
    if let Err(code) = s.gate() {
        return code.into_response();
    }
    if s.world.stream_open() {
        return StatusCode::CONFLICT.into_response();
    }
    let (tx, rx) = tokio::sync::mpsc::unbounded_channel();
    s.world.state.lock().stream = Some(tx);
    let lines = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Some(Ok(msg)) => {
                    let mut line = serde_json::to_vec(&WireMessage::from_message(&msg, true))
                        .expect("wire messages serialize");
                    line.push(b'\n');
                    return Some((Ok::<_, Infallible>(Bytes::from(line)), rx));
                }
                Some(Err(_)) => continue,
                None => return None,
            }
        }
    });
    Response::builder()
        .header("content-type", "application/x-ndjson")
        .body(Body::from_stream(lines))
        .expect("static response parts are valid")
}
