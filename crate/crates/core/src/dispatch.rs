//! Webhook contract: every service is called with a plain GET carrying
//! `t` (the original command text, key included) and `u` (the author).
//! The response body becomes the reply.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tracing::{debug, warn};

use crate::domain::{Channel, Handle, ParsedCommand, ServiceRegistration};

/// Reply length limit in Unicode scalar values.
pub const MAX_REPLY_SCALARS: usize = 140;

pub const DEFAULT_TIMEOUT_SECONDS: u64 = 10;
pub const DEFAULT_PARALLELISM: usize = 4;

pub const UNAVAILABLE_TEXT: &str = "service temporarily unavailable";

const ELLIPSIS: char = '…';

/// Percent-encodes every byte outside `ALPHA / DIGIT / "-" / "." / "_" / "~"`
/// as `%HH` with uppercase hex. Space becomes `%20`.
pub fn percent_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for &b in s.as_bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~') {
            out.push(b as char);
        } else {
            let _ = write!(out, "%{b:02X}");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum CallOutcome {
    Success(String),
    Timeout,
    HttpError(u16),
    Unreachable,
}

impl CallOutcome {
    fn retryable(&self) -> bool {
        match self {
            CallOutcome::Success(_) => false,
            CallOutcome::Timeout | CallOutcome::Unreachable => true,
            CallOutcome::HttpError(status) => *status >= 500,
        }
    }
}

/// One outbound GET to a registered webhook.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebhookCall {
    pub url: String,
    pub t_param: String,
    pub u_param: String,
    pub timeout_seconds: u64,
}

/// Assembles `webhook?t=<original>&u=<author>`.
pub fn build_call(reg: &ServiceRegistration, cmd: &ParsedCommand, author: &Handle) -> WebhookCall {
    debug_assert_eq!(
        cmd.registry_key().as_ref(),
        Some(&reg.key),
        "command key must match the registration"
    );
    let t_param = cmd.original.clone();
    let u_param = author.as_str().to_string();
    let url = format!(
        "{}?t={}&u={}",
        reg.webhook,
        percent_encode(&t_param),
        percent_encode(&u_param)
    );
    WebhookCall {
        url,
        t_param,
        u_param,
        timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
    }
}

/// Collapses each run of CR/LF into one space and trims the result.
pub fn normalize_body(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut in_break = false;
    for c in raw.chars() {
        if c == '\r' || c == '\n' {
            if !in_break {
                out.push(' ');
                in_break = true;
            }
        } else {
            out.push(c);
            in_break = false;
        }
    }
    out.trim().to_string()
}

#[async_trait]
pub trait WebhookExecutor: Send + Sync {
    /// Performs one GET. Never fails: errors are encoded in the outcome.
    async fn execute(&self, call: &WebhookCall) -> CallOutcome;
}

/// Executes webhook calls over HTTP.
#[derive(Debug, Clone, Default)]
pub struct HttpExecutor {
    client: reqwest::Client,
}

impl HttpExecutor {
    pub fn new() -> Self {
        Self::default()
    }
}

#[async_trait]
impl WebhookExecutor for HttpExecutor {
    async fn execute(&self, call: &WebhookCall) -> CallOutcome {
        let timeout = Duration::from_secs(call.timeout_seconds);
        let response = match self.client.get(&call.url).timeout(timeout).send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return CallOutcome::Timeout,
            Err(e) => {
                debug!(url = %call.url, error = %e, "webhook unreachable");
                return CallOutcome::Unreachable;
            }
        };
        let status = response.status();
        if !status.is_success() {
            return CallOutcome::HttpError(status.as_u16());
        }
        match response.bytes().await {
            Ok(body) => CallOutcome::Success(normalize_body(&String::from_utf8_lossy(&body))),
            Err(e) if e.is_timeout() => CallOutcome::Timeout,
            Err(_) => CallOutcome::Unreachable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchResult {
    pub outcome: CallOutcome,
    pub attempts: u32,
}

/// Runs webhook calls with the retry policy and a parallelism cap.
///
/// Timeouts, 5xx and unreachable hosts get one retry; 4xx responses get none.
#[derive(Clone)]
pub struct Dispatcher {
    executor: Arc<dyn WebhookExecutor>,
    permits: Arc<Semaphore>,
    timeout_seconds: u64,
}

impl Dispatcher {
    pub fn new(executor: Arc<dyn WebhookExecutor>) -> Self {
        Self::with_parallelism(executor, DEFAULT_PARALLELISM)
    }

    pub fn with_parallelism(executor: Arc<dyn WebhookExecutor>, parallelism: usize) -> Self {
        Dispatcher {
            executor,
            permits: Arc::new(Semaphore::new(parallelism.max(1))),
            timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
        }
    }

    pub fn http() -> Self {
        Self::new(Arc::new(HttpExecutor::new()))
    }

    pub fn timeout_seconds(mut self, secs: u64) -> Self {
        self.timeout_seconds = secs.max(1);
        self
    }

    pub async fn dispatch(&self, call: &WebhookCall) -> DispatchResult {
        let _permit = self.permits.acquire().await.expect("semaphore is never closed");
        let mut call = call.clone();
        call.timeout_seconds = self.timeout_seconds;
        let mut outcome = self.executor.execute(&call).await;
        let mut attempts = 1;
        if outcome.retryable() {
            debug!(url = %call.url, ?outcome, "retrying webhook once");
            outcome = self.executor.execute(&call).await;
            attempts += 1;
        }
        if !matches!(outcome, CallOutcome::Success(_)) {
            warn!(url = %call.url, ?outcome, attempts, "webhook failed");
        }
        DispatchResult { outcome, attempts }
    }
}

/// A reply ready to post back on the inbound message's channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundReply {
    pub recipient: Handle,
    pub channel: Channel,
    pub text: String,
    pub in_reply_to: u64,
}

/// Cuts `text` so that it fits in `limit` scalars, ending with `…` when cut.
fn bound_scalars(text: String, limit: usize) -> String {
    if text.chars().count() <= limit {
        return text;
    }
    let mut out: String = text.chars().take(limit.saturating_sub(1)).collect();
    out.push(ELLIPSIS);
    out
}

/// Turns a webhook or chatbot outcome into a bounded reply.
///
/// Mention replies are prefixed with `@author `. An empty success body
/// produces no reply.
pub fn compose_reply(
    outcome: &CallOutcome,
    author: &Handle,
    channel: Channel,
    in_reply_to: u64,
) -> Option<OutboundReply> {
    let body = match outcome {
        CallOutcome::Success(body) if body.is_empty() => return None,
        CallOutcome::Success(body) => body.as_str(),
        _ => UNAVAILABLE_TEXT,
    };
    let text = match channel {
        Channel::Mention => format!("{} {}", author.mention(), body),
        Channel::DirectMessage => body.to_string(),
    };
    Some(OutboundReply {
        recipient: author.clone(),
        channel,
        text: bound_scalars(text, MAX_REPLY_SCALARS),
        in_reply_to,
    })
}
