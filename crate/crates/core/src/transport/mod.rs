//! Microblog platform abstraction.
//!
//! Two ingestion models are supported. Polling issues one REST request per
//! fetch and advances a `since_id` cursor. Streaming holds a long-lived
//! connection that pushes messages as they arrive. Each model draws on its own
//! [`RateBudget`]: messages delivered over a stream cost nothing from the REST
//! budget, and exhausting one budget never touches the other.

pub mod http;

use std::fmt;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

use crate::dispatch::OutboundReply;
use crate::domain::{Channel, InboundMessage};

pub use http::HttpTransport;

pub const DEFAULT_REST_CAPACITY: u32 = 15;
pub const DEFAULT_STREAM_CAPACITY: u32 = 3;
pub const DEFAULT_WINDOW_SECONDS: u64 = 900;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("{0} rate budget exhausted")]
    RateLimited(ApiFamily),
    #[error("transport unavailable: {0}")]
    Unavailable(String),
    #[error("a stream is already open on this endpoint")]
    AlreadyStreaming,
    #[error("malformed response: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiFamily {
    Rest,
    Streaming,
}

impl fmt::Display for ApiFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApiFamily::Rest => "rest",
            ApiFamily::Streaming => "streaming",
        })
    }
}

/// Where the gateway connects to, and as whom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Simulated,
    Http(url::Url),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportEndpoint {
    pub base: Endpoint,
    pub base_account: String,
}

impl TransportEndpoint {
    /// `"simulated"` or an absolute http(s) URL.
    pub fn parse(base: &str, base_account: &str) -> Result<Self, TransportError> {
        let base = if base == "simulated" {
            Endpoint::Simulated
        } else {
            let url = url::Url::parse(base)
                .map_err(|e| TransportError::Unavailable(format!("bad endpoint {base:?}: {e}")))?;
            if !matches!(url.scheme(), "http" | "https") {
                return Err(TransportError::Unavailable(format!(
                    "endpoint {base:?} must be http or https"
                )));
            }
            Endpoint::Http(url)
        };
        Ok(TransportEndpoint {
            base,
            base_account: base_account.trim_start_matches('@').to_string(),
        })
    }
}

/// A counted allowance of requests per fixed window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateBudget {
    pub family: ApiFamily,
    pub capacity: u32,
    pub window_seconds: u64,
    pub used: u32,
    pub window_start: DateTime<Utc>,
}

impl RateBudget {
    pub fn new(family: ApiFamily, capacity: u32, window_seconds: u64, now: DateTime<Utc>) -> Self {
        assert!(capacity > 0, "rate budget capacity must be positive");
        assert!(window_seconds > 0, "rate budget window must be positive");
        RateBudget {
            family,
            capacity,
            window_seconds,
            used: 0,
            window_start: now,
        }
    }

    /// Resets the window once `window_seconds` have elapsed since it started.
    pub fn tick(&mut self, now: DateTime<Utc>) {
        if (now - self.window_start).num_seconds() >= self.window_seconds as i64 {
            self.used = 0;
            self.window_start = now;
        }
    }

    pub fn ticked(mut self, now: DateTime<Utc>) -> Self {
        self.tick(now);
        self
    }

    /// Ticks, then takes one unit if any remain.
    pub fn try_acquire(&mut self, now: DateTime<Utc>) -> Result<(), TransportError> {
        self.tick(now);
        if self.used >= self.capacity {
            return Err(TransportError::RateLimited(self.family));
        }
        self.used += 1;
        Ok(())
    }

    pub fn remaining(&self) -> u32 {
        self.capacity - self.used
    }
}

/// Value form of [`RateBudget::tick`].
pub fn budget_tick(budget: RateBudget, now: DateTime<Utc>) -> RateBudget {
    budget.ticked(now)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetConfig {
    pub rest_capacity: u32,
    pub rest_window_seconds: u64,
    pub stream_capacity: u32,
    pub stream_window_seconds: u64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            rest_capacity: DEFAULT_REST_CAPACITY,
            rest_window_seconds: DEFAULT_WINDOW_SECONDS,
            stream_capacity: DEFAULT_STREAM_CAPACITY,
            stream_window_seconds: DEFAULT_WINDOW_SECONDS,
        }
    }
}

/// The two independent budgets a transport draws on. Each sits behind its
/// own lock, so callers never need external synchronization.
#[derive(Debug)]
pub struct RateLimits {
    rest: Mutex<RateBudget>,
    streaming: Mutex<RateBudget>,
}

impl RateLimits {
    pub fn new(config: BudgetConfig, now: DateTime<Utc>) -> Self {
        RateLimits {
            rest: Mutex::new(RateBudget::new(
                ApiFamily::Rest,
                config.rest_capacity,
                config.rest_window_seconds,
                now,
            )),
            streaming: Mutex::new(RateBudget::new(
                ApiFamily::Streaming,
                config.stream_capacity,
                config.stream_window_seconds,
                now,
            )),
        }
    }

    fn slot(&self, family: ApiFamily) -> &Mutex<RateBudget> {
        match family {
            ApiFamily::Rest => &self.rest,
            ApiFamily::Streaming => &self.streaming,
        }
    }

    pub fn acquire(&self, family: ApiFamily, now: DateTime<Utc>) -> Result<(), TransportError> {
        self.slot(family).lock().try_acquire(now)
    }

    /// Budget state as of `now` (window resets applied).
    pub fn snapshot(&self, family: ApiFamily, now: DateTime<Utc>) -> RateBudget {
        let mut b = self.slot(family).lock();
        b.tick(now);
        b.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollCursor {
    pub channel: Channel,
    pub since_id: u64,
}

impl PollCursor {
    pub fn new(channel: Channel) -> Self {
        PollCursor { channel, since_id: 0 }
    }

    /// Moves forward to `id`; never moves backward.
    pub fn advance(&mut self, id: u64) {
        self.since_id = self.since_id.max(id);
    }
}

/// Receiving side of an open stream. Dropping it closes the stream.
#[derive(Debug)]
pub struct MessageStream {
    rx: mpsc::UnboundedReceiver<Result<InboundMessage, TransportError>>,
    _guard: Option<tokio::task::JoinHandle<()>>,
}

impl MessageStream {
    pub fn new(rx: mpsc::UnboundedReceiver<Result<InboundMessage, TransportError>>) -> Self {
        MessageStream { rx, _guard: None }
    }

    pub(crate) fn with_reader(
        rx: mpsc::UnboundedReceiver<Result<InboundMessage, TransportError>>,
        reader: tokio::task::JoinHandle<()>,
    ) -> Self {
        MessageStream {
            rx,
            _guard: Some(reader),
        }
    }

    /// Next message, or `None` once the stream has ended.
    pub async fn next(&mut self) -> Option<Result<InboundMessage, TransportError>> {
        self.rx.recv().await
    }

    /// Non-blocking variant of [`MessageStream::next`].
    pub fn try_next(&mut self) -> Option<Result<InboundMessage, TransportError>> {
        self.rx.try_recv().ok()
    }
}

impl Drop for MessageStream {
    fn drop(&mut self) {
        if let Some(reader) = &self._guard {
            reader.abort();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetUsage {
    pub rest: RateBudget,
    pub streaming: RateBudget,
}

/// The operations the gateway needs from a microblog platform.
#[async_trait]
pub trait Transport: Send + Sync {
    fn base_account(&self) -> &str;

    /// Current time on the transport's clock.
    fn now(&self) -> DateTime<Utc>;

    fn limits(&self) -> &RateLimits;

    /// Messages on `cursor.channel` with id above `since_id`, ascending, and the
    /// advanced cursor. Costs one REST unit.
    async fn poll_new(
        &self,
        cursor: PollCursor,
    ) -> Result<(Vec<InboundMessage>, PollCursor), TransportError>;

    /// Opens the single allowed stream. Costs one streaming unit.
    async fn open_stream(&self) -> Result<MessageStream, TransportError>;

    /// Posts a reply and returns its platform id. Costs one REST unit.
    async fn post_reply(&self, reply: &OutboundReply) -> Result<u64, TransportError>;

    fn budget_usage(&self) -> BudgetUsage {
        let now = self.now();
        BudgetUsage {
            rest: self.limits().snapshot(ApiFamily::Rest, now),
            streaming: self.limits().snapshot(ApiFamily::Streaming, now),
        }
    }
}

/// Wire shape of one message in poll and stream responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMessage {
    pub id: u64,
    pub author: String,
    pub text: String,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<Channel>,
}

impl WireMessage {
    pub fn from_message(msg: &InboundMessage, with_channel: bool) -> Self {
        WireMessage {
            id: msg.id,
            author: msg.author.to_string(),
            text: msg.text.clone(),
            created_at: msg.received_at,
            channel: with_channel.then_some(msg.channel),
        }
    }

    pub fn into_message(self, channel: Channel) -> Result<InboundMessage, TransportError> {
        let author = crate::domain::Handle::new(&self.author)
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        InboundMessage::new(
            self.id,
            author,
            self.text,
            self.channel.unwrap_or(channel),
            self.created_at,
        )
        .map_err(|e| TransportError::Protocol(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireEnvelope {
    pub messages: Vec<WireMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireStatus {
    pub text: String,
    pub in_reply_to: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireDirectMessage {
    pub recipient: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WirePosted {
    pub id: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2015, 9, 1, 12, 0, 0).unwrap()
    }

    #[test]
    fn tick_resets_only_after_window() {
        let mut b = RateBudget::new(ApiFamily::Rest, 15, 900, t0());
        b.used = 15;
        let b2 = budget_tick(b.clone(), t0() + Duration::seconds(900));
        assert_eq!(b2.used, 0);
        assert_eq!(b2.window_start, t0() + Duration::seconds(900));

        b.used = 3;
        let b3 = budget_tick(b, t0() + Duration::seconds(450));
        assert_eq!(b3.used, 3);
        assert_eq!(b3.window_start, t0());
    }

    #[test]
    fn scripted_clock_thirty_acquisitions() {
        let mut b = RateBudget::new(ApiFamily::Rest, 15, 900, t0());
        let ok = (0..30).filter(|_| b.try_acquire(t0()).is_ok()).count();
        assert_eq!(ok, 15);
        assert_eq!(b.used, 15);
        assert_eq!(
            b.try_acquire(t0()),
            Err(TransportError::RateLimited(ApiFamily::Rest))
        );
    }

    #[test]
    fn limits_are_independent() {
        let limits = RateLimits::new(BudgetConfig::default(), t0());
        while limits.acquire(ApiFamily::Rest, t0()).is_ok() {}
        assert_eq!(limits.snapshot(ApiFamily::Streaming, t0()).used, 0);
        limits.acquire(ApiFamily::Streaming, t0()).unwrap();
        assert_eq!(limits.snapshot(ApiFamily::Rest, t0()).used, 15);
        assert_eq!(limits.snapshot(ApiFamily::Streaming, t0()).used, 1);
    }

    #[test]
    fn cursor_never_moves_back() {
        let mut c = PollCursor::new(Channel::Mention);
        c.advance(5);
        c.advance(3);
        assert_eq!(c.since_id, 5);
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(TransportEndpoint::parse("simulated", "@t411").unwrap().base, Endpoint::Simulated);
        assert!(TransportEndpoint::parse("ftp://x", "t411").is_err());
        assert!(TransportEndpoint::parse("nope", "t411").is_err());
    }

    #[test]
    fn wire_message_shape() {
        let json = r#"{"id":7,"author":"abava","text":"@t411 w msk","created_at":"2015-09-01T12:00:00Z"}"#;
        let w: WireMessage = serde_json::from_str(json).unwrap();
        assert_eq!(serde_json::to_string(&w).unwrap(), json);
        let m = w.into_message(Channel::Mention).unwrap();
        assert_eq!(m.received_at, t0());
        let streamed = r#"{"id":8,"author":"a","text":"x","created_at":"2015-09-01T12:00:00Z","channel":"direct_message"}"#;
        let w: WireMessage = serde_json::from_str(streamed).unwrap();
        assert_eq!(w.into_message(Channel::Mention).unwrap().channel, Channel::DirectMessage);
    }
}
