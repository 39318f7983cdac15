//! In-memory microblog world implementing [`Transport`].
//!
//! One id counter serves both inbound channels and the outbox, so every id
//! the world hands out is unique and strictly increasing. The clock is
//! virtual and only moves through [`SimWorld::advance_clock`].

pub mod script;
pub mod wire;

use std::sync::Arc;

use async_trait::async_trait;
use chrono::{DateTime, Duration, TimeZone, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::dispatch::OutboundReply;
use crate::domain::{Channel, DomainError, Handle, InboundMessage};
use crate::transport::{
    ApiFamily, BudgetConfig, MessageStream, PollCursor, RateLimits, Transport, TransportError,
};

type StreamSender = mpsc::UnboundedSender<Result<InboundMessage, TransportError>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostedReply {
    pub id: u64,
    pub reply: OutboundReply,
    pub posted_at: DateTime<Utc>,
}

#[derive(Debug)]
struct WorldState {
    next_id: u64,
    mention_log: Vec<InboundMessage>,
    dm_log: Vec<InboundMessage>,
    outbox: Vec<PostedReply>,
    clock: DateTime<Utc>,
    stream: Option<StreamSender>,
    available: bool,
}

impl WorldState {
    fn log(&self, channel: Channel) -> &[InboundMessage] {
        match channel {
            Channel::Mention => &self.mention_log,
            Channel::DirectMessage => &self.dm_log,
        }
    }

    fn issue_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

/// Shared handle to a simulated world; clones see the same state.
#[derive(Clone)]
pub struct SimWorld {
    state: Arc<Mutex<WorldState>>,
    limits: Arc<RateLimits>,
    base_account: String,
}

/// Default start of the virtual clock.
pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2015, 9, 1, 12, 0, 0).unwrap()
}

impl SimWorld {
    pub fn new(base_account: &str) -> Self {
        Self::with_budgets(base_account, BudgetConfig::default())
    }

    pub fn with_budgets(base_account: &str, budgets: BudgetConfig) -> Self {
        let clock = epoch();
        SimWorld {
            state: Arc::new(Mutex::new(WorldState {
                next_id: 1,
                mention_log: Vec::new(),
                dm_log: Vec::new(),
                outbox: Vec::new(),
                clock,
                stream: None,
                available: true,
            })),
            limits: Arc::new(RateLimits::new(budgets, clock)),
            base_account: base_account.trim_start_matches('@').to_string(),
        }
    }

    /// Appends a message from `author` and returns its id.
    pub fn inject(&self, author: &str, text: &str, channel: Channel) -> Result<u64, DomainError> {
        let author = Handle::new(author)?;
        let mut st = self.state.lock();
        let id = st.issue_id();
        let msg = InboundMessage::new(id, author, text, channel, st.clock)?;
        if let Some(tx) = &st.stream {
            if tx.send(Ok(msg.clone())).is_err() {
                st.stream = None;
            }
        }
        match channel {
            Channel::Mention => st.mention_log.push(msg),
            Channel::DirectMessage => st.dm_log.push(msg),
        }
        Ok(id)
    }

    pub fn advance_clock(&self, seconds: u64) -> DateTime<Utc> {
        let mut st = self.state.lock();
        st.clock += Duration::seconds(seconds as i64);
        st.clock
    }

    pub fn clock(&self) -> DateTime<Utc> {
        self.state.lock().clock
    }

    /// Every posted reply, in post order.
    pub fn read_outbox(&self) -> Vec<PostedReply> {
        self.state.lock().outbox.clone()
    }

    pub fn outbox_for(&self, channel: Channel) -> Vec<PostedReply> {
        self.state
            .lock()
            .outbox
            .iter()
            .filter(|p| p.reply.channel == channel)
            .cloned()
            .collect()
    }

    pub fn outbox_len(&self) -> usize {
        self.state.lock().outbox.len()
    }

    /// Every message injected on `channel`, in id order.
    pub fn messages(&self, channel: Channel) -> Vec<InboundMessage> {
        self.state.lock().log(channel).to_vec()
    }

    /// Simulates an outage: while unavailable every call fails with `Unavailable`.
    pub fn set_available(&self, available: bool) {
        self.state.lock().available = available;
    }

    pub fn stream_open(&self) -> bool {
        self.state
            .lock()
            .stream
            .as_ref()
            .is_some_and(|tx| !tx.is_closed())
    }

    fn ensure_available(&self) -> Result<(), TransportError> {
        if self.state.lock().available {
            Ok(())
        } else {
            Err(TransportError::Unavailable("simulated outage".into()))
        }
    }
}

#[async_trait]
impl Transport for SimWorld {
    fn base_account(&self) -> &str {
        &self.base_account
    }

    fn now(&self) -> DateTime<Utc> {
        self.clock()
    }

    fn limits(&self) -> &RateLimits {
        &self.limits
    }

    async fn poll_new(
        &self,
        cursor: PollCursor,
    ) -> Result<(Vec<InboundMessage>, PollCursor), TransportError> {
        self.ensure_available()?;
        self.limits.acquire(ApiFamily::Rest, self.now())?;
        let st = self.state.lock();
        let fresh: Vec<InboundMessage> = st
            .log(cursor.channel)
            .iter()
            .filter(|m| m.id > cursor.since_id)
            .cloned()
            .collect();
        let mut next = cursor;
        if let Some(last) = fresh.last() {
            next.advance(last.id);
        }
        Ok((fresh, next))
    }

    async fn open_stream(&self) -> Result<MessageStream, TransportError> {
        self.ensure_available()?;
        if self.stream_open() {
            return Err(TransportError::AlreadyStreaming);
        }
        self.limits.acquire(ApiFamily::Streaming, self.now())?;
        let (tx, rx) = mpsc::unbounded_channel();
        self.state.lock().stream = Some(tx);
        Ok(MessageStream::new(rx))
    }

    async fn post_reply(&self, reply: &OutboundReply) -> Result<u64, TransportError> {
        self.ensure_available()?;
        self.limits.acquire(ApiFamily::Rest, self.now())?;
        let mut st = self.state.lock();
        let id = st.issue_id();
        let posted_at = st.clock;
        st.outbox.push(PostedReply {
            id,
            reply: reply.clone(),
            posted_at,
        });
        Ok(id)
    }
}
