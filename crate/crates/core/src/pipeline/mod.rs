//! The gateway engine.
//!
//! Ingestion (scheduled polls or a stream reader) feeds a [`MessageBus`];
//! processors take messages off the bus and run each one through the flow
//! strip mention → parse → look up key → call webhook (or chatbot) → post reply.
//! Ingestion and processing share nothing but the bus.

pub mod api;
pub mod bus;
pub mod config;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use crate::chatbot::RuleSet;
use crate::dispatch::{build_call, compose_reply, CallOutcome, Dispatcher, OutboundReply};
use crate::domain::{parse_command, strip_base_mention, Channel, InboundMessage};
use crate::registry::SharedRegistry;
use crate::transport::{BudgetUsage, PollCursor, Transport, TransportError};

pub use bus::{MessageBus, Offer, Taken};

pub const DEFAULT_POLL_INTERVAL_SECONDS: u64 = 60;
pub const REPLY_RETRY_CAP: u32 = 3;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("engine is stopped")]
    NotRunning,
    #[error("operation requires {0:?} mode")]
    WrongMode(Mode),
    #[error("state snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Poll,
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCommand {
    Start,
    Stop,
    Status,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedReply {
    pub reply: OutboundReply,
    pub retries: u32,
}

#[derive(Debug)]
struct EngineState {
    running: bool,
    mode: Mode,
    poll_interval_seconds: u64,
    cursors: [PollCursor; 2],
    retry_queue: VecDeque<QueuedReply>,
}

fn slot(channel: Channel) -> usize {
    match channel {
        Channel::Mention => 0,
        Channel::DirectMessage => 1,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CursorReport {
    pub mention: u64,
    pub direct_message: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPoll {
    pub channel: Channel,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickReport {
    pub fetched: usize,
    pub enqueued: usize,
    pub deduped: usize,
    pub replies_retried: usize,
    pub replies_dropped: usize,
    pub skipped: Vec<SkippedPoll>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "route", rename_all = "snake_case")]
pub enum Route {
    Webhook { key: String, outcome: CallOutcome, attempts: u32 },
    Chatbot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ProcessOutcome {
    /// The id was already processed; nothing was done.
    Duplicate { id: u64 },
    Replied { id: u64, route: Route, reply_id: u64 },
    /// Empty response: nothing to post.
    Silent { id: u64, route: Route },
    /// Posting failed; the reply waits in the retry queue.
    Queued { id: u64, route: Route },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    pub running: bool,
    pub mode: Mode,
    pub poll_interval_seconds: u64,
    pub queue_depth: usize,
    pub retry_queue: usize,
    pub cursors: CursorReport,
    pub budgets: BudgetUsage,
    pub processed: u64,
    pub webhook_calls: u64,
    pub replies_posted: u64,
    pub replies_dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlResponse {
    /// False when the command did not change anything.
    pub changed: bool,
    pub status: StatusReport,
}

/// On-disk engine state: `{"cursors":{...},"seen":[{"channel":..,"id":..}]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub cursors: CursorReport,
    pub seen: Vec<SeenEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeenEntry {
    pub channel: Channel,
    pub id: u64,
}

impl EngineSnapshot {
    pub fn load(path: &Path) -> Result<Option<Self>, EngineError> {
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| EngineError::Snapshot(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(EngineError::Snapshot(e.to_string())),
        }
    }

    fn save(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self).expect("snapshot serializes"))?;
        std::fs::rename(tmp, path)
    }
}

#[derive(Debug, Default)]
struct Counters {
    processed: AtomicU64,
    webhook_calls: AtomicU64,
    replies_posted: AtomicU64,
    replies_dropped: AtomicU64,
}

pub struct GatewayBuilder {
    transport: Arc<dyn Transport>,
    registry: SharedRegistry,
    dispatcher: Option<Dispatcher>,
    rules: Option<RuleSet>,
    bus_capacity: usize,
    seen_capacity: usize,
    snapshot_path: Option<PathBuf>,
    mode: Mode,
    poll_interval_seconds: u64,
    running: bool,
}

impl GatewayBuilder {
    pub fn dispatcher(mut self, d: Dispatcher) -> Self {
        self.dispatcher = Some(d);
        self
    }

    pub fn rules(mut self, rules: RuleSet) -> Self {
        self.rules = Some(rules);
        self
    }

    pub fn bus_capacity(mut self, capacity: usize, seen_capacity: usize) -> Self {
        self.bus_capacity = capacity;
        self.seen_capacity = seen_capacity;
        self
    }

    /// Persist cursors and the seen-set here; restored on build if present.
    pub fn snapshot_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.snapshot_path = Some(path.into());
        self
    }

    pub fn mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Seconds between scheduled ticks; 0 means ticks only run on demand.
    pub fn poll_interval(mut self, seconds: u64) -> Self {
        self.poll_interval_seconds = seconds;
        self
    }

    /// Whether the engine starts in the running state (default true).
    pub fn running(mut self, running: bool) -> Self {
        self.running = running;
        self
    }

    pub fn build(self) -> Result<Gateway, EngineError> {
        let bus = MessageBus::new(self.bus_capacity, self.seen_capacity);
        let mut cursors = [
            PollCursor::new(Channel::Mention),
            PollCursor::new(Channel::DirectMessage),
        ];
        if let Some(path) = &self.snapshot_path {
            if let Some(snap) = EngineSnapshot::load(path)? {
                cursors[0].advance(snap.cursors.mention);
                cursors[1].advance(snap.cursors.direct_message);
                for ch in Channel::ALL {
                    bus.restore_seen(
                        ch,
                        snap.seen.iter().filter(|e| e.channel == ch).map(|e| e.id),
                    );
                }
                info!(path = %path.display(), seen = snap.seen.len(), "restored engine snapshot");
            }
        }
        Ok(Gateway {
            base_account: self.transport.base_account().to_string(),
            transport: self.transport,
            registry: self.registry,
            dispatcher: self.dispatcher.unwrap_or_else(Dispatcher::http),
            rules: Arc::new(self.rules.unwrap_or_default()),
            bus: Arc::new(bus),
            state: Mutex::new(EngineState {
                running: self.running,
                mode: self.mode,
                poll_interval_seconds: self.poll_interval_seconds,
                cursors,
                retry_queue: VecDeque::new(),
            }),
            counters: Counters::default(),
            snapshot_path: self.snapshot_path,
            snapshot_lock: Mutex::new(()),
            tick_lock: tokio::sync::Mutex::new(()),
            retry_lock: tokio::sync::Mutex::new(()),
            wake: tokio::sync::Notify::new(),
        })
    }
}

pub struct Gateway {
    base_account: String,
    transport: Arc<dyn Transport>,
    registry: SharedRegistry,
    dispatcher: Dispatcher,
    rules: Arc<RuleSet>,
    bus: Arc<MessageBus>,
    state: Mutex<EngineState>,
    counters: Counters,
    snapshot_path: Option<PathBuf>,
    snapshot_lock: Mutex<()>,
    tick_lock: tokio::sync::Mutex<()>,
    retry_lock: tokio::sync::Mutex<()>,
    wake: tokio::sync::Notify,
}

impl Gateway {
    pub fn builder(transport: Arc<dyn Transport>, registry: SharedRegistry) -> GatewayBuilder {
        GatewayBuilder {
            transport,
            registry,
            dispatcher: None,
            rules: None,
            bus_capacity: bus::DEFAULT_BUS_CAPACITY,
            seen_capacity: bus::DEFAULT_SEEN_CAPACITY,
            snapshot_path: None,
            mode: Mode::Poll,
            poll_interval_seconds: DEFAULT_POLL_INTERVAL_SECONDS,
            running: true,
        }
    }

    pub fn bus(&self) -> &MessageBus {
        &self.bus
    }

    pub fn registry(&self) -> &SharedRegistry {
        &self.registry
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub fn is_running(&self) -> bool {
        self.state.lock().running
    }

    pub fn cursors(&self) -> CursorReport {
        let st = self.state.lock();
        CursorReport {
            mention: st.cursors[0].since_id,
            direct_message: st.cursors[1].since_id,
        }
    }

    pub fn retry_queue(&self) -> Vec<QueuedReply> {
        self.state.lock().retry_queue.iter().cloned().collect()
    }

    /// Rewinds both cursors to zero. The seen-set still prevents re-processing.
    pub fn rewind_cursors(&self) {
        let mut st = self.state.lock();
        for c in st.cursors.iter_mut() {
            c.since_id = 0;
        }
    }

    /// Polls mentions then direct messages, enqueues unseen messages, and
    /// drains the retry queue.
    pub async fn tick(&self) -> Result<TickReport, EngineError> {
        {
            let st = self.state.lock();
            if !st.running {
                return Err(EngineError::NotRunning);
            }
            if st.mode != Mode::Poll {
                return Err(EngineError::WrongMode(Mode::Poll));
            }
        }
        let _tick = self.tick_lock.lock().await;
        let mut report = TickReport::default();
        for channel in Channel::ALL {
            let cursor = self.state.lock().cursors[slot(channel)];
            match self.transport.poll_new(cursor).await {
                Ok((messages, _)) => {
                    report.fetched += messages.len();
                    let (advanced_to, enqueued, deduped) = self.ingest(messages);
                    report.enqueued += enqueued;
                    report.deduped += deduped;
                    self.state.lock().cursors[slot(channel)].advance(advanced_to);
                }
                Err(e) => {
                    info!(%channel, error = %e, "poll skipped");
                    report.skipped.push(SkippedPoll {
                        channel,
                        reason: e.to_string(),
                    });
                }
            }
        }
        let (retried, dropped) = self.drain_retries().await;
        report.replies_retried = retried;
        report.replies_dropped = dropped;
        self.persist();
        debug!(?report, "tick");
        Ok(report)
    }

    /// Offers messages to the bus in id order. Returns the highest id that was
    /// handled (enqueued or deduped); ingestion stops at the first full-bus refusal.
    fn ingest(&self, mut messages: Vec<InboundMessage>) -> (u64, usize, usize) {
        messages.sort_by_key(|m| m.id);
        let (mut last, mut enqueued, mut deduped) = (0, 0, 0);
        for msg in messages {
            let id = msg.id;
            match self.bus.offer(msg) {
                Offer::Enqueued => enqueued += 1,
                Offer::Duplicate => deduped += 1,
                Offer::Full => {
                    warn!(id, "message bus full, deferring remaining messages");
                    break;
                }
            }
            last = id;
        }
        (last, enqueued, deduped)
    }

    /// Takes one message off the bus and runs it through the flow.
    /// `Ok(None)` when the bus is empty.
    pub async fn process_one(&self) -> Result<Option<ProcessOutcome>, EngineError> {
        if !self.is_running() {
            return Err(EngineError::NotRunning);
        }
        let msg = match self.bus.take() {
            None => return Ok(None),
            Some(Taken::Duplicate(m)) => {
                debug!(id = m.id, "duplicate message ignored");
                return Ok(Some(ProcessOutcome::Duplicate { id: m.id }));
            }
            Some(Taken::Fresh(m)) => m,
        };
        // Record the id durably before any side effect.
        self.persist();
        self.counters.processed.fetch_add(1, Ordering::Relaxed);

        let stripped = strip_base_mention(&msg.text, &self.base_account);
        let cmd = parse_command(&stripped);
        let registration = cmd
            .registry_key()
            .and_then(|k| self.registry.read().get(&k).cloned());

        let (outcome, route) = match registration {
            Some(reg) => {
                let call = build_call(&reg, &cmd, &msg.author);
                self.counters.webhook_calls.fetch_add(1, Ordering::Relaxed);
                let result = self.dispatcher.dispatch(&call).await;
                let route = Route::Webhook {
                    key: reg.key.to_string(),
                    outcome: result.outcome.clone(),
                    attempts: result.attempts,
                };
                (result.outcome, route)
            }
            None => {
                let text = self.rules.respond(&cmd.original, msg.author.as_str());
                (CallOutcome::Success(text.trim().to_string()), Route::Chatbot)
            }
        };

        let id = msg.id;
        let Some(reply) = compose_reply(&outcome, &msg.author, msg.channel, id) else {
            return Ok(Some(ProcessOutcome::Silent { id, route }));
        };
        Ok(Some(match self.deliver(reply).await {
            Some(reply_id) => ProcessOutcome::Replied { id, route, reply_id },
            None => ProcessOutcome::Queued { id, route },
        }))
    }

    /// Processes until the bus is empty. Returns the outcomes in order.
    pub async fn process_all(&self) -> Result<Vec<ProcessOutcome>, EngineError> {
        let mut out = Vec::new();
        while let Some(o) = self.process_one().await? {
            out.push(o);
        }
        Ok(out)
    }

    /// Posts now unless earlier replies are still waiting, in which case the
    /// reply joins the back of the retry queue. The queue itself is drained
    /// at tick boundaries.
    async fn deliver(&self, reply: OutboundReply) -> Option<u64> {
        let _guard = self.retry_lock.lock().await;
        if self.state.lock().retry_queue.is_empty() {
            match self.transport.post_reply(&reply).await {
                Ok(id) => {
                    self.counters.replies_posted.fetch_add(1, Ordering::Relaxed);
                    return Some(id);
                }
                Err(e) => debug!(error = %e, "reply post failed, queueing"),
            }
        }
        self.state
            .lock()
            .retry_queue
            .push_back(QueuedReply { reply, retries: 0 });
        None
    }

    /// Posts queued replies in FIFO order until the queue empties or a post
    /// fails. A failed head counts one retry and is dropped after
    /// [`REPLY_RETRY_CAP`] retries. Returns (posted, dropped).
    pub async fn drain_retries(&self) -> (usize, usize) {
        let _guard = self.retry_lock.lock().await;
        let (mut posted, mut dropped) = (0, 0);
        loop {
            let Some(head) = self.state.lock().retry_queue.front().cloned() else {
                break;
            };
            match self.transport.post_reply(&head.reply).await {
                Ok(_) => {
                    self.state.lock().retry_queue.pop_front();
                    self.counters.replies_posted.fetch_add(1, Ordering::Relaxed);
                    posted += 1;
                }
                Err(e) => {
                    let mut st = self.state.lock();
                    let front = st.retry_queue.front_mut().expect("head is still queued");
                    front.retries += 1;
                    if front.retries >= REPLY_RETRY_CAP {
                        warn!(to = %front.reply.recipient, in_reply_to = front.reply.in_reply_to,
                              error = %e, "dropping reply after {REPLY_RETRY_CAP} retries");
                        st.retry_queue.pop_front();
                        self.counters.replies_dropped.fetch_add(1, Ordering::Relaxed);
                        dropped += 1;
                    }
                    if matches!(e, TransportError::RateLimited(_) | TransportError::Unavailable(_)) {
                        break;
                    }
                }
            }
        }
        (posted, dropped)
    }

    pub fn control(&self, command: ControlCommand) -> ControlResponse {
        let changed = {
            let mut st = self.state.lock();
            match command {
                ControlCommand::Start => !std::mem::replace(&mut st.running, true),
                ControlCommand::Stop => std::mem::replace(&mut st.running, false),
                ControlCommand::Status => false,
            }
        };
        if changed {
            info!(?command, "engine state changed");
            self.wake.notify_waiters();
        }
        ControlResponse {
            changed,
            status: self.status(),
        }
    }

    pub fn status(&self) -> StatusReport {
        let (running, mode, poll_interval_seconds, retry_queue) = {
            let st = self.state.lock();
            (st.running, st.mode, st.poll_interval_seconds, st.retry_queue.len())
        };
        StatusReport {
            running,
            mode,
            poll_interval_seconds,
            queue_depth: self.bus.len(),
            retry_queue,
            cursors: self.cursors(),
            budgets: self.transport.budget_usage(),
            processed: self.counters.processed.load(Ordering::Relaxed),
            webhook_calls: self.counters.webhook_calls.load(Ordering::Relaxed),
            replies_posted: self.counters.replies_posted.load(Ordering::Relaxed),
            replies_dropped: self.counters.replies_dropped.load(Ordering::Relaxed),
        }
    }

    /// Snapshot with each cursor held just below its lowest unprocessed id,
    /// so queued-but-unprocessed messages are fetched again after a restart.
    pub fn snapshot(&self) -> EngineSnapshot {
        let cursors = self.cursors();
        let hold = |channel: Channel, since: u64| match self.bus.min_pending(channel) {
            Some(min) => since.min(min - 1),
            None => since,
        };
        let mut seen = Vec::new();
        for ch in Channel::ALL {
            seen.extend(self.bus.seen_ids(ch).into_iter().map(|id| SeenEntry { channel: ch, id }));
        }
        EngineSnapshot {
            cursors: CursorReport {
                mention: hold(Channel::Mention, cursors.mention),
                direct_message: hold(Channel::DirectMessage, cursors.direct_message),
            },
            seen,
        }
    }

    fn persist(&self) {
        let Some(path) = &self.snapshot_path else {
            return;
        };
        let _guard = self.snapshot_lock.lock();
        if let Err(e) = self.snapshot().save(path) {
            warn!(path = %path.display(), error = %e, "failed to persist engine snapshot");
        }
    }

    /// Runs one stream session: catch-up polls, then messages from the stream
    /// until it ends or the engine stops.
    pub async fn stream_session(&self) -> Result<usize, TransportError> {
        for channel in Channel::ALL {
            let cursor = self.state.lock().cursors[slot(channel)];
            match self.transport.poll_new(cursor).await {
                Ok((messages, _)) => {
                    let (last, _, _) = self.ingest(messages);
                    self.state.lock().cursors[slot(channel)].advance(last);
                }
                Err(e) => info!(%channel, error = %e, "catch-up poll skipped"),
            }
        }
        let mut stream = self.transport.open_stream().await?;
        let interval = self.state.lock().poll_interval_seconds.max(1);
        let mut retry_timer = tokio::time::interval(Duration::from_secs(interval));
        let mut delivered = 0;
        while self.is_running() {
            let next = tokio::select! {
                m = stream.next() => m,
                _ = self.wake.notified() => continue,
                _ = retry_timer.tick() => {
                    self.drain_retries().await;
                    continue;
                }
            };
            match next {
                Some(Ok(msg)) => {
                    let (channel, id) = (msg.channel, msg.id);
                    if self.bus.offer(msg) != Offer::Full {
                        self.state.lock().cursors[slot(channel)].advance(id);
                        delivered += 1;
                    } else {
                        warn!(id, "message bus full, message left for catch-up poll");
                    }
                }
                Some(Err(e)) => return Err(e),
                None => break,
            }
        }
        self.persist();
        Ok(delivered)
    }

    /// Starts the scheduler, stream reader and processors as background tasks.
    pub fn spawn(self: &Arc<Self>, workers: usize) -> EngineHandle {
        let mut tasks = Vec::new();
        let gw = self.clone();
        tasks.push(tokio::spawn(async move { gw.ingestion_loop().await }));
        for _ in 0..workers.max(1) {
            let gw = self.clone();
            tasks.push(tokio::spawn(async move { gw.processing_loop().await }));
        }
        EngineHandle { tasks }
    }

    async fn wait_running(&self) {
        while !self.is_running() {
            let woken = self.wake.notified();
            if self.is_running() {
                break;
            }
            woken.await;
        }
    }

    async fn ingestion_loop(&self) {
        loop {
            self.wait_running().await;
            let (mode, interval) = {
                let st = self.state.lock();
                (st.mode, st.poll_interval_seconds)
            };
            match mode {
                Mode::Poll if interval == 0 => {
                    self.wake.notified().await;
                    continue;
                }
                Mode::Poll => {
                    if let Err(e) = self.tick().await {
                        debug!(error = %e, "scheduled tick skipped");
                    }
                }
                Mode::Stream => {
                    if let Err(e) = self.stream_session().await {
                        info!(error = %e, "stream session ended");
                    }
                    self.drain_retries().await;
                }
            }
            let pause = Duration::from_secs(interval.max(1));
            tokio::select! {
                _ = tokio::time::sleep(pause) => {}
                _ = self.wake.notified() => {}
            }
        }
    }

    async fn processing_loop(&self) {
        loop {
            self.wait_running().await;
            let woken = self.bus.notified();
            match self.process_one().await {
                Ok(Some(outcome)) => debug!(?outcome, "processed"),
                Ok(None) | Err(_) => {
                    tokio::select! {
                        _ = woken => {}
                        _ = self.wake.notified() => {}
                        _ = tokio::time::sleep(Duration::from_millis(250)) => {}
                    }
                }
            }
        }
    }
}

/// Background tasks of a spawned engine; aborted on drop.
pub struct EngineHandle {
    tasks: Vec<JoinHandle<()>>,
}

impl EngineHandle {
    pub fn abort(&self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Drop for EngineHandle {
    fn drop(&mut self) {
        self.abort();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Handle;
    use crate::registry::RegistryStore;
    use crate::simulator::SimWorld;
    use crate::transport::BudgetConfig;
    use async_trait::async_trait;
    use crate::dispatch::{WebhookCall, WebhookExecutor};

    struct Echo;

    #[async_trait]
    impl WebhookExecutor for Echo {
        async fn execute(&self, call: &WebhookCall) -> CallOutcome {
            CallOutcome::Success(format!("{}: {}", call.u_param, call.t_param))
        }
    }

    fn gateway(world: &SimWorld) -> Gateway {
        let mut reg = RegistryStore::in_memory();
        reg.register("e", "http://bots.example/echo", "ops").unwrap();
        Gateway::builder(Arc::new(world.clone()), reg.into_shared())
            .dispatcher(Dispatcher::new(Arc::new(Echo)))
            .poll_interval(0)
            .build()
            .unwrap()
    }

    fn ample() -> BudgetConfig {
        BudgetConfig {
            rest_capacity: 10_000,
            ..BudgetConfig::default()
        }
    }

    #[tokio::test]
    async fn tick_reports_fetch_and_dedupe() {
        let world = SimWorld::with_budgets("t411", ample());
        let gw = gateway(&world);
        for i in 0..3 {
            world.inject("abava", &format!("@t411 e {i}"), Channel::Mention).unwrap();
        }
        let r = gw.tick().await.unwrap();
        assert_eq!((r.fetched, r.enqueued, r.deduped), (3, 3, 0));
        gw.process_all().await.unwrap();
        gw.rewind_cursors();
        let r = gw.tick().await.unwrap();
        assert_eq!((r.fetched, r.enqueued, r.deduped), (3, 0, 3));
    }

    #[tokio::test]
    async fn tick_requires_running_poll_mode() {
        let world = SimWorld::new("t411");
        let gw = gateway(&world);
        gw.control(ControlCommand::Stop);
        assert!(matches!(gw.tick().await, Err(EngineError::NotRunning)));
        assert!(matches!(gw.process_one().await, Err(EngineError::NotRunning)));
    }

    #[tokio::test]
    async fn forced_duplicate_is_a_noop() {
        let world = SimWorld::with_budgets("t411", ample());
        let gw = gateway(&world);
        world.inject("abava", "@t411 e once", Channel::Mention).unwrap();
        gw.tick().await.unwrap();
        let msg = world.messages(Channel::Mention)[0].clone();
        assert!(matches!(gw.process_one().await.unwrap(), Some(ProcessOutcome::Replied { .. })));
        gw.bus.push_unchecked(msg);
        assert_eq!(
            gw.process_one().await.unwrap(),
            Some(ProcessOutcome::Duplicate { id: 1 })
        );
        assert_eq!(world.outbox_len(), 1);
        assert_eq!(gw.status().webhook_calls, 1);
    }

    #[tokio::test]
    async fn control_start_stop_status() {
        let world = SimWorld::with_budgets("t411", ample());
        let gw = gateway(&world);
        assert!(!gw.control(ControlCommand::Start).changed);
        let r = gw.control(ControlCommand::Stop);
        assert!(r.changed);
        assert!(!gw.control(ControlCommand::Status).status.running);
        assert!(gw.control(ControlCommand::Start).changed);
        assert!(!gw.control(ControlCommand::Start).changed);

        world.inject("a", "@t411 e 1", Channel::Mention).unwrap();
        world.inject("a", "@t411 e 2", Channel::Mention).unwrap();
        gw.tick().await.unwrap();
        assert_eq!(gw.status().queue_depth, 2);
        gw.process_one().await.unwrap();
        assert_eq!(gw.status().queue_depth, 1);
    }

    #[tokio::test]
    async fn unknown_key_goes_to_chatbot_with_original_text() {
        let world = SimWorld::with_budgets("t411", ample());
        let gw = gateway(&world);
        world.inject("abava", "@t411 how are you?", Channel::Mention).unwrap();
        gw.tick().await.unwrap();
        let out = gw.process_one().await.unwrap().unwrap();
        assert!(matches!(out, ProcessOutcome::Replied { route: Route::Chatbot, .. }));
        assert_eq!(world.read_outbox()[0].reply.text, "@abava Let me see, just a minute please.");
    }

    #[tokio::test]
    async fn dm_reply_stays_on_dm() {
        let world = SimWorld::with_budgets("t411", ample());
        let gw = gateway(&world);
        world.inject("abava", "e secret", Channel::DirectMessage).unwrap();
        gw.tick().await.unwrap();
        gw.process_all().await.unwrap();
        let out = world.read_outbox();
        assert_eq!(out[0].reply.channel, Channel::DirectMessage);
        assert_eq!(out[0].reply.text, "abava: e secret");
    }

    #[tokio::test]
    async fn full_bus_holds_cursor() {
        let world = SimWorld::with_budgets("t411", ample());
        let reg = RegistryStore::in_memory().into_shared();
        let gw = Gateway::builder(Arc::new(world.clone()), reg)
            .dispatcher(Dispatcher::new(Arc::new(Echo)))
            .bus_capacity(2, 100)
            .build()
            .unwrap();
        for _ in 0..5 {
            world.inject("a", "hi", Channel::Mention).unwrap();
        }
        let r = gw.tick().await.unwrap();
        assert_eq!(r.enqueued, 2);
        assert_eq!(gw.cursors().mention, 2);
        gw.process_all().await.unwrap();
        gw.tick().await.unwrap();
        gw.process_all().await.unwrap();
        gw.tick().await.unwrap();
        gw.process_all().await.unwrap();
        assert_eq!(world.outbox_len(), 5);
    }

    #[tokio::test]
    async fn retry_cap_drops_after_three_failures() {
        let world = SimWorld::with_budgets("t411", ample());
        let gw = gateway(&world);
        world.inject("a", "@t411 e x", Channel::Mention).unwrap();
        gw.tick().await.unwrap();
        world.set_available(false);
        assert!(matches!(
            gw.process_one().await.unwrap(),
            Some(ProcessOutcome::Queued { .. })
        ));
        assert_eq!(gw.drain_retries().await, (0, 0));
        assert_eq!(gw.drain_retries().await, (0, 0));
        assert_eq!(gw.drain_retries().await, (0, 1));
        assert!(gw.retry_queue().is_empty());
        assert_eq!(gw.status().replies_dropped, 1);
    }

    #[tokio::test]
    async fn spawned_engine_replies_and_freezes_when_stopped() {
        let world = SimWorld::with_budgets("t411", ample());
        let gw = Arc::new(
            Gateway::builder(Arc::new(world.clone()), {
                let mut r = RegistryStore::in_memory();
                r.register("e", "http://bots.example/echo", "ops").unwrap();
                r.into_shared()
            })
            .dispatcher(Dispatcher::new(Arc::new(Echo)))
            .poll_interval(1)
            .build()
            .unwrap(),
        );
        let _h = gw.spawn(2);
        world.inject("abava", "@t411 e live", Channel::Mention).unwrap();
        let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
        while world.outbox_len() < 1 && tokio::time::Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        assert_eq!(world.read_outbox()[0].reply.text, "@abava abava: e live");

        gw.control(ControlCommand::Stop);
        tokio::time::sleep(Duration::from_millis(100)).await;
        let frozen = gw.status().webhook_calls;
        world.inject("abava", "@t411 e later", Channel::Mention).unwrap();
        tokio::time::sleep(Duration::from_millis(1500)).await;
        assert_eq!(gw.status().webhook_calls, frozen);
        let _ = Handle::new("x");
    }

    #[tokio::test]
    async fn stream_mode_delivers_without_rest_cost() {
        let world = SimWorld::with_budgets("t411", ample());
        let gw = Arc::new(
            Gateway::builder(Arc::new(world.clone()), {
                let mut r = RegistryStore::in_memory();
                r.register("e", "http://bots.example/echo", "ops").unwrap();
                r.into_shared()
            })
            .dispatcher(Dispatcher::new(Arc::new(Echo)))
            .mode(Mode::Stream)
            .build()
            .unwrap(),
        );
        let _h = gw.spawn(1);
        let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
        while !world.stream_open() && tokio::time::Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        let rest_before = world.budget_usage().rest.used;
        world.inject("abava", "@t411 e streamed", Channel::Mention).unwrap();
        while world.outbox_len() < 1 && tokio::time::Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        assert_eq!(world.read_outbox()[0].reply.text, "@abava abava: e streamed");
        // Only the reply post costs REST budget; delivery was free.
        assert_eq!(world.budget_usage().rest.used, rest_before + 1);
        assert_eq!(world.budget_usage().streaming.used, 1);
    }
}
