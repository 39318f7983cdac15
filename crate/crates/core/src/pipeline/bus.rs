use std::collections::{BTreeSet, HashSet, VecDeque};

use parking_lot::Mutex;
use tokio::sync::Notify;

use crate::domain::{Channel, InboundMessage};

pub const DEFAULT_BUS_CAPACITY: usize = 1024;
pub const DEFAULT_SEEN_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Offer {
    Enqueued,
    /// Already processed or already waiting in the queue.
    Duplicate,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Taken {
    Fresh(InboundMessage),
    /// The id was processed before; the caller must not act on it again.
    Duplicate(InboundMessage),
}

/// Bounded recently-seen id set; evicts oldest first.
#[derive(Debug, Default)]
pub(crate) struct SeenSet {
    order: VecDeque<u64>,
    ids: HashSet<u64>,
    capacity: usize,
}

impl SeenSet {
    fn new(capacity: usize) -> Self {
        SeenSet {
            order: VecDeque::new(),
            ids: HashSet::new(),
            capacity: capacity.max(1),
        }
    }

    pub(crate) fn contains(&self, id: u64) -> bool {
        self.ids.contains(&id)
    }

    /// False if `id` was already present.
    pub(crate) fn insert(&mut self, id: u64) -> bool {
        if !self.ids.insert(id) {
            return false;
        }
        self.order.push_back(id);
        while self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.ids.remove(&old);
            }
        }
        true
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.order.iter().copied()
    }
}

#[derive(Debug)]
struct BusInner {
    queue: VecDeque<InboundMessage>,
    pending: [BTreeSet<u64>; 2],
    seen: [SeenSet; 2],
}

/// FIFO between ingestion and processing, with per-channel dedupe.
#[derive(Debug)]
pub struct MessageBus {
    inner: Mutex<BusInner>,
    capacity: usize,
    notify: Notify,
}

fn slot(channel: Channel) -> usize {
    match channel {
        Channel::Mention => 0,
        Channel::DirectMessage => 1,
    }
}

impl Default for MessageBus {
    fn default() -> Self {
        Self::new(DEFAULT_BUS_CAPACITY, DEFAULT_SEEN_CAPACITY)
    }
}

impl MessageBus {
    pub fn new(capacity: usize, seen_capacity: usize) -> Self {
        MessageBus {
            inner: Mutex::new(BusInner {
                queue: VecDeque::with_capacity(capacity.min(4096)),
                pending: [BTreeSet::new(), BTreeSet::new()],
                seen: [SeenSet::new(seen_capacity), SeenSet::new(seen_capacity)],
            }),
            capacity: capacity.max(1),
            notify: Notify::new(),
        }
    }

    pub fn offer(&self, msg: InboundMessage) -> Offer {
        let mut inner = self.inner.lock();
        let s = slot(msg.channel);
        if inner.seen[s].contains(msg.id) || inner.pending[s].contains(&msg.id) {
            return Offer::Duplicate;
        }
        if inner.queue.len() >= self.capacity {
            return Offer::Full;
        }
        inner.pending[s].insert(msg.id);
        inner.queue.push_back(msg);
        drop(inner);
        self.notify.notify_waiters();
        Offer::Enqueued
    }

    /// Pops the head and marks it seen in the same critical section.
    pub fn take(&self) -> Option<Taken> {
        let mut inner = self.inner.lock();
        let msg = inner.queue.pop_front()?;
        let s = slot(msg.channel);
        inner.pending[s].remove(&msg.id);
        if inner.seen[s].insert(msg.id) {
            Some(Taken::Fresh(msg))
        } else {
            Some(Taken::Duplicate(msg))
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_seen(&self, channel: Channel, id: u64) -> bool {
        self.inner.lock().seen[slot(channel)].contains(id)
    }

    /// Lowest id on `channel` still waiting in the queue.
    pub fn min_pending(&self, channel: Channel) -> Option<u64> {
        self.inner.lock().pending[slot(channel)].first().copied()
    }

    pub fn seen_ids(&self, channel: Channel) -> Vec<u64> {
        self.inner.lock().seen[slot(channel)].iter().collect()
    }

    pub(crate) fn restore_seen(&self, channel: Channel, ids: impl IntoIterator<Item = u64>) {
        let mut inner = self.inner.lock();
        for id in ids {
            inner.seen[slot(channel)].insert(id);
        }
    }

    /// Resolves when a message is offered after this call.
    pub async fn notified(&self) {
        self.notify.notified().await
    }

    #[cfg(test)]
    pub(crate) fn push_unchecked(&self, msg: InboundMessage) {
        self.inner.lock().queue.push_back(msg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Handle;
    use chrono::Utc;

    fn msg(id: u64, channel: Channel) -> InboundMessage {
        InboundMessage::new(id, Handle::new("a").unwrap(), "x", channel, Utc::now()).unwrap()
    }

    #[test]
    fn fifo_and_dedupe() {
        let bus = MessageBus::new(8, 100);
        assert_eq!(bus.offer(msg(2, Channel::Mention)), Offer::Enqueued);
        assert_eq!(bus.offer(msg(1, Channel::Mention)), Offer::Enqueued);
        assert_eq!(bus.offer(msg(2, Channel::Mention)), Offer::Duplicate);
        // Same id on the other channel is a different message.
        assert_eq!(bus.offer(msg(2, Channel::DirectMessage)), Offer::Enqueued);
        assert_eq!(bus.min_pending(Channel::Mention), Some(1));

        let order: Vec<(Channel, u64)> = std::iter::from_fn(|| bus.take())
            .map(|t| match t {
                Taken::Fresh(m) => (m.channel, m.id),
                Taken::Duplicate(_) => panic!("unexpected duplicate"),
            })
            .collect();
        assert_eq!(
            order,
            vec![(Channel::Mention, 2), (Channel::Mention, 1), (Channel::DirectMessage, 2)]
        );
        assert_eq!(bus.offer(msg(1, Channel::Mention)), Offer::Duplicate);
        assert!(bus.is_seen(Channel::Mention, 1));
    }

    #[test]
    fn capacity_bounds_queue() {
        let bus = MessageBus::new(2, 100);
        assert_eq!(bus.offer(msg(1, Channel::Mention)), Offer::Enqueued);
        assert_eq!(bus.offer(msg(2, Channel::Mention)), Offer::Enqueued);
        assert_eq!(bus.offer(msg(3, Channel::Mention)), Offer::Full);
        assert_eq!(bus.len(), 2);
    }

    #[test]
    fn seen_set_evicts_oldest() {
        let bus = MessageBus::new(8, 2);
        for id in 1..=3 {
            bus.offer(msg(id, Channel::Mention));
            bus.take();
        }
        assert!(!bus.is_seen(Channel::Mention, 1));
        assert_eq!(bus.seen_ids(Channel::Mention), vec![2, 3]);
    }

    #[test]
    fn forced_duplicate_is_reported() {
        let bus = MessageBus::new(8, 100);
        bus.offer(msg(5, Channel::Mention));
        bus.take();
        bus.push_unchecked(msg(5, Channel::Mention));
        assert!(matches!(bus.take(), Some(Taken::Duplicate(_))));
    }

    #[test]
    fn one_producer_one_consumer_keeps_order() {
        let bus = std::sync::Arc::new(MessageBus::new(10_000, 10_000));
        let producer = {
            let bus = bus.clone();
            std::thread::spawn(move || {
                for id in 1..=2000 {
                    while bus.offer(msg(id, Channel::Mention)) == Offer::Full {
                        std::thread::yield_now();
                    }
                }
            })
        };
        let mut got = Vec::new();
        while got.len() < 2000 {
            if let Some(Taken::Fresh(m)) = bus.take() {
                got.push(m.id);
            }
        }
        producer.join().unwrap();
        assert_eq!(got, (1..=2000).collect::<Vec<_>>());
    }
}
