//! In-process publish/subscribe and request/response substrate.
//!
//! The bus is the single source of event readiness for the executors. All
//! operations are linearizable behind one lock, so the threaded backend and
//! the single-context simulation backend run the identical code path.
//!
//! Subscription queues are bounded (default depth 10) and evict the oldest
//! message on overflow. Service request/response queues are unbounded and a
//! request can be answered at most once.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::registry::CallbackId;
use crate::time::Instant;

/// Default subscription queue depth when a scenario does not override it.
pub const DEFAULT_QUEUE_DEPTH: usize = 10;

pub type Payload = Arc<[u8]>;

/// Called (outside the bus lock) whenever a watched queue gains an entry.
pub type Waker = Arc<dyn Fn() + Send + Sync>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BusError {
    #[error("invalid topic name {0:?}: must be non-empty and begin with '/'")]
    InvalidTopic(String),
    #[error("no service server registered for {0:?}")]
    NoSuchService(String),
    #[error("a service server is already registered for {0:?}")]
    ServiceExists(String),
    #[error("reply handle is stale: request already answered or unknown")]
    StaleReplyHandle,
}

/// Slash-prefixed topic path, e.g. `/image_raw`.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(name: impl Into<String>) -> Result<Self, BusError> {
        let name = name.into();
        if name.len() < 2 || !name.starts_with('/') {
            return Err(BusError::InvalidTopic(name));
        }
        Ok(TopicName(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for TopicName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug)]
pub struct Message {
    pub payload: Payload,
    pub publish_time: Instant,
    pub seq: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct SubscriptionId(usize);

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ServiceId(usize);

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ClientId(usize);

/// Single-use token for answering one service request.
#[derive(Debug)]
pub struct ReplyHandle {
    service: ServiceId,
    client: ClientId,
    request_seq: u64,
}

/// Snapshot of callbacks with a pending event, in registration order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReadySet {
    pub ready_subscribers: Vec<CallbackId>,
    pub ready_servers: Vec<CallbackId>,
    pub ready_clients: Vec<CallbackId>,
}

impl ReadySet {
    pub fn is_empty(&self) -> bool {
        self.ready_subscribers.is_empty()
            && self.ready_servers.is_empty()
            && self.ready_clients.is_empty()
    }
}

/// Delivery accounting for one subscription.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SubscriptionStats {
    pub published: u64,
    pub taken: u64,
    pub evicted: u64,
    pub pending: u64,
}

struct TopicState {
    subscribers: Vec<SubscriptionId>,
    next_seq: u64,
}

struct SubscriptionState {
    topic: String,
    depth: usize,
    pending: VecDeque<Message>,
    stats: SubscriptionStats,
    wakers: Vec<Waker>,
}

struct ServiceState {
    name: String,
    pending_requests: VecDeque<(Message, ClientId)>,
    outstanding: HashMap<u64, ClientId>,
    next_seq: u64,
    wakers: Vec<Waker>,
}

struct ClientState {
    service: String,
    pending_responses: VecDeque<Message>,
    wakers: Vec<Waker>,
}

#[derive(Default)]
struct BusState {
    topics: HashMap<String, TopicState>,
    subscriptions: Vec<SubscriptionState>,
    services: Vec<ServiceState>,
    service_by_name: HashMap<String, ServiceId>,
    clients: Vec<ClientState>,
    // Callback bindings, in registration order; drives collect_ready.
    sub_bindings: Vec<(SubscriptionId, CallbackId)>,
    server_bindings: Vec<(ServiceId, CallbackId)>,
    client_bindings: Vec<(ClientId, CallbackId)>,
}

impl BusState {
    fn topic_entry(&mut self, name: &str) -> &mut TopicState {
        self.topics
            .entry(name.to_owned())
            .or_insert_with(|| TopicState { subscribers: Vec::new(), next_seq: 0 })
    }
}

#[derive(Default)]
pub struct MessageBus {
    state: Mutex<BusState>,
}

impl MessageBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&self, topic: &TopicName, depth: usize) -> SubscriptionId {
        assert!(depth > 0, "queue depth must be positive");
        let mut st = self.state.lock().unwrap();
        let id = SubscriptionId(st.subscriptions.len());
        st.subscriptions.push(SubscriptionState {
            topic: topic.as_str().to_owned(),
            depth,
            pending: VecDeque::new(),
            stats: SubscriptionStats::default(),
            wakers: Vec::new(),
        });
        st.topic_entry(topic.as_str()).subscribers.push(id);
        id
    }

    /// Deliver `payload` to every subscription on `topic`, evicting the
    /// oldest entry of any queue already at depth. Returns the per-topic
    /// sequence number (starting at 1).
    pub fn publish(&self, topic: &TopicName, payload: Payload, now: Instant) -> u64 {
        let mut wakers = Vec::new();
        let seq;
        {
            let mut st = self.state.lock().unwrap();
            let entry = st.topic_entry(topic.as_str());
            entry.next_seq += 1;
            seq = entry.next_seq;
            let targets = entry.subscribers.clone();
            let msg = Message { payload, publish_time: now, seq };
            for SubscriptionId(i) in targets {
                let sub = &mut st.subscriptions[i];
                if sub.pending.len() == sub.depth {
                    sub.pending.pop_front();
                    sub.stats.evicted += 1;
                }
                sub.pending.push_back(msg.clone());
                sub.stats.published += 1;
                wakers.extend(sub.wakers.iter().cloned());
            }
        }
        for w in wakers {
            w();
        }
        seq
    }

    /// Remove and return the oldest pending message, if any. A message is
    /// returned to exactly one caller.
    pub fn take(&self, sub: SubscriptionId) -> Option<Message> {
        let mut st = self.state.lock().unwrap();
        let s = &mut st.subscriptions[sub.0];
        let msg = s.pending.pop_front();
        if msg.is_some() {
            s.stats.taken += 1;
        }
        msg
    }

    pub fn pending_messages(&self, sub: SubscriptionId) -> usize {
        self.state.lock().unwrap().subscriptions[sub.0].pending.len()
    }

    pub fn subscription_stats(&self, sub: SubscriptionId) -> SubscriptionStats {
        let st = self.state.lock().unwrap();
        let s = &st.subscriptions[sub.0];
        SubscriptionStats { pending: s.pending.len() as u64, ..s.stats }
    }

    pub fn subscription_topic(&self, sub: SubscriptionId) -> TopicName {
        TopicName(self.state.lock().unwrap().subscriptions[sub.0].topic.clone())
    }

    pub fn register_server(&self, name: &str) -> Result<ServiceId, BusError> {
        let mut st = self.state.lock().unwrap();
        if st.service_by_name.contains_key(name) {
            return Err(BusError::ServiceExists(name.to_owned()));
        }
        let id = ServiceId(st.services.len());
        st.services.push(ServiceState {
            name: name.to_owned(),
            pending_requests: VecDeque::new(),
            outstanding: HashMap::new(),
            next_seq: 0,
            wakers: Vec::new(),
        });
        st.service_by_name.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn register_client(&self, service: &str) -> ClientId {
        let mut st = self.state.lock().unwrap();
        let id = ClientId(st.clients.len());
        st.clients.push(ClientState {
            service: service.to_owned(),
            pending_responses: VecDeque::new(),
            wakers: Vec::new(),
        });
        id
    }

    /// Enqueue a request at the service the client targets. The eventual
    /// response lands in this client's response queue.
    pub fn call_service(&self, client: ClientId, payload: Payload, now: Instant) -> Result<u64, BusError> {
        let mut wakers = Vec::new();
        let seq;
        {
            let mut st = self.state.lock().unwrap();
            let name = st.clients[client.0].service.clone();
            let Some(&ServiceId(s)) = st.service_by_name.get(&name) else {
                return Err(BusError::NoSuchService(name));
            };
            let svc = &mut st.services[s];
            svc.next_seq += 1;
            seq = svc.next_seq;
            svc.pending_requests.push_back((Message { payload, publish_time: now, seq }, client));
            svc.outstanding.insert(seq, client);
            wakers.extend(svc.wakers.iter().cloned());
        }
        for w in wakers {
            w();
        }
        Ok(seq)
    }

    /// Dequeue the oldest pending request together with its single-use
    /// reply handle.
    pub fn take_request(&self, service: ServiceId) -> Option<(Message, ReplyHandle)> {
        let mut st = self.state.lock().unwrap();
        let svc = &mut st.services[service.0];
        svc.pending_requests.pop_front().map(|(msg, client)| {
            let handle = ReplyHandle { service, client, request_seq: msg.seq };
            (msg, handle)
        })
    }

    pub fn pending_requests(&self, service: ServiceId) -> usize {
        self.state.lock().unwrap().services[service.0].pending_requests.len()
    }

    /// Answer one request. Consumes the handle; a second response to the
    /// same request is a stale-handle error.
    pub fn send_response(&self, reply: ReplyHandle, payload: Payload, now: Instant) -> Result<(), BusError> {
        let mut wakers = Vec::new();
        {
            let mut st = self.state.lock().unwrap();
            let svc = &mut st.services[reply.service.0];
            match svc.outstanding.remove(&reply.request_seq) {
                Some(client) if client == reply.client => {}
                _ => return Err(BusError::StaleReplyHandle),
            }
            let cl = &mut st.clients[reply.client.0];
            cl.pending_responses.push_back(Message {
                payload,
                publish_time: now,
                seq: reply.request_seq,
            });
            wakers.extend(cl.wakers.iter().cloned());
        }
        for w in wakers {
            w();
        }
        Ok(())
    }

    pub fn take_response(&self, client: ClientId) -> Option<Message> {
        self.state.lock().unwrap().clients[client.0].pending_responses.pop_front()
    }

    pub fn pending_responses(&self, client: ClientId) -> usize {
        self.state.lock().unwrap().clients[client.0].pending_responses.len()
    }

    /// Re-issue a reply handle for an outstanding request. Intended for
    /// tests that need to exercise stale-handle behaviour.
    pub fn duplicate_reply_handle(&self, reply: &ReplyHandle) -> ReplyHandle {
        ReplyHandle { service: reply.service, client: reply.client, request_seq: reply.request_seq }
    }

    pub fn bind_subscriber(&self, sub: SubscriptionId, cb: CallbackId) {
        self.state.lock().unwrap().sub_bindings.push((sub, cb));
    }

    pub fn bind_server(&self, service: ServiceId, cb: CallbackId) {
        self.state.lock().unwrap().server_bindings.push((service, cb));
    }

    pub fn bind_client(&self, client: ClientId, cb: CallbackId) {
        self.state.lock().unwrap().client_bindings.push((client, cb));
    }

    /// Snapshot the callbacks whose event queues are non-empty, ordered by
    /// callback registration order. Consumes nothing.
    pub fn collect_ready(&self) -> ReadySet {
        let st = self.state.lock().unwrap();
        ReadySet {
            ready_subscribers: st
                .sub_bindings
                .iter()
                .filter(|(s, _)| !st.subscriptions[s.0].pending.is_empty())
                .map(|&(_, cb)| cb)
                .collect(),
            ready_servers: st
                .server_bindings
                .iter()
                .filter(|(s, _)| !st.services[s.0].pending_requests.is_empty())
                .map(|&(_, cb)| cb)
                .collect(),
            ready_clients: st
                .client_bindings
                .iter()
                .filter(|(c, _)| !st.clients[c.0].pending_responses.is_empty())
                .map(|&(_, cb)| cb)
                .collect(),
        }
    }

    pub fn attach_subscription_waker(&self, sub: SubscriptionId, waker: Waker) {
        self.state.lock().unwrap().subscriptions[sub.0].wakers.push(waker);
    }

    pub fn attach_request_waker(&self, service: ServiceId, waker: Waker) {
        self.state.lock().unwrap().services[service.0].wakers.push(waker);
    }

    pub fn attach_response_waker(&self, client: ClientId, waker: Waker) {
        self.state.lock().unwrap().clients[client.0].wakers.push(waker);
    }
}

pub fn payload_from_vec(bytes: Vec<u8>) -> Payload {
    Arc::from(bytes.into_boxed_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn topic(name: &str) -> TopicName {
        TopicName::new(name).unwrap()
    }

    fn bytes(v: &[u8]) -> Payload {
        Arc::from(v.to_vec().into_boxed_slice())
    }

    fn cb(n: u64) -> CallbackId {
        CallbackId::from_raw(n)
    }

    #[test]
    fn topic_names_must_be_slash_prefixed() {
        assert!(TopicName::new("/image_raw").is_ok());
        assert!(TopicName::new("image_raw").is_err());
        assert!(TopicName::new("").is_err());
        assert!(TopicName::new("/").is_err());
    }

    #[test]
    fn publish_without_subscribers_still_returns_seq() {
        let bus = MessageBus::new();
        assert_eq!(bus.publish(&topic("/t"), bytes(b"x"), Instant::EPOCH), 1);
        assert_eq!(bus.publish(&topic("/t"), bytes(b"y"), Instant::EPOCH), 2);
    }

    #[test]
    fn publish_fans_out_to_all_subscribers() {
        let bus = MessageBus::new();
        let a = bus.subscribe(&topic("/t"), 10);
        let b = bus.subscribe(&topic("/t"), 10);
        bus.publish(&topic("/t"), bytes(b"m"), Instant::EPOCH);
        assert_eq!(bus.pending_messages(a), 1);
        assert_eq!(bus.pending_messages(b), 1);
    }

    #[test]
    fn full_queue_evicts_oldest() {
        let bus = MessageBus::new();
        let sub = bus.subscribe(&topic("/t"), 10);
        for i in 0..11u8 {
            bus.publish(&topic("/t"), bytes(&[i]), Instant::EPOCH);
        }
        let seqs: Vec<u64> = std::iter::from_fn(|| bus.take(sub)).map(|m| m.seq).collect();
        assert_eq!(seqs, (2..=11).collect::<Vec<_>>());
        let stats = bus.subscription_stats(sub);
        assert_eq!(stats.evicted, 1);
        assert_eq!(stats.taken, 10);
    }

    #[test]
    fn take_on_empty_queue_is_none() {
        let bus = MessageBus::new();
        let sub = bus.subscribe(&topic("/t"), 10);
        assert!(bus.take(sub).is_none());
        bus.publish(&topic("/t"), bytes(b"p"), Instant::EPOCH);
        assert_eq!(bus.take(sub).unwrap().payload.as_ref(), b"p");
        assert!(bus.take(sub).is_none());
    }

    #[test]
    fn concurrent_takers_deliver_each_message_once() {
        let bus = Arc::new(MessageBus::new());
        let sub = bus.subscribe(&topic("/t"), 1000);
        for i in 0..1000u32 {
            bus.publish(&topic("/t"), bytes(&i.to_le_bytes()), Instant::EPOCH);
        }
        let mut handles = Vec::new();
        for _ in 0..4 {
            let bus = Arc::clone(&bus);
            handles.push(std::thread::spawn(move || {
                let mut got = Vec::new();
                while let Some(m) = bus.take(sub) {
                    got.push(m.seq);
                }
                got
            }));
        }
        let mut all: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort_unstable();
        assert_eq!(all, (1..=1000).collect::<Vec<_>>());
    }

    #[test]
    fn service_roundtrip_delivers_one_response() {
        let bus = MessageBus::new();
        let svc = bus.register_server("/sort").unwrap();
        let client = bus.register_client("/sort");
        bus.call_service(client, bytes(b"req"), Instant::EPOCH).unwrap();
        let (msg, reply) = bus.take_request(svc).unwrap();
        assert_eq!(msg.payload.as_ref(), b"req");
        bus.send_response(reply, bytes(b"res"), Instant::EPOCH).unwrap();
        assert_eq!(bus.pending_responses(client), 1);
        assert_eq!(bus.take_response(client).unwrap().payload.as_ref(), b"res");
    }

    #[test]
    fn second_response_to_same_request_is_rejected() {
        let bus = MessageBus::new();
        let svc = bus.register_server("/s").unwrap();
        let client = bus.register_client("/s");
        bus.call_service(client, bytes(b"q"), Instant::EPOCH).unwrap();
        let (_, reply) = bus.take_request(svc).unwrap();
        let dup = bus.duplicate_reply_handle(&reply);
        bus.send_response(reply, bytes(b"a"), Instant::EPOCH).unwrap();
        assert_eq!(bus.send_response(dup, bytes(b"b"), Instant::EPOCH), Err(BusError::StaleReplyHandle));
    }

    #[test]
    fn call_without_server_is_an_error() {
        let bus = MessageBus::new();
        let client = bus.register_client("/nope");
        assert_eq!(
            bus.call_service(client, bytes(b"q"), Instant::EPOCH),
            Err(BusError::NoSuchService("/nope".into()))
        );
    }

    #[test]
    fn pipelined_requests_answered_in_order() {
        let bus = MessageBus::new();
        let svc = bus.register_server("/s").unwrap();
        let client = bus.register_client("/s");
        let n = 20u8;
        for i in 0..n {
            bus.call_service(client, bytes(&[i]), Instant::EPOCH).unwrap();
        }
        while let Some((msg, reply)) = bus.take_request(svc) {
            bus.send_response(reply, msg.payload, Instant::EPOCH).unwrap();
        }
        let order: Vec<u8> =
            std::iter::from_fn(|| bus.take_response(client)).map(|m| m.payload[0]).collect();
        assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn collect_ready_orders_by_registration_and_consumes_nothing() {
        let bus = MessageBus::new();
        let sub_a = bus.subscribe(&topic("/a"), 10);
        let sub_b = bus.subscribe(&topic("/b"), 10);
        let sub_c = bus.subscribe(&topic("/c"), 10);
        bus.bind_subscriber(sub_a, cb(0));
        bus.bind_subscriber(sub_b, cb(1));
        bus.bind_subscriber(sub_c, cb(2));

        assert!(bus.collect_ready().is_empty());

        bus.publish(&topic("/c"), bytes(b"1"), Instant::EPOCH);
        bus.publish(&topic("/b"), bytes(b"2"), Instant::EPOCH);
        let ready = bus.collect_ready();
        assert_eq!(ready.ready_subscribers, vec![cb(1), cb(2)]);
        assert!(ready.ready_servers.is_empty());

        // Read-only: repeated snapshots are identical and queues unchanged.
        assert_eq!(bus.collect_ready(), ready);
        assert_eq!(bus.pending_messages(sub_b), 1);
        assert_eq!(bus.pending_messages(sub_c), 1);
    }

    #[test]
    fn ready_servers_reflect_pending_requests() {
        let bus = MessageBus::new();
        let svc = bus.register_server("/s").unwrap();
        bus.bind_server(svc, cb(7));
        let client = bus.register_client("/s");
        bus.bind_client(client, cb(8));
        bus.call_service(client, bytes(b"q"), Instant::EPOCH).unwrap();
        let ready = bus.collect_ready();
        assert_eq!(ready.ready_servers, vec![cb(7)]);
        assert!(ready.ready_subscribers.is_empty());
        assert!(ready.ready_clients.is_empty());
    }

    #[test]
    fn wakers_fire_on_enqueue() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let bus = MessageBus::new();
        let sub = bus.subscribe(&topic("/t"), 10);
        let hits = Arc::new(AtomicUsize::new(0));
        let h = Arc::clone(&hits);
        bus.attach_subscription_waker(sub, Arc::new(move || {
            h.fetch_add(1, Ordering::SeqCst);
        }));
        bus.publish(&topic("/t"), bytes(b"x"), Instant::EPOCH);
        bus.publish(&topic("/t"), bytes(b"y"), Instant::EPOCH);
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    proptest! {
        // published = taken + pending + evicted, for any publish/take mix.
        #[test]
        fn delivery_conservation(ops in proptest::collection::vec((0usize..3, 0usize..2), 1..200)) {
            let bus = MessageBus::new();
            let topics = [topic("/a"), topic("/b")];
            let subs = [bus.subscribe(&topics[0], 3), bus.subscribe(&topics[1], 2)];
            for (op, which) in ops {
                match op {
                    0 => {
                        bus.publish(&topics[which], bytes(b"m"), Instant::EPOCH);
                    }
                    1 => {
                        let _ = bus.take(subs[which]);
                    }
                    _ => {
                        let _ = bus.collect_ready();
                    }
                }
            }
            for sub in subs {
                let s = bus.subscription_stats(sub);
                prop_assert_eq!(s.published, s.taken + s.pending + s.evicted);
            }
        }
    }
}
