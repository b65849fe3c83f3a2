//! Callback registration and the shared ready-callback search.
//!
//! The executor keeps four callback lists (timers, subscribers, service
//! servers, service clients). Workers search them in that fixed order:
//! timers in registration order, the non-timer lists circularly starting
//! one past the worker's per-list `Position` cursor. A claim is a
//! compare-and-set on the entry's busy flag followed by an atomic dequeue
//! of the triggering event, so concurrent workers never execute the same
//! callback twice or consume the same event twice.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::bus::{ClientId, Message, MessageBus, ReplyHandle, ServiceId, SubscriptionId};
use crate::clock::Timer;
use crate::slots::{BitstreamId, SlotId};
use crate::time::{Duration, Instant};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("resource mask selects neither software nor any slot")]
    EmptyMask,
    #[error("callback kind does not match its event source")]
    KindMismatch,
    #[error("callback was not claimed; release is a logic error")]
    DoubleRelease,
}

/// Unique identifier assigned at registration, never reused.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CallbackId(u64);

impl CallbackId {
    pub const fn from_raw(id: u64) -> Self {
        CallbackId(id)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Debug for CallbackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cb{}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum CallbackKind {
    Timer,
    Subscriber,
    ServiceServer,
    ServiceClient,
}

/// Where a worker executes callbacks: on a processor or in one slot.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum WorkerResource {
    Software,
    Slot(SlotId),
}

/// Hardware side of a resource mask: the slots a callback may occupy,
/// each with its bound bitstream, plus the modeled execution time.
#[derive(Clone, Debug)]
pub struct HardwareBinding {
    exec: Duration,
    slots: BTreeMap<SlotId, BitstreamId>,
}

impl HardwareBinding {
    pub fn new(exec: Duration, slots: BTreeMap<SlotId, BitstreamId>) -> Self {
        HardwareBinding { exec, slots }
    }

    pub fn slots(&self) -> impl Iterator<Item = SlotId> + '_ {
        self.slots.keys().copied()
    }
}

/// Per-callback record of where it may execute. The type admits callbacks
/// runnable in both software and hardware; the v1 executor registers one
/// side only.
#[derive(Clone, Debug, Default)]
pub struct ResourceMask {
    software: Option<Duration>,
    hardware: Option<HardwareBinding>,
}

impl ResourceMask {
    /// Software-only mask with the modeled execution time.
    pub fn software(exec: Duration) -> Self {
        ResourceMask { software: Some(exec), hardware: None }
    }

    /// Hardware-only mask.
    pub fn hardware(binding: HardwareBinding) -> Self {
        ResourceMask { software: None, hardware: Some(binding) }
    }

    pub fn is_empty(&self) -> bool {
        self.software.is_none() && self.hardware.as_ref().is_none_or(|h| h.slots.is_empty())
    }

    pub fn is_software(&self) -> bool {
        self.software.is_some()
    }

    pub fn matches(&self, resource: WorkerResource) -> bool {
        match resource {
            WorkerResource::Software => self.software.is_some(),
            WorkerResource::Slot(slot) => {
                self.hardware.as_ref().is_some_and(|h| h.slots.contains_key(&slot))
            }
        }
    }

    pub fn bitstream_for(&self, slot: SlotId) -> Option<BitstreamId> {
        self.hardware.as_ref().and_then(|h| h.slots.get(&slot).copied())
    }

    /// Modeled execution time when running on `resource`.
    pub fn exec_time(&self, resource: WorkerResource) -> Option<Duration> {
        match resource {
            WorkerResource::Software => self.software,
            WorkerResource::Slot(slot) => self
                .hardware
                .as_ref()
                .filter(|h| h.slots.contains_key(&slot))
                .map(|h| h.exec),
        }
    }

    pub fn hardware_slots(&self) -> Vec<SlotId> {
        self.hardware.as_ref().map(|h| h.slots.keys().copied().collect()).unwrap_or_default()
    }
}

/// What a callback does when dispatched, invoked at completion time.
/// Bodies publish results or answer service requests through the bus.
pub type CallbackBody = Arc<dyn Fn(&BodyCtx<'_>, ClaimedEvent) + Send + Sync>;

pub struct BodyCtx<'a> {
    pub bus: &'a MessageBus,
    /// Completion time of the callback execution.
    pub now: Instant,
}

/// The event consumed by a claim.
#[derive(Debug)]
pub enum ClaimedEvent {
    TimerFired { deadline: Instant },
    Message(Message),
    Request(Message, ReplyHandle),
    Response(Message),
}

/// Event source a callback is registered against.
#[derive(Debug)]
pub enum EventSource {
    Timer(Timer),
    Subscription(SubscriptionId),
    Server(ServiceId),
    Client(ClientId),
}

/// Registration-time description of the event source.
#[derive(Debug, Clone, Copy)]
pub enum SourceSpec {
    Timer { period: Duration, first_deadline: Instant },
    Subscription(SubscriptionId),
    Server(ServiceId),
    Client(ClientId),
}

impl SourceSpec {
    fn kind(&self) -> CallbackKind {
        match self {
            SourceSpec::Timer { .. } => CallbackKind::Timer,
            SourceSpec::Subscription(_) => CallbackKind::Subscriber,
            SourceSpec::Server(_) => CallbackKind::ServiceServer,
            SourceSpec::Client(_) => CallbackKind::ServiceClient,
        }
    }
}

pub struct CallbackEntry {
    id: CallbackId,
    name: String,
    kind: CallbackKind,
    mask: ResourceMask,
    source: EventSource,
    body: Option<CallbackBody>,
    busy: AtomicBool,
    registration_index: usize,
}

impl CallbackEntry {
    pub fn id(&self) -> CallbackId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> CallbackKind {
        self.kind
    }

    pub fn mask(&self) -> &ResourceMask {
        &self.mask
    }

    pub fn source(&self) -> &EventSource {
        &self.source
    }

    pub fn body(&self) -> Option<&CallbackBody> {
        self.body.as_ref()
    }

    pub fn registration_index(&self) -> usize {
        self.registration_index
    }

    pub fn is_busy(&self) -> bool {
        self.busy.load(Ordering::SeqCst)
    }

    pub fn timer(&self) -> Option<&Timer> {
        match &self.source {
            EventSource::Timer(t) => Some(t),
            _ => None,
        }
    }

    pub(crate) fn try_claim(&self) -> bool {
        self.busy.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_ok()
    }

    pub(crate) fn unclaim(&self) {
        self.busy.store(false, Ordering::SeqCst);
    }

    pub(crate) fn has_pending_event(&self, bus: &MessageBus) -> bool {
        match &self.source {
            EventSource::Timer(_) => false,
            EventSource::Subscription(s) => bus.pending_messages(*s) > 0,
            EventSource::Server(s) => bus.pending_requests(*s) > 0,
            EventSource::Client(c) => bus.pending_responses(*c) > 0,
        }
    }

    pub(crate) fn dequeue_event(&self, bus: &MessageBus) -> Option<ClaimedEvent> {
        match &self.source {
            EventSource::Timer(_) => None,
            EventSource::Subscription(s) => bus.take(*s).map(ClaimedEvent::Message),
            EventSource::Server(s) => {
                bus.take_request(*s).map(|(m, reply)| ClaimedEvent::Request(m, reply))
            }
            EventSource::Client(c) => bus.take_response(*c).map(ClaimedEvent::Response),
        }
    }
}

impl fmt::Debug for CallbackEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CallbackEntry")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("busy", &self.is_busy())
            .finish()
    }
}

/// The three non-timer lists, in search order.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum NonTimerList {
    Subscribers = 0,
    Servers = 1,
    Clients = 2,
}

const NON_TIMER_LISTS: [NonTimerList; 3] =
    [NonTimerList::Subscribers, NonTimerList::Servers, NonTimerList::Clients];

/// Per-worker round-robin cursors over the non-timer lists.
///
/// Each cursor starts at its list's length (one past the last real index)
/// and is set to the index actually served on every claim, so the next
/// search starts one past the last served entry and wraps to index zero
/// after passing the end of the list.
#[derive(Clone, Debug)]
pub struct OffsetVector {
    positions: [usize; 3],
}

impl OffsetVector {
    pub fn new(lists: &CallbackLists) -> Self {
        OffsetVector {
            positions: [
                lists.subscribers.read().unwrap().len(),
                lists.servers.read().unwrap().len(),
                lists.clients.read().unwrap().len(),
            ],
        }
    }

    pub fn positions(&self) -> [usize; 3] {
        self.positions
    }
}

/// A claimed callback plus the event that triggered it. The claim marks the
/// entry busy; it stays busy until released.
pub struct ClaimedWork {
    pub entry: Arc<CallbackEntry>,
    pub event: ClaimedEvent,
    pub claim_time: Instant,
}

#[derive(Default)]
pub struct CallbackLists {
    timers: RwLock<Vec<Arc<CallbackEntry>>>,
    subscribers: RwLock<Vec<Arc<CallbackEntry>>>,
    servers: RwLock<Vec<Arc<CallbackEntry>>>,
    clients: RwLock<Vec<Arc<CallbackEntry>>>,
    next_id: AtomicU64,
}

impl CallbackLists {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pre-allocate the identifier of the next registration, so resources
    /// (e.g. bitstreams) can be bound to the callback before it enters the
    /// lists.
    pub fn reserve_id(&self) -> CallbackId {
        CallbackId(self.next_id.fetch_add(1, Ordering::SeqCst))
    }

    /// Register a callback. The entry is appended to its kind's list and the
    /// bus is told which queue feeds it (for readiness snapshots).
    pub fn register(
        &self,
        name: impl Into<String>,
        mask: ResourceMask,
        source: SourceSpec,
        body: Option<CallbackBody>,
        bus: &MessageBus,
    ) -> Result<CallbackId, RegistryError> {
        self.register_reserved(self.reserve_id(), name, mask, source, body, bus)
    }

    /// Register under a previously reserved identifier.
    pub fn register_reserved(
        &self,
        id: CallbackId,
        name: impl Into<String>,
        mask: ResourceMask,
        source: SourceSpec,
        body: Option<CallbackBody>,
        bus: &MessageBus,
    ) -> Result<CallbackId, RegistryError> {
        if mask.is_empty() {
            return Err(RegistryError::EmptyMask);
        }
        let kind = source.kind();
        let (list, source) = match source {
            SourceSpec::Timer { period, first_deadline } => {
                (&self.timers, EventSource::Timer(Timer::new(id, period, first_deadline)))
            }
            SourceSpec::Subscription(s) => {
                bus.bind_subscriber(s, id);
                (&self.subscribers, EventSource::Subscription(s))
            }
            SourceSpec::Server(s) => {
                bus.bind_server(s, id);
                (&self.servers, EventSource::Server(s))
            }
            SourceSpec::Client(c) => {
                bus.bind_client(c, id);
                (&self.clients, EventSource::Client(c))
            }
        };
        let mut list = list.write().unwrap();
        let entry = CallbackEntry {
            id,
            name: name.into(),
            kind,
            mask,
            source,
            body,
            busy: AtomicBool::new(false),
            registration_index: list.len(),
        };
        list.push(Arc::new(entry));
        Ok(id)
    }

    pub fn find(&self, id: CallbackId) -> Option<Arc<CallbackEntry>> {
        for list in [&self.timers, &self.subscribers, &self.servers, &self.clients] {
            if let Some(e) = list.read().unwrap().iter().find(|e| e.id == id) {
                return Some(Arc::clone(e));
            }
        }
        None
    }

    pub fn timers(&self) -> Vec<Arc<CallbackEntry>> {
        self.timers.read().unwrap().clone()
    }

    pub fn all_entries(&self) -> Vec<Arc<CallbackEntry>> {
        let mut out = Vec::new();
        for list in [&self.timers, &self.subscribers, &self.servers, &self.clients] {
            out.extend(list.read().unwrap().iter().cloned());
        }
        out
    }

    pub fn len(&self) -> usize {
        [&self.timers, &self.subscribers, &self.servers, &self.clients]
            .iter()
            .map(|l| l.read().unwrap().len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Earliest deadline among timers the given resource can serve.
    pub fn next_timer_deadline(&self, resource: WorkerResource) -> Option<Instant> {
        self.timers
            .read()
            .unwrap()
            .iter()
            .filter(|e| e.mask.matches(resource))
            .filter_map(|e| e.timer().map(|t| t.next_deadline()))
            .min()
    }

    /// Claim the first ready, idle, mask-matching timer in registration
    /// order, latching its firing (the deadline advances one period).
    pub fn claim_ready_timer(
        &self,
        resource: WorkerResource,
        now: Instant,
    ) -> Option<ClaimedWork> {
        let timers = self.timers.read().unwrap();
        for entry in timers.iter() {
            if !entry.mask.matches(resource) || entry.is_busy() {
                continue;
            }
            let timer = entry.timer().expect("timer list holds timer entries");
            if !timer.is_ready(now) {
                continue;
            }
            if !entry.try_claim() {
                continue;
            }
            // Re-check under the claim: a racing worker may have fired
            // this deadline between our check and the claim.
            if timer.is_ready(now) {
                let deadline = timer.fire();
                return Some(ClaimedWork {
                    entry: Arc::clone(entry),
                    event: ClaimedEvent::TimerFired { deadline },
                    claim_time: now,
                });
            }
            entry.unclaim();
        }
        None
    }

    /// Search for the next claimable callback for a worker.
    ///
    /// Order: timers in registration order, then subscribers, servers and
    /// clients, each scanned circularly starting one past the worker's
    /// `Position` cursor. Claiming consumes the event (or latches the timer
    /// firing and advances its deadline) and, for non-timer lists, moves the
    /// cursor to the served index.
    pub fn next_ready(
        &self,
        resource: WorkerResource,
        offsets: &mut OffsetVector,
        now: Instant,
        bus: &MessageBus,
    ) -> Option<ClaimedWork> {
        if let Some(work) = self.claim_ready_timer(resource, now) {
            return Some(work);
        }

        for which in NON_TIMER_LISTS {
            let list = match which {
                NonTimerList::Subscribers => &self.subscribers,
                NonTimerList::Servers => &self.servers,
                NonTimerList::Clients => &self.clients,
            };
            let entries = list.read().unwrap();
            let len = entries.len();
            if len == 0 {
                continue;
            }
            // Positions live in 0..=len; len acts as the virtual start-of-
            // search slot that wraps to index zero.
            let modulus = len + 1;
            let pos = offsets.positions[which as usize].min(len);
            for step in 1..=modulus {
                let idx = (pos + step) % modulus;
                if idx == len {
                    continue;
                }
                let entry = &entries[idx];
                if !entry.mask.matches(resource) || entry.is_busy() {
                    continue;
                }
                if !entry.has_pending_event(bus) {
                    continue;
                }
                if !entry.try_claim() {
                    continue;
                }
                match entry.dequeue_event(bus) {
                    Some(event) => {
                        offsets.positions[which as usize] = idx;
                        return Some(ClaimedWork {
                            entry: Arc::clone(entry),
                            event,
                            claim_time: now,
                        });
                    }
                    // Lost the event to a racing worker; keep scanning.
                    None => entry.unclaim(),
                }
            }
        }
        None
    }

    /// Mark a claimed callback idle again after its body finished.
    pub fn release(&self, work: &ClaimedWork) -> Result<(), RegistryError> {
        self.release_entry(&work.entry)
    }

    pub(crate) fn release_entry(&self, entry: &CallbackEntry) -> Result<(), RegistryError> {
        entry
            .busy
            .compare_exchange(true, false, Ordering::SeqCst, Ordering::SeqCst)
            .map(|_| ())
            .map_err(|_| RegistryError::DoubleRelease)
    }

    /// Whether any callback is claimable by `resource` right now, without
    /// claiming anything. Used to audit work conservation in the
    /// deterministic backend.
    pub fn any_claimable(&self, resource: WorkerResource, now: Instant, bus: &MessageBus) -> bool {
        if self
            .timers
            .read()
            .unwrap()
            .iter()
            .any(|e| e.mask.matches(resource) && !e.is_busy() && e.timer().is_some_and(|t| t.is_ready(now)))
        {
            return true;
        }
        for list in [&self.subscribers, &self.servers, &self.clients] {
            if list
                .read()
                .unwrap()
                .iter()
                .any(|e| e.mask.matches(resource) && !e.is_busy() && e.has_pending_event(bus))
            {
                return true;
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::TopicName;
    use crate::time::Duration;
    use proptest::prelude::*;

    fn topic(name: &str) -> TopicName {
        TopicName::new(name).unwrap()
    }

    fn msg(bus: &MessageBus, t: &TopicName) {
        bus.publish(t, Arc::from(vec![0u8].into_boxed_slice()), Instant::EPOCH);
    }

    fn sw_mask() -> ResourceMask {
        ResourceMask::software(Duration::from_millis(1))
    }

    fn hw_mask(slots: &[u32]) -> ResourceMask {
        let map = slots.iter().map(|&s| (SlotId::new(s), BitstreamId::from_raw(s))).collect();
        ResourceMask::hardware(HardwareBinding::new(Duration::from_millis(1), map))
    }

    fn at(ms: u64) -> Instant {
        Instant::from_nanos(ms * 1_000_000)
    }

    struct Fixture {
        bus: MessageBus,
        lists: CallbackLists,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture { bus: MessageBus::new(), lists: CallbackLists::new() }
        }

        fn add_subscriber(&self, name: &str, t: &TopicName, mask: ResourceMask) -> CallbackId {
            let sub = self.bus.subscribe(t, 100);
            self.lists.register(name, mask, SourceSpec::Subscription(sub), None, &self.bus).unwrap()
        }
    }

    #[test]
    fn registration_assigns_ids_and_indices() {
        let f = Fixture::new();
        let a = f.add_subscriber("a", &topic("/a"), sw_mask());
        let b = f.add_subscriber("b", &topic("/b"), sw_mask());
        assert_ne!(a, b);
        assert_eq!(f.lists.find(a).unwrap().registration_index(), 0);
        assert_eq!(f.lists.find(b).unwrap().registration_index(), 1);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let f = Fixture::new();
        let sub = f.bus.subscribe(&topic("/a"), 10);
        let err = f
            .lists
            .register("a", ResourceMask::default(), SourceSpec::Subscription(sub), None, &f.bus)
            .unwrap_err();
        assert_eq!(err, RegistryError::EmptyMask);
        let err = f
            .lists
            .register(
                "b",
                ResourceMask::hardware(HardwareBinding::new(Duration::from_millis(1), BTreeMap::new())),
                SourceSpec::Subscription(sub),
                None,
                &f.bus,
            )
            .unwrap_err();
        assert_eq!(err, RegistryError::EmptyMask);
    }

    #[test]
    fn hardware_only_mask_matches_its_slot_only() {
        let mask = hw_mask(&[1]);
        assert!(mask.matches(WorkerResource::Slot(SlotId::new(1))));
        assert!(!mask.matches(WorkerResource::Slot(SlotId::new(0))));
        assert!(!mask.matches(WorkerResource::Software));
    }

    #[test]
    fn ready_timer_claimed_before_pending_subscriber() {
        let f = Fixture::new();
        let t = topic("/s");
        f.add_subscriber("sub", &t, sw_mask());
        msg(&f.bus, &t);
        let timer_id = f
            .lists
            .register(
                "tick",
                sw_mask(),
                SourceSpec::Timer { period: Duration::from_millis(10), first_deadline: at(10) },
                None,
                &f.bus,
            )
            .unwrap();

        let mut offsets = OffsetVector::new(&f.lists);
        let work = f.lists.next_ready(WorkerResource::Software, &mut offsets, at(10), &f.bus).unwrap();
        assert_eq!(work.entry.id(), timer_id);
        assert!(matches!(work.event, ClaimedEvent::TimerFired { .. }));
    }

    #[test]
    fn fresh_offsets_serve_registration_order() {
        let f = Fixture::new();
        let mut ids = Vec::new();
        for name in ["s0", "s1", "s2"] {
            let t = topic(&format!("/{name}"));
            let id = f.add_subscriber(name, &t, sw_mask());
            msg(&f.bus, &t);
            ids.push(id);
        }
        let mut offsets = OffsetVector::new(&f.lists);
        assert_eq!(offsets.positions()[0], 3);
        let mut served = Vec::new();
        for _ in 0..3 {
            let w = f.lists.next_ready(WorkerResource::Software, &mut offsets, at(0), &f.bus).unwrap();
            served.push(w.entry.id());
            f.lists.release(&w).unwrap();
        }
        assert_eq!(served, ids);
    }

    #[test]
    fn mask_mismatch_is_skipped() {
        let f = Fixture::new();
        let ta = topic("/a");
        let tb = topic("/b");
        f.add_subscriber("a", &ta, hw_mask(&[1]));
        let b = f.add_subscriber("b", &tb, hw_mask(&[2]));
        msg(&f.bus, &ta);
        msg(&f.bus, &tb);
        let mut offsets = OffsetVector::new(&f.lists);
        let w = f
            .lists
            .next_ready(WorkerResource::Slot(SlotId::new(2)), &mut offsets, at(0), &f.bus)
            .unwrap();
        assert_eq!(w.entry.id(), b);
    }

    #[test]
    fn busy_entries_are_never_reclaimed() {
        let f = Fixture::new();
        let t = topic("/a");
        f.add_subscriber("a", &t, sw_mask());
        msg(&f.bus, &t);
        msg(&f.bus, &t);
        let mut o1 = OffsetVector::new(&f.lists);
        let mut o2 = OffsetVector::new(&f.lists);
        let w = f.lists.next_ready(WorkerResource::Software, &mut o1, at(0), &f.bus).unwrap();
        // Second worker sees the entry busy even though a message is pending.
        assert!(f.lists.next_ready(WorkerResource::Software, &mut o2, at(0), &f.bus).is_none());
        f.lists.release(&w).unwrap();
        assert!(f.lists.next_ready(WorkerResource::Software, &mut o2, at(0), &f.bus).is_some());
    }

    #[test]
    fn release_twice_is_a_logic_error() {
        let f = Fixture::new();
        let t = topic("/a");
        f.add_subscriber("a", &t, sw_mask());
        msg(&f.bus, &t);
        let mut offsets = OffsetVector::new(&f.lists);
        let w = f.lists.next_ready(WorkerResource::Software, &mut offsets, at(0), &f.bus).unwrap();
        assert!(f.lists.release(&w).is_ok());
        assert_eq!(f.lists.release(&w), Err(RegistryError::DoubleRelease));
    }

    #[test]
    fn claim_consumes_exactly_one_event() {
        let f = Fixture::new();
        let t = topic("/a");
        f.add_subscriber("a", &t, sw_mask());
        msg(&f.bus, &t);
        let mut offsets = OffsetVector::new(&f.lists);
        let w = f.lists.next_ready(WorkerResource::Software, &mut offsets, at(0), &f.bus).unwrap();
        f.lists.release(&w).unwrap();
        assert!(f.lists.next_ready(WorkerResource::Software, &mut offsets, at(0), &f.bus).is_none());
    }

    #[test]
    fn concurrent_workers_never_share_a_callback() {
        use std::sync::atomic::AtomicUsize;
        let f = Arc::new(Fixture::new());
        let t = topic("/a");
        f.add_subscriber("a", &t, sw_mask());
        for _ in 0..2_000 {
            msg(&f.bus, &t);
        }
        let in_flight = Arc::new(AtomicUsize::new(0));
        let max_seen = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..4 {
            let f = Arc::clone(&f);
            let in_flight = Arc::clone(&in_flight);
            let max_seen = Arc::clone(&max_seen);
            handles.push(std::thread::spawn(move || {
                let mut offsets = OffsetVector::new(&f.lists);
                let mut claimed = 0u64;
                loop {
                    match f.lists.next_ready(WorkerResource::Software, &mut offsets, at(0), &f.bus) {
                        Some(w) => {
                            let cur = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                            max_seen.fetch_max(cur, Ordering::SeqCst);
                            std::hint::spin_loop();
                            in_flight.fetch_sub(1, Ordering::SeqCst);
                            f.lists.release(&w).unwrap();
                            claimed += 1;
                        }
                        None => break,
                    }
                }
                claimed
            }));
        }
        let total: u64 = handles.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(total, 2_000, "every event claimed exactly once");
        assert_eq!(max_seen.load(Ordering::SeqCst), 1, "busy flag honored by all workers");
    }

    proptest! {
        // With k permanently-ready entries and one worker, every window of
        // k consecutive claims serves each entry exactly once.
        #[test]
        fn round_robin_fairness_window(k in 1usize..8, windows in 1usize..5) {
            let f = Fixture::new();
            let mut ids = Vec::new();
            for i in 0..k {
                let t = topic(&format!("/t{i}"));
                let id = f.add_subscriber(&format!("s{i}"), &t, sw_mask());
                for _ in 0..(windows + 1) {
                    msg(&f.bus, &t);
                }
                ids.push(id);
            }
            let mut offsets = OffsetVector::new(&f.lists);
            for _ in 0..windows {
                let mut seen = std::collections::HashSet::new();
                for _ in 0..k {
                    let w = f
                        .lists
                        .next_ready(WorkerResource::Software, &mut offsets, at(0), &f.bus)
                        .unwrap();
                    seen.insert(w.entry.id());
                    f.lists.release(&w).unwrap();
                }
                prop_assert_eq!(seen.len(), k);
            }
        }
    }
}
