//! Deterministic discrete-event backend.
//!
//! Workers are modeled actors driven by one event loop over virtual time.
//! Event ordering is total: (time, class, entity, insertion seq), where
//! deliveries and scenario hooks sort before completions, and completions
//! before worker polls, at equal timestamps. Worker ids break remaining
//! ties, lowest first. Given a fixed scenario the produced record sequence
//! is bit-identical across runs.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

use crate::bus::{MessageBus, ReadySet};
use crate::registry::{BodyCtx, CallbackEntry, ClaimedEvent, ClaimedWork, OffsetVector, WorkerResource};
use crate::time::{Duration, Instant};

use super::{ExecutionRecord, HybridExecutor, StandardExecutor, StopCondition, WorkerKind};

const CLASS_HOOK: u8 = 0;
const CLASS_DONE: u8 = 1;
const CLASS_WAKE: u8 = 2;

#[derive(Debug)]
enum SimEvent {
    Wake { worker: usize, gen: u64 },
    Done { worker: usize },
    Hook { id: u64 },
}

struct QueueItem {
    time: Instant,
    class: u8,
    entity: u64,
    seq: u64,
    event: SimEvent,
}

impl QueueItem {
    fn key(&self) -> (Instant, u8, u64, u64) {
        (self.time, self.class, self.entity, self.seq)
    }
}

impl PartialEq for QueueItem {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for QueueItem {}
impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueItem {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        // Reversed: BinaryHeap is a max-heap, we want earliest first.
        other.key().cmp(&self.key())
    }
}

#[derive(Default)]
struct EventQueue {
    heap: BinaryHeap<QueueItem>,
    seq: u64,
}

impl EventQueue {
    fn push(&mut self, time: Instant, class: u8, entity: u64, event: SimEvent) {
        self.seq += 1;
        self.heap.push(QueueItem { time, class, entity, seq: self.seq, event });
    }

    fn pop(&mut self) -> Option<QueueItem> {
        self.heap.pop()
    }
}

/// Handle passed to scenario hooks for scheduling their own events.
pub struct SimCtx<'a> {
    pub bus: &'a MessageBus,
    now: Instant,
    scheduled: Vec<(Instant, u64)>,
}

impl SimCtx<'_> {
    pub fn now(&self) -> Instant {
        self.now
    }

    /// Schedule `hook(id)` at `at` (clamped to the current time if earlier).
    pub fn schedule_hook(&mut self, at: Instant, id: u64) {
        self.scheduled.push((at.max(self.now), id));
    }
}

/// Modeled external actors (scenario clients, load generators) driven by
/// the same event loop as the workers.
pub trait SimHooks {
    fn on_start(&mut self, _ctx: &mut SimCtx<'_>) {}
    fn on_hook(&mut self, _id: u64, _ctx: &mut SimCtx<'_>) {}
    /// Invoked after every callback completion, body already run.
    fn on_completion(&mut self, _record: &ExecutionRecord, _ctx: &mut SimCtx<'_>) {}
}

pub struct NoHooks;
impl SimHooks for NoHooks {}

#[derive(Clone, Copy, Default)]
pub struct SimOptions {
    /// After every empty poll, double-check that no claimable callback
    /// existed at that instant and count violations.
    pub verify_work_conservation: bool,
}

pub struct SimOutcome {
    pub records: Vec<ExecutionRecord>,
    /// Number of empty polls that overlooked claimable work (always zero
    /// unless verification found a scheduler defect).
    pub conservation_violations: u64,
}

/// One refill of the standard executor's readySet.
#[derive(Clone, Debug)]
pub struct SnapshotTrace {
    pub time: Instant,
    pub iteration: u64,
    pub set: ReadySet,
}

pub struct StandardSimOutcome {
    pub records: Vec<ExecutionRecord>,
    pub snapshots: Vec<SnapshotTrace>,
}

struct InFlight {
    work: ClaimedWork,
    start: Instant,
    reconfig: Duration,
}

fn run_body(bus: &MessageBus, entry: &CallbackEntry, event: ClaimedEvent, now: Instant) {
    if let Some(body) = entry.body() {
        body(&BodyCtx { bus, now }, event);
    }
}

fn drain_hooks(ctx: SimCtx<'_>, queue: &mut EventQueue) {
    for (at, id) in ctx.scheduled {
        queue.push(at, CLASS_HOOK, id, SimEvent::Hook { id });
    }
}

pub(super) fn spin_hybrid(
    exec: &HybridExecutor,
    stop: StopCondition,
    hooks: &mut dyn SimHooks,
    options: SimOptions,
) -> SimOutcome {
    let clock = exec.clock();
    assert!(clock.is_virtual(), "the discrete-event backend needs a virtual clock");
    let bus = exec.bus().as_ref();
    let lists = exec.lists();
    let slots = exec.slots();
    let wait_time = exec.config().wait_time;

    struct Worker {
        kind: WorkerKind,
        resource: WorkerResource,
        offsets: OffsetVector,
        current: Option<InFlight>,
        wake_gen: u64,
    }

    let mut workers: Vec<Worker> = exec
        .workers()
        .iter()
        .map(|&kind| Worker {
            kind,
            resource: kind.resource(),
            offsets: OffsetVector::new(lists),
            current: None,
            wake_gen: 0,
        })
        .collect();

    let start = clock.now();
    let deadline = stop.deadline(start);
    let mut queue = EventQueue::default();
    let mut records = Vec::new();
    let mut violations = 0u64;

    {
        let ctx = {
            let mut ctx = SimCtx { bus, now: start, scheduled: Vec::new() };
            hooks.on_start(&mut ctx);
            ctx
        };
        drain_hooks(ctx, &mut queue);
    }
    for i in 0..workers.len() {
        queue.push(start, CLASS_WAKE, i as u64, SimEvent::Wake { worker: i, gen: 0 });
    }

    'main: while let Some(item) = queue.pop() {
        if let Some(d) = deadline {
            if item.time > d {
                clock.advance_to(d);
                break;
            }
        }
        if stop.shutdown_requested() {
            break;
        }
        clock.advance_to(item.time);
        let now = item.time;

        match item.event {
            SimEvent::Wake { worker, gen } => {
                let w = &mut workers[worker];
                if gen != w.wake_gen || w.current.is_some() {
                    continue; // superseded wake
                }
                match lists.next_ready(w.resource, &mut w.offsets, now, bus) {
                    Some(work) => {
                        let (start_exec, reconfig) = match w.kind {
                            WorkerKind::Software(_) => (now, Duration::ZERO),
                            WorkerKind::Hardware(slot) => {
                                let bs = work
                                    .entry
                                    .mask()
                                    .bitstream_for(slot)
                                    .expect("mask matched this slot");
                                let load = slots
                                    .plan_load(slot, bs, now)
                                    .expect("bitstream was registered for this slot");
                                (now + load.total(), load.total())
                            }
                        };
                        let exec_time = work
                            .entry
                            .mask()
                            .exec_time(w.resource)
                            .expect("mask matched this resource");
                        let end = start_exec + exec_time;
                        w.current = Some(InFlight { work, start: start_exec, reconfig });
                        queue.push(end, CLASS_DONE, worker as u64, SimEvent::Done { worker });
                    }
                    None => {
                        if options.verify_work_conservation
                            && lists.any_claimable(w.resource, now, bus)
                        {
                            violations += 1;
                        }
                        w.wake_gen += 1;
                        let gen = w.wake_gen;
                        queue.push(now + wait_time, CLASS_WAKE, worker as u64, SimEvent::Wake { worker, gen });
                    }
                }
            }
            SimEvent::Done { worker } => {
                let w = &mut workers[worker];
                let InFlight { work, start, reconfig } = w.current.take().expect("worker was busy");
                let ClaimedWork { entry, event, claim_time } = work;
                run_body(bus, &entry, event, now);
                lists.release_entry(&entry).expect("entry was claimed");
                let record = ExecutionRecord {
                    callback: entry.id(),
                    worker: w.kind,
                    claim_time,
                    start_time: start,
                    end_time: now,
                    reconfig_spent: reconfig,
                };
                exec.count_execution();
                records.push(record.clone());
                let ctx = {
                    let mut ctx = SimCtx { bus, now, scheduled: Vec::new() };
                    hooks.on_completion(&record, &mut ctx);
                    ctx
                };
                drain_hooks(ctx, &mut queue);
                if stop.executions_reached(records.len() as u64) {
                    break 'main;
                }
                let gen = workers[worker].wake_gen;
                queue.push(now, CLASS_WAKE, worker as u64, SimEvent::Wake { worker, gen });
            }
            SimEvent::Hook { id } => {
                let ctx = {
                    let mut ctx = SimCtx { bus, now, scheduled: Vec::new() };
                    hooks.on_hook(id, &mut ctx);
                    ctx
                };
                drain_hooks(ctx, &mut queue);
            }
        }
    }

    // Leave no entry marked busy after the run.
    for w in &mut workers {
        if let Some(f) = w.current.take() {
            let _ = exec.lists().release_entry(&f.work.entry);
        }
    }

    SimOutcome { records, conservation_violations: violations }
}

pub(super) fn run_standard(
    exec: &StandardExecutor,
    stop: StopCondition,
    hooks: &mut dyn SimHooks,
) -> StandardSimOutcome {
    let clock = exec.clock();
    assert!(clock.is_virtual(), "the discrete-event backend needs a virtual clock");
    let bus = exec.bus().as_ref();
    let lists = exec.lists();
    let wait_time = exec.wait_time();

    let by_id: HashMap<_, _> = lists.all_entries().into_iter().map(|e| (e.id(), e)).collect();

    struct Worker {
        current: Option<InFlight>,
        wake_gen: u64,
    }
    let mut workers: Vec<Worker> =
        (0..exec.workers()).map(|_| Worker { current: None, wake_gen: 0 }).collect();

    // Remaining entries of the current snapshot, per category, in
    // registration order.
    let mut remaining: [VecDeque<Arc<CallbackEntry>>; 3] = Default::default();
    let mut snapshots: Vec<SnapshotTrace> = Vec::new();
    let mut iteration = 0u64;

    let start = clock.now();
    let deadline = stop.deadline(start);
    let mut queue = EventQueue::default();
    let mut records = Vec::new();

    {
        let ctx = {
            let mut ctx = SimCtx { bus, now: start, scheduled: Vec::new() };
            hooks.on_start(&mut ctx);
            ctx
        };
        drain_hooks(ctx, &mut queue);
    }
    for i in 0..workers.len() {
        queue.push(start, CLASS_WAKE, i as u64, SimEvent::Wake { worker: i, gen: 0 });
    }

    'main: while let Some(item) = queue.pop() {
        if let Some(d) = deadline {
            if item.time > d {
                clock.advance_to(d);
                break;
            }
        }
        if stop.shutdown_requested() {
            break;
        }
        clock.advance_to(item.time);
        let now = item.time;

        match item.event {
            SimEvent::Wake { worker, gen } => {
                if gen != workers[worker].wake_gen || workers[worker].current.is_some() {
                    continue;
                }
                // 1. Timers first, checked live on every dispatch.
                let mut claimed = lists.claim_ready_timer(WorkerResource::Software, now);
                // 2. Then the snapshot, category order, registration order
                //    within a category. Busy entries stay in the snapshot
                //    for a later dispatch of this same iteration.
                if claimed.is_none() {
                    'outer: for _attempt in 0..2 {
                        for deque in remaining.iter_mut() {
                            let mut i = 0;
                            while i < deque.len() {
                                let entry = &deque[i];
                                if entry.is_busy() {
                                    i += 1;
                                    continue;
                                }
                                if entry.try_claim() {
                                    match entry.dequeue_event(bus) {
                                        Some(event) => {
                                            let entry = deque.remove(i).expect("index in range");
                                            claimed = Some(ClaimedWork {
                                                entry,
                                                event,
                                                claim_time: now,
                                            });
                                            break 'outer;
                                        }
                                        None => {
                                            // Queue drained since the snapshot
                                            // (stop cleanup or a test consumed
                                            // it); drop from the snapshot.
                                            entry.unclaim();
                                            deque.remove(i);
                                            continue;
                                        }
                                    }
                                }
                                i += 1;
                            }
                        }
                        // 3. Snapshot exhausted: take the next one.
                        if remaining.iter().all(|d| d.is_empty()) {
                            let set = bus.collect_ready();
                            iteration += 1;
                            snapshots.push(SnapshotTrace { time: now, iteration, set: set.clone() });
                            for (slot, ids) in remaining.iter_mut().zip([
                                &set.ready_subscribers,
                                &set.ready_servers,
                                &set.ready_clients,
                            ]) {
                                *slot = ids
                                    .iter()
                                    .filter_map(|id| by_id.get(id).cloned())
                                    .collect();
                            }
                            if set.is_empty() {
                                break;
                            }
                        } else {
                            // Entries remain but all are busy; a completion
                            // will wake us.
                            break;
                        }
                    }
                }

                match claimed {
                    Some(work) => {
                        let exec_time = work
                            .entry
                            .mask()
                            .exec_time(WorkerResource::Software)
                            .expect("standard executor runs software callbacks");
                        let end = now + exec_time;
                        workers[worker].current =
                            Some(InFlight { work, start: now, reconfig: Duration::ZERO });
                        queue.push(end, CLASS_DONE, worker as u64, SimEvent::Done { worker });
                    }
                    None => {
                        let w = &mut workers[worker];
                        w.wake_gen += 1;
                        let gen = w.wake_gen;
                        let mut wake_at = now + wait_time;
                        if let Some(dl) = lists.next_timer_deadline(WorkerResource::Software) {
                            if dl > now {
                                wake_at = wake_at.min(dl.max(now));
                            }
                        }
                        queue.push(wake_at, CLASS_WAKE, worker as u64, SimEvent::Wake { worker, gen });
                    }
                }
            }
            SimEvent::Done { worker } => {
                let InFlight { work, start, reconfig } =
                    workers[worker].current.take().expect("worker was busy");
                let ClaimedWork { entry, event, claim_time } = work;
                run_body(bus, &entry, event, now);
                lists.release_entry(&entry).expect("entry was claimed");
                let record = ExecutionRecord {
                    callback: entry.id(),
                    worker: WorkerKind::Software(worker),
                    claim_time,
                    start_time: start,
                    end_time: now,
                    reconfig_spent: reconfig,
                };
                records.push(record.clone());
                let ctx = {
                    let mut ctx = SimCtx { bus, now, scheduled: Vec::new() };
                    hooks.on_completion(&record, &mut ctx);
                    ctx
                };
                drain_hooks(ctx, &mut queue);
                if stop.executions_reached(records.len() as u64) {
                    break 'main;
                }
                // Wake this worker and any idle peers: the release and the
                // body's publishes may unblock them.
                for (i, w) in workers.iter_mut().enumerate() {
                    if w.current.is_none() {
                        w.wake_gen += 1;
                        let gen = w.wake_gen;
                        queue.push(now, CLASS_WAKE, i as u64, SimEvent::Wake { worker: i, gen });
                    }
                }
            }
            SimEvent::Hook { id } => {
                let ctx = {
                    let mut ctx = SimCtx { bus, now, scheduled: Vec::new() };
                    hooks.on_hook(id, &mut ctx);
                    ctx
                };
                drain_hooks(ctx, &mut queue);
            }
        }
    }

    for w in &mut workers {
        if let Some(f) = w.current.take() {
            let _ = lists.release_entry(&f.work.entry);
        }
    }

    StandardSimOutcome { records, snapshots }
}
