//! Threaded backend: each worker is an OS thread and modeled durations
//! become real sleeps multiplied by the run's time scale.
//!
//! Waiting is event-driven rather than pure polling: workers attach wakers
//! to the queues their mask can serve, spin briefly after an empty poll to
//! catch back-to-back traffic, then park until woken or until the next
//! timer deadline. Short modeled durations are slept with a coarse sleep
//! plus a spin tail so scaled-down runs keep their proportions.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use crate::bus::MessageBus;
use crate::registry::{BodyCtx, CallbackEntry, CallbackLists, ClaimedWork, OffsetVector, WorkerResource};
use crate::time::{Duration, Instant};

use super::{ExecutionRecord, HybridExecutor, StandardExecutor, StopCondition, WorkerKind};

/// How long a worker busy-retries an empty poll before parking.
const IDLE_SPIN: std::time::Duration = std::time::Duration::from_micros(20);
/// Floor and ceiling for park timeouts; wakers provide the latency.
const PARK_MIN: std::time::Duration = std::time::Duration::from_millis(2);
const PARK_MAX: std::time::Duration = std::time::Duration::from_millis(50);

/// Sleep out a modeled duration at the given scale.
pub(crate) fn sleep_scaled(model: Duration, scale: f64) {
    precise_sleep(model.mul_f64(scale).to_std());
}

/// Coarse sleep for the bulk, spin for the tail, so sub-millisecond wall
/// targets stay accurate.
pub(crate) fn precise_sleep(wall: std::time::Duration) {
    let target = std::time::Instant::now() + wall;
    let coarse = wall.saturating_sub(std::time::Duration::from_micros(150));
    if coarse >= std::time::Duration::from_micros(100) {
        std::thread::sleep(coarse);
    }
    while std::time::Instant::now() < target {
        std::hint::spin_loop();
    }
}

/// One flag-and-condvar waiter. A notification delivered while the owner
/// is not parked is latched, so wake-ups cannot be lost.
pub struct Parker {
    flag: Mutex<bool>,
    cv: Condvar,
}

impl Parker {
    pub fn new() -> Arc<Self> {
        Arc::new(Parker { flag: Mutex::new(false), cv: Condvar::new() })
    }

    pub fn notify(&self) {
        *self.flag.lock().unwrap() = true;
        self.cv.notify_one();
    }

    pub fn park_timeout(&self, timeout: std::time::Duration) {
        let mut flag = self.flag.lock().unwrap();
        if !*flag {
            let (guard, _) = self.cv.wait_timeout(flag, timeout).unwrap();
            flag = guard;
        }
        *flag = false;
    }

    pub fn waker(self: &Arc<Self>) -> crate::bus::Waker {
        let parker = Arc::clone(self);
        Arc::new(move || parker.notify())
    }
}

/// Subscribe a worker's parker to every queue its resource can serve.
fn attach_wakers(lists: &CallbackLists, bus: &MessageBus, resource: WorkerResource, parker: &Arc<Parker>) {
    use crate::registry::EventSource;
    for entry in lists.all_entries() {
        if !entry.mask().matches(resource) {
            continue;
        }
        match entry.source() {
            EventSource::Timer(_) => {}
            EventSource::Subscription(s) => bus.attach_subscription_waker(*s, parker.waker()),
            EventSource::Server(s) => bus.attach_request_waker(*s, parker.waker()),
            EventSource::Client(c) => bus.attach_response_waker(*c, parker.waker()),
        }
    }
}

fn park_duration(
    lists: &CallbackLists,
    resource: WorkerResource,
    now: Instant,
    scale: f64,
) -> std::time::Duration {
    let mut timeout = PARK_MAX;
    if let Some(deadline) = lists.next_timer_deadline(resource) {
        let wall = deadline.duration_since(now).mul_f64(scale).to_std();
        timeout = timeout.min(wall);
    }
    timeout.max(PARK_MIN)
}

struct RunShared<'a> {
    stop_now: &'a AtomicBool,
    executions: &'a AtomicU64,
    stop: &'a StopCondition,
    deadline: Option<Instant>,
}

impl RunShared<'_> {
    fn should_stop(&self, now: Instant) -> bool {
        self.stop_now.load(Ordering::SeqCst)
            || self.stop.shutdown_requested()
            || self.deadline.is_some_and(|d| now >= d)
            || self.stop.executions_reached(self.executions.load(Ordering::SeqCst))
    }
}

fn execute_claim(
    work: ClaimedWork,
    kind: WorkerKind,
    bus: &MessageBus,
    lists: &CallbackLists,
    exec: Option<&HybridExecutor>,
    clock: &crate::clock::Clock,
    scale: f64,
    records: &mut Vec<ExecutionRecord>,
    executions: &AtomicU64,
) {
    let ClaimedWork { entry, event, claim_time } = work;
    let mut reconfig_spent = Duration::ZERO;
    if let (WorkerKind::Hardware(slot), Some(exec)) = (kind, exec) {
        let bs = entry.mask().bitstream_for(slot).expect("mask matched this slot");
        let transferred = exec
            .slots()
            .load_blocking(slot, bs, |d| sleep_scaled(d, scale))
            .expect("bitstream was registered for this slot");
        if !transferred.is_zero() {
            reconfig_spent = clock.now() - claim_time;
        }
    }
    let start = clock.now();
    let exec_time = entry.mask().exec_time(kind.resource()).expect("mask matched");
    sleep_scaled(exec_time, scale);
    let end = clock.now();
    if let Some(body) = entry.body() {
        body(&BodyCtx { bus, now: end }, event);
    } else {
        drop(event);
    }
    lists.release_entry(&entry).expect("entry was claimed");
    records.push(ExecutionRecord {
        callback: entry.id(),
        worker: kind,
        claim_time,
        start_time: start,
        end_time: end,
        reconfig_spent,
    });
    executions.fetch_add(1, Ordering::SeqCst);
    if let Some(exec) = exec {
        exec.count_execution();
    }
}

fn sort_records(mut records: Vec<ExecutionRecord>) -> Vec<ExecutionRecord> {
    records.sort_by_key(|r| (r.end_time, r.start_time, r.claim_time, r.callback.raw()));
    records
}

pub(super) fn spin_hybrid(
    exec: &HybridExecutor,
    stop: StopCondition,
    time_scale: f64,
) -> Vec<ExecutionRecord> {
    let clock = exec.clock().clone();
    assert!(!clock.is_virtual(), "the threaded backend needs a wall clock");
    assert!(time_scale > 0.0);
    let bus = exec.bus().as_ref();
    let lists = exec.lists().as_ref();

    let stop_now = AtomicBool::new(false);
    let executions = AtomicU64::new(0);
    let start = clock.now();
    let deadline = stop.deadline(start);
    let parkers: Vec<Arc<Parker>> = exec.workers().iter().map(|_| Parker::new()).collect();

    let records = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (kind, parker) in exec.workers().iter().copied().zip(&parkers) {
            let clock = clock.clone();
            let shared = RunShared {
                stop_now: &stop_now,
                executions: &executions,
                stop: &stop,
                deadline,
            };
            let parker = Arc::clone(parker);
            handles.push(scope.spawn(move || {
                let resource = kind.resource();
                attach_wakers(lists, bus, resource, &parker);
                let mut offsets = OffsetVector::new(lists);
                let mut records = Vec::new();
                let mut spin_deadline: Option<std::time::Instant> = None;
                loop {
                    let now = clock.now();
                    if shared.should_stop(now) {
                        break;
                    }
                    match lists.next_ready(resource, &mut offsets, now, bus) {
                        Some(work) => {
                            spin_deadline = None;
                            execute_claim(
                                work,
                                kind,
                                bus,
                                lists,
                                Some(exec),
                                &clock,
                                time_scale,
                                &mut records,
                                shared.executions,
                            );
                        }
                        None => {
                            let wall_now = std::time::Instant::now();
                            match spin_deadline {
                                Some(d) if wall_now < d => std::hint::spin_loop(),
                                Some(_) => {
                                    spin_deadline = None;
                                    parker.park_timeout(park_duration(lists, resource, now, time_scale));
                                }
                                None => spin_deadline = Some(wall_now + IDLE_SPIN),
                            }
                        }
                    }
                }
                records
            }));
        }

        // Monitor the stop condition, then unpark everyone and join.
        loop {
            let now = clock.now();
            let done = stop.shutdown_requested()
                || deadline.is_some_and(|d| now >= d)
                || stop.executions_reached(executions.load(Ordering::SeqCst));
            if done {
                break;
            }
            std::thread::sleep(std::time::Duration::from_micros(200));
        }
        stop_now.store(true, Ordering::SeqCst);
        for p in &parkers {
            p.notify();
        }
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect::<Vec<_>>()
    });

    sort_records(records)
}

pub(super) fn run_standard(
    exec: &StandardExecutor,
    stop: StopCondition,
    time_scale: f64,
) -> Vec<ExecutionRecord> {
    let clock = exec.clock().clone();
    assert!(!clock.is_virtual(), "the threaded backend needs a wall clock");
    let bus = exec.bus().as_ref();
    let lists = exec.lists().as_ref();

    let by_id: std::collections::HashMap<_, _> =
        lists.all_entries().into_iter().map(|e| (e.id(), e)).collect();

    // Shared snapshot: remaining entries per category, registration order.
    type Remaining = [std::collections::VecDeque<Arc<CallbackEntry>>; 3];
    let snapshot: Mutex<Remaining> = Mutex::new(Default::default());

    let stop_now = AtomicBool::new(false);
    let executions = AtomicU64::new(0);
    let start = clock.now();
    let deadline = stop.deadline(start);
    let parkers: Vec<Arc<Parker>> = (0..exec.workers()).map(|_| Parker::new()).collect();

    let records = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (i, parker) in parkers.iter().enumerate() {
            let clock = clock.clone();
            let shared = RunShared {
                stop_now: &stop_now,
                executions: &executions,
                stop: &stop,
                deadline,
            };
            let parker = Arc::clone(parker);
            let snapshot = &snapshot;
            let by_id = &by_id;
            let all_parkers = &parkers;
            handles.push(scope.spawn(move || {
                attach_wakers(lists, bus, WorkerResource::Software, &parker);
                let mut records = Vec::new();
                loop {
                    let now = clock.now();
                    if shared.should_stop(now) {
                        break;
                    }
                    // Timers first, checked live.
                    let mut claimed = lists.claim_ready_timer(WorkerResource::Software, now);
                    if claimed.is_none() {
                        let mut remaining = snapshot.lock().unwrap();
                        'search: for _attempt in 0..2 {
                            for deque in remaining.iter_mut() {
                                let mut idx = 0;
                                while idx < deque.len() {
                                    let entry = &deque[idx];
                                    if entry.is_busy() {
                                        idx += 1;
                                        continue;
                                    }
                                    if entry.try_claim() {
                                        if let Some(event) = entry.dequeue_event(bus) {
                                            let entry = deque.remove(idx).expect("in range");
                                            claimed = Some(ClaimedWork {
                                                entry,
                                                event,
                                                claim_time: now,
                                            });
                                            break 'search;
                                        }
                                        entry.unclaim();
                                        deque.remove(idx);
                                        continue;
                                    }
                                    idx += 1;
                                }
                            }
                            if remaining.iter().all(|d| d.is_empty()) {
                                let set = bus.collect_ready();
                                if set.is_empty() {
                                    break;
                                }
                                for (slot, ids) in remaining.iter_mut().zip([
                                    &set.ready_subscribers,
                                    &set.ready_servers,
                                    &set.ready_clients,
                                ]) {
                                    *slot = ids.iter().filter_map(|id| by_id.get(id).cloned()).collect();
                                }
                            } else {
                                break; // entries remain but all busy
                            }
                        }
                    }
                    match claimed {
                        Some(work) => {
                            execute_claim(
                                work,
                                WorkerKind::Software(i),
                                bus,
                                lists,
                                None,
                                &clock,
                                time_scale,
                                &mut records,
                                shared.executions,
                            );
                            // The release and any published results may
                            // unblock peers waiting on busy entries.
                            for p in all_parkers {
                                p.notify();
                            }
                        }
                        None => {
                            parker.park_timeout(park_duration(
                                lists,
                                WorkerResource::Software,
                                now,
                                time_scale,
                            ));
                        }
                    }
                }
                records
            }));
        }

        loop {
            let now = clock.now();
            let done = stop.shutdown_requested()
                || deadline.is_some_and(|d| now >= d)
                || stop.executions_reached(executions.load(Ordering::SeqCst));
            if done {
                break;
            }
            std::thread::sleep(std::time::Duration::from_micros(200));
        }
        stop_now.store(true, Ordering::SeqCst);
        for p in &parkers {
            p.notify();
        }
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect::<Vec<_>>()
    });

    sort_records(records)
}
