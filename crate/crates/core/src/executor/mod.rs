//! The two schedulers: the standard snapshot-based executor and the hybrid
//! executor that dispatches callbacks to software workers and to hardware
//! workers bound to reconfigurable slots.
//!
//! Both run on two interchangeable backends. The discrete-event backend
//! models every worker inside one event loop over virtual time and is fully
//! deterministic; the threaded backend runs each worker as a real thread
//! and turns modeled durations into (scaled) real sleeps.

mod sim;
mod threads;

pub use sim::{SimCtx, SimHooks, SimOptions, SimOutcome, SnapshotTrace, StandardSimOutcome};

pub(crate) mod threads_support {
    pub(crate) use super::threads::{precise_sleep, Parker};
}

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::bus::MessageBus;
use crate::clock::Clock;
use crate::registry::{
    CallbackBody, CallbackId, CallbackLists, HardwareBinding, RegistryError, ResourceMask,
    SourceSpec, WorkerResource,
};
use crate::slots::{SlotError, SlotId, SlotManager};
use crate::time::{Duration, Instant};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("invalid executor config: {0}")]
    InvalidConfig(String),
    #[error("mask {mask_bits:#b} references slots outside 0..{slots}")]
    InvalidMask { mask_bits: u32, slots: u32 },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Slot(#[from] SlotError),
}

/// Sizing and pacing of an executor instance.
#[derive(Clone, Debug)]
pub struct ExecutorConfig {
    pub sw_workers: usize,
    pub hw_workers: usize,
    /// Pause between polls when a worker finds nothing claimable.
    pub wait_time: Duration,
    /// Where partial bitstreams would live; an opaque label here.
    pub bitstream_path: String,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            sw_workers: 1,
            hw_workers: 0,
            wait_time: Duration::from_millis(1),
            bitstream_path: String::new(),
        }
    }
}

/// Identity of a worker: a software worker index or the slot a hardware
/// worker serves.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum WorkerKind {
    Software(usize),
    Hardware(SlotId),
}

impl WorkerKind {
    pub fn resource(self) -> WorkerResource {
        match self {
            WorkerKind::Software(_) => WorkerResource::Software,
            WorkerKind::Hardware(slot) => WorkerResource::Slot(slot),
        }
    }
}

impl fmt::Display for WorkerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkerKind::Software(i) => write!(f, "sw{i}"),
            WorkerKind::Hardware(slot) => write!(f, "hw{slot}"),
        }
    }
}

/// One completed callback execution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionRecord {
    pub callback: CallbackId,
    pub worker: WorkerKind,
    pub claim_time: Instant,
    pub start_time: Instant,
    pub end_time: Instant,
    /// Port wait plus bitstream transfer; zero for software workers and for
    /// hardware executions that found their bitstream already loaded.
    pub reconfig_spent: Duration,
}

/// When a spinning executor stops. Conditions compose; the first one hit
/// wins.
#[derive(Clone, Default)]
pub struct StopCondition {
    max_time: Option<Duration>,
    max_executions: Option<u64>,
    shutdown: Option<Arc<AtomicBool>>,
}

impl StopCondition {
    /// Stop once this much time has elapsed since spin started.
    pub fn after(max_time: Duration) -> Self {
        StopCondition { max_time: Some(max_time), ..Default::default() }
    }

    pub fn executions(max: u64) -> Self {
        StopCondition { max_executions: Some(max), ..Default::default() }
    }

    pub fn flag(shutdown: Arc<AtomicBool>) -> Self {
        StopCondition { shutdown: Some(shutdown), ..Default::default() }
    }

    pub fn with_max_executions(mut self, max: u64) -> Self {
        self.max_executions = Some(max);
        self
    }

    pub fn with_flag(mut self, shutdown: Arc<AtomicBool>) -> Self {
        self.shutdown = Some(shutdown);
        self
    }

    pub fn deadline(&self, start: Instant) -> Option<Instant> {
        self.max_time.map(|d| start + d)
    }

    pub fn executions_reached(&self, executions: u64) -> bool {
        self.max_executions.is_some_and(|max| executions >= max)
    }

    pub fn shutdown_requested(&self) -> bool {
        self.shutdown.as_ref().is_some_and(|f| f.load(Ordering::SeqCst))
    }
}

/// The hybrid executor: callback lists shared by `m` software workers and
/// one hardware worker per reconfigurable slot.
pub struct HybridExecutor {
    config: ExecutorConfig,
    bus: Arc<MessageBus>,
    lists: Arc<CallbackLists>,
    slots: Arc<SlotManager>,
    clock: Clock,
    workers: Vec<WorkerKind>,
    executions: AtomicU64,
}

impl HybridExecutor {
    pub fn new(
        config: ExecutorConfig,
        bus: Arc<MessageBus>,
        slots: Arc<SlotManager>,
        clock: Clock,
    ) -> Result<Self, ExecError> {
        if config.sw_workers + config.hw_workers == 0 {
            return Err(ExecError::InvalidConfig("need at least one worker".into()));
        }
        if config.hw_workers != slots.slot_count() {
            return Err(ExecError::InvalidConfig(format!(
                "{} hardware workers but {} slots; one worker serves one slot",
                config.hw_workers,
                slots.slot_count()
            )));
        }
        let mut workers = Vec::with_capacity(config.sw_workers + config.hw_workers);
        workers.extend((0..config.sw_workers).map(WorkerKind::Software));
        workers.extend((0..config.hw_workers).map(|i| WorkerKind::Hardware(SlotId::new(i as u32))));
        Ok(HybridExecutor {
            config,
            bus,
            lists: Arc::new(CallbackLists::new()),
            slots,
            clock,
            workers,
            executions: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.config
    }

    pub fn workers(&self) -> &[WorkerKind] {
        &self.workers
    }

    pub fn bus(&self) -> &Arc<MessageBus> {
        &self.bus
    }

    pub fn lists(&self) -> &Arc<CallbackLists> {
        &self.lists
    }

    pub fn slots(&self) -> &Arc<SlotManager> {
        &self.slots
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    /// Total executions across all spins of this executor.
    pub fn execution_count(&self) -> u64 {
        self.executions.load(Ordering::SeqCst)
    }

    fn decode_mask(&self, mask_bits: u32) -> Result<Vec<SlotId>, ExecError> {
        let n = self.slots.slot_count() as u32;
        if mask_bits == 0 || (n < 32 && mask_bits >> n != 0) {
            return Err(ExecError::InvalidMask { mask_bits, slots: n });
        }
        Ok((0..n).filter(|i| mask_bits & (1 << i) != 0).map(SlotId::new).collect())
    }

    /// Register a hardware callback. Bit `i` of `mask_bits` marks slot `i`
    /// as eligible; a bitstream is bound per eligible slot.
    pub fn add_hw_callback(
        &self,
        name: &str,
        mask_bits: u32,
        source: SourceSpec,
        hw_exec: Duration,
        body: Option<CallbackBody>,
    ) -> Result<CallbackId, ExecError> {
        let slots = self.decode_mask(mask_bits)?;
        let id = self.lists.reserve_id();
        let mut bound = std::collections::BTreeMap::new();
        for slot in slots {
            bound.insert(slot, self.slots.register_bitstream(id, slot)?);
        }
        let mask = ResourceMask::hardware(HardwareBinding::new(hw_exec, bound));
        self.lists.register_reserved(id, name, mask, source, body, &self.bus)?;
        Ok(id)
    }

    /// Register a software callback with its modeled execution time.
    pub fn add_sw_callback(
        &self,
        name: &str,
        source: SourceSpec,
        sw_exec: Duration,
        body: Option<CallbackBody>,
    ) -> Result<CallbackId, ExecError> {
        let id = self.lists.register(name, ResourceMask::software(sw_exec), source, body, &self.bus)?;
        Ok(id)
    }

    /// Convenience for timer registration: first deadline is one period
    /// from now.
    pub fn timer_source(&self, period: Duration) -> SourceSpec {
        SourceSpec::Timer { period, first_deadline: self.clock.now() + period }
    }

    /// Run the deterministic discrete-event backend until `stop`.
    pub fn spin_sim(&self, stop: StopCondition) -> SimOutcome {
        self.spin_sim_with_hooks(stop, &mut sim::NoHooks, SimOptions::default())
    }

    /// Discrete-event spin with scenario hooks (modeled external actors).
    pub fn spin_sim_with_hooks(
        &self,
        stop: StopCondition,
        hooks: &mut dyn SimHooks,
        options: SimOptions,
    ) -> SimOutcome {
        sim::spin_hybrid(self, stop, hooks, options)
    }

    /// Run the threaded backend: every worker is an OS thread and modeled
    /// durations become real sleeps multiplied by `time_scale`.
    pub fn spin_threads(&self, stop: StopCondition, time_scale: f64) -> Vec<ExecutionRecord> {
        threads::spin_hybrid(self, stop, time_scale)
    }

    pub(crate) fn count_execution(&self) -> u64 {
        self.executions.fetch_add(1, Ordering::SeqCst) + 1
    }
}

/// The standard snapshot-based executor: ready non-timer callbacks are
/// collected into a `readySet` and the inner loop drains it (timers first,
/// then subscribers, servers, clients) before a new snapshot is taken.
pub struct StandardExecutor {
    bus: Arc<MessageBus>,
    lists: Arc<CallbackLists>,
    clock: Clock,
    workers: usize,
    wait_time: Duration,
}

impl StandardExecutor {
    pub fn new(bus: Arc<MessageBus>, clock: Clock, workers: usize, wait_time: Duration) -> Result<Self, ExecError> {
        if workers == 0 {
            return Err(ExecError::InvalidConfig("need at least one worker".into()));
        }
        Ok(StandardExecutor { bus, lists: Arc::new(CallbackLists::new()), clock, workers, wait_time })
    }

    pub fn bus(&self) -> &Arc<MessageBus> {
        &self.bus
    }

    pub fn lists(&self) -> &Arc<CallbackLists> {
        &self.lists
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn wait_time(&self) -> Duration {
        self.wait_time
    }

    pub fn add_callback(
        &self,
        name: &str,
        source: SourceSpec,
        exec: Duration,
        body: Option<CallbackBody>,
    ) -> Result<CallbackId, ExecError> {
        let id = self.lists.register(name, ResourceMask::software(exec), source, body, &self.bus)?;
        Ok(id)
    }

    pub fn timer_source(&self, period: Duration) -> SourceSpec {
        SourceSpec::Timer { period, first_deadline: self.clock.now() + period }
    }

    /// Deterministic discrete-event run. The outcome carries the snapshot
    /// trace so tests can audit snapshot semantics.
    pub fn run_sim(&self, stop: StopCondition) -> StandardSimOutcome {
        self.run_sim_with_hooks(stop, &mut sim::NoHooks)
    }

    pub fn run_sim_with_hooks(&self, stop: StopCondition, hooks: &mut dyn SimHooks) -> StandardSimOutcome {
        sim::run_standard(self, stop, hooks)
    }

    /// Threaded run with worker threads pulling from a shared snapshot.
    pub fn run_threads(&self, stop: StopCondition, time_scale: f64) -> Vec<ExecutionRecord> {
        threads::run_standard(self, stop, time_scale)
    }
}
