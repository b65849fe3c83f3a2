//! Simulated reconfigurable slots, bitstreams and the configuration port.
//!
//! Loading a bitstream into a slot costs `t_offset + size / bandwidth`.
//! All loads are serialized through one configuration port, granted in FIFO
//! order. A slot keeps its last bitstream until overwritten, so repeated
//! executions of the same hardware callback in one slot pay the load cost
//! once.
//!
//! Two load paths share the same state: a virtual-time path used by the
//! discrete-event backend (`plan_load`) and a blocking path used by the
//! threaded backend (`load_blocking`).

use std::fmt;
use std::sync::{Condvar, Mutex, RwLock};

use thiserror::Error;

use crate::registry::CallbackId;
use crate::time::{Duration, Instant};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SlotError {
    #[error("slot {0} does not exist")]
    UnknownSlot(u32),
    #[error("bitstream {0:?} does not exist")]
    UnknownBitstream(BitstreamId),
    #[error("bitstream {bitstream:?} targets slot {expected} but was loaded into slot {got}")]
    WrongTargetSlot { bitstream: BitstreamId, expected: u32, got: u32 },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FitError {
    #[error("need at least two samples to fit the model")]
    TooFewSamples,
    #[error("all samples share one bitstream size; slope is undefined")]
    DegenerateSizes,
    #[error("fit produced a non-positive offset or bandwidth")]
    NonPositiveFit,
}

/// Index of a reconfigurable slot, fixed at executor initialization.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId(u32);

impl SlotId {
    pub const fn new(index: u32) -> Self {
        SlotId(index)
    }

    pub const fn index(self) -> u32 {
        self.0
    }
}

impl fmt::Debug for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "slot{}", self.0)
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Fabric resources inside one slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SlotResources {
    pub slice_luts: u64,
    pub dsps: u64,
    pub bram36: u64,
    pub bram18: u64,
}

#[derive(Clone, Debug)]
pub struct SlotDescriptor {
    pub id: SlotId,
    pub resources: SlotResources,
    pub bitstream_size_bytes: u64,
}

impl SlotDescriptor {
    pub fn new(id: SlotId, resources: SlotResources, bitstream_size_bytes: u64) -> Self {
        assert!(bitstream_size_bytes > 0, "slot bitstream size must be positive");
        SlotDescriptor { id, resources, bitstream_size_bytes }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitstreamId(u32);

impl BitstreamId {
    pub const fn from_raw(id: u32) -> Self {
        BitstreamId(id)
    }
}

impl fmt::Debug for BitstreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bs{}", self.0)
    }
}

/// A full-slot partial bitstream implementing one callback in one slot.
/// Its size equals the target slot's bitstream size.
#[derive(Clone, Debug)]
pub struct Bitstream {
    pub id: BitstreamId,
    pub callback: CallbackId,
    pub target_slot: SlotId,
    pub size_bytes: u64,
}

/// Latency model `t_rc = size / bandwidth + t_offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconfigModel {
    t_offset: Duration,
    bandwidth_bytes_per_sec: f64,
}

impl ReconfigModel {
    pub fn new(t_offset: Duration, bandwidth_bytes_per_sec: f64) -> Self {
        assert!(!t_offset.is_zero(), "offset must be positive");
        assert!(bandwidth_bytes_per_sec > 0.0, "bandwidth must be positive");
        ReconfigModel { t_offset, bandwidth_bytes_per_sec }
    }

    /// Default constants: 6.8 ms setup offset, 160 MB/s transfer bandwidth.
    pub fn reported() -> Self {
        ReconfigModel::new(Duration::from_micros(6_800), 160.0e6)
    }

    /// Constants recovered by least squares from the measured load times:
    /// 6.89 ms offset, 165.5 MB/s bandwidth.
    pub fn fitted() -> Self {
        ReconfigModel::new(Duration::from_nanos(6_889_951), 165.52095e6)
    }

    pub fn t_offset(&self) -> Duration {
        self.t_offset
    }

    pub fn bandwidth_bytes_per_sec(&self) -> f64 {
        self.bandwidth_bytes_per_sec
    }

    /// Time to load `size_bytes`, rounded to the nearest nanosecond.
    pub fn reconfig_time(&self, size_bytes: u64) -> Duration {
        let transfer_ns = (size_bytes as f64 / self.bandwidth_bytes_per_sec * 1e9).round() as u64;
        self.t_offset + Duration::from_nanos(transfer_ns)
    }
}

/// Ordinary least squares on `time = size / bandwidth + t_offset`.
pub fn fit_model(samples: &[(u64, Duration)]) -> Result<ReconfigModel, FitError> {
    if samples.len() < 2 {
        return Err(FitError::TooFewSamples);
    }
    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|&(s, _)| s as f64).sum::<f64>() / n;
    let mean_y = samples.iter().map(|&(_, t)| t.as_secs_f64()).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(s, t) in samples {
        let dx = s as f64 - mean_x;
        sxx += dx * dx;
        sxy += dx * (t.as_secs_f64() - mean_y);
    }
    if sxx == 0.0 {
        return Err(FitError::DegenerateSizes);
    }
    let slope = sxy / sxx;
    let offset = mean_y - slope * mean_x;
    if slope <= 0.0 || offset <= 0.0 {
        return Err(FitError::NonPositiveFit);
    }
    Ok(ReconfigModel::new(Duration::from_secs_f64(offset), 1.0 / slope))
}

/// Current contents of one slot.
#[derive(Clone, Copy, Debug, Default)]
pub struct SlotState {
    pub loaded: Option<BitstreamId>,
    /// Virtual time until which the slot is being configured.
    configuring_until: Instant,
}

impl SlotState {
    pub fn is_configuring(&self, now: Instant) -> bool {
        now < self.configuring_until
    }
}

/// Outcome of a virtual-time load request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotLoad {
    /// Time spent queueing for the configuration port.
    pub port_wait: Duration,
    /// Time spent transferring the bitstream (zero on a cache hit).
    pub reconfig: Duration,
}

impl SlotLoad {
    pub const HIT: SlotLoad = SlotLoad { port_wait: Duration::ZERO, reconfig: Duration::ZERO };

    pub fn total(&self) -> Duration {
        self.port_wait + self.reconfig
    }
}

struct SlotsInner {
    states: Vec<SlotState>,
    /// Virtual time at which the configuration port is next free.
    port_free_at: Instant,
    reconfig_count: u64,
}

/// FIFO-granting lock standing in for the single configuration port in the
/// threaded backend.
#[derive(Default)]
struct PortQueue {
    tickets: Mutex<(u64, u64)>, // (next ticket, now serving)
    turn: Condvar,
}

impl PortQueue {
    fn acquire(&self) {
        let mut g = self.tickets.lock().unwrap();
        let ticket = g.0;
        g.0 += 1;
        while g.1 != ticket {
            g = self.turn.wait(g).unwrap();
        }
    }

    fn release(&self) {
        self.tickets.lock().unwrap().1 += 1;
        self.turn.notify_all();
    }
}

pub struct SlotManager {
    descriptors: Vec<SlotDescriptor>,
    model: ReconfigModel,
    bitstreams: RwLock<Vec<Bitstream>>,
    inner: Mutex<SlotsInner>,
    port: PortQueue,
}

impl SlotManager {
    pub fn new(descriptors: Vec<SlotDescriptor>, model: ReconfigModel) -> Self {
        let n = descriptors.len();
        SlotManager {
            descriptors,
            model,
            bitstreams: RwLock::new(Vec::new()),
            inner: Mutex::new(SlotsInner {
                states: vec![SlotState::default(); n],
                port_free_at: Instant::EPOCH,
                reconfig_count: 0,
            }),
            port: PortQueue::default(),
        }
    }

    pub fn slot_count(&self) -> usize {
        self.descriptors.len()
    }

    pub fn descriptors(&self) -> &[SlotDescriptor] {
        &self.descriptors
    }

    pub fn model(&self) -> &ReconfigModel {
        &self.model
    }

    pub fn descriptor(&self, slot: SlotId) -> Result<&SlotDescriptor, SlotError> {
        self.descriptors.get(slot.index() as usize).ok_or(SlotError::UnknownSlot(slot.index()))
    }

    /// Bind a full-slot bitstream for `callback` in `slot`.
    pub fn register_bitstream(&self, callback: CallbackId, slot: SlotId) -> Result<BitstreamId, SlotError> {
        let size = self.descriptor(slot)?.bitstream_size_bytes;
        let mut streams = self.bitstreams.write().unwrap();
        let id = BitstreamId(streams.len() as u32);
        streams.push(Bitstream { id, callback, target_slot: slot, size_bytes: size });
        Ok(id)
    }

    pub fn bitstream(&self, id: BitstreamId) -> Result<Bitstream, SlotError> {
        self.bitstreams.read().unwrap().get(id.0 as usize).cloned().ok_or(SlotError::UnknownBitstream(id))
    }

    pub fn loaded(&self, slot: SlotId) -> Option<BitstreamId> {
        self.inner.lock().unwrap().states.get(slot.index() as usize)?.loaded
    }

    pub fn slot_state(&self, slot: SlotId) -> Option<SlotState> {
        self.inner.lock().unwrap().states.get(slot.index() as usize).copied()
    }

    /// Total reconfigurations performed so far.
    pub fn reconfig_count(&self) -> u64 {
        self.inner.lock().unwrap().reconfig_count
    }

    fn check_target(&self, slot: SlotId, bitstream: BitstreamId) -> Result<Bitstream, SlotError> {
        self.descriptor(slot)?;
        let bs = self.bitstream(bitstream)?;
        if bs.target_slot != slot {
            return Err(SlotError::WrongTargetSlot {
                bitstream,
                expected: bs.target_slot.index(),
                got: slot.index(),
            });
        }
        Ok(bs)
    }

    /// Virtual-time load: if the bitstream is already in the slot the cost
    /// is zero, otherwise the load queues on the configuration port (FIFO in
    /// request order) and transfers for `reconfig_time(size)`. State is
    /// updated immediately; the returned costs tell the simulation when the
    /// slot becomes usable.
    pub fn plan_load(&self, slot: SlotId, bitstream: BitstreamId, now: Instant) -> Result<SlotLoad, SlotError> {
        let bs = self.check_target(slot, bitstream)?;
        let mut inner = self.inner.lock().unwrap();
        if inner.states[slot.index() as usize].loaded == Some(bitstream) {
            return Ok(SlotLoad::HIT);
        }
        let grant = now.max(inner.port_free_at);
        let reconfig = self.model.reconfig_time(bs.size_bytes);
        let done = grant + reconfig;
        inner.port_free_at = done;
        inner.reconfig_count += 1;
        let state = &mut inner.states[slot.index() as usize];
        state.loaded = Some(bitstream);
        state.configuring_until = done;
        Ok(SlotLoad { port_wait: grant - now, reconfig })
    }

    /// Blocking load for the threaded backend: waits for the configuration
    /// port, then sleeps out the transfer via `sleep` (which applies the
    /// backend's time scale). Returns the modeled transfer time, zero on a
    /// cache hit.
    pub fn load_blocking(
        &self,
        slot: SlotId,
        bitstream: BitstreamId,
        sleep: impl Fn(Duration),
    ) -> Result<Duration, SlotError> {
        let bs = self.check_target(slot, bitstream)?;
        // Only this slot's worker loads this slot, so the hit check does not
        // need to be re-run after acquiring the port.
        if self.inner.lock().unwrap().states[slot.index() as usize].loaded == Some(bitstream) {
            return Ok(Duration::ZERO);
        }
        let reconfig = self.model.reconfig_time(bs.size_bytes);
        self.port.acquire();
        sleep(reconfig);
        {
            let mut inner = self.inner.lock().unwrap();
            inner.reconfig_count += 1;
            inner.states[slot.index() as usize].loaded = Some(bitstream);
        }
        self.port.release();
        Ok(reconfig)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ms(v: f64) -> Duration {
        Duration::from_millis_f64(v)
    }

    fn measured_samples() -> Vec<(u64, Duration)> {
        vec![
            (2_838_976, ms(24.0)),
            (2_838_976, ms(24.0)),
            (5_285_728, ms(38.4)),
            (4_883_328, ms(36.9)),
        ]
    }

    /// Straight normal-equations least squares, independent of `fit_model`.
    fn ols_oracle(samples: &[(u64, Duration)]) -> (f64, f64) {
        let n = samples.len() as f64;
        let sx: f64 = samples.iter().map(|&(s, _)| s as f64).sum();
        let sy: f64 = samples.iter().map(|&(_, t)| t.as_secs_f64()).sum();
        let sxx: f64 = samples.iter().map(|&(s, _)| (s as f64) * (s as f64)).sum();
        let sxy: f64 = samples.iter().map(|&(s, t)| s as f64 * t.as_secs_f64()).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let offset = sy / n - slope * sx / n;
        (offset, 1.0 / slope)
    }

    #[test]
    fn reconfig_time_matches_measured_rows() {
        let model = ReconfigModel::fitted();
        let t0 = model.reconfig_time(2_838_976).as_millis_f64();
        let t2 = model.reconfig_time(5_285_728).as_millis_f64();
        let t3 = model.reconfig_time(4_883_328).as_millis_f64();
        assert!((t0 - 24.0).abs() / 24.0 < 0.05, "{t0}");
        assert!((t2 - 38.4).abs() / 38.4 < 0.05, "{t2}");
        assert!((t3 - 36.9).abs() / 36.9 < 0.05, "{t3}");
    }

    #[test]
    fn zero_size_costs_exactly_the_offset() {
        let model = ReconfigModel::new(ms(5.0), 100.0e6);
        assert_eq!(model.reconfig_time(0), ms(5.0));
    }

    #[test]
    fn fit_recovers_measured_constants() {
        let model = fit_model(&measured_samples()).unwrap();
        let offset_ms = model.t_offset().as_millis_f64();
        let bw_mbps = model.bandwidth_bytes_per_sec() / 1e6;
        // Frozen from the hand least-squares oracle below.
        assert!((offset_ms - 6.8900).abs() < 0.01, "{offset_ms}");
        assert!((bw_mbps - 165.52).abs() < 0.05, "{bw_mbps}");

        let (oracle_offset, oracle_bw) = ols_oracle(&measured_samples());
        assert!((offset_ms - oracle_offset * 1e3).abs() < 1e-6);
        assert!((bw_mbps - oracle_bw / 1e6).abs() < 1e-6);
    }

    #[test]
    fn fit_interpolates_two_exact_points() {
        let truth = ReconfigModel::new(ms(5.0), 100.0e6);
        let samples = vec![
            (1_000_000, truth.reconfig_time(1_000_000)),
            (3_000_000, truth.reconfig_time(3_000_000)),
        ];
        let model = fit_model(&samples).unwrap();
        assert!((model.t_offset().as_millis_f64() - 5.0).abs() < 1e-9);
        assert!((model.bandwidth_bytes_per_sec() - 100.0e6).abs() / 100.0e6 < 1e-9);
    }

    #[test]
    fn degenerate_fits_are_rejected() {
        assert_eq!(fit_model(&[(1, ms(1.0))]), Err(FitError::TooFewSamples));
        assert_eq!(
            fit_model(&[(1_000, ms(1.0)), (1_000, ms(2.0))]),
            Err(FitError::DegenerateSizes)
        );
    }

    fn manager_with_slots(sizes: &[u64]) -> SlotManager {
        let descriptors = sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| SlotDescriptor::new(SlotId::new(i as u32), SlotResources::default(), s))
            .collect();
        SlotManager::new(descriptors, ReconfigModel::fitted())
    }

    #[test]
    fn cold_load_costs_reconfig_time_then_hits_are_free() {
        let mgr = manager_with_slots(&[2_838_976]);
        let bs = mgr.register_bitstream(CallbackId::from_raw(0), SlotId::new(0)).unwrap();
        let load = mgr.plan_load(SlotId::new(0), bs, Instant::EPOCH).unwrap();
        assert_eq!(load.port_wait, Duration::ZERO);
        let rc_ms = load.reconfig.as_millis_f64();
        assert!((rc_ms - 24.0).abs() / 24.0 < 0.05, "{rc_ms}");
        assert_eq!(mgr.loaded(SlotId::new(0)), Some(bs));

        let hit = mgr.plan_load(SlotId::new(0), bs, Instant::EPOCH + load.total()).unwrap();
        assert_eq!(hit, SlotLoad::HIT);
        assert_eq!(mgr.reconfig_count(), 1);
    }

    #[test]
    fn port_serializes_concurrent_loads() {
        let mgr = manager_with_slots(&[1_000_000, 2_000_000]);
        let b0 = mgr.register_bitstream(CallbackId::from_raw(0), SlotId::new(0)).unwrap();
        let b1 = mgr.register_bitstream(CallbackId::from_raw(1), SlotId::new(1)).unwrap();
        let now = Instant::EPOCH;
        let l0 = mgr.plan_load(SlotId::new(0), b0, now).unwrap();
        let l1 = mgr.plan_load(SlotId::new(1), b1, now).unwrap();
        assert_eq!(l0.port_wait, Duration::ZERO);
        assert_eq!(l1.port_wait, l0.reconfig, "second load queues behind the first");
        let elapsed = l1.total();
        assert!(elapsed >= l0.reconfig + l1.reconfig);
    }

    #[test]
    fn alternating_bitstreams_reload_every_time() {
        let mgr = manager_with_slots(&[1_000_000]);
        let slot = SlotId::new(0);
        let a = mgr.register_bitstream(CallbackId::from_raw(0), slot).unwrap();
        let b = mgr.register_bitstream(CallbackId::from_raw(1), slot).unwrap();
        let mut now = Instant::EPOCH;
        for (i, bs) in [a, b, a, b].iter().enumerate() {
            let load = mgr.plan_load(slot, *bs, now).unwrap();
            assert!(load.reconfig > Duration::ZERO, "load {i} must reconfigure");
            now = now + load.total();
        }
        assert_eq!(mgr.reconfig_count(), 4);
    }

    #[test]
    fn mismatched_target_slot_is_rejected() {
        let mgr = manager_with_slots(&[1_000_000, 2_000_000]);
        let bs = mgr.register_bitstream(CallbackId::from_raw(0), SlotId::new(1)).unwrap();
        let err = mgr.plan_load(SlotId::new(0), bs, Instant::EPOCH).unwrap_err();
        assert_eq!(err, SlotError::WrongTargetSlot { bitstream: bs, expected: 1, got: 0 });
    }

    #[test]
    fn blocking_load_serializes_via_port_queue() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let mgr = Arc::new(manager_with_slots(&[1_000_000, 1_000_000, 1_000_000]));
        let in_port = Arc::new(AtomicUsize::new(0));
        let max_in_port = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for i in 0..3u32 {
            let mgr = Arc::clone(&mgr);
            let in_port = Arc::clone(&in_port);
            let max_in_port = Arc::clone(&max_in_port);
            handles.push(std::thread::spawn(move || {
                let bs = mgr.register_bitstream(CallbackId::from_raw(i as u64), SlotId::new(i)).unwrap();
                mgr.load_blocking(SlotId::new(i), bs, |_| {
                    let cur = in_port.fetch_add(1, Ordering::SeqCst) + 1;
                    max_in_port.fetch_max(cur, Ordering::SeqCst);
                    std::thread::sleep(std::time::Duration::from_millis(2));
                    in_port.fetch_sub(1, Ordering::SeqCst);
                })
                .unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(max_in_port.load(Ordering::SeqCst), 1, "one transfer at a time");
        assert_eq!(mgr.reconfig_count(), 3);
    }

    proptest! {
        // reconfig_time(a + b) = reconfig_time(a) + reconfig_time(b) - t_offset
        #[test]
        fn model_is_affine_in_size(a in 0u64..10_000_000, b in 0u64..10_000_000) {
            let model = ReconfigModel::reported();
            let lhs = model.reconfig_time(a + b).as_nanos() as i128;
            let rhs = model.reconfig_time(a).as_nanos() as i128
                + model.reconfig_time(b).as_nanos() as i128
                - model.t_offset().as_nanos() as i128;
            prop_assert!((lhs - rhs).abs() <= 1);
        }

        // Zero-noise synthetic samples recover the generating model.
        #[test]
        fn fit_round_trips_synthetic_models(
            offset_us in 100u64..20_000,
            bw_mbps in 10.0f64..500.0,
            sizes in proptest::collection::btree_set(1_000u64..20_000_000, 2..8),
        ) {
            let truth = ReconfigModel::new(Duration::from_micros(offset_us), bw_mbps * 1e6);
            let samples: Vec<(u64, Duration)> =
                sizes.iter().map(|&s| (s, truth.reconfig_time(s))).collect();
            let fit = fit_model(&samples).unwrap();
            let offset_err = (fit.t_offset().as_secs_f64() - truth.t_offset().as_secs_f64()).abs()
                / truth.t_offset().as_secs_f64();
            let bw_err = (fit.bandwidth_bytes_per_sec() - truth.bandwidth_bytes_per_sec()).abs()
                / truth.bandwidth_bytes_per_sec();
            prop_assert!(offset_err < 1e-3, "offset error {offset_err}");
            prop_assert!(bw_err < 1e-3, "bandwidth error {bw_err}");
        }
    }
}
