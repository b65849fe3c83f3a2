//! Builds a scenario's topology, runs it under a mapping and backend, and
//! collects roundtrips, execution records and delivery accounting.
//!
//! Clients are modeled external actors. A ping-pong client publishes a
//! request, waits for the response on the callback's output topic (or the
//! service response queue), logs the roundtrip including the configured
//! one-way delay in both directions, and immediately sends again. A
//! timer-listener client logs the gaps between consecutive messages on a
//! timer callback's output topic.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::bus::{
    BusError, ClientId, MessageBus, Payload, SubscriptionId, TopicName, DEFAULT_QUEUE_DEPTH,
};
use crate::clock::Clock;
use crate::executor::{
    ExecError, ExecutionRecord, HybridExecutor, SimCtx, SimHooks, SimOptions, StandardExecutor,
    StopCondition,
};
use crate::registry::{BodyCtx, CallbackBody, CallbackId, CallbackKind, ClaimedEvent, SourceSpec};
use crate::slots::SlotManager;
use crate::time::{Duration, Instant};
use crate::workload::seeded_bytes;

use super::config::{CallbackSpec, ClientMode, Mapping, ScenarioConfig};
use super::RoundtripRecord;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("callback {0:?} has no hardware mask; the all-hw mapping needs one per callback")]
    UnmappableCallback(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Backend {
    /// Deterministic discrete-event simulation over virtual time.
    Sim,
    /// Real threads; modeled durations become sleeps scaled by this factor.
    Threads { time_scale: f64 },
}

/// Delivery accounting for one queue, labeled for reporting.
#[derive(Clone, Debug)]
pub struct DeliveryAudit {
    pub label: String,
    pub published: u64,
    pub taken: u64,
    pub evicted: u64,
    pub pending: u64,
}

/// Request/response accounting for one client.
#[derive(Clone, Debug)]
pub struct ClientConservation {
    pub client: String,
    pub sent: u64,
    pub logged: u64,
}

pub struct ScenarioOutput {
    pub roundtrips: Vec<RoundtripRecord>,
    pub executions: Vec<ExecutionRecord>,
    pub callback_names: HashMap<CallbackId, String>,
    pub reconfigurations: u64,
    pub conservation: Vec<ClientConservation>,
    pub deliveries: Vec<DeliveryAudit>,
}

/// Where one callback executes under a resolved mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Site {
    Software,
    Hardware { mask_bits: u32 },
}

/// Apply the mapping policy to the scenario's callbacks.
///
/// all-sw ignores masks. all-hw requires a mask on every callback and, when
/// there are at least as many slots as callbacks, gives each callback a
/// dedicated slot in declaration order; otherwise masks are taken verbatim.
/// mixed sends the highest-speedup hardware-eligible callbacks to hardware,
/// one per slot, and the rest to software.
fn resolve_sites(cfg: &ScenarioConfig) -> Result<Vec<Site>, ScenarioError> {
    let n_slots = cfg.slots.len();
    match cfg.mapping {
        Mapping::AllSw => Ok(vec![Site::Software; cfg.callbacks.len()]),
        Mapping::AllHw => {
            for cb in &cfg.callbacks {
                if cb.mask_bits == 0 {
                    return Err(ScenarioError::UnmappableCallback(cb.name.clone()));
                }
            }
            if cfg.callbacks.len() <= n_slots {
                Ok((0..cfg.callbacks.len()).map(|i| Site::Hardware { mask_bits: 1 << i }).collect())
            } else {
                Ok(cfg.callbacks.iter().map(|cb| Site::Hardware { mask_bits: cb.mask_bits }).collect())
            }
        }
        Mapping::Mixed => {
            let mut eligible: Vec<usize> = (0..cfg.callbacks.len())
                .filter(|&i| cfg.callbacks[i].mask_bits != 0)
                .collect();
            eligible.sort_by(|&a, &b| {
                let sa = cfg.callbacks[a].work.speedup();
                let sb = cfg.callbacks[b].work.speedup();
                sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
            });
            eligible.truncate(n_slots);
            Ok((0..cfg.callbacks.len())
                .map(|i| {
                    if eligible.contains(&i) {
                        Site::Hardware { mask_bits: cfg.callbacks[i].mask_bits }
                    } else {
                        Site::Software
                    }
                })
                .collect())
        }
    }
}

/// Response body for one callback: publish the output payload or answer the
/// service request.
fn make_body(spec: &CallbackSpec, out_payload: Payload) -> Option<CallbackBody> {
    match spec.work.kind {
        CallbackKind::ServiceServer => Some(Arc::new(move |ctx: &BodyCtx<'_>, event: ClaimedEvent| {
            if let ClaimedEvent::Request(_, reply) = event {
                let _ = ctx.bus.send_response(reply, out_payload.clone(), ctx.now);
            }
        })),
        _ => spec.topic_out.clone().map(|topic| -> CallbackBody {
            Arc::new(move |ctx: &BodyCtx<'_>, _event: ClaimedEvent| {
                ctx.bus.publish(&topic, out_payload.clone(), ctx.now);
            })
        }),
    }
}

enum ClientTarget {
    PubSub { request_topic: TopicName, response_sub: SubscriptionId },
    Service { endpoint: ClientId },
    Listener { sub: SubscriptionId },
}

struct ClientRuntime {
    name: String,
    mode: ClientMode,
    delay: Duration,
    target: ClientTarget,
    request_payload: Payload,
    sent_at: Instant,
    sent: u64,
    last_arrival: Option<Instant>,
    pending_rx: VecDeque<Instant>,
    records: Vec<RoundtripRecord>,
}

impl ClientRuntime {
    fn take_incoming(&self, bus: &MessageBus) -> bool {
        match &self.target {
            ClientTarget::PubSub { response_sub, .. } | ClientTarget::Listener { sub: response_sub } => {
                bus.take(*response_sub).is_some()
            }
            ClientTarget::Service { endpoint } => bus.take_response(*endpoint).is_some(),
        }
    }

    fn send(&mut self, bus: &MessageBus, now: Instant) {
        match &self.target {
            ClientTarget::PubSub { request_topic, .. } => {
                bus.publish(request_topic, self.request_payload.clone(), now);
            }
            ClientTarget::Service { endpoint } => {
                let _ = bus.call_service(*endpoint, self.request_payload.clone(), now);
            }
            ClientTarget::Listener { .. } => {}
        }
        self.sent += 1;
    }

    fn log(&mut self, roundtrip: Duration) {
        let seq = self.records.len() as u64 + 1;
        self.records.push(RoundtripRecord { client: self.name.clone(), seq, roundtrip });
    }
}

struct BuiltScenario {
    bus: Arc<MessageBus>,
    slots: Arc<SlotManager>,
    clients: Vec<ClientRuntime>,
    callback_names: HashMap<CallbackId, String>,
    input_subs: Vec<(String, SubscriptionId)>,
}

enum BuiltExecutor {
    Hybrid(HybridExecutor),
    Standard(StandardExecutor),
}

fn build(cfg: &ScenarioConfig, clock: &Clock) -> Result<(BuiltScenario, BuiltExecutor), ScenarioError> {
    let sites = resolve_sites(cfg)?;
    let bus = Arc::new(MessageBus::new());
    let slots = Arc::new(SlotManager::new(cfg.slots.clone(), *cfg.model()));

    let hybrid = cfg.mapping != Mapping::AllSw;
    let executor = if hybrid {
        BuiltExecutor::Hybrid(HybridExecutor::new(
            cfg.executor.clone(),
            Arc::clone(&bus),
            Arc::clone(&slots),
            clock.clone(),
        )?)
    } else {
        BuiltExecutor::Standard(StandardExecutor::new(
            Arc::clone(&bus),
            clock.clone(),
            cfg.executor.sw_workers,
            cfg.executor.wait_time,
        )?)
    };

    let mut callback_names = HashMap::new();
    let mut input_subs = Vec::new();
    for (i, (spec, site)) in cfg.callbacks.iter().zip(&sites).enumerate() {
        let out_payload = payload(cfg.seed, i as u64, spec.work.payload_bytes_out);
        let body = make_body(spec, out_payload);
        let source = match spec.work.kind {
            CallbackKind::Subscriber => {
                let topic = spec.topic_in.as_ref().expect("validated at parse");
                let sub = bus.subscribe(topic, DEFAULT_QUEUE_DEPTH);
                input_subs.push((format!("{}:in", spec.name), sub));
                SourceSpec::Subscription(sub)
            }
            CallbackKind::ServiceServer => {
                let svc = bus.register_server(spec.service.as_ref().expect("validated at parse"))?;
                SourceSpec::Server(svc)
            }
            CallbackKind::Timer => {
                let period = spec.work.period.expect("validated at parse");
                SourceSpec::Timer { period, first_deadline: clock.now() + period }
            }
            CallbackKind::ServiceClient => unreachable!("rejected at parse"),
        };
        let id = match (&executor, site) {
            (BuiltExecutor::Hybrid(exec), Site::Hardware { mask_bits }) => {
                exec.add_hw_callback(&spec.name, *mask_bits, source, spec.work.hw_exec, body)?
            }
            (BuiltExecutor::Hybrid(exec), Site::Software) => {
                exec.add_sw_callback(&spec.name, source, spec.work.sw_exec, body)?
            }
            (BuiltExecutor::Standard(exec), _) => {
                exec.add_callback(&spec.name, source, spec.work.sw_exec, body)?
            }
        };
        callback_names.insert(id, spec.name.clone());
    }

    let mut clients = Vec::new();
    for (i, spec) in cfg.clients.iter().enumerate() {
        let cb = cfg
            .callbacks
            .iter()
            .find(|c| c.name == spec.callback)
            .expect("validated at parse");
        let target = match spec.mode {
            ClientMode::TimerListener => ClientTarget::Listener {
                sub: bus.subscribe(cb.topic_out.as_ref().expect("validated"), DEFAULT_QUEUE_DEPTH),
            },
            ClientMode::PingPong => match cb.work.kind {
                CallbackKind::ServiceServer => ClientTarget::Service {
                    endpoint: bus.register_client(cb.service.as_ref().expect("validated")),
                },
                _ => ClientTarget::PubSub {
                    request_topic: cb.topic_in.clone().expect("validated"),
                    response_sub: bus
                        .subscribe(cb.topic_out.as_ref().expect("validated"), DEFAULT_QUEUE_DEPTH),
                },
            },
        };
        clients.push(ClientRuntime {
            name: spec.name.clone(),
            mode: spec.mode,
            delay: spec.comm_delay,
            target,
            request_payload: payload(cfg.seed, 1_000 + i as u64, cb.work.payload_bytes_in),
            sent_at: Instant::EPOCH,
            sent: 0,
            last_arrival: None,
            pending_rx: VecDeque::new(),
            records: Vec::new(),
        });
    }

    Ok((BuiltScenario { bus, slots, clients, callback_names, input_subs }, executor))
}

fn payload(seed: u64, stream: u64, len: u64) -> Payload {
    Arc::from(seeded_bytes(seed, stream, len as usize).into_boxed_slice())
}

/// Run the scenario for its configured duration and gather results.
pub fn run_scenario(cfg: &ScenarioConfig, backend: Backend) -> Result<ScenarioOutput, ScenarioError> {
    match backend {
        Backend::Sim => run_sim(cfg),
        Backend::Threads { time_scale } => run_threads(cfg, time_scale),
    }
}

// Hook ids: client i uses 2i for "request arrives at the bus" and 2i+1 for
// "response arrives back at the client".
struct ClientHooks<'a> {
    clients: &'a mut [ClientRuntime],
}

impl ClientHooks<'_> {
    fn sweep(&mut self, ctx: &mut SimCtx<'_>) {
        for (i, client) in self.clients.iter_mut().enumerate() {
            while client.take_incoming(ctx.bus) {
                let arrival = ctx.now() + client.delay;
                client.pending_rx.push_back(arrival);
                ctx.schedule_hook(arrival, (2 * i + 1) as u64);
            }
        }
    }
}

impl SimHooks for ClientHooks<'_> {
    fn on_start(&mut self, ctx: &mut SimCtx<'_>) {
        for (i, client) in self.clients.iter_mut().enumerate() {
            if matches!(client.mode, ClientMode::PingPong) {
                client.sent_at = ctx.now();
                ctx.schedule_hook(ctx.now() + client.delay, (2 * i) as u64);
            }
        }
    }

    fn on_hook(&mut self, id: u64, ctx: &mut SimCtx<'_>) {
        let (index, is_rx) = ((id / 2) as usize, id % 2 == 1);
        if is_rx {
            // First let this arrival see a consistent client state.
            let now = ctx.now();
            let client = &mut self.clients[index];
            client.pending_rx.pop_front();
            match client.mode {
                ClientMode::PingPong => {
                    client.log(now - client.sent_at);
                    client.sent_at = now;
                    ctx.schedule_hook(now + client.delay, (2 * index) as u64);
                }
                ClientMode::TimerListener => {
                    if let Some(prev) = client.last_arrival {
                        client.log(now - prev);
                    }
                    client.last_arrival = Some(now);
                }
            }
        } else {
            let now = ctx.now();
            self.clients[index].send(ctx.bus, now);
        }
    }

    fn on_completion(&mut self, _record: &ExecutionRecord, ctx: &mut SimCtx<'_>) {
        self.sweep(ctx);
    }
}

fn run_sim(cfg: &ScenarioConfig) -> Result<ScenarioOutput, ScenarioError> {
    let clock = Clock::virtual_clock();
    let (mut built, executor) = build(cfg, &clock)?;
    let stop = StopCondition::after(cfg.duration);
    let mut hooks = ClientHooks { clients: &mut built.clients };
    let executions = match &executor {
        BuiltExecutor::Hybrid(exec) => {
            exec.spin_sim_with_hooks(stop, &mut hooks, SimOptions::default()).records
        }
        BuiltExecutor::Standard(exec) => exec.run_sim_with_hooks(stop, &mut hooks).records,
    };
    Ok(collect(built, executions))
}

fn run_threads(cfg: &ScenarioConfig, time_scale: f64) -> Result<ScenarioOutput, ScenarioError> {
    use crate::executor::threads_support::{precise_sleep, Parker};

    let clock = Clock::wall_clock_scaled(time_scale);
    let (mut built, executor) = build(cfg, &clock)?;
    let stop_clients = Arc::new(AtomicBool::new(false));
    let bus = Arc::clone(&built.bus);

    let executions = std::thread::scope(|scope| {
        let mut client_handles = Vec::new();
        for client in built.clients.iter_mut() {
            let parker = Parker::new();
            match &client.target {
                ClientTarget::PubSub { response_sub, .. } | ClientTarget::Listener { sub: response_sub } => {
                    bus.attach_subscription_waker(*response_sub, parker.waker())
                }
                ClientTarget::Service { endpoint } => {
                    bus.attach_response_waker(*endpoint, parker.waker())
                }
            }
            let stop = Arc::clone(&stop_clients);
            let clock = clock.clone();
            let bus = Arc::clone(&bus);
            client_handles.push(scope.spawn(move || {
                if matches!(client.mode, ClientMode::PingPong) {
                    client.sent_at = clock.now();
                    if !client.delay.is_zero() {
                        precise_sleep(client.delay.mul_f64(time_scale).to_std());
                    }
                    client.send(&bus, clock.now());
                }
                let mut spin_deadline: Option<std::time::Instant> = None;
                while !stop.load(Ordering::SeqCst) {
                    if client.take_incoming(&bus) {
                        spin_deadline = None;
                        if !client.delay.is_zero() {
                            precise_sleep(client.delay.mul_f64(time_scale).to_std());
                        }
                        let now = clock.now();
                        match client.mode {
                            ClientMode::PingPong => {
                                client.log(now - client.sent_at);
                                client.sent_at = now;
                                if !client.delay.is_zero() {
                                    precise_sleep(client.delay.mul_f64(time_scale).to_std());
                                }
                                client.send(&bus, clock.now());
                            }
                            ClientMode::TimerListener => {
                                if let Some(prev) = client.last_arrival {
                                    client.log(now - prev);
                                }
                                client.last_arrival = Some(now);
                            }
                        }
                    } else {
                        let wall_now = std::time::Instant::now();
                        match spin_deadline {
                            Some(d) if wall_now < d => std::hint::spin_loop(),
                            Some(_) => {
                                spin_deadline = None;
                                parker.park_timeout(std::time::Duration::from_millis(20));
                            }
                            None => {
                                spin_deadline =
                                    Some(wall_now + std::time::Duration::from_micros(20));
                            }
                        }
                    }
                }
            }));
        }

        let stop = StopCondition::after(cfg.duration);
        let executions = match &executor {
            BuiltExecutor::Hybrid(exec) => exec.spin_threads(stop, time_scale),
            BuiltExecutor::Standard(exec) => exec.run_threads(stop, time_scale),
        };
        stop_clients.store(true, Ordering::SeqCst);
        for h in client_handles {
            h.join().expect("client thread panicked");
        }
        executions
    });

    Ok(collect(built, executions))
}

fn collect(built: BuiltScenario, executions: Vec<ExecutionRecord>) -> ScenarioOutput {
    let mut roundtrips = Vec::new();
    let mut conservation = Vec::new();
    let mut deliveries = Vec::new();
    for (label, sub) in &built.input_subs {
        let s = built.bus.subscription_stats(*sub);
        deliveries.push(DeliveryAudit {
            label: label.clone(),
            published: s.published,
            taken: s.taken,
            evicted: s.evicted,
            pending: s.pending,
        });
    }
    for client in built.clients {
        conservation.push(ClientConservation {
            client: client.name.clone(),
            sent: client.sent,
            logged: client.records.len() as u64,
        });
        roundtrips.extend(client.records);
    }
    ScenarioOutput {
        roundtrips,
        executions,
        callback_names: built.callback_names,
        reconfigurations: built.slots.reconfig_count(),
        conservation,
        deliveries,
    }
}

/// `client,seq,roundtrip_ns` rows.
pub fn results_csv(roundtrips: &[RoundtripRecord]) -> String {
    let mut out = String::from("client,seq,roundtrip_ns\n");
    for r in roundtrips {
        out.push_str(&format!("{},{},{}\n", r.client, r.seq, r.roundtrip.as_nanos()));
    }
    out
}

/// `callback,worker,claim_ns,start_ns,end_ns,reconfig_ns` rows.
pub fn events_csv(executions: &[ExecutionRecord], names: &HashMap<CallbackId, String>) -> String {
    let mut out = String::from("callback,worker,claim_ns,start_ns,end_ns,reconfig_ns\n");
    for e in executions {
        let name = names.get(&e.callback).cloned().unwrap_or_else(|| format!("cb{}", e.callback.raw()));
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            name,
            e.worker,
            e.claim_time.as_nanos(),
            e.start_time.as_nanos(),
            e.end_time.as_nanos(),
            e.reconfig_spent.as_nanos()
        ));
    }
    out
}
