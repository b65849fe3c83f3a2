//! Section-based scenario file parser.
//!
//! ```text
//! [model]                 # optional; load-latency model
//! t_offset_ms = 6.8
//! bandwidth_mbps = 160
//!
//! [executor]
//! sw_workers = 2
//! hw_workers = 4
//! wait_time_us = 1000     # optional, default 1 ms
//! bitstream_path = /mnt/bitstreams/   # optional label
//! duration_s = 10         # optional defaults, overridable from the CLI
//! seed = 0
//! mapping = all-sw
//!
//! [slot.0]                # one section per slot, indices 0..n contiguous
//! slice_luts = 20800
//! dsps = 160
//! bram36 = 60
//! bram18 = 120
//! bitstream_bytes = 2838976
//!
//! [callback.sorting]
//! workload = sorting      # one of the built-in work models, or explicit:
//! # kind = subscriber | server | timer
//! # sw_ms = 41.0, hw_ms = 0.85, payload_in = 8192, payload_out = 8192
//! # period_ms = 250 (timer kind)
//! mask = 0b0001           # bit i = eligible for slot i; omit for sw-only
//! topic_in = /sort_req
//! topic_out = /sort_res
//! # service = /sort      (server kind)
//!
//! [client.sort]
//! callback = sorting
//! mode = ping-pong        # or timer-listener
//! comm_delay_us = 0       # one-way delay applied in both directions
//! ```
//!
//! Unknown sections and keys are rejected. Syntax errors carry the line
//! number, semantic errors the section name.

use std::collections::HashMap;
use std::str::FromStr;

use thiserror::Error;

use crate::bus::TopicName;
use crate::executor::ExecutorConfig;
use crate::registry::CallbackKind;
use crate::slots::{ReconfigModel, SlotDescriptor, SlotId, SlotResources};
use crate::time::Duration;
use crate::workload::{builtin_workloads, WorkModel};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("section [{section}]: {message}")]
    Semantic { section: String, message: String },
}

fn syntax(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Syntax { line, message: message.into() }
}

fn semantic(section: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Semantic { section: section.into(), message: message.into() }
}

/// Which execution sites the runner assigns to callbacks.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum Mapping {
    #[default]
    AllSw,
    Mixed,
    AllHw,
}

impl FromStr for Mapping {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all-sw" => Ok(Mapping::AllSw),
            "mixed" => Ok(Mapping::Mixed),
            "all-hw" => Ok(Mapping::AllHw),
            other => Err(format!("unknown mapping {other:?} (all-sw, mixed, all-hw)")),
        }
    }
}

impl std::fmt::Display for Mapping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mapping::AllSw => "all-sw",
            Mapping::Mixed => "mixed",
            Mapping::AllHw => "all-hw",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CallbackSpec {
    pub name: String,
    pub work: WorkModel,
    /// Bit i marks slot i eligible; zero means software-only.
    pub mask_bits: u32,
    pub topic_in: Option<TopicName>,
    pub topic_out: Option<TopicName>,
    pub service: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ClientMode {
    PingPong,
    TimerListener,
}

#[derive(Clone, Debug)]
pub struct ClientSpec {
    pub name: String,
    pub callback: String,
    pub mode: ClientMode,
    /// One-way communication delay, applied to requests and responses.
    pub comm_delay: Duration,
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub slots: Vec<SlotDescriptor>,
    pub model: ReconfigModel,
    pub executor: ExecutorConfig,
    pub callbacks: Vec<CallbackSpec>,
    pub clients: Vec<ClientSpec>,
    pub mapping: Mapping,
    pub duration: Duration,
    pub seed: u64,
}

/// Raw `key = value` pairs of one section, with the line each key came from.
#[derive(Default)]
struct Section {
    name: String,
    entries: HashMap<String, (usize, String)>,
    order: Vec<String>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    fn require(&mut self, key: &str) -> Result<String, ConfigError> {
        self.take(key).ok_or_else(|| semantic(&self.name, format!("missing key {key:?}")))
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => {
                v.parse::<T>().map(Some).map_err(|e| syntax(line, format!("bad value for {key}: {e}")))
            }
        }
    }

    fn parse_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some(key) = self.order.iter().find(|k| self.entries.contains_key(*k)) {
            let (line, _) = &self.entries[key];
            return Err(syntax(*line, format!("unknown key {key:?} in section [{}]", self.name)));
        }
        Ok(())
    }
}

fn parse_mask(section: &mut Section) -> Result<u32, ConfigError> {
    match section.entries.remove("mask") {
        None => Ok(0),
        Some((line, v)) => {
            let parsed = if let Some(bits) = v.strip_prefix("0b") {
                u32::from_str_radix(bits, 2)
            } else if let Some(hex) = v.strip_prefix("0x") {
                u32::from_str_radix(hex, 16)
            } else {
                v.parse::<u32>()
            };
            parsed.map_err(|e| syntax(line, format!("bad value for mask: {e}")))
        }
    }
}

fn parse_topic(section: &mut Section, key: &str) -> Result<Option<TopicName>, ConfigError> {
    match section.take(key) {
        None => Ok(None),
        Some(v) => TopicName::new(v)
            .map(Some)
            .map_err(|e| semantic(&section.name, e.to_string())),
    }
}

fn split_sections(text: &str) -> Result<Vec<Section>, ConfigError> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return Err(syntax(line_no, "unterminated section header"));
            };
            sections.push(Section { name: name.trim().to_owned(), ..Default::default() });
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(syntax(line_no, "expected `key = value` or a [section] header"));
        };
        let Some(section) = sections.last_mut() else {
            return Err(syntax(line_no, "key/value outside any section"));
        };
        let key = key.trim().to_owned();
        let value = value.trim().to_owned();
        if section.entries.insert(key.clone(), (line_no, value)).is_some() {
            return Err(syntax(line_no, format!("duplicate key {key:?}")));
        }
        section.order.push(key);
    }
    Ok(sections)
}

fn builtin_by_name(name: &str) -> Option<WorkModel> {
    builtin_workloads().into_iter().find(|w| w.name == name)
}

fn parse_callback(mut section: Section, name: String) -> Result<CallbackSpec, ConfigError> {
    let sect = section.name.clone();
    let mask_bits = parse_mask(&mut section)?;
    let topic_in = parse_topic(&mut section, "topic_in")?;
    let topic_out = parse_topic(&mut section, "topic_out")?;
    let service = section.take("service");

    let work = if let Some(workload) = section.take("workload") {
        let Some(model) = builtin_by_name(&workload) else {
            return Err(semantic(&sect, format!("unknown workload {workload:?}")));
        };
        model
    } else {
        let kind = match section.require("kind")?.as_str() {
            "subscriber" => CallbackKind::Subscriber,
            "server" => CallbackKind::ServiceServer,
            "timer" => CallbackKind::Timer,
            other => {
                return Err(semantic(&sect, format!("unknown kind {other:?} (subscriber, server, timer)")))
            }
        };
        let sw_ms: f64 = section
            .parse("sw_ms")?
            .ok_or_else(|| semantic(&sect, "missing key \"sw_ms\""))?;
        let hw_ms: f64 = match section.parse("hw_ms")? {
            Some(v) => v,
            None if mask_bits == 0 => sw_ms,
            None => return Err(semantic(&sect, "hardware-eligible callback needs hw_ms")),
        };
        if sw_ms <= 0.0 || hw_ms <= 0.0 {
            return Err(semantic(&sect, "execution times must be positive"));
        }
        let period = section
            .parse::<f64>("period_ms")?
            .map(Duration::from_millis_f64);
        if kind == CallbackKind::Timer && period.is_none() {
            return Err(semantic(&sect, "timer callback needs period_ms"));
        }
        WorkModel {
            name: name.clone(),
            sw_exec: Duration::from_millis_f64(sw_ms),
            hw_exec: Duration::from_millis_f64(hw_ms),
            payload_bytes_in: section.parse_or("payload_in", 4u64)?,
            payload_bytes_out: section.parse_or("payload_out", 4u64)?,
            kind,
            period,
        }
    };

    match work.kind {
        CallbackKind::Subscriber => {
            if topic_in.is_none() {
                return Err(semantic(&sect, "subscriber callback needs topic_in"));
            }
        }
        CallbackKind::ServiceServer => {
            if service.is_none() {
                return Err(semantic(&sect, "server callback needs service"));
            }
        }
        CallbackKind::Timer => {
            if topic_out.is_none() {
                return Err(semantic(&sect, "timer callback needs topic_out"));
            }
        }
        CallbackKind::ServiceClient => {
            return Err(semantic(&sect, "service-client callbacks are not configurable here"))
        }
    }

    section.finish()?;
    Ok(CallbackSpec { name, work, mask_bits, topic_in, topic_out, service })
}

fn parse_client(mut section: Section, name: String) -> Result<ClientSpec, ConfigError> {
    let sect = section.name.clone();
    let callback = section.require("callback")?;
    let mode = match section.take("mode").as_deref() {
        None | Some("ping-pong") => ClientMode::PingPong,
        Some("timer-listener") => ClientMode::TimerListener,
        Some(other) => {
            return Err(semantic(&sect, format!("unknown mode {other:?} (ping-pong, timer-listener)")))
        }
    };
    let comm_delay = Duration::from_micros(section.parse_or("comm_delay_us", 0u64)?);
    section.finish()?;
    Ok(ClientSpec { name, callback, mode, comm_delay })
}

/// Parse and validate a scenario description.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut slots: Vec<(usize, SlotDescriptor)> = Vec::new();
    let mut model = ReconfigModel::reported();
    let mut executor = ExecutorConfig { sw_workers: 2, hw_workers: 0, ..Default::default() };
    let mut callbacks: Vec<CallbackSpec> = Vec::new();
    let mut clients: Vec<ClientSpec> = Vec::new();
    let mut mapping = Mapping::default();
    let mut duration = Duration::from_secs(10);
    let mut seed = 0u64;
    let mut have_executor = false;

    for mut section in split_sections(text)? {
        let name = section.name.clone();
        match name.split_once('.') {
            None if name == "model" => {
                let t_offset_ms: f64 = section.parse_or("t_offset_ms", 6.8)?;
                let bandwidth_mbps: f64 = section.parse_or("bandwidth_mbps", 160.0)?;
                if t_offset_ms <= 0.0 || bandwidth_mbps <= 0.0 {
                    return Err(semantic(&name, "model constants must be positive"));
                }
                model = ReconfigModel::new(Duration::from_millis_f64(t_offset_ms), bandwidth_mbps * 1e6);
                section.finish()?;
            }
            None if name == "executor" => {
                have_executor = true;
                executor.sw_workers = section.parse_or("sw_workers", 2usize)?;
                executor.hw_workers = section.parse_or("hw_workers", 0usize)?;
                executor.wait_time =
                    Duration::from_micros(section.parse_or("wait_time_us", 1_000u64)?);
                if let Some(path) = section.take("bitstream_path") {
                    executor.bitstream_path = path;
                }
                duration = Duration::from_secs_f64(section.parse_or("duration_s", 10.0f64)?);
                seed = section.parse_or("seed", 0u64)?;
                if let Some(m) = section.take("mapping") {
                    mapping = m.parse().map_err(|e| semantic(&name, e))?;
                }
                section.finish()?;
            }
            Some(("slot", index)) => {
                let index: usize = index
                    .parse()
                    .map_err(|_| semantic(&name, "slot sections are [slot.K] with integer K"))?;
                let resources = SlotResources {
                    slice_luts: section.parse_or("slice_luts", 0u64)?,
                    dsps: section.parse_or("dsps", 0u64)?,
                    bram36: section.parse_or("bram36", 0u64)?,
                    bram18: section.parse_or("bram18", 0u64)?,
                };
                let size: u64 = section
                    .parse("bitstream_bytes")?
                    .ok_or_else(|| semantic(&name, "missing key \"bitstream_bytes\""))?;
                if size == 0 {
                    return Err(semantic(&name, "bitstream_bytes must be positive"));
                }
                slots.push((index, SlotDescriptor::new(SlotId::new(index as u32), resources, size)));
                section.finish()?;
            }
            Some(("callback", cb_name)) => {
                let cb_name = cb_name.to_owned();
                if callbacks.iter().any(|c| c.name == cb_name) {
                    return Err(semantic(&name, "duplicate callback name"));
                }
                callbacks.push(parse_callback(section, cb_name)?);
            }
            Some(("client", client_name)) => {
                let client_name = client_name.to_owned();
                if clients.iter().any(|c| c.name == client_name) {
                    return Err(semantic(&name, "duplicate client name"));
                }
                clients.push(parse_client(section, client_name)?);
            }
            _ => {
                return Err(semantic(
                    &name,
                    "unknown section (expected [model], [executor], [slot.K], [callback.NAME], [client.NAME])",
                ))
            }
        }
    }

    if !have_executor {
        return Err(semantic("executor", "missing [executor] section"));
    }

    // Slots must be declared contiguously from zero.
    slots.sort_by_key(|(i, _)| *i);
    for (expected, (index, _)) in slots.iter().enumerate() {
        if *index != expected {
            return Err(semantic(
                format!("slot.{index}"),
                format!("slot indices must be contiguous from 0; expected {expected}"),
            ));
        }
    }
    let slots: Vec<SlotDescriptor> = slots.into_iter().map(|(_, d)| d).collect();

    if executor.hw_workers != slots.len() {
        return Err(semantic(
            "executor",
            format!("hw_workers = {} but {} slots declared", executor.hw_workers, slots.len()),
        ));
    }

    for cb in &callbacks {
        let n = slots.len() as u32;
        if cb.mask_bits != 0 && (n == 0 || (n < 32 && cb.mask_bits >> n != 0)) {
            return Err(semantic(
                format!("callback.{}", cb.name),
                format!("mask {:#b} references slots outside 0..{n}", cb.mask_bits),
            ));
        }
    }

    for client in &clients {
        let Some(cb) = callbacks.iter().find(|c| c.name == client.callback) else {
            return Err(semantic(
                format!("client.{}", client.name),
                format!("unknown callback {:?}", client.callback),
            ));
        };
        match client.mode {
            ClientMode::PingPong => match cb.work.kind {
                CallbackKind::Subscriber => {
                    if cb.topic_out.is_none() {
                        return Err(semantic(
                            format!("client.{}", client.name),
                            "ping-pong over a subscriber needs the callback to declare topic_out",
                        ));
                    }
                }
                CallbackKind::ServiceServer => {}
                _ => {
                    return Err(semantic(
                        format!("client.{}", client.name),
                        "ping-pong clients target subscriber or server callbacks",
                    ))
                }
            },
            ClientMode::TimerListener => {
                if cb.work.kind != CallbackKind::Timer || cb.topic_out.is_none() {
                    return Err(semantic(
                        format!("client.{}", client.name),
                        "timer-listener clients target timer callbacks with topic_out",
                    ));
                }
            }
        }
    }

    Ok(ScenarioConfig { slots, model, executor, callbacks, clients, mapping, duration, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[executor]
sw_workers = 1
hw_workers = 1

[slot.0]
bitstream_bytes = 1000000

[callback.echo]
kind = subscriber
sw_ms = 1.0
hw_ms = 0.5
mask = 0b1
topic_in = /req
topic_out = /res

[client.c]
callback = echo
";

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.slots.len(), 1);
        assert_eq!(cfg.executor.sw_workers, 1);
        assert_eq!(cfg.executor.wait_time, Duration::from_millis(1));
        assert_eq!(cfg.model, ReconfigModel::reported());
        assert_eq!(cfg.mapping, Mapping::AllSw);
        assert_eq!(cfg.duration, Duration::from_secs(10));
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.clients[0].mode, ClientMode::PingPong);
        assert_eq!(cfg.clients[0].comm_delay, Duration::ZERO);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let bad = MINIMAL.replace("sw_workers = 1", "sw_workers = 1\nbogus_key = 3");
        match parse_config(&bad) {
            Err(ConfigError::Syntax { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus_key"), "{message}");
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn mask_outside_declared_slots_names_the_callback_section() {
        let bad = MINIMAL.replace("mask = 0b1", "mask = 0b1000");
        match parse_config(&bad) {
            Err(ConfigError::Semantic { section, message }) => {
                assert_eq!(section, "callback.echo");
                assert!(message.contains("0b1000"), "{message}");
            }
            other => panic!("expected semantic error, got {other:?}"),
        }
    }

    #[test]
    fn client_referencing_unknown_callback_is_semantic_error() {
        let bad = MINIMAL.replace("callback = echo", "callback = nope");
        match parse_config(&bad) {
            Err(ConfigError::Semantic { section, .. }) => assert_eq!(section, "client.c"),
            other => panic!("expected semantic error, got {other:?}"),
        }
    }

    #[test]
    fn workload_sections_pull_builtin_models() {
        let text = "\
[executor]
sw_workers = 2
hw_workers = 0

[callback.hash]
workload = hash
topic_out = /hash

[client.listener]
callback = hash
mode = timer-listener
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.callbacks[0].work.kind, CallbackKind::Timer);
        assert_eq!(cfg.callbacks[0].work.period, Some(Duration::from_millis(250)));
        assert_eq!(cfg.callbacks[0].work.payload_bytes_out, 32);
    }

    #[test]
    fn noncontiguous_slots_are_rejected() {
        let bad = MINIMAL.replace("[slot.0]", "[slot.1]");
        assert!(matches!(parse_config(&bad), Err(ConfigError::Semantic { .. })));
    }

    #[test]
    fn timer_without_period_is_rejected() {
        let text = "\
[executor]
sw_workers = 1
hw_workers = 0

[callback.t]
kind = timer
sw_ms = 1.0
topic_out = /t
";
        match parse_config(text) {
            Err(ConfigError::Semantic { section, message }) => {
                assert_eq!(section, "callback.t");
                assert!(message.contains("period_ms"));
            }
            other => panic!("{other:?}"),
        }
    }
}
