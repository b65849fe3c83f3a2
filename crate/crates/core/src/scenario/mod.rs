//! Scenario descriptions, the benchmark runner and result statistics.

mod config;
mod runner;
mod stats;

pub use config::{parse_config, CallbackSpec, ClientMode, ClientSpec, ConfigError, Mapping, ScenarioConfig};
pub use runner::{run_scenario, Backend, ScenarioError, ScenarioOutput};
pub use stats::{summarize, ClientStats, HistogramBin, StatsSummary};

use crate::time::Duration;

/// One measured client interaction: a request/response roundtrip, or for
/// listener clients the gap between consecutive messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundtripRecord {
    pub client: String,
    pub seq: u64,
    pub roundtrip: Duration,
}
