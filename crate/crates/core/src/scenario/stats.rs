//! Deterministic summary statistics over roundtrip records.

use std::collections::HashMap;

use crate::time::Duration;

use super::RoundtripRecord;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramBin {
    /// Inclusive lower edge; the bin covers [start, start + width).
    pub start: Duration,
    pub count: u64,
    pub relative: f64,
}

#[derive(Clone, Debug)]
pub struct ClientStats {
    pub client: String,
    pub count: u64,
    pub mean: Duration,
    pub min: Duration,
    pub max: Duration,
    pub histogram: Vec<HistogramBin>,
}

#[derive(Clone, Debug, Default)]
pub struct StatsSummary {
    pub clients: Vec<ClientStats>,
}

impl StatsSummary {
    pub fn client(&self, name: &str) -> Option<&ClientStats> {
        self.clients.iter().find(|c| c.client == name)
    }
}

/// Per-client moments and a fixed-width relative-frequency histogram.
/// Clients appear in order of their first record.
pub fn summarize(records: &[RoundtripRecord], bin_width: Duration) -> StatsSummary {
    assert!(!bin_width.is_zero(), "bin width must be positive");
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, Vec<Duration>> = HashMap::new();
    for r in records {
        grouped.entry(r.client.as_str()).or_insert_with(|| {
            order.push(r.client.as_str());
            Vec::new()
        });
        grouped.get_mut(r.client.as_str()).unwrap().push(r.roundtrip);
    }

    let clients = order
        .into_iter()
        .map(|name| {
            let samples = &grouped[name];
            let count = samples.len() as u64;
            let sum: u128 = samples.iter().map(|d| d.as_nanos() as u128).sum();
            let mean = Duration::from_nanos((sum / count as u128) as u64);
            let min = *samples.iter().min().unwrap();
            let max = *samples.iter().max().unwrap();

            let mut bins: HashMap<u64, u64> = HashMap::new();
            for s in samples {
                *bins.entry(s.as_nanos() / bin_width.as_nanos()).or_default() += 1;
            }
            let mut keys: Vec<u64> = bins.keys().copied().collect();
            keys.sort_unstable();
            let histogram = keys
                .into_iter()
                .map(|k| HistogramBin {
                    start: Duration::from_nanos(k * bin_width.as_nanos()),
                    count: bins[&k],
                    relative: bins[&k] as f64 / count as f64,
                })
                .collect();

            ClientStats { client: name.to_owned(), count, mean, min, max, histogram }
        })
        .collect();

    StatsSummary { clients }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(client: &str, seq: u64, ms: f64) -> RoundtripRecord {
        RoundtripRecord { client: client.into(), seq, roundtrip: Duration::from_millis_f64(ms) }
    }

    #[test]
    fn identical_samples_fill_one_bin() {
        let summary = summarize(&[rec("a", 1, 10.0), rec("a", 2, 10.0)], Duration::from_millis(1));
        let stats = summary.client("a").unwrap();
        assert_eq!(stats.count, 2);
        assert_eq!(stats.mean, Duration::from_millis(10));
        assert_eq!(stats.min, stats.max);
        assert_eq!(stats.histogram.len(), 1);
        assert_eq!(stats.histogram[0].relative, 1.0);
    }

    #[test]
    fn distinct_samples_occupy_distinct_bins() {
        let summary = summarize(&[rec("a", 1, 1.0), rec("a", 2, 3.0)], Duration::from_millis(1));
        let stats = summary.client("a").unwrap();
        assert_eq!(stats.histogram.len(), 2);
        assert_eq!(stats.histogram[0].start, Duration::from_millis(1));
        assert_eq!(stats.histogram[1].start, Duration::from_millis(3));
    }

    #[test]
    fn empty_records_yield_empty_summary() {
        let summary = summarize(&[], Duration::from_millis(1));
        assert!(summary.clients.is_empty());
    }

    proptest! {
        #[test]
        fn relative_frequencies_sum_to_one(
            samples in proptest::collection::vec(1u64..1_000_000, 1..100),
            width in 1u64..10_000,
        ) {
            let records: Vec<RoundtripRecord> = samples
                .iter()
                .enumerate()
                .map(|(i, &ns)| RoundtripRecord {
                    client: "c".into(),
                    seq: i as u64 + 1,
                    roundtrip: Duration::from_nanos(ns),
                })
                .collect();
            let summary = summarize(&records, Duration::from_nanos(width));
            let stats = summary.client("c").unwrap();
            let total: f64 = stats.histogram.iter().map(|b| b.relative).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(stats.mean >= stats.min && stats.mean <= stats.max);
        }
    }
}
