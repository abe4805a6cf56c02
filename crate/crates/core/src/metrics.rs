//! Per-iteration metric records and derived summaries.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationKind {
    Inference,
    Update,
}

/// Scheduler counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub engine_calls: u64,
    pub inference_iterations: u64,
    pub updates: u64,
    pub prompts_screened: u64,
    pub prompts_accepted: u64,
    pub prompts_rejected: u64,
    pub buffer_high_water: u64,
    pub dropped_at_shutdown: u64,
}

/// One line of the metrics stream.
///
/// `sim_elapsed_s` is the simulated time spent in this iteration alone; the
/// run clock is the running sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: IterationKind,
    /// Training steps completed after this iteration.
    pub t: u64,
    pub sim_elapsed_s: f64,
    /// Mean realized reward over every sample used by the update.
    pub train_pass_rate: Option<f64>,
    /// Norm of the update direction before learning-rate scaling.
    pub grad_norm: Option<f64>,
    /// Share of newly screened prompts that were admitted.
    pub accepted_fraction: Option<f64>,
    /// Mean exact (or latent) pass rate over the whole population.
    pub population_pass_rate: Option<f64>,
    pub engine_calls: u64,
    #[serde(skip)]
    pub counters: Counters,
}

/// Schema version of the metrics stream and summary documents.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One JSON object per line, newline-terminated.
pub fn to_jsonl(trace: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Running simulated clock after each record.
pub fn cumulative_clock(trace: &[MetricsRecord]) -> Vec<f64> {
    trace
        .iter()
        .scan(0.0, |clock, r| {
            *clock += r.sim_elapsed_s;
            Some(*clock)
        })
        .collect()
}

/// Simulated time at which the population pass rate first reaches `target`,
/// interpolating linearly between consecutive evaluation points.
pub fn time_to_target(trace: &[MetricsRecord], target: f64) -> Option<f64> {
    let clock = cumulative_clock(trace);
    let mut prev: Option<(f64, f64)> = None;
    for (r, &c) in trace.iter().zip(&clock) {
        let Some(rate) = r.population_pass_rate else {
            continue;
        };
        if rate >= target {
            return Some(match prev {
                Some((pc, pr)) if rate > pr => pc + (c - pc) * (target - pr) / (rate - pr),
                Some(_) => c,
                None => c,
            });
        }
        prev = Some((c, rate));
    }
    None
}

/// Mean of `f` over the update records of the first `fraction` of training
/// steps (by step index).
pub fn early_update_mean(
    trace: &[MetricsRecord],
    fraction: f64,
    f: impl Fn(&MetricsRecord) -> Option<f64>,
) -> Option<f64> {
    let total = trace
        .iter()
        .filter(|r| r.kind == IterationKind::Update)
        .map(|r| r.t)
        .max()?;
    let cutoff = (total as f64 * fraction).ceil() as u64;
    let values: Vec<f64> = trace
        .iter()
        .filter(|r| r.kind == IterationKind::Update && r.t <= cutoff)
        .filter_map(f)
        .collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(elapsed: f64, rate: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            kind: IterationKind::Update,
            t: 0,
            sim_elapsed_s: elapsed,
            train_pass_rate: None,
            grad_norm: None,
            accepted_fraction: None,
            population_pass_rate: rate,
            engine_calls: 0,
            counters: Counters::default(),
        }
    }

    #[test]
    fn interpolates_between_evaluations() {
        let trace = vec![rec(1.0, Some(0.2)), rec(1.0, None), rec(2.0, Some(0.6))];
        // Clock 1 → 0.2, clock 4 → 0.6; 0.5 is reached at 1 + 3 · 0.75.
        assert!((time_to_target(&trace, 0.5).unwrap() - 3.25).abs() < 1e-12);
        assert_eq!(time_to_target(&trace, 0.2), Some(1.0));
        assert_eq!(time_to_target(&trace, 0.9), None);
    }

    #[test]
    fn serialized_keys_are_fixed() {
        let json = serde_json::to_value(rec(1.5, Some(0.25))).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "accepted_fraction",
                "engine_calls",
                "grad_norm",
                "kind",
                "population_pass_rate",
                "sim_elapsed_s",
                "t",
                "train_pass_rate"
            ]
        );
    }
}
