//! Evaluation: test accuracy, per-client accuracy spread, label
//! precision/recall of selected sets, and CSV/JSON export of the round
//! time series.

use std::path::Path;

use crate::data::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};

/// One round of the exported record.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    /// Each participant's model evaluated on the shared test split.
    pub per_client_accuracy: Vec<f64>,
    /// Mean label precision over participants; absent when no participant
    /// had a defined value.
    pub label_precision: Option<f64>,
    /// Mean label recall over participants, same convention.
    pub label_recall: Option<f64>,
    pub clean_set_sizes: Vec<usize>,
    /// Participants whose selected training set came back empty.
    pub empty_clean_count: usize,
    pub degenerate_gmm_count: usize,
}

/// Fraction of selected examples whose observed label is correct. An empty
/// selection has no defensible value and is reported as absent.
pub fn label_precision(selected: &[usize], examples: &[LabeledExample]) -> Option<f64> {
    if selected.is_empty() {
        return None;
    }
    let clean = selected.iter().filter(|&&i| examples[i].is_clean()).count();
    Some(clean as f64 / selected.len() as f64)
}

/// Fraction of the truly clean examples that were selected; absent when the
/// client holds no clean example at all.
pub fn label_recall(selected: &[usize], examples: &[LabeledExample]) -> Option<f64> {
    let total_clean = examples.iter().filter(|e| e.is_clean()).count();
    if total_clean == 0 {
        return None;
    }
    let selected_clean = selected.iter().filter(|&&i| examples[i].is_clean()).count();
    Some(selected_clean as f64 / total_clean as f64)
}

/// Argmax match rate against ground-truth labels.
pub fn test_accuracy(model: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::contract("test_accuracy requires a nonempty test set"));
    }
    let mut hits = 0usize;
    for ex in &test.examples {
        if forward(model, ex.features())?.argmax() == ex.true_label() {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// (min, max, population standard deviation) of per-client accuracies.
pub fn accuracy_spread(per_client: &[f64]) -> Result<(f64, f64, f64)> {
    if per_client.len() < 2 {
        return Err(Error::contract("spread needs at least 2 clients"));
    }
    Ok(spread_stats(per_client))
}

fn spread_stats(values: &[f64]) -> (f64, f64, f64) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (min, max, var.sqrt())
}

pub const CSV_HEADER: &str = "round,test_accuracy,lp_mean,lr_mean,acc_min,acc_max,acc_std,clean_set_mean_size,empty_clean_flags,degenerate_gmm_count";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        let (min, max, std) = if self.per_client_accuracy.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            spread_stats(&self.per_client_accuracy)
        };
        let mean_size = if self.clean_set_sizes.is_empty() {
            None
        } else {
            Some(self.clean_set_sizes.iter().sum::<usize>() as f64 / self.clean_set_sizes.len() as f64)
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.test_accuracy,
            fmt_opt(self.label_precision),
            fmt_opt(self.label_recall),
            min,
            max,
            std,
            fmt_opt(mean_size),
            self.empty_clean_count,
            self.degenerate_gmm_count
        )
    }

    fn json_value(&self) -> serde_json::Value {
        let (min, max, std) = if self.per_client_accuracy.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            spread_stats(&self.per_client_accuracy)
        };
        let num = |v: f64| {
            serde_json::Number::from_f64(v)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null)
        };
        let opt = |v: Option<f64>| v.map(num).unwrap_or(serde_json::Value::Null);
        let mean_size = if self.clean_set_sizes.is_empty() {
            None
        } else {
            Some(self.clean_set_sizes.iter().sum::<usize>() as f64 / self.clean_set_sizes.len() as f64)
        };
        serde_json::json!({
            "round": self.round,
            "test_accuracy": num(self.test_accuracy),
            "lp_mean": opt(self.label_precision),
            "lr_mean": opt(self.label_recall),
            "acc_min": num(min),
            "acc_max": num(max),
            "acc_std": num(std),
            "clean_set_mean_size": opt(mean_size),
            "empty_clean_flags": self.empty_clean_count,
            "degenerate_gmm_count": self.degenerate_gmm_count,
        })
    }
}

pub fn to_csv_string(rounds: &[RoundMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rounds {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_csv(rounds: &[RoundMetrics], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(rounds))?;
    Ok(())
}

pub fn to_json_string(rounds: &[RoundMetrics]) -> String {
    let values: Vec<serde_json::Value> = rounds.iter().map(|r| r.json_value()).collect();
    serde_json::to_string_pretty(&values).expect("round metrics serialize")
}

pub fn write_json(rounds: &[RoundMetrics], path: &Path) -> Result<()> {
    std::fs::write(path, to_json_string(rounds))?;
    Ok(())
}
