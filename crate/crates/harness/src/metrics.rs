//! Metric records and per-run summaries.

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// One evaluation of one run. Field order is the JSON-lines column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub seed: u64,
    pub round: usize,
    pub algorithm: String,
    /// `F(θ^t)`, the device average of full-shard losses.
    pub train_loss: f64,
    /// `None` for the quadratic model or an empty holdout set.
    pub holdout_accuracy: Option<f64>,
    pub delta_fi: Option<f64>,
    /// `‖h^t − ∇F(θ^t)‖²`; FedVSSAM only.
    pub tracking_error: Option<f64>,
    /// Annotation only; `None` unless wall-clock recording is enabled.
    pub wall_clock_ms: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub seed: u64,
    pub status: RunStatus,
    /// Last evaluated round.
    pub final_round: Option<usize>,
    pub final_accuracy: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub rounds_to_target: Option<usize>,
    pub error: Option<String>,
}

impl RunSummary {
    pub fn from_records(
        algorithm: &str,
        seed: u64,
        records: &[MetricRecord],
        target: Option<f64>,
        error: Option<String>,
    ) -> Result<Self> {
        let last = records.last();
        let rounds_to_target = match (target, records.is_empty()) {
            (Some(t), false) => rounds_to_target(records, t)?,
            _ => None,
        };
        Ok(RunSummary {
            algorithm: algorithm.to_string(),
            seed,
            status: if error.is_some() { RunStatus::Failed } else { RunStatus::Ok },
            final_round: last.map(|r| r.round),
            final_accuracy: last.and_then(|r| r.holdout_accuracy),
            final_train_loss: last.map(|r| r.train_loss),
            rounds_to_target,
            error,
        })
    }
}

/// First round whose holdout accuracy is at least `target`, or `None` if no
/// evaluated round reaches it. Records must be in increasing round order.
pub fn rounds_to_target(records: &[MetricRecord], target: f64) -> Result<Option<usize>> {
    if records.is_empty() {
        return Err(HarnessError::invalid("records", "no records to scan"));
    }
    if records.windows(2).any(|w| w[0].round >= w[1].round) {
        return Err(HarnessError::invalid("records", "rounds must be strictly increasing"));
    }
    Ok(records
        .iter()
        .find(|r| r.holdout_accuracy.is_some_and(|a| a >= target))
        .map(|r| r.round))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: usize, acc: f64) -> MetricRecord {
        MetricRecord {
            seed: 0,
            round,
            algorithm: "fedavg".into(),
            train_loss: 1.0,
            holdout_accuracy: Some(acc),
            delta_fi: None,
            tracking_error: None,
            wall_clock_ms: None,
        }
    }

    #[test]
    fn rounds_to_target_examples() {
        let rs = vec![rec(0, 0.2), rec(1, 0.5), rec(2, 0.8)];
        assert_eq!(rounds_to_target(&rs, 0.75).unwrap(), Some(2));
        assert_eq!(rounds_to_target(&rs, 0.99).unwrap(), None);
        assert_eq!(rounds_to_target(&rs, 0.5).unwrap(), Some(1));
        assert!(rounds_to_target(&[], 0.5).is_err());
        assert!(rounds_to_target(&[rec(2, 0.1), rec(1, 0.2)], 0.5).is_err());
    }

    #[test]
    fn record_json_field_order() {
        let json = serde_json::to_string(&rec(3, 0.5)).unwrap();
        assert_eq!(
            json,
            r#"{"seed":0,"round":3,"algorithm":"fedavg","train_loss":1.0,"holdout_accuracy":0.5,"delta_fi":null,"tracking_error":null,"wall_clock_ms":null}"#
        );
    }

    #[test]
    fn summary_of_failed_run() {
        let s = RunSummary::from_records("fedsam", 4, &[rec(0, 0.1)], Some(0.5), Some("boom".into())).unwrap();
        assert_eq!(s.status, RunStatus::Failed);
        assert_eq!(s.final_round, Some(0));
        assert_eq!(s.rounds_to_target, None);
        let empty = RunSummary::from_records("fedsam", 4, &[], Some(0.5), Some("early".into())).unwrap();
        assert_eq!(empty.final_round, None);
    }
}
