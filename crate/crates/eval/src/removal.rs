//! Train/test gap diagnostic for concept removal on striped data.

use dcr_trainer::RunLog;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

/// Default maximal gap, in accuracy points, for a run to count as a successful removal.
/// Separates every success row of the small-ResNet table from every failure row.
pub const DEFAULT_GAP_THRESHOLD: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub epoch: usize,
    /// Accuracy in points on the striped training set.
    pub train_accuracy: f64,
    /// Accuracy in points on the clean test set.
    pub test_accuracy: f64,
    /// `|train - test|` in points.
    pub gap: f64,
    pub threshold: f64,
    pub removed: bool,
}

/// Classifies a pair of accuracies given in points.
pub fn classify_gap(train_accuracy: f64, test_accuracy: f64, threshold: f64) -> RemovalReport {
    let gap = (train_accuracy - test_accuracy).abs();
    RemovalReport { epoch: 0, train_accuracy, test_accuracy, gap, threshold, removed: gap <= threshold }
}

/// Gap at the last epoch between the `train` series and the named clean evaluation series.
pub fn removal_diagnostic(
    log: &RunLog,
    train_series: &str,
    test_series: &str,
    threshold: f64,
) -> Result<RemovalReport> {
    if !(threshold >= 0.0) {
        return Err(EvalError::InvalidInput(format!("gap threshold {threshold}")));
    }
    let series = |name: &str| {
        log.series(name)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| EvalError::Data(format!("run log has no '{name}' accuracy series")))
    };
    let (train, test) = (series(train_series)?, series(test_series)?);
    let (&(epoch, tr), &(_, te)) = (train.last().expect("nonempty"), test.last().expect("nonempty"));
    Ok(RemovalReport { epoch, ..classify_gap(100.0 * tr, 100.0 * te, threshold) })
}
