//! Evaluation metrics over checkpoint records.

use std::collections::BTreeMap;

use crate::error::{DclError, Result};
use crate::TaskId;

/// Mean of per-task accuracies over the tasks seen so far.
pub fn evaluate_seen_tasks(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(DclError::Empty("seen tasks"));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// `sum_i sum_tau Pr(tau | T_i) * loss_i(tau)` where `Pr` is the empirical
/// task frequency in agent `i`'s stream. `streams[i]` lists agent `i`'s
/// task arrivals (repeats allowed) and `losses[i]` its mean test loss per task.
pub fn collective_objective(streams: &[Vec<TaskId>], losses: &[BTreeMap<TaskId, f64>]) -> Result<f64> {
    if streams.len() != losses.len() {
        return Err(DclError::InvalidArgument(format!(
            "{} streams but {} loss tables",
            streams.len(),
            losses.len()
        )));
    }
    let mut total = 0.0;
    for (stream, loss) in streams.iter().zip(losses) {
        if stream.is_empty() {
            continue;
        }
        let mut freq: BTreeMap<TaskId, usize> = BTreeMap::new();
        for t in stream {
            *freq.entry(*t).or_default() += 1;
        }
        for (t, n) in freq {
            let l = loss
                .get(&t)
                .ok_or_else(|| DclError::InvalidArgument(format!("no loss recorded for {t}")))?;
            total += n as f64 / stream.len() as f64 * l;
        }
    }
    Ok(total)
}

/// Difference in final average accuracy, in points.
pub fn relative_gain(final_accuracy: f64, baseline_final_accuracy: f64) -> f64 {
    final_accuracy - baseline_final_accuracy
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seen_task_mean() {
        assert_eq!(evaluate_seen_tasks(&[90.0]).unwrap(), 90.0);
        assert_eq!(evaluate_seen_tasks(&[100.0, 80.0]).unwrap(), 90.0);
        assert!(evaluate_seen_tasks(&[]).is_err());
    }

    #[test]
    fn objective_single_task_is_its_loss() {
        let l = BTreeMap::from([(TaskId(0), 1.25)]);
        assert_eq!(collective_objective(&[vec![TaskId(0)]], &[l]).unwrap(), 1.25);
    }

    #[test]
    fn absent_task_contributes_nothing() {
        let l = BTreeMap::from([(TaskId(0), 1.0), (TaskId(9), 100.0)]);
        assert_eq!(collective_objective(&[vec![TaskId(0)]], &[l]).unwrap(), 1.0);
    }

    #[test]
    fn gain_and_se() {
        assert_eq!(relative_gain(72.0, 70.0), 2.0);
        assert_eq!(relative_gain(70.0, 70.0), 0.0);
        let (m, se) = mean_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
    }
}
