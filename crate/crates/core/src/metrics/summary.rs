use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundReport;
use crate::pruning::SparsityMask;

/// Fraction of a mask's prunable positions that are zero. Channel-induced
/// zeros and dense-layer zeros are counted once each.
pub fn param_reduction(mask: &SparsityMask) -> f64 {
    mask.sparsity()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub rounds: usize,
    pub final_mean: f64,
    pub final_min: f64,
    pub final_max: f64,
    /// `(round, mean accuracy)` for every round.
    pub curve: Vec<(usize, f64)>,
}

impl AccuracySummary {
    /// First round whose mean accuracy reaches `threshold`.
    pub fn rounds_to(&self, threshold: f64) -> Option<usize> {
        self.curve.iter().find(|(_, a)| *a >= threshold).map(|(r, _)| *r)
    }
}

pub fn accuracy_summary(reports: &[RoundReport]) -> Result<AccuracySummary> {
    let last = reports.last().ok_or(Error::Empty("round reports"))?;
    let accs: Vec<f64> = last.clients.iter().map(|c| c.accuracy).collect();
    if accs.is_empty() {
        return Err(Error::Empty("client records"));
    }
    Ok(AccuracySummary {
        rounds: reports.len(),
        final_mean: accs.iter().sum::<f64>() / accs.len() as f64,
        final_min: accs.iter().copied().fold(f64::INFINITY, f64::min),
        final_max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        curve: reports.iter().map(|r| (r.round, r.mean_accuracy)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{Algorithm, ClientRoundRecord};

    fn record(client: usize, accuracy: f64) -> ClientRoundRecord {
        ClientRoundRecord {
            client,
            selected: true,
            accuracy,
            validation_accuracy: None,
            loss: None,
            delta_unstructured: None,
            delta_structured: None,
            pruned_unstructured: false,
            pruned_structured: false,
            sparsity: 0.0,
            sparsity_unstructured: 0.0,
            sparsity_structured: 0.0,
            level_unstructured: 0.0,
            level_structured: 0.0,
            zero_count: 0,
            uplink_bits: 0,
            downlink_bits: 0,
            conv_flops: 0,
        }
    }

    fn report(round: usize, accs: &[f64]) -> RoundReport {
        RoundReport {
            round,
            algorithm: Algorithm::FedAvg,
            selected: (0..accs.len()).collect(),
            clients: accs.iter().enumerate().map(|(i, a)| record(i, *a)).collect(),
            mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            mean_sparsity_unstructured: 0.0,
            mean_sparsity_structured: 0.0,
            round_bits: 0,
            cumulative_bits: 0,
            round_conv_flops: 0,
            cumulative_conv_flops: 0,
        }
    }

    #[test]
    fn single_client() {
        let s = accuracy_summary(&[report(1, &[72.5])]).unwrap();
        assert_eq!((s.final_mean, s.final_min, s.final_max), (72.5, 72.5, 72.5));
    }

    #[test]
    fn mean_of_two() {
        let s = accuracy_summary(&[report(1, &[10.0, 20.0]), report(2, &[80.0, 90.0])]).unwrap();
        assert_eq!(s.final_mean, 85.0);
        assert_eq!((s.final_min, s.final_max), (80.0, 90.0));
        assert_eq!(s.rounds_to(50.0), Some(2));
        assert_eq!(s.rounds_to(99.0), None);
    }

    #[test]
    fn empty_rejected() {
        assert!(accuracy_summary(&[]).is_err());
    }
}
