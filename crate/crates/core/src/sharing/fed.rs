//! Decentralized full-model sharing over each agent's neighborhood.

use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::nn::{FisherDiag, ParamVector, PenaltyTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedVariant {
    FedAvg,
    FedProx,
    FedCurv,
    FedFish,
}

impl FedVariant {
    /// Floats sent per edge per round for a model of `p` shared parameters.
    pub fn round_cost(self, p: u64) -> u64 {
        match self {
            FedVariant::FedCurv => 2 * p,
            _ => p,
        }
    }
}

fn check_lengths(base: &ParamVector, others: &[&ParamVector]) -> Result<()> {
    for o in others {
        if o.len() != base.len() {
            return Err(DclError::DimensionMismatch {
                expected: base.len(),
                actual: o.len(),
            });
        }
    }
    Ok(())
}

fn group_mean(own: &ParamVector, neighbors: &[&ParamVector]) -> Vec<f64> {
    let mut acc: Vec<f64> = own.as_slice().iter().map(|v| *v as f64).collect();
    for n in neighbors {
        for (a, v) in acc.iter_mut().zip(n.as_slice()) {
            *a += *v as f64;
        }
    }
    let count = (neighbors.len() + 1) as f64;
    for a in &mut acc {
        *a /= count;
    }
    acc
}

/// Elementwise mean over `{own} ∪ neighbors`.
pub fn fedavg_aggregate(own: &ParamVector, neighbors: &[&ParamVector]) -> Result<ParamVector> {
    check_lengths(own, neighbors)?;
    if neighbors.is_empty() {
        return Ok(own.clone());
    }
    Ok(own.with_values(group_mean(own, neighbors).into_iter().map(|v| v as f32).collect()).unwrap())
}

/// `d * own + (1 - d) * mean({own} ∪ neighbors)` with `d` the normalized
/// own Fisher diagonal.
pub fn fedfish_aggregate(own: &ParamVector, d: &[f32], neighbors: &[&ParamVector]) -> Result<ParamVector> {
    check_lengths(own, neighbors)?;
    if d.len() != own.len() {
        return Err(DclError::DimensionMismatch {
            expected: own.len(),
            actual: d.len(),
        });
    }
    if let Some(bad) = d.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DclError::OutOfRange(format!("Fisher weight {bad} outside [0, 1]")));
    }
    if neighbors.is_empty() {
        return Ok(own.clone());
    }
    let mean = group_mean(own, neighbors);
    let blended = own
        .as_slice()
        .iter()
        .zip(d)
        .zip(mean)
        .map(|((t, d), m)| {
            let d = *d as f64;
            (d * *t as f64 + (1.0 - d) * m) as f32
        })
        .collect();
    Ok(own.with_values(blended).unwrap())
}

/// `(mu/2) ||theta - anchor||^2`.
pub fn fedprox_penalty(anchor: ParamVector, mu: f32) -> Result<PenaltyTerm> {
    if !(mu >= 0.0) {
        return Err(DclError::InvalidArgument(format!("mu {mu} must be >= 0")));
    }
    Ok(PenaltyTerm::Proximal { anchor, mu })
}

/// `mu * sum_j sum_p F_j[p] (theta[p] - snapshot_j[p])^2`.
pub fn fedcurv_penalty(snapshots: Vec<(ParamVector, Option<FisherDiag>)>, mu: f32) -> Result<PenaltyTerm> {
    if !(mu >= 0.0) {
        return Err(DclError::InvalidArgument(format!("mu {mu} must be >= 0")));
    }
    let mut out = Vec::with_capacity(snapshots.len());
    for (i, (theta, fisher)) in snapshots.into_iter().enumerate() {
        let fisher = fisher.ok_or(DclError::MissingFisher(i))?;
        if fisher.len() != theta.len() {
            return Err(DclError::DimensionMismatch {
                expected: theta.len(),
                actual: fisher.len(),
            });
        }
        if let Some((first, _)) = out.first() {
            let first: &ParamVector = first;
            if first.len() != theta.len() {
                return Err(DclError::DimensionMismatch {
                    expected: first.len(),
                    actual: theta.len(),
                });
            }
        }
        out.push((theta, fisher));
    }
    Ok(PenaltyTerm::Curvature { snapshots: out, mu })
}
