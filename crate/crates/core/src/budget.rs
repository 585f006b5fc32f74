//! Communication accounting in 32-bit floats, and budget-efficiency metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::nn::LayerKind;
use crate::sharing::ShareKind;
use crate::AgentId;

pub fn cost_of_instances(height: u64, width: u64, channels: u64, n: u64) -> u64 {
    height * width * channels * n
}

/// Parameter count of a stack of layers.
pub fn cost_of_layers(layers: &[LayerKind]) -> u64 {
    layers.iter().map(|l| l.param_count() as u64).sum()
}

pub fn cost_of_modules(k: u64, module_params: u64) -> u64 {
    k * module_params
}

/// Cumulative budget `B` of `rounds` communications of `per_round` floats.
pub fn total_budget(per_round: u64, rounds: u64) -> u64 {
    per_round * rounds
}

/// Least-squares slope of gain against `log B`.
pub fn marginal_gain_fit(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(DclError::Degenerate("marginal gain fit needs >= 2 points"));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 1e-12 * (1.0 + mx * mx) {
        return Err(DclError::Degenerate("all budgets equal"));
    }
    Ok(sxy / sxx)
}

/// Relative gain per float of communication.
pub fn value_of_budget(gain: f64, budget: f64) -> Result<f64> {
    if gain == 0.0 {
        return Ok(0.0);
    }
    if !(budget > 0.0) {
        return Err(DclError::InvalidArgument(format!("budget {budget} must be positive")));
    }
    Ok(gain / budget)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub clock: u64,
    pub edge_from: AgentId,
    pub edge_to: AgentId,
    pub mode: ShareKind,
    pub floats: u64,
}

/// Per-edge cap `b * f * C` from the cumulative-budget constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allowance {
    /// `(from, to) -> (b, f)`.
    pub edges: BTreeMap<(AgentId, AgentId), (f64, u32)>,
}

impl Allowance {
    pub fn cap(&self, from: AgentId, to: AgentId, clock: u64) -> u64 {
        self.edges
            .get(&(from, to))
            .map(|(b, f)| (b * *f as f64 * clock as f64).floor() as u64)
            .unwrap_or(0)
    }
}

/// Append-only record of every charged payload. Senders `charge`, receivers
/// `acknowledge`; conservation compares both sides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    rows: Vec<LedgerRow>,
    totals: BTreeMap<(AgentId, AgentId), u64>,
    received: BTreeMap<(u64, AgentId, AgentId, ShareKind), u64>,
    allowance: Option<Allowance>,
    /// Uncharged bookkeeping such as label or score counts.
    metadata: BTreeMap<String, u64>,
}

impl CostLedger {
    pub fn audit() -> Self {
        Self::default()
    }

    pub fn enforcing(allowance: Allowance) -> Self {
        Self {
            allowance: Some(allowance),
            ..Self::default()
        }
    }

    pub fn is_enforcing(&self) -> bool {
        self.allowance.is_some()
    }

    /// Floats `from -> to` may still carry at `clock`; unbounded in audit mode.
    pub fn remaining(&self, from: AgentId, to: AgentId, clock: u64) -> u64 {
        match &self.allowance {
            None => u64::MAX,
            Some(a) => a.cap(from, to, clock).saturating_sub(self.edge_total(from, to)),
        }
    }

    /// Records a sender-side payload. Zero-float charges are not recorded.
    pub fn charge(&mut self, clock: u64, from: AgentId, to: AgentId, mode: ShareKind, floats: u64) -> Result<()> {
        if floats == 0 {
            return Ok(());
        }
        if floats > self.remaining(from, to, clock) {
            return Err(DclError::OutOfRange(format!(
                "edge {from}->{to} would exceed its allowance at clock {clock}"
            )));
        }
        self.rows.push(LedgerRow {
            clock,
            edge_from: from,
            edge_to: to,
            mode,
            floats,
        });
        *self.totals.entry((from, to)).or_insert(0) += floats;
        Ok(())
    }

    /// Records the receiver side of a delivery.
    pub fn acknowledge(&mut self, clock: u64, from: AgentId, to: AgentId, mode: ShareKind, floats: u64) {
        if floats > 0 {
            *self.received.entry((clock, from, to, mode)).or_insert(0) += floats;
        }
    }

    pub fn note(&mut self, key: &str, count: u64) {
        *self.metadata.entry(key.to_string()).or_insert(0) += count;
    }

    pub fn metadata(&self) -> &BTreeMap<String, u64> {
        &self.metadata
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn total(&self) -> u64 {
        self.totals.values().sum()
    }

    pub fn edge_total(&self, from: AgentId, to: AgentId) -> u64 {
        self.totals.get(&(from, to)).copied().unwrap_or(0)
    }

    pub fn edge_totals(&self) -> &BTreeMap<(AgentId, AgentId), u64> {
        &self.totals
    }

    /// Total charged on rows of one mode.
    pub fn mode_total(&self, mode: ShareKind) -> u64 {
        self.rows.iter().filter(|r| r.mode == mode).map(|r| r.floats).sum()
    }

    /// Cumulative floats charged up to and including `clock`.
    pub fn total_until(&self, clock: u64) -> u64 {
        self.rows.iter().filter(|r| r.clock <= clock).map(|r| r.floats).sum()
    }

    /// Totals equal the row sums, every sent float was received on the
    /// same edge in the same round, and no edge exceeds its allowance.
    pub fn check_conservation(&self) -> Result<()> {
        let mut sums: BTreeMap<(AgentId, AgentId), u64> = BTreeMap::new();
        let mut sent: BTreeMap<(u64, AgentId, AgentId, ShareKind), u64> = BTreeMap::new();
        for r in &self.rows {
            *sums.entry((r.edge_from, r.edge_to)).or_insert(0) += r.floats;
            *sent.entry((r.clock, r.edge_from, r.edge_to, r.mode)).or_insert(0) += r.floats;
        }
        if sums != self.totals {
            return Err(DclError::Payload("ledger totals differ from row sums".into()));
        }
        if sent != self.received {
            return Err(DclError::Payload("sent and received floats differ".into()));
        }
        if let Some(a) = &self.allowance {
            let last = self.rows.iter().map(|r| r.clock).max().unwrap_or(0);
            for ((from, to), total) in &self.totals {
                if *total > a.cap(*from, *to, last) {
                    return Err(DclError::Payload(format!("edge {from}->{to} exceeds its allowance")));
                }
            }
        }
        Ok(())
    }

    /// Merges another ledger's rows (used to total hybrid runs).
    pub fn merged(ledgers: &[&CostLedger]) -> CostLedger {
        let mut out = CostLedger::default();
        for l in ledgers {
            for r in &l.rows {
                out.rows.push(r.clone());
                *out.totals.entry((r.edge_from, r.edge_to)).or_insert(0) += r.floats;
            }
            for (k, v) in &l.received {
                *out.received.entry(*k).or_insert(0) += v;
            }
            for (k, v) in &l.metadata {
                *out.metadata.entry(k.clone()).or_insert(0) += v;
            }
        }
        out.rows.sort_by_key(|r| (r.clock, r.mode, r.edge_from, r.edge_to));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("clock,edge_from,edge_to,mode,floats\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.clock, r.edge_from, r.edge_to, r.mode.as_str(), r.floats);
        }
        s
    }

    /// Parses rows written by [`CostLedger::to_csv`] into an audit ledger.
    pub fn from_csv(text: &str) -> Result<CostLedger> {
        let mut out = CostLedger::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| DclError::Parse { line: i + 1, msg };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(err(format!("expected 5 columns, got {}", cols.len())));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| err(e.to_string()));
            let row = LedgerRow {
                clock: num(cols[0])?,
                edge_from: num(cols[1])? as AgentId,
                edge_to: num(cols[2])? as AgentId,
                mode: cols[3].parse().map_err(err)?,
                floats: num(cols[4])?,
            };
            out.acknowledge(row.clock, row.edge_from, row.edge_to, row.mode, row.floats);
            out.charge(row.clock, row.edge_from, row.edge_to, row.mode, row.floats)?;
        }
        Ok(out)
    }
}
