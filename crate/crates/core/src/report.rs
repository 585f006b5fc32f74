//! Summary tables and plot data over saved runs. Output depends only on
//! the stored records, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::budget::{marginal_gain_fit, value_of_budget};
use crate::config::{ExperimentConfig, Mode};
use crate::error::{DclError, Result};
use crate::persist::{load_run, read_manifest, write_atomic, StoredRun};
use crate::sim::metrics::{mean_se, relative_gain};
use crate::sim::{per_agent_final, RecordRow};
use crate::AgentId;

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

fn label<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

/// The config with every sharing-specific field reset, so a run and its
/// isolated baseline compare equal.
fn baseline_key(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.name = String::new();
    c.mode = Mode::None;
    c.topology = Default::default();
    c.data = Default::default();
    c.fed = Default::default();
    c.modmod = Default::default();
    c.budget = Default::default();
    c.hash()
}

fn finals_by_agent(rows: &[RecordRow]) -> BTreeMap<(u64, AgentId), f64> {
    let mut last: BTreeMap<(u64, AgentId), &RecordRow> = BTreeMap::new();
    for r in rows {
        let e = last.entry((r.seed, r.agent)).or_insert(r);
        if (r.task, r.epoch) >= (e.task, e.epoch) {
            *e = r;
        }
    }
    last.into_iter().map(|(k, r)| (k, r.accuracy)).collect()
}

struct Gain {
    mean: f64,
    se: f64,
}

/// Paired gain over (seed, agent) pairs present in both runs.
fn gain_over(run: &StoredRun, base: &StoredRun) -> Gain {
    let a = finals_by_agent(&run.rows);
    let b = finals_by_agent(&base.rows);
    let diffs: Vec<f64> = a
        .iter()
        .filter_map(|(k, v)| b.get(k).map(|w| relative_gain(*v, *w)))
        .collect();
    let (mean, se) = mean_se(&diffs);
    Gain { mean, se }
}

/// Renders every report file as `(file name, contents)`.
pub fn build_report(runs: &[StoredRun]) -> Result<Vec<(String, String)>> {
    if runs.is_empty() {
        return Err(DclError::Empty("run records"));
    }
    let mut baselines: BTreeMap<String, &StoredRun> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.config.mode == Mode::None) {
        baselines.entry(baseline_key(&r.config)).or_insert(r);
    }
    let gains: Vec<Option<Gain>> = runs
        .iter()
        .map(|r| baselines.get(&baseline_key(&r.config)).map(|b| gain_over(r, b)))
        .collect();

    let mut curves = String::from("run,mode,task,epoch,mean,se,n\n");
    for r in runs {
        let mut points: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for row in &r.rows {
            points.entry((row.task, row.epoch)).or_default().push(row.accuracy);
        }
        for ((task, epoch), v) in points {
            let (m, se) = mean_se(&v);
            let _ = writeln!(
                curves,
                "{},{},{task},{epoch},{},{},{}",
                r.config.name,
                label(&r.config.mode),
                num(m),
                num(se),
                v.len()
            );
        }
    }

    let mut table =
        String::from("run,mode,final,final_se,auc,auc_se,budget_per_edge,relative_gain,value_of_budget\n");
    let mut by_mode: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut scatter = String::from("run,mode,log_budget,relative_gain\n");
    let mut topo = String::from("run,mode,topology,p,relative_gain,se\n");
    for (r, g) in runs.iter().zip(&gains) {
        let s = &r.summary;
        let mode = label(&r.config.mode);
        let (gain, value) = match g {
            Some(g) => (g.mean, value_of_budget(g.mean, s.budget_per_edge).unwrap_or(f64::NAN)),
            None => (f64::NAN, f64::NAN),
        };
        let (fin, fin_se) = mean_se(&per_agent_final(&r.rows));
        let _ = writeln!(
            table,
            "{},{mode},{},{},{},{},{},{},{}",
            s.name,
            num(fin),
            num(fin_se),
            num(s.auc),
            num(s.auc_se),
            num(s.budget_per_edge),
            num(gain),
            num(value)
        );
        let Some(g) = g else { continue };
        if r.config.mode == Mode::None {
            continue;
        }
        if s.budget_per_edge > 0.0 {
            let x = s.budget_per_edge.ln();
            let _ = writeln!(scatter, "{},{mode},{},{}", s.name, num(x), num(g.mean));
            by_mode.entry(mode.clone()).or_default().push((x, g.mean));
        }
        let _ = writeln!(
            topo,
            "{},{mode},{},{},{},{}",
            s.name,
            label(&r.config.topology.kind),
            num(r.config.topology.p),
            num(g.mean),
            num(g.se)
        );
    }

    let mut slopes = String::from("mode,points,slope\n");
    for (mode, pts) in &by_mode {
        let slope = marginal_gain_fit(pts).unwrap_or(f64::NAN);
        let _ = writeln!(slopes, "{mode},{},{}", pts.len(), num(slope));
    }

    Ok(vec![
        ("learning_curves.csv".into(), curves),
        ("final_auc.csv".into(), table),
        ("gain_vs_budget.csv".into(), scatter),
        ("gain_slope.csv".into(), slopes),
        ("topology_gain.csv".into(), topo),
    ])
}

/// Loads every run in `out`'s manifest and writes the report under
/// `out/report/`. Returns the written paths.
pub fn write_report(out: &Path) -> Result<Vec<std::path::PathBuf>> {
    let manifest = read_manifest(out)?;
    let runs = manifest
        .runs
        .iter()
        .map(|e| load_run(out, e))
        .collect::<Result<Vec<_>>>()?;
    let mut written = Vec::new();
    for (name, contents) in build_report(&runs)? {
        let path = out.join("report").join(name);
        write_atomic(&path, contents.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
