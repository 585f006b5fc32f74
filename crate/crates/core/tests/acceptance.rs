//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. `DCL_ACCEPT=1,4` runs a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use dcl_core::budget::{cost_of_instances, marginal_gain_fit, value_of_budget, CostLedger};
use dcl_core::config::{parse_config, DataStrategy, ExperimentConfig, MetricChoice, NetKind, TopologyKind};
use dcl_core::modular::{ModularNet, Module, ModuleId};
use dcl_core::nn::{
    loss_and_grads, Block, FisherDiag, InstanceBatch, LayerKind, LayerSlot, MonolithicNet, Network, ParamVector,
    PenaltyTerm,
};
use dcl_core::persist::save_run;
use dcl_core::sharing::data::{recv_answer, simp_allocate, simp_respond, ClassRequest};
use dcl_core::sharing::fed::{fedavg_aggregate, fedfish_aggregate, FedVariant};
use dcl_core::sharing::modmod::{iou_score, leep_score};
use dcl_core::sharing::{ClassKey, ShareKind};
use dcl_core::sim::metrics::mean_se;
use dcl_core::sim::{run_experiment, Execution, RunRecord, SeedResult};
use dcl_core::tasks::Family;
use dcl_core::TaskId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config(text: &str) -> ExperimentConfig {
    let mut runs = parse_config(text).unwrap_or_else(|e| panic!("{e}\n{text}")).runs;
    assert_eq!(runs.len(), 1);
    runs.remove(0)
}

fn run(cfg: &ExperimentConfig) -> RunRecord {
    let r = run_experiment(cfg, Execution::Sequential).unwrap();
    assert!(r.failures.is_empty(), "{}: {:?}", cfg.name, r.failures);
    r
}

fn seed_finals(r: &RunRecord) -> Vec<f64> {
    r.seeds.iter().map(|s| s.final_accuracy).collect()
}

fn wins(a: &[f64], b: &[f64], margin: f64) -> usize {
    a.iter().zip(b).filter(|(x, y)| **x > **y + margin).count()
}

// ---------------------------------------------------------------- oracles

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()
}

fn oracle_mean(all: &[Vec<f32>]) -> Vec<f64> {
    let n = all[0].len();
    let mut out = vec![0.0f64; n];
    for v in all {
        for (o, x) in out.iter_mut().zip(v) {
            *o += *x as f64;
        }
    }
    out.iter().map(|s| s / all.len() as f64).collect()
}

fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

fn oracle_leep(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = probs.len() as f64;
    let z = probs[0].len();
    let ny = labels.iter().copied().max().unwrap() + 1;
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        let mut s = 0.0;
        for zi in 0..z {
            let joint: f64 = probs
                .iter()
                .zip(labels)
                .filter(|(_, l)| *l == y)
                .map(|(q, _)| q[zi])
                .sum::<f64>()
                / n;
            let marginal: f64 = (0..ny)
                .map(|yy| {
                    probs
                        .iter()
                        .zip(labels)
                        .filter(|(_, l)| **l == yy)
                        .map(|(q, _)| q[zi])
                        .sum::<f64>()
                        / n
                })
                .sum();
            if marginal > 0.0 {
                s += joint / marginal * p[zi];
            }
        }
        total += s.ln();
    }
    total / n
}

fn oracle_slope(points: &[(f64, f64)]) -> f64 {
    // normal equations [n sx; sx sxx] [a b]^T = [sy sxy]^T, solved by Cramer's rule
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn criterion_oracles() -> Outcome {
    const CASES: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let p = rng.random_range(1..40);
        let k = rng.random_range(0..6);
        let own = rand_vec(&mut rng, p);
        let others: Vec<Vec<f32>> = (0..k).map(|_| rand_vec(&mut rng, p)).collect();
        let pv = ParamVector::flat(own.clone());
        let ov: Vec<ParamVector> = others.iter().map(|v| ParamVector::flat(v.clone())).collect();
        let refs: Vec<&ParamVector> = ov.iter().collect();
        let mut all = vec![own.clone()];
        all.extend(others.iter().cloned());
        let mean = oracle_mean(&all);

        let avg = fedavg_aggregate(&pv, &refs).unwrap();
        for (a, m) in avg.as_slice().iter().zip(&mean) {
            worst = worst.max((*a as f64 - m).abs());
        }
        let d: Vec<f32> = (0..p).map(|_| rng.random_range(0.0f32..=1.0)).collect();
        let fish = fedfish_aggregate(&pv, &d, &refs).unwrap();
        for i in 0..p {
            let want = d[i] as f64 * own[i] as f64 + (1.0 - d[i] as f64) * mean[i];
            worst = worst.max((fish.as_slice()[i] as f64 - want).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("aggregation error {worst:.2e}"));
    }

    for case in 0..CASES {
        let family = Family::Synthetic(0);
        let n_classes = rng.random_range(1..8u32);
        let receiver: Vec<u32> = (0..n_classes).filter(|_| rng.random_bool(0.7)).collect();
        let sender: BTreeSet<ClassKey> =
            (0..n_classes).filter(|_| rng.random_bool(0.7)).map(|c| (family.clone(), c)).collect();
        let worth: BTreeMap<ClassKey, f64> =
            receiver.iter().map(|c| ((family.clone(), *c), rng.random_range(0.0..3.0))).collect();
        let budget = rng.random_range(0..60);
        let req = ClassRequest {
            from: 0,
            classes: worth.keys().cloned().collect(),
            worth: worth.clone(),
            budget,
        };
        let alloc = simp_allocate(&req, &sender);
        let shared: Vec<&ClassKey> = worth.keys().filter(|c| sender.contains(*c)).collect();
        let total: f64 = shared.iter().map(|c| worth[*c]).sum();
        for c in &shared {
            let want = if total > 0.0 {
                (worth[*c] * budget as f64 / total).floor() as usize
            } else {
                0
            };
            if alloc.get(*c) != Some(&want) {
                return Err(format!("case {case}: allocation for {c:?} is {:?}, oracle {want}", alloc.get(*c)));
            }
        }
        if alloc.len() != shared.len() {
            return Err(format!("case {case}: allocation covers classes outside the intersection"));
        }
        let mut pool: BTreeMap<ClassKey, Vec<usize>> = BTreeMap::new();
        let mut next = 0;
        for c in &sender {
            let n = rng.random_range(0..8);
            pool.insert(c.clone(), (next..next + n).collect());
            next += n;
        }
        let picks = simp_respond(&alloc, &pool, &mut rng);
        let mut per_class: BTreeMap<ClassKey, Vec<usize>> = BTreeMap::new();
        for (c, i) in picks {
            per_class.entry(c).or_default().push(i);
        }
        for (c, n) in &alloc {
            let got = per_class.remove(c).unwrap_or_default();
            let avail = pool.get(c).map(|v| v.len()).unwrap_or(0);
            let distinct: BTreeSet<usize> = got.iter().copied().collect();
            if got.len() != (*n).min(avail)
                || distinct.len() != got.len()
                || !got.iter().all(|i| pool[c].contains(i))
            {
                return Err(format!("case {case}: response for {c:?} violates the allocation"));
            }
        }
        if !per_class.is_empty() {
            return Err(format!("case {case}: response contains unallocated classes"));
        }
    }

    for case in 0..CASES {
        let dim = rng.random_range(1..6);
        let n = rng.random_range(1..30);
        let k = rng.random_range(0..n + 3);
        let stored: Vec<Vec<f32>> = (0..n).map(|_| rand_vec(&mut rng, dim)).collect();
        let query = rand_vec(&mut rng, dim);
        let mut order: Vec<(f64, usize)> = stored.iter().enumerate().map(|(i, s)| (oracle_cosine(&query, s), i)).collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = order.iter().take(k).map(|p| p.1).collect();
        if recv_answer(&query, &stored, k) != want {
            return Err(format!("case {case}: k-NN differs from brute force"));
        }
    }

    let mut leep_worst = 0.0f64;
    for _ in 0..CASES {
        let n = rng.random_range(1..25);
        let z = rng.random_range(1..6);
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..z).map(|_| rng.random_range(0.001..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let got = leep_score(&probs, &labels).unwrap();
        leep_worst = leep_worst.max((got - oracle_leep(&probs, &labels)).abs());
    }
    if leep_worst > 1e-6 {
        return Err(format!("LEEP error {leep_worst:.2e}"));
    }

    for case in 0..CASES {
        let a: BTreeSet<u32> = (0..12).filter(|_| rng.random_bool(0.4)).collect();
        let b: BTreeSet<u32> = (0..12).filter(|_| rng.random_bool(0.4)).collect();
        let inter = (0..12).filter(|x| a.contains(x) && b.contains(x)).count();
        let union = (0..12).filter(|x| a.contains(x) || b.contains(x)).count();
        let want = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        if iou_score(&a, &b) != want {
            return Err(format!("case {case}: IoU differs"));
        }
    }

    let mut slope_worst = 0.0f64;
    for _ in 0..CASES {
        let n = rng.random_range(2..12);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..15.0), rng.random_range(-10.0..10.0)))
            .collect();
        let want = oracle_slope(&pts);
        match marginal_gain_fit(&pts) {
            Ok(s) => slope_worst = slope_worst.max((s - want).abs() / want.abs().max(1.0)),
            Err(e) => return Err(format!("fit rejected distinct budgets: {e}")),
        }
    }
    check(
        slope_worst <= 1e-6,
        format!("7 ops x {CASES} cases, aggregation err {worst:.1e}, LEEP err {leep_worst:.1e}, slope err {slope_worst:.1e}"),
    )
}

// ---------------------------------------------------------------- gradients

fn batch(rng: &mut ChaCha8Rng, dim: usize, n: usize, classes: usize) -> InstanceBatch {
    let mut b = InstanceBatch::new(dim);
    for _ in 0..n {
        let x = rand_vec(rng, dim);
        b.push(&x, rng.random_range(0..classes));
    }
    b
}

fn random_fisher(rng: &mut ChaCha8Rng, n: usize) -> FisherDiag {
    let layout = vec![LayerSlot {
        name: "flat".into(),
        offset: 0,
        shape: vec![n],
    }];
    FisherDiag::from_raw((0..n).map(|_| rng.random_range(0.0f32..2.0)).collect(), layout).unwrap()
}

fn random_penalty(rng: &mut ChaCha8Rng, shared: &ParamVector) -> PenaltyTerm {
    let near = |rng: &mut ChaCha8Rng| {
        shared.with_values(shared.as_slice().iter().map(|v| v + rng.random_range(-0.5f32..0.5)).collect()).unwrap()
    };
    if rng.random_bool(0.5) {
        PenaltyTerm::Proximal {
            anchor: near(rng),
            mu: rng.random_range(0.01f32..1.0),
        }
    } else {
        let snapshots = (0..rng.random_range(1..3))
            .map(|_| (near(rng), random_fisher(rng, shared.len())))
            .collect();
        PenaltyTerm::Curvature {
            snapshots,
            mu: rng.random_range(0.01f32..1.0),
        }
    }
}

/// Compares each block's analytic gradient with central differences along a
/// random unit direction at a jittered copy of `net`.
///
/// ReLU nets are piecewise smooth and the forward pass rounds to f32, so a
/// direction is accepted only when the estimates at `h` and `h/2` agree to
/// `FD_SMOOTH` (a kink between them breaks the O(h^2) agreement). Errors are
/// relative with an absolute floor `FD_FLOOR`, about a thousand times the
/// rounding noise of the difference quotient. A point that is near a kink in
/// every direction is replaced by a fresh jittered point.
struct FdCheck {
    block: Block,
    error: f64,
    redraws: usize,
}

const FD_STEP: f32 = 2e-3;
const FD_FLOOR: f64 = 3e-3;
const FD_SMOOTH: f64 = 2.5e-4;
const FD_REDRAWS: usize = 15;
const FD_POINTS: usize = 5;

fn directional_errors<N: Network + Clone>(
    net: &N,
    groups: &[(TaskId, &InstanceBatch)],
    penalty: Option<&PenaltyTerm>,
    shared_task: Option<TaskId>,
    rng: &mut ChaCha8Rng,
) -> Vec<FdCheck> {
    let loss = |n: &N| loss_and_grads(n, groups, penalty, shared_task, &|_| true).unwrap().0;
    let mut points = 0;
    loop {
        points += 1;
        // zero biases sit exactly on ReLU kinks
        let mut net = net.clone();
        let blocks: Vec<Block> =
            loss_and_grads(&net, groups, penalty, shared_task, &|_| true).unwrap().1.iter().map(|(b, _)| *b).collect();
        for b in blocks {
            for p in net.block_mut(b).unwrap() {
                *p += rng.random_range(-0.1f32..0.1);
            }
        }
        let (_, grads) = loss_and_grads(&net, groups, penalty, shared_task, &|_| true).unwrap();
        assert!(grads.iter().map(|(_, g)| g.len()).sum::<usize>() <= 200, "gradient-check net too large");
        let mut out = Vec::new();
        let mut stuck = false;
        for (block, g) in grads.iter() {
            let mut redraws = 0;
            let error = loop {
                let raw: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0f64..1.0)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                let central = |h: f32| {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    let dirs = plus.block_mut(*block).unwrap().iter_mut().zip(minus.block_mut(*block).unwrap()).zip(&raw);
                    for ((p, m), d) in dirs {
                        *p += h * (d / norm) as f32;
                        *m -= h * (d / norm) as f32;
                    }
                    // the step actually representable in f32
                    let step: Vec<f64> = plus
                        .block(*block)
                        .unwrap()
                        .iter()
                        .zip(minus.block(*block).unwrap())
                        .map(|(p, m)| (*p as f64 - *m as f64) / 2.0)
                        .collect();
                    let len = step.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let analytic: f64 = g.iter().zip(&step).map(|(a, s)| a * s).sum::<f64>() / len;
                    (analytic, (loss(&plus) - loss(&minus)) / (2.0 * len))
                };
                let h = FD_STEP / (1 << (redraws / 5).min(2)) as f32;
                let (analytic, coarse) = central(h);
                let (_, fine) = central(h / 2.0);
                if (coarse - fine).abs() > FD_SMOOTH * fine.abs().max(FD_FLOOR) {
                    redraws += 1;
                    if redraws < FD_REDRAWS {
                        continue;
                    }
                    stuck = true;
                }
                break (analytic - fine).abs() / analytic.abs().max(fine.abs()).max(FD_FLOOR);
            };
            out.push(FdCheck {
                block: *block,
                error,
                redraws,
            });
        }
        if !stuck || points == FD_POINTS {
            return out;
        }
    }
}

fn criterion_gradients() -> Outcome {
    const SEEDS: u64 = 100;
    const TOL: f64 = 1e-3;
    let (t0, t1) = (TaskId(0), TaskId(1));
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut redrawn = 0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nets: Vec<(&str, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<FdCheck>>)> = Vec::new();

        let mut mlp = MonolithicNet::mlp(5, &[6, 5], &mut rng).unwrap();
        mlp.add_task(t0, 3, &mut rng);
        mlp.add_task(t1, 2, &mut rng);
        let b0 = batch(&mut rng, 5, 4, 3);
        let b1 = batch(&mut rng, 5, 3, 2);
        let pen = random_penalty(&mut rng, &mlp.shared_params(None));
        nets.push((
            "mlp",
            Box::new(move |rng| directional_errors(&mlp, &[(t0, &b0), (t1, &b1)], Some(&pen), None, rng)),
        ));

        let conv = LayerKind::ConvLite {
            channels_in: 1,
            channels_out: 2,
            kernel: 3,
            height: 4,
            width: 4,
        };
        let flat = conv.output_dim();
        let mut cnn = MonolithicNet::new(16, vec![conv, LayerKind::dense(flat, 4)], &mut rng).unwrap();
        cnn.add_task(t0, 3, &mut rng);
        let bc = batch(&mut rng, 16, 4, 3);
        let pen = random_penalty(&mut rng, &cnn.shared_params(None));
        nets.push((
            "conv",
            Box::new(move |rng| directional_errors(&cnn, &[(t0, &bc)], Some(&pen), None, rng)),
        ));

        for encoder in [false, true] {
            let dim = if encoder { 6 } else { 4 };
            let layers = if encoder { vec![LayerKind::dense(6, 4)] } else { Vec::new() };
            let mut m = ModularNet::new(dim, layers, 4, 2, 3, 0, &mut rng).unwrap();
            m.add_task(t0, 3, &mut rng);
            m.add_task(t1, 2, &mut rng);
            let extra = Module::xavier(
                ModuleId {
                    origin: 0,
                    birth_task: 1,
                    serial: 99,
                },
                4,
                &mut rng,
            );
            m.add_module(extra).unwrap();
            for t in [t0, t1] {
                let logits: Vec<f32> =
                    (0..m.depth() * m.library().len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                m.set_structure(t, logits).unwrap();
            }
            let b0 = batch(&mut rng, dim, 4, 3);
            let b1 = batch(&mut rng, dim, 3, 2);
            let pen = random_penalty(&mut rng, &m.shared_params(Some(t0)));
            nets.push((
                if encoder { "modular+encoder" } else { "modular" },
                Box::new(move |rng| directional_errors(&m, &[(t0, &b0), (t1, &b1)], Some(&pen), Some(t0), rng)),
            ));
        }

        for (name, f) in &nets {
            for c in f(&mut rng) {
                checked += 1;
                redrawn += c.redraws;
                worst = worst.max(c.error);
                if c.error > TOL {
                    failures.push(format!("seed {seed} {name} {:?}: rel err {:.2e}", c.block, c.error));
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..SEEDS {
        let theta = ParamVector::flat(rand_vec(&mut rng, 30));
        let pen = random_penalty(&mut rng, &theta);
        let g = pen.gradient(theta.as_slice());
        for i in 0..theta.len() {
            let h = 1e-2f32;
            let mut p = theta.as_slice().to_vec();
            let mut m = p.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (pen.value(&p) - pen.value(&m)) / (p[i] as f64 - m[i] as f64);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-9);
            checked += 1;
            worst = worst.max(err);
            if err > TOL {
                failures.push(format!("penalty coordinate {i}: rel err {err:.2e}"));
            }
        }
    }
    check(
        failures.is_empty(),
        format!(
            "{checked} checks over {SEEDS} seeds, worst rel err {worst:.1e}, {redrawn} directions redrawn at kinks{}",
            failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- small runs

const SMALL: &str = r#"
seeds = [0, 1]
[stream]
n_agents = 4
tasks_per_agent = 3
classes_per_task = 3
pool_classes = 6
dim = 8
train_per_class = 10
test_per_class = 10
[net]
hidden = [8]
width = 8
depth = 2
basis = 2
[train]
epochs_per_task = 10
dropout_epochs = 4
eval_period = 5
[data]
q = 4
k = 2
frequency = 3
[fed]
frequency = 2
"#;

fn small(mode: &str, patch: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let net = net_of(mode);
    let body = SMALL.replace("[net]\n", &format!("[net]\nkind = \"{net}\"\n"));
    let mut cfg = config(&format!("name = \"small-{mode}\"\nmode = \"{mode}\"\n{body}"));
    patch(&mut cfg);
    cfg.validate().unwrap();
    cfg
}

fn net_of(mode: &str) -> &'static str {
    if matches!(mode, "modmod" | "hybrid") {
        "modular"
    } else {
        "monolithic"
    }
}

fn rows_json(r: &RunRecord) -> String {
    r.rows().map(|row| serde_json::to_string(row).unwrap()).collect::<Vec<_>>().join("\n")
}

fn ledgers_csv(s: &SeedResult) -> String {
    s.ledgers.iter().map(|(k, l)| format!("{}\n{}", k.as_str(), l.to_csv())).collect()
}

fn criterion_budget_identities() -> Outcome {
    let mut notes = Vec::new();
    if FedVariant::FedCurv.round_cost(1234) != 2 * FedVariant::FedAvg.round_cost(1234) {
        return Err("FedCurv round cost is not 2P".into());
    }
    let avg = run(&small("fedavg", |_| {}));
    let curv = run(&small("fedcurv", |_| {}));
    for (a, c) in avg.seeds.iter().zip(&curv.seeds) {
        let (la, lc) = (&a.ledgers[&ShareKind::Fed], &c.ledgers[&ShareKind::Fed]);
        let paired = la.rows().len() == lc.rows().len()
            && la
                .rows()
                .iter()
                .zip(lc.rows())
                .all(|(x, y)| y.floats == 2 * x.floats && (x.clock, x.edge_from, x.edge_to) == (y.clock, y.edge_from, y.edge_to));
        if !paired || lc.total() != 2 * la.total() || la.total() == 0 {
            return Err(format!("seed {}: FedCurv ledger is not twice FedAvg", a.seed));
        }
    }
    notes.push(format!("fedcurv {} = 2 x fedavg {}", curv.seeds[0].total_floats, avg.seeds[0].total_floats));

    for k in [1, 2] {
        let cfg = small("modmod", |c| {
            c.modmod.k = k;
            c.modmod.metric = MetricChoice::Iou;
            // keep every dropout module so offers happen
            c.train.keep_threshold = -100.0;
        });
        let m = cfg.net.width * cfg.net.width + cfg.net.width;
        let r = run(&cfg);
        for s in &r.seeds {
            let l = &s.ledgers[&ShareKind::Modmod];
            let sent = l.metadata().get("modmod_scores").copied().unwrap_or(0);
            if sent == 0 || l.total() != sent * m as u64 || l.rows().iter().any(|row| row.floats % m as u64 != 0) {
                return Err(format!("k={k} seed {}: modmod floats {} != {sent} x {m}", s.seed, l.total()));
            }
            if l.rows().iter().any(|row| row.floats > (k * m) as u64) {
                return Err(format!("k={k}: an offer exceeds k x M"));
            }
        }
        notes.push(format!("modmod k={k}: {} floats = modules x {m}", r.seeds[0].total_floats));
    }

    for (strategy, name) in [(DataStrategy::Recv, "recv"), (DataStrategy::Simp, "simp")] {
        let cfg = small("data", |c| {
            c.data.strategy = strategy;
            if strategy == DataStrategy::Simp {
                c.stream.synthetic.image = Some([2, 2, 2]);
            }
        });
        let shape = cfg.stream.synthetic.shape();
        let r = run(&cfg);
        for s in &r.seeds {
            let l = &s.ledgers[&ShareKind::Data];
            let meta = l.metadata();
            let n = meta.get("labels").copied().unwrap_or(0) + meta.get("recv_queries").copied().unwrap_or(0);
            let want = cost_of_instances(shape.height as u64, shape.width as u64, shape.channels as u64, n);
            if l.total() != want || want == 0 {
                return Err(format!("{name} seed {}: data floats {} != H*W*C*N = {want}", s.seed, l.total()));
            }
        }
        notes.push(format!("{name}: {} floats = HWC x N", r.seeds[0].total_floats));
    }

    let hybrid = run(&small("hybrid", |_| {}));
    for s in &hybrid.seeds {
        let parts: u64 = s.ledgers.values().map(|l| l.total()).sum();
        let merged = CostLedger::merged(&s.ledgers.values().collect::<Vec<_>>());
        if merged.total() != parts || s.total_floats != parts || s.ledgers.len() != 3 {
            return Err("hybrid ledger total is not the sum of its modes".into());
        }
        for l in s.ledgers.values() {
            l.check_conservation().map_err(|e| e.to_string())?;
            let back = CostLedger::from_csv(&l.to_csv()).map_err(|e| e.to_string())?;
            if back.total() != l.total() {
                return Err("ledger CSV round trip changed totals".into());
            }
        }
    }
    notes.push("conservation holds on every ledger".into());
    Ok(notes.join("; "))
}

fn criterion_degeneracy() -> Outcome {
    let mut checked = Vec::new();
    let mono = run(&small("none", |_| {}));
    let modular = run(&small("none", |c| c.net.kind = NetKind::Modular));
    for mode in ["data", "fedavg", "fedprox", "fedcurv", "fedfish", "modmod", "hybrid"] {
        let r = run(&small(mode, |c| c.topology.kind = TopologyKind::Empty));
        let base = if net_of(mode) == "modular" { &modular } else { &mono };
        if rows_json(&r) != rows_json(base) {
            return Err(format!("disconnected {mode} differs from isolated learning"));
        }
        if r.seeds.iter().any(|s| s.total_floats != 0) {
            return Err(format!("disconnected {mode} charged communication"));
        }
        checked.push(mode);
    }

    let fedavg = run(&small("fedavg", |_| {}));
    let fish = run(&small("fedfish", |c| c.fed.importance = Some(0.0)));
    if rows_json(&fish) != rows_json(&fedavg) {
        return Err("FedFish with zero importance differs from FedAvg".into());
    }
    let prox = run(&small("fedprox", |c| c.fed.mu = 0.0));
    if rows_json(&prox) != rows_json(&fedavg) {
        return Err("FedProx with mu = 0 differs from FedAvg".into());
    }
    let data = run(&small("data", |c| c.data.budget = Some(0)));
    if rows_json(&data) != rows_json(&mono) || data.seeds.iter().any(|s| s.total_floats != 0) {
        return Err("data sharing with b = 0 differs from the baseline".into());
    }
    Ok(format!(
        "disconnected == none for {}; FedFish(d=0) == FedAvg; FedProx(mu=0) == FedAvg; data(b=0) == none",
        checked.join("/")
    ))
}

fn criterion_determinism() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut modes = Vec::new();
    for mode in ["none", "data", "fedavg", "fedprox", "fedcurv", "fedfish", "modmod", "hybrid"] {
        let cfg = small(mode, |_| {});
        let seq = run_experiment(&cfg, Execution::Sequential).unwrap();
        let par = pool.install(|| run_experiment(&cfg, Execution::Parallel).unwrap());
        let again = run_experiment(&cfg, Execution::Sequential).unwrap();
        if seq != par || seq != again {
            return Err(format!("{mode}: records differ between executions"));
        }
        for (a, b) in seq.seeds.iter().zip(&par.seeds) {
            if ledgers_csv(a) != ledgers_csv(b) {
                return Err(format!("{mode}: ledgers differ between executions"));
            }
        }
        save_run(dir_a.path(), &seq).unwrap();
        save_run(dir_b.path(), &par).unwrap();
        modes.push(mode);
    }
    let files = |d: &std::path::Path| {
        let mut out = Vec::new();
        let mut stack = vec![d.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in std::fs::read_dir(&p).unwrap() {
                let e = e.unwrap().path();
                if e.is_dir() {
                    stack.push(e);
                } else {
                    out.push((e.strip_prefix(d).unwrap().to_path_buf(), std::fs::read(&e).unwrap()));
                }
            }
        }
        out.sort();
        out
    };
    let (fa, fb) = (files(dir_a.path()), files(dir_b.path()));
    check(
        fa == fb && !fa.is_empty(),
        format!("{} modes, sequential == parallel == rerun, {} persisted files byte-identical", modes.len(), fa.len()),
    )
}

// ---------------------------------------------------------------- shared suite

const SUITE_SEEDS: &str = "seeds = [0, 1, 2, 3, 4, 5, 6, 7]\n";

fn suite_config(name: &str, mode: &str, net: &str, extra: &str) -> ExperimentConfig {
    config(&format!(
        "name = \"{name}\"\nmode = \"{mode}\"\n{SUITE_SEEDS}[net]\nkind = \"{net}\"\n{extra}"
    ))
}

struct Suite {
    mono: RunRecord,
    data: RunRecord,
    fedavg: RunRecord,
    modular: RunRecord,
    modmod: RunRecord,
}

fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| Suite {
        mono: run(&suite_config("mono", "none", "monolithic", "")),
        data: run(&suite_config("data", "data", "monolithic", "")),
        fedavg: run(&suite_config("fedavg", "fedavg", "monolithic", "")),
        modular: run(&suite_config("modular", "none", "modular", "")),
        modmod: run(&suite_config("modmod", "modmod", "modular", "")),
    })
}

/// Per seed: mean over task boundaries and agents of the accuracy at the
/// first checkpoint inside each task after the first.
fn first_checkpoint_accuracy(r: &RunRecord) -> Vec<f64> {
    r.seeds
        .iter()
        .map(|s| {
            let first_epoch = s.rows.iter().map(|row| row.epoch).min().unwrap();
            let v: Vec<f64> = s
                .rows
                .iter()
                .filter(|row| row.task > 1 && row.epoch == first_epoch)
                .map(|row| row.accuracy)
                .collect();
            mean_se(&v).0
        })
        .collect()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ")
}

fn criterion_sharing_helps() -> Outcome {
    let s = suite();
    let (mono, data) = (seed_finals(&s.mono), seed_finals(&s.data));
    let (modular, modmod) = (seed_finals(&s.modular), seed_finals(&s.modmod));
    let (early_base, early_mod) = (first_checkpoint_accuracy(&s.modular), first_checkpoint_accuracy(&s.modmod));
    let wd = wins(&data, &mono, 0.0);
    let wm = wins(&modmod, &modular, 0.0);
    let we = wins(&early_mod, &early_base, 0.0);
    check(
        wd >= 6 && wm >= 6 && we >= 6,
        format!(
            "data > baseline {wd}/8 [{} vs {}]; modmod > baseline {wm}/8 [{} vs {}]; first checkpoint {we}/8 [{} vs {}]",
            fmt(&data),
            fmt(&mono),
            fmt(&modmod),
            fmt(&modular),
            fmt(&early_mod),
            fmt(&early_base)
        ),
    )
}

fn criterion_heterogeneity() -> Outcome {
    let combined = "[stream]\nkind = \"combined\"\n";
    let base = run(&suite_config("combined-none", "none", "monolithic", combined));
    let fed = run(&suite_config("combined-fedavg", "fedavg", "monolithic", combined));
    let (b, f) = (seed_finals(&base), seed_finals(&fed));
    let ok = f.iter().zip(&b).filter(|(x, y)| **x <= **y + 0.5).count();
    check(
        ok >= 6,
        format!("fedavg <= baseline + 0.5 on {ok}/8 seeds [{} vs {}]", fmt(&f), fmt(&b)),
    )
}

/// Relative gain (points) and per-edge budget of a run against its baseline.
fn gain_and_budget(r: &RunRecord, base: &RunRecord) -> (f64, f64) {
    let g: Vec<f64> = seed_finals(r).iter().zip(seed_finals(base)).map(|(a, b)| a - b).collect();
    (mean_se(&g).0, r.summary().budget_per_edge)
}

fn criterion_budget_efficiency() -> Outcome {
    let s = suite();
    let extra_fed = run(&suite_config("fedavg-f20", "fedavg", "monolithic", "[fed]\nfrequency = 20\n"));
    let extra_data = run(&suite_config("data-q10", "data", "monolithic", "[data]\nq = 10\n"));
    let sweep: [(&str, Vec<(&RunRecord, &RunRecord)>); 3] = [
        ("fed", vec![(&s.fedavg, &s.mono), (&extra_fed, &s.mono)]),
        ("data", vec![(&s.data, &s.mono), (&extra_data, &s.mono)]),
        ("modmod", vec![(&s.modmod, &s.modular)]),
    ];
    let mut values = BTreeMap::new();
    let mut notes = Vec::new();
    for (mode, points) in &sweep {
        let mut v = Vec::new();
        for (r, base) in points {
            let (g, b) = gain_and_budget(r, base);
            v.push(value_of_budget(g, b).unwrap());
            notes.push(format!("{} gain {g:.2} B {b:.0}", r.config.name));
        }
        values.insert(*mode, mean_se(&v).0);
    }
    let m = values["modmod"];
    let ok = m > 0.0 && m >= 5.0 * values["fed"] && m >= 5.0 * values["data"];
    check(
        ok,
        format!(
            "value/float modmod {:.2e}, fed {:.2e}, data {:.2e} ({})",
            m,
            values["fed"],
            values["data"],
            notes.join(", ")
        ),
    )
}

fn criterion_topology() -> Outcome {
    let s = suite();
    let gain = |kind: TopologyKind, p: f64| {
        let mut cfg = suite_config(&format!("data-{kind:?}-{p}"), "data", "monolithic", "");
        cfg.topology.kind = kind;
        cfg.topology.p = p;
        let r = run(&cfg);
        let g: Vec<f64> = seed_finals(&r).iter().zip(seed_finals(&s.mono)).map(|(a, b)| a - b).collect();
        mean_se(&g)
    };
    let er: Vec<(f64, (f64, f64))> = [1.0, 0.5, 0.1].iter().map(|p| (*p, gain(TopologyKind::ErdosRenyi, *p))).collect();
    let mut ok = true;
    for w in er.windows(2) {
        let ((_, (hi, se_hi)), (_, (lo, se_lo))) = (w[0], w[1]);
        ok &= lo <= hi + se_hi.max(se_lo);
    }
    let (top, top_se) = er[0].1;
    let mut notes: Vec<String> = er.iter().map(|(p, (g, se))| format!("ER p={p}: {g:.2}±{se:.2}")).collect();
    for kind in [TopologyKind::Ring, TopologyKind::Server, TopologyKind::Tree] {
        let (g, se) = gain(kind, 1.0);
        ok &= g <= top + se.max(top_se) && g >= -se;
        notes.push(format!("{kind:?}: {g:.2}±{se:.2}"));
    }
    check(ok, notes.join(", "))
}

/// Largest drop of any task's agent-averaged accuracy below its running
/// peak, over every seed of a run.
fn worst_forgetting(r: &RunRecord) -> f64 {
    let mut worst = 0.0f64;
    for s in &r.seeds {
        let mut curves: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
        for row in &s.rows {
            for (t, acc) in row.task_accuracies.iter().enumerate() {
                curves.entry((row.task, row.epoch, t)).or_default().push(*acc);
            }
        }
        let mut peak: BTreeMap<usize, f64> = BTreeMap::new();
        for ((_, _, t), accs) in curves {
            let m = mean_se(&accs).0;
            let p = peak.entry(t).or_insert(m);
            *p = p.max(m);
            worst = worst.max(*p - m);
        }
    }
    worst
}

fn criterion_retention() -> Outcome {
    let s = suite();
    let runs: [(&str, &RunRecord); 4] = [("mono", &s.mono), ("data", &s.data), ("modular", &s.modular), ("modmod", &s.modmod)];
    let drops: Vec<(&str, f64)> = runs.iter().map(|(n, r)| (*n, worst_forgetting(r))).collect();
    check(
        drops.iter().all(|(_, d)| *d <= 10.0),
        drops.iter().map(|(n, d)| format!("{n} worst drop {d:.2}")).collect::<Vec<_>>().join(", "),
    )
}


fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("DCL_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "oracle equivalence", criterion_oracles),
        (2, "finite-difference gradients", criterion_gradients),
        (3, "budget identities", criterion_budget_identities),
        (4, "degeneracy", criterion_degeneracy),
        (5, "sharing helps", criterion_sharing_helps),
        (6, "heterogeneity hurts federation", criterion_heterogeneity),
        (7, "budget efficiency", criterion_budget_efficiency),
        (8, "topology", criterion_topology),
        (9, "retention", criterion_retention),
        (10, "determinism", criterion_determinism),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
