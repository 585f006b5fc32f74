//! Instance-level sharing. Recv: the receiver ships its hardest validation
//! instances as queries and each sender answers with nearest neighbors in
//! its own feature space. Simp: the receiver publishes per-class worth and
//! senders split their budget across shared classes proportionally.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ClassKey;
use crate::error::Result;
use crate::nn::{per_instance_loss, InstanceBatch, Network};
use crate::{AgentId, TaskId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub from: AgentId,
    pub task: TaskId,
    /// Raw instance; the sender embeds it with its own feature map.
    pub x: Vec<f32>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRequest {
    pub from: AgentId,
    pub classes: Vec<ClassKey>,
    pub worth: BTreeMap<ClassKey, f64>,
    pub budget: usize,
}

/// Indices of the `q` largest losses; equal losses keep ascending index
/// order. Returns whether fewer than `q` were available.
pub fn top_q(losses: &[f64], q: usize) -> (Vec<usize>, bool) {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|a, b| losses[*b].total_cmp(&losses[*a]).then(a.cmp(b)));
    let truncated = q > losses.len();
    idx.truncate(q);
    (idx, truncated)
}

/// Selected queries as `(task, index within that task's validation set)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySelection {
    pub picks: Vec<(TaskId, usize)>,
    /// Set when fewer than `q` validation instances exist.
    pub truncated: bool,
}

/// The `q` validation instances with highest loss over the union of `seen`
/// validation sets, indexed in the order given.
pub fn recv_select_queries<N: Network + ?Sized>(
    net: &N,
    seen: &[(TaskId, &InstanceBatch)],
    q: usize,
) -> Result<QuerySelection> {
    let mut losses = Vec::new();
    let mut owners = Vec::new();
    for (task, val) in seen {
        let l = per_instance_loss(net, val, *task)?;
        owners.extend((0..l.len()).map(|i| (*task, i)));
        losses.extend(l);
    }
    let (idx, truncated) = top_q(&losses, q);
    Ok(QuerySelection {
        picks: idx.into_iter().map(|i| owners[i]).collect(),
        truncated,
    })
}

/// `1 - cos(a, b)`; a zero vector is treated as orthogonal to everything.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += *x as f64 * *x as f64;
        nb += *y as f64 * *y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Indices of the `k` stored feature vectors closest to `query` by cosine
/// distance; ties resolve to the lower index.
pub fn recv_answer(query: &[f32], stored: &[Vec<f32>], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = stored
        .iter()
        .enumerate()
        .map(|(i, f)| (cosine_distance(query, f), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Per-class mean validation cross-entropy. `seen` pairs each task with its
/// validation set and the class key of every local label; classes without
/// validation instances get worth 0.
pub fn simp_worths<N: Network + ?Sized>(
    net: &N,
    seen: &[(TaskId, &InstanceBatch, Vec<ClassKey>)],
) -> Result<BTreeMap<ClassKey, f64>> {
    let mut sums: BTreeMap<ClassKey, (f64, usize)> = BTreeMap::new();
    for (task, val, keys) in seen {
        for key in keys {
            sums.entry(key.clone()).or_insert((0.0, 0));
        }
        let losses = per_instance_loss(net, val, *task)?;
        for (i, l) in losses.into_iter().enumerate() {
            let e = sums.get_mut(&keys[val.y[i]]).unwrap();
            e.0 += l;
            e.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, if n == 0 { 0.0 } else { s / n as f64 }))
        .collect())
}

pub fn simp_request<N: Network + ?Sized>(
    from: AgentId,
    net: &N,
    seen: &[(TaskId, &InstanceBatch, Vec<ClassKey>)],
    budget: usize,
) -> Result<ClassRequest> {
    let worth = simp_worths(net, seen)?;
    Ok(ClassRequest {
        from,
        classes: worth.keys().cloned().collect(),
        worth,
        budget,
    })
}

/// `N_c = floor(W(c) / sum W * b)` over classes both sides hold.
pub fn simp_allocate(req: &ClassRequest, sender_classes: &BTreeSet<ClassKey>) -> BTreeMap<ClassKey, usize> {
    let shared: Vec<&ClassKey> = req
        .classes
        .iter()
        .filter(|c| sender_classes.contains(*c))
        .collect();
    let total: f64 = shared.iter().map(|c| req.worth.get(*c).copied().unwrap_or(0.0)).sum();
    shared
        .into_iter()
        .map(|c| {
            let w = req.worth.get(c).copied().unwrap_or(0.0);
            let n = if total > 0.0 {
                (w * req.budget as f64 / total).floor() as usize
            } else {
                0
            };
            (c.clone(), n)
        })
        .collect()
}

/// Draws the allocated number of instances per class uniformly without
/// replacement from `pool[class]` (indices into the sender's database),
/// capped at what is available. Output follows class order.
pub fn simp_respond<R: Rng + ?Sized>(
    alloc: &BTreeMap<ClassKey, usize>,
    pool: &BTreeMap<ClassKey, Vec<usize>>,
    rng: &mut R,
) -> Vec<(ClassKey, usize)> {
    let mut out = Vec::new();
    for (class, n) in alloc {
        let Some(items) = pool.get(class) else { continue };
        let take = (*n).min(items.len());
        if take == 0 {
            continue;
        }
        let mut picked = sample(rng, items.len(), take).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| (class.clone(), items[i])));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Family;

    fn key(c: u32) -> ClassKey {
        (Family::Synthetic(0), c)
    }

    #[test]
    fn top_q_picks_largest_losses() {
        let (idx, t) = top_q(&[0.1, 2.0, 0.5, 0.4], 2);
        assert_eq!(idx, vec![1, 2]);
        assert!(!t);
        let (idx, _) = top_q(&[0.0; 5], 3);
        assert_eq!(idx, vec![0, 1, 2]);
        let (idx, t) = top_q(&[1.0, 2.0], 5);
        assert_eq!(idx, vec![1, 0]);
        assert!(t);
    }

    #[test]
    fn nearest_neighbor_ranking() {
        let stored = vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(recv_answer(&[1.0, 0.0], &stored, 3), vec![2, 1, 0]);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 1.0]), 1.0);
        assert!(cosine_distance(&[3.0, 4.0], &[3.0, 4.0]).abs() < 1e-12);
        assert_eq!(recv_answer(&[1.0, 0.0], &stored, 1), vec![2]);
        assert!(recv_answer(&[1.0, 0.0], &[], 3).is_empty());
    }

    #[test]
    fn simp_formula() {
        let req = ClassRequest {
            from: 0,
            classes: vec![key(0), key(1)],
            worth: BTreeMap::from([(key(0), 2.0), (key(1), 1.0), (key(2), 1.0)]),
            budget: 9,
        };
        let sender: BTreeSet<_> = [key(0), key(1), key(2)].into();
        let alloc = simp_allocate(&req, &sender);
        assert_eq!(alloc, BTreeMap::from([(key(0), 6), (key(1), 3)]));

        let req = ClassRequest {
            from: 0,
            classes: vec![key(0), key(1)],
            worth: BTreeMap::from([(key(0), 1.0), (key(1), 1.0)]),
            budget: 5,
        };
        let alloc = simp_allocate(&req, &sender);
        assert_eq!(alloc.values().copied().collect::<Vec<_>>(), vec![2, 2]);
        assert!(simp_allocate(&req, &BTreeSet::from([key(7)])).is_empty());
    }

    #[test]
    fn zero_worth_class_gets_nothing() {
        let req = ClassRequest {
            from: 0,
            classes: vec![key(0), key(1)],
            worth: BTreeMap::from([(key(0), 0.0), (key(1), 1.5)]),
            budget: 10,
        };
        let alloc = simp_allocate(&req, &[key(0), key(1)].into());
        assert_eq!(alloc[&key(0)], 0);
        assert_eq!(alloc[&key(1)], 10);
    }

    #[test]
    fn respond_caps_at_availability() {
        let alloc = BTreeMap::from([(key(0), 6), (key(1), 3)]);
        let pool = BTreeMap::from([(key(0), vec![10, 11, 12]), (key(1), vec![20, 21, 22, 23, 24])]);
        let mut rng = crate::rng::stream(0, &[]);
        let out = simp_respond(&alloc, &pool, &mut rng);
        assert_eq!(out.iter().filter(|(c, _)| *c == key(0)).count(), 3);
        assert_eq!(out.iter().filter(|(c, _)| *c == key(1)).count(), 3);
        let mut ids: Vec<usize> = out.iter().map(|(_, i)| *i).collect();
        ids.dedup();
        assert_eq!(ids.len(), 6);
    }
}
