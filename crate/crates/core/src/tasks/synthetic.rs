use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{task_id, Family, IdxData, InstanceShape, TaskSpec, TaskStream};
use crate::error::{DclError, Result};
use crate::nn::InstanceBatch;
use crate::rng::{purpose, stream, SimRng};

/// Parameters of a synthetic Gaussian-prototype stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_agents: usize,
    pub tasks_per_agent: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    /// Classes per family; tasks draw their label sets from this pool.
    pub pool_classes: usize,
    /// Labeled instances per class before the validation split.
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub val_fraction: f64,
    /// Expected distance between two prototypes, in units of the noise std.
    pub separation: f64,
    /// Optional `[height, width, channels]` view of each instance.
    pub image: Option<[usize; 3]>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_agents: 8,
            tasks_per_agent: 10,
            classes_per_task: 4,
            dim: 32,
            pool_classes: 16,
            train_per_class: 25,
            test_per_class: 50,
            val_fraction: 0.2,
            separation: 5.0,
            image: None,
        }
    }
}

impl SyntheticConfig {
    pub fn shape(&self) -> InstanceShape {
        match self.image {
            Some([height, width, channels]) => InstanceShape {
                height,
                width,
                channels,
            },
            None => InstanceShape::flat(self.dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DclError::InvalidArgument(msg));
        if self.classes_per_task < 2 {
            return bad(format!("classes_per_task {} must be >= 2", self.classes_per_task));
        }
        if self.dim < self.classes_per_task {
            return bad(format!(
                "dim {} < classes_per_task {}: prototypes cannot be separated",
                self.dim, self.classes_per_task
            ));
        }
        if self.pool_classes < self.classes_per_task {
            return bad(format!(
                "pool_classes {} < classes_per_task {}",
                self.pool_classes, self.classes_per_task
            ));
        }
        if self.n_agents == 0 || self.tasks_per_agent == 0 {
            return bad("stream needs at least one agent and one task".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        let n_val = self.n_val();
        if self.train_per_class <= n_val || self.test_per_class == 0 {
            return bad("every class needs train and test instances".into());
        }
        if let Some(img) = self.image {
            if img.iter().product::<usize>() != self.dim {
                return bad(format!("image {img:?} does not hold dim {}", self.dim));
            }
        }
        if !(self.separation > 0.0) {
            return bad(format!("separation {} must be positive", self.separation));
        }
        Ok(())
    }

    fn n_val(&self) -> usize {
        (self.train_per_class as f64 * self.val_fraction).round() as usize
    }
}

fn prototypes(cfg: &SyntheticConfig, seed: u64, family: u8) -> Vec<Vec<f32>> {
    let mut rng = stream(seed, &[purpose::PROTOTYPES, family as u64]);
    let scale = cfg.separation / (2.0 * cfg.dim as f64).sqrt();
    (0..cfg.pool_classes)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect()
        })
        .collect()
}

fn draw(proto: &[f32], rng: &mut SimRng) -> Vec<f32> {
    proto
        .iter()
        .map(|m| m + rng.sample::<f64, _>(StandardNormal) as f32)
        .collect()
}

fn make_task(
    cfg: &SyntheticConfig,
    seed: u64,
    agent: usize,
    position: usize,
    family: u8,
    pool: &[Vec<f32>],
) -> TaskSpec {
    let mut rng = stream(seed, &[purpose::TASK, agent as u64, position as u64]);
    let labels: Vec<u32> = sample(&mut rng, cfg.pool_classes, cfg.classes_per_task)
        .into_iter()
        .map(|c| c as u32)
        .collect();
    let n_val = cfg.n_val();
    let mut train = InstanceBatch::new(cfg.dim);
    let mut val = InstanceBatch::new(cfg.dim);
    let mut test = InstanceBatch::new(cfg.dim);
    for (local, class) in labels.iter().enumerate() {
        let proto = &pool[*class as usize];
        for i in 0..cfg.train_per_class {
            let x = draw(proto, &mut rng);
            if i < n_val {
                val.push(&x, local);
            } else {
                train.push(&x, local);
            }
        }
        for _ in 0..cfg.test_per_class {
            test.push(&draw(proto, &mut rng), local);
        }
    }
    TaskSpec {
        id: task_id(agent, position, cfg.tasks_per_agent),
        family: Family::Synthetic(family),
        labels,
        shape: cfg.shape(),
        train,
        val,
        test,
    }
}

/// Single-family stream; agents share one prototype pool, so tasks with
/// overlapping label sets carry transferable knowledge.
pub fn gen_synthetic_stream(cfg: &SyntheticConfig, seed: u64) -> Result<TaskStream> {
    cfg.validate()?;
    let pool = prototypes(cfg, seed, 0);
    let agents = (0..cfg.n_agents)
        .map(|a| {
            (0..cfg.tasks_per_agent)
                .map(|t| make_task(cfg, seed, a, t, 0, &pool))
                .collect()
        })
        .collect();
    Ok(TaskStream {
        agents,
        groups: None,
    })
}

/// Near-equal split of `n` agents into `groups` groups; larger groups first.
pub fn group_sizes(n: usize, groups: usize) -> Vec<usize> {
    (0..groups)
        .map(|g| n / groups + usize::from(g < n % groups))
        .collect()
}

/// Number of leading tasks that mix families in the combined setting.
pub const MIXED_TASKS: usize = 4;

/// Three-family heterogeneous stream. The first [`MIXED_TASKS`] tasks of every
/// agent rotate through the families; afterwards each agent draws only from
/// its group's family.
pub fn gen_combined_stream(cfg: &SyntheticConfig, seed: u64) -> Result<TaskStream> {
    cfg.validate()?;
    if cfg.n_agents < 3 {
        return Err(DclError::InvalidArgument(format!(
            "combined stream needs >= 3 agents, got {}",
            cfg.n_agents
        )));
    }
    let pools: Vec<_> = (0..3).map(|f| prototypes(cfg, seed, f)).collect();
    let mut groups = Vec::with_capacity(cfg.n_agents);
    for (g, size) in group_sizes(cfg.n_agents, 3).into_iter().enumerate() {
        groups.extend(std::iter::repeat_n(g as u8, size));
    }
    let agents = (0..cfg.n_agents)
        .map(|a| {
            (0..cfg.tasks_per_agent)
                .map(|t| {
                    let family = if t < MIXED_TASKS {
                        ((a + t) % 3) as u8
                    } else {
                        groups[a]
                    };
                    make_task(cfg, seed, a, t, family, &pools[family as usize])
                })
                .collect()
        })
        .collect();
    Ok(TaskStream {
        agents,
        groups: Some(groups),
    })
}

/// Stream over a loaded labeled dataset: each task samples a class subset
/// and disjoint train/test draws from those classes.
pub fn gen_dataset_stream(
    name: &str,
    data: &IdxData,
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<TaskStream> {
    let mut classes: Vec<u32> = data.labels.iter().map(|l| *l as u32).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < cfg.classes_per_task || cfg.classes_per_task < 2 {
        return Err(DclError::InvalidArgument(format!(
            "dataset {name} has {} classes, tasks need {}",
            classes.len(),
            cfg.classes_per_task
        )));
    }
    let dim = data.dim();
    let shape = InstanceShape {
        height: data.rows,
        width: data.cols,
        channels: 1,
    };
    let n_val = cfg.n_val();
    let need = cfg.train_per_class + cfg.test_per_class;
    let by_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| (0..data.len()).filter(|i| data.labels[*i] as u32 == *c).collect())
        .collect();
    let mut agents = Vec::with_capacity(cfg.n_agents);
    for a in 0..cfg.n_agents {
        let mut tasks = Vec::with_capacity(cfg.tasks_per_agent);
        for t in 0..cfg.tasks_per_agent {
            let mut rng = stream(seed, &[purpose::DATASET, a as u64, t as u64]);
            let picked = sample(&mut rng, classes.len(), cfg.classes_per_task).into_vec();
            let mut train = InstanceBatch::new(dim);
            let mut val = InstanceBatch::new(dim);
            let mut test = InstanceBatch::new(dim);
            for (local, ci) in picked.iter().enumerate() {
                let mut pool = by_class[*ci].clone();
                if pool.len() < need {
                    return Err(DclError::InvalidArgument(format!(
                        "dataset {name} class {} has {} instances, tasks need {need}",
                        classes[*ci],
                        pool.len()
                    )));
                }
                pool.shuffle(&mut rng);
                for (i, idx) in pool[..need].iter().enumerate() {
                    let x = data.image(*idx);
                    if i < n_val {
                        val.push(x, local);
                    } else if i < cfg.train_per_class {
                        train.push(x, local);
                    } else {
                        test.push(x, local);
                    }
                }
            }
            tasks.push(TaskSpec {
                id: task_id(a, t, cfg.tasks_per_agent),
                family: Family::Dataset(name.to_string()),
                labels: picked.iter().map(|ci| classes[*ci]).collect(),
                shape,
                train,
                val,
                test,
            });
        }
        agents.push(tasks);
    }
    Ok(TaskStream {
        agents,
        groups: None,
    })
}
