//! Longest-processing-time-first scheduling of render tasks onto identical
//! nodes, plus an exhaustive optimum for small instances.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraPose;
use crate::util::rng_for;

#[derive(Debug, Error)]
pub enum LptError {
    #[error("task set is empty")]
    EmptyTaskSet,
    #[error("need at least one node")]
    NoNodes,
    #[error("{nodes}^{tasks} assignments exceed the brute-force limit")]
    InstanceTooLarge { tasks: usize, nodes: usize },
    #[error("task {0} has no model estimate")]
    MissingEstimate(String),
    #[error("task {0} has a non-positive time")]
    NonPositiveTime(String),
}

pub type Result<T> = std::result::Result<T, LptError>;

pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub volume_id: String,
    pub pose: CameraPose,
    pub kappa: Vec<f32>,
    pub img: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub est_time: Option<f64>,
    pub gt_time: f64,
}

/// Task manifest file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub tasks: Vec<Task>,
}

impl TaskSet {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(LptError::EmptyTaskSet);
        }
        for t in &self.tasks {
            if !(t.gt_time > 0.0) || t.est_time.is_some_and(|e| !(e > 0.0)) {
                return Err(LptError::NonPositiveTime(t.task_id.clone()));
            }
        }
        Ok(())
    }

    pub fn gt(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.gt_time).collect()
    }

    pub fn estimates(&self, est: Estimator) -> Result<Option<Vec<f64>>> {
        match est {
            Estimator::Gt => Ok(Some(self.gt())),
            Estimator::Model => self
                .tasks
                .iter()
                .map(|t| t.est_time.ok_or_else(|| LptError::MissingEstimate(t.task_id.clone())))
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Estimator::Uniform => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Gt,
    Model,
    Uniform,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Gt, Estimator::Model, Estimator::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Gt => "gt",
            Estimator::Model => "model",
            Estimator::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub node_of: Vec<usize>,
    /// Per-node sums of ground-truth times.
    pub loads: Vec<f64>,
    pub makespan: f64,
}

impl Assignment {
    pub fn from_nodes(node_of: Vec<usize>, gt: &[f64], n_nodes: usize) -> Self {
        let mut loads = vec![0.0; n_nodes];
        for (&n, &t) in node_of.iter().zip(gt) {
            loads[n] += t;
        }
        let makespan = loads.iter().copied().fold(0.0, f64::max);
        Self { node_of, loads, makespan }
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.loads.len()];
        for &n in &self.node_of {
            c[n] += 1;
        }
        c
    }
}

/// Greedy list scheduling in the given order: each task goes to the node
/// with the least estimated load, ties to the lowest index.
fn list_schedule(order: &[usize], est: &[f64], n_nodes: usize) -> Vec<usize> {
    let mut load = vec![0.0; n_nodes];
    let mut node_of = vec![0; est.len()];
    for &i in order {
        let mut best = 0;
        for n in 1..n_nodes {
            if load[n] < load[best] {
                best = n;
            }
        }
        load[best] += est[i];
        node_of[i] = best;
    }
    node_of
}

/// LPT on the given estimates: descending order, stable for equal values.
pub fn lpt_assign(est: &[f64], n_nodes: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..est.len()).collect();
    order.sort_by(|&a, &b| est[b].total_cmp(&est[a]));
    list_schedule(&order, est, n_nodes)
}

/// Equal estimates in a seeded random order.
pub fn uniform_assign(n_tasks: usize, n_nodes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_tasks).collect();
    order.shuffle(&mut rng_for(seed, 0x756e));
    list_schedule(&order, &vec![1.0; n_tasks], n_nodes)
}

pub fn lpt_schedule(tasks: &TaskSet, est: Estimator, n_nodes: usize, seed: u64) -> Result<Assignment> {
    tasks.validate()?;
    if n_nodes == 0 {
        return Err(LptError::NoNodes);
    }
    let gt = tasks.gt();
    let node_of = match tasks.estimates(est)? {
        Some(e) => lpt_assign(&e, n_nodes),
        None => uniform_assign(gt.len(), n_nodes, seed),
    };
    Ok(Assignment::from_nodes(node_of, &gt, n_nodes))
}

/// Minimal makespan by exhaustive search. Tasks are placed longest first,
/// a task only opens the first empty node (node symmetry), and branches
/// that cannot beat the incumbent are cut.
pub fn brute_force_optimal(times: &[f64], n_nodes: usize) -> Result<f64> {
    if times.is_empty() {
        return Err(LptError::EmptyTaskSet);
    }
    if n_nodes == 0 {
        return Err(LptError::NoNodes);
    }
    if (n_nodes as f64).powi(times.len() as i32) > BRUTE_FORCE_LIMIT {
        return Err(LptError::InstanceTooLarge { tasks: times.len(), nodes: n_nodes });
    }
    let mut t = times.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    // LPT gives the initial incumbent; the search only accepts strict improvements.
    let mut best_span = Assignment::from_nodes(lpt_assign(&t, n_nodes), &t, n_nodes).makespan;
    let mut loads = vec![0.0; n_nodes];
    fn dfs(i: usize, t: &[f64], loads: &mut [f64], used: usize, best: &mut f64) {
        if i == t.len() {
            let span = loads.iter().copied().fold(0.0, f64::max);
            if span < *best {
                *best = span;
            }
            return;
        }
        let limit = (used + 1).min(loads.len());
        for n in 0..limit {
            if loads[n] + t[i] >= *best {
                continue;
            }
            loads[n] += t[i];
            dfs(i + 1, t, loads, used.max(n + 1), best);
            loads[n] -= t[i];
        }
    }
    dfs(0, &t, &mut loads, 0, &mut best_span);
    Ok(best_span)
}

/// Graham's worst-case ratio of LPT to the optimum on `m` identical nodes.
pub fn graham_bound(m: usize) -> f64 {
    4.0 / 3.0 - 1.0 / (3.0 * m as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub nodes: usize,
    pub estimator: Estimator,
    pub loads: Vec<f64>,
    pub makespan: f64,
    pub gt_makespan: f64,
    /// `makespan / gt_makespan - 1`.
    pub overhead: f64,
    /// Loads divided by the GT-LPT makespan.
    pub normalized_loads: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub tasks: usize,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn row(&self, nodes: usize, est: Estimator) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.nodes == nodes && r.estimator == est)
    }

    /// Long format, one line per node load.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("nodes,estimator,node,load,normalized_load,makespan,overhead\n");
        for r in &self.rows {
            for (i, (l, nl)) in r.loads.iter().zip(&r.normalized_loads).enumerate() {
                s.push_str(&format!("{},{},{i},{l},{nl},{},{}\n", r.nodes, r.estimator.name(), r.makespan, r.overhead));
            }
        }
        s
    }
}

/// Schedules under every available estimator for each node count. The
/// model estimator is skipped when tasks carry no estimates.
pub fn compare_estimators(tasks: &TaskSet, node_counts: &[usize], seed: u64) -> Result<CompareReport> {
    tasks.validate()?;
    let has_model = tasks.tasks.iter().all(|t| t.est_time.is_some());
    let mut rows = Vec::new();
    for &n in node_counts {
        let gt = lpt_schedule(tasks, Estimator::Gt, n, seed)?;
        for est in Estimator::ALL {
            if est == Estimator::Model && !has_model {
                continue;
            }
            let a = if est == Estimator::Gt { gt.clone() } else { lpt_schedule(tasks, est, n, seed)? };
            rows.push(CompareRow {
                nodes: n,
                estimator: est,
                normalized_loads: a.loads.iter().map(|l| l / gt.makespan).collect(),
                overhead: a.makespan / gt.makespan - 1.0,
                gt_makespan: gt.makespan,
                makespan: a.makespan,
                loads: a.loads,
            });
        }
    }
    Ok(CompareReport { tasks: tasks.tasks.len(), rows })
}
