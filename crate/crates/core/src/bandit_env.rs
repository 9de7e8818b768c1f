//! Multi-task linear bandit environments with a shared low-rank parameter
//! structure `theta_i = B w_i`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::random_orthonormal;
use crate::rng::{self, combine, hash_str, splitmix64, unit_from_hash};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BanditError {
    #[error("invalid instance parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceKind {
    Exact,
    Misspecified,
    GroupedHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionModel {
    IidSphere,
    FixedEllipsoid,
    GroupedHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    Gaussian,
    BoundedUniform,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub kind: InstanceKind,
    pub zeta: f64,
    pub num_actions: usize,
    pub seed: u64,
    pub action_model: ActionModel,
    pub noise: NoiseModel,
}

impl InstanceSpec {
    pub fn new(d: usize, k: usize, m: usize, kind: InstanceKind, seed: u64) -> Self {
        let action_model = match kind {
            InstanceKind::GroupedHard => ActionModel::GroupedHard,
            _ => ActionModel::IidSphere,
        };
        Self { d, k, m, kind, zeta: 0.0, num_actions: 20, seed, action_model, noise: NoiseModel::Gaussian }
    }
}

/// Fraction of actions whose misspecification sign opposes the linear reward.
pub const ADVERSARIAL_FRACTION: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct BanditInstance {
    pub spec: InstanceSpec,
    /// `d x k`, orthonormal.
    pub b: DMatrix<f64>,
    /// `k x M`
    pub w: DMatrix<f64>,
    /// `d x M`
    pub theta: DMatrix<f64>,
    ellipsoid_axes: DVector<f64>,
}

fn unit_sphere<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nrm = g.norm();
        if nrm > 1e-12 {
            return g / nrm;
        }
    }
}

pub fn gen_instance(spec: &InstanceSpec) -> Result<BanditInstance, BanditError> {
    let InstanceSpec { d, k, m, kind, zeta, num_actions, seed, .. } = *spec;
    if d == 0 || k == 0 || m == 0 || k > d {
        return Err(BanditError::InvalidParameter(format!("need 1 <= k <= d and M >= 1, got d={d}, k={k}, M={m}")));
    }
    if num_actions == 0 {
        return Err(BanditError::InvalidParameter("action sets must be non-empty".into()));
    }
    if !(zeta >= 0.0) || !zeta.is_finite() {
        return Err(BanditError::InvalidParameter(format!("zeta must be non-negative, got {zeta}")));
    }
    if kind == InstanceKind::GroupedHard && m % k != 0 {
        return Err(BanditError::InvalidParameter(format!("grouped-hard needs k | M, got M={m}, k={k}")));
    }
    let mut rng = rng::stream(seed, "instance", 0, 0);
    let b = random_orthonormal(d, k, &mut rng);
    let mut w = DMatrix::zeros(k, m);
    match kind {
        InstanceKind::GroupedHard => {
            let group = m / k;
            for i in 0..m {
                w[(i / group, i)] = 1.0;
            }
        }
        _ => {
            for i in 0..m {
                let dir = unit_sphere(k, &mut rng);
                let r = rng.random_range(0.5..=1.0);
                w.set_column(i, &(dir * r));
            }
        }
    }
    let theta = &b * &w;
    let ellipsoid_axes = DVector::from_fn(d, |_, _| rng.random_range(0.5..=1.0));
    let mut spec = spec.clone();
    if kind != InstanceKind::Misspecified {
        spec.zeta = 0.0;
    }
    Ok(BanditInstance { spec, b, w, theta, ellipsoid_axes })
}

impl BanditInstance {
    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    pub fn theta_col(&self, i: usize) -> DVector<f64> {
        self.theta.column(i).into_owned()
    }

    fn action_hash(&self, i: usize, x: &DVector<f64>) -> u64 {
        let mut h = combine(hash_str("misspec"), self.spec.seed);
        h = combine(h, i as u64);
        for v in x.iter() {
            h = combine(h, (v * 1e9).round() as i64 as u64);
        }
        h
    }

    /// Deterministic deviation of the mean reward from linear, bounded by
    /// `zeta` in absolute value and equal to it in magnitude.
    pub fn misspecification(&self, i: usize, x: &DVector<f64>) -> f64 {
        let zeta = self.spec.zeta;
        if zeta == 0.0 {
            return 0.0;
        }
        let h = self.action_hash(i, x);
        let adversarial = unit_from_hash(h) < ADVERSARIAL_FRACTION;
        let sign = if adversarial {
            let lin = x.dot(&self.theta.column(i));
            if lin > 0.0 {
                -1.0
            } else {
                1.0
            }
        } else if splitmix64(h) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        sign * zeta
    }

    pub fn expected_reward(&self, i: usize, x: &DVector<f64>) -> f64 {
        x.dot(&self.theta.column(i)) + self.misspecification(i, x)
    }

    pub fn sample_noise(&self, i: usize, t: usize) -> f64 {
        let mut r = rng::stream(self.spec.seed, "noise", i as u64, t as u64);
        match self.spec.noise {
            NoiseModel::Gaussian => r.sample::<f64, _>(StandardNormal),
            NoiseModel::BoundedUniform => r.random_range(-1.0..=1.0),
            NoiseModel::Zero => 0.0,
        }
    }

    /// Observed reward for task `i` at step `t`. Noise depends only on the
    /// instance seed, task and step, so algorithms share noise draws.
    pub fn reward(&self, i: usize, x: &DVector<f64>, t: usize) -> f64 {
        self.expected_reward(i, x) + self.sample_noise(i, t)
    }

    pub fn sample_action_set(&self, t: usize, i: usize) -> Vec<DVector<f64>> {
        let (d, a) = (self.spec.d, self.spec.num_actions);
        match self.spec.action_model {
            ActionModel::IidSphere => {
                let mut r = rng::stream(self.spec.seed, "actions", i as u64, t as u64);
                (0..a).map(|_| unit_sphere(d, &mut r)).collect()
            }
            ActionModel::FixedEllipsoid => {
                let mut r = rng::stream(self.spec.seed, "fixed-actions", i as u64, 0);
                (0..a)
                    .map(|j| {
                        if a >= 2 * d && j < 2 * d {
                            let mut x = DVector::zeros(d);
                            x[j / 2] = if j % 2 == 0 { 1.0 } else { -1.0 } * self.ellipsoid_axes[j / 2];
                            x
                        } else {
                            unit_sphere(d, &mut r).component_mul(&self.ellipsoid_axes)
                        }
                    })
                    .collect()
            }
            ActionModel::GroupedHard => {
                let mut r = rng::stream(self.spec.seed, "actions", i as u64, t as u64);
                let scale = 1.0 / (d as f64).sqrt();
                (0..a)
                    .map(|_| DVector::from_fn(d, |_, _| if r.random::<bool>() { scale } else { -scale }))
                    .collect()
            }
        }
    }

    /// Best action by expected reward; ties go to the lowest index.
    pub fn optimal_action(&self, actions: &[DVector<f64>], i: usize) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (j, x) in actions.iter().enumerate() {
            let v = self.expected_reward(i, x);
            if v > best.1 {
                best = (j, v);
            }
        }
        best
    }
}

/// Per-step record of one run.
#[derive(Debug, Clone, Default)]
pub struct RegretTrace {
    pub algorithm: String,
    pub seed: u64,
    pub step_regret: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub per_task_cumulative: Vec<f64>,
    pub membership: Vec<Option<f64>>,
    pub radius: Vec<Option<f64>>,
    pub wall_ms: Vec<f64>,
}

impl RegretTrace {
    pub fn new(algorithm: &str, seed: u64, m: usize) -> Self {
        Self { algorithm: algorithm.to_string(), seed, per_task_cumulative: vec![0.0; m], ..Default::default() }
    }

    /// Adds one step of expected regret summed over tasks and returns it.
    pub fn record_step(&mut self, inst: &BanditInstance, action_sets: &[Vec<DVector<f64>>], chosen: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, (set, &c)) in action_sets.iter().zip(chosen).enumerate() {
            let (_, best) = inst.optimal_action(set, i);
            let r = (best - inst.expected_reward(i, &set[c])).max(0.0);
            self.per_task_cumulative[i] += r;
            total += r;
        }
        let cum = self.cumulative.last().copied().unwrap_or(0.0) + total;
        self.step_regret.push(total);
        self.cumulative.push(cum);
        self.membership.push(None);
        self.radius.push(None);
        self.wall_ms.push(0.0);
        total
    }

    pub fn final_regret(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}
