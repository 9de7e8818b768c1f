//! Bandit learners: multi-task low-rank OFUL, independent per-task OFUL,
//! and the random and oracle references.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bandit_env::{BanditInstance, InstanceKind, RegretTrace};
use crate::confidence::{bandit_radius, indep_oful_radius, membership, misspecified_radius};
use crate::linalg::{fit_weights, solve_lowrank_stats, DesignState, SolverOptions, TaskStats};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BanditAlgorithm {
    #[serde(rename = "mtlr-oful")]
    MtlrOful,
    #[serde(rename = "indep-oful")]
    IndepOful,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "oracle")]
    Oracle,
}

impl BanditAlgorithm {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::MtlrOful => "mtlr-oful",
            Self::IndepOful => "indep-oful",
            Self::Random => "random",
            Self::Oracle => "oracle",
        }
    }
}

// ---------------------------------------------------------------------------
// Optimistic joint selection
// ---------------------------------------------------------------------------

/// Largest Pareto frontier the exact search keeps before falling back to
/// local search from the sweep.
pub const FRONTIER_CAP: usize = 1 << 14;

/// `0`, 64 log-spaced values in `[1e-6, 1e6]`, then `+inf`.
pub fn gamma_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    for j in 0..64 {
        g.push(10f64.powf(-6.0 + 12.0 * j as f64 / 63.0));
    }
    g.push(f64::INFINITY);
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimisticChoice {
    pub indices: Vec<usize>,
    pub index_value: f64,
    /// Sweep weight that produced the winner, `None` when the frontier
    /// search found a profile no linear weight reaches.
    pub gamma: Option<f64>,
    /// False only when the frontier grew past [`FRONTIER_CAP`].
    pub exact: bool,
}

/// `sum_i means[i][a_i] + sqrt(radius * sum_i bonus[i][a_i])`
pub fn index_value(profile: &[usize], means: &[Vec<f64>], bonus: &[Vec<f64>], radius: f64) -> f64 {
    let mut u = 0.0;
    let mut v = 0.0;
    for (i, &a) in profile.iter().enumerate() {
        u += means[i][a];
        v += bonus[i][a];
    }
    u + (radius * v).max(0.0).sqrt()
}

/// Per-task maximizer of `mean + gamma * bonus`; `gamma = inf` maximizes
/// the bonus alone. Ties go to the lowest action index.
pub fn sweep_profile(gamma: f64, means: &[Vec<f64>], bonus: &[Vec<f64>]) -> Vec<usize> {
    means
        .iter()
        .zip(bonus)
        .map(|(u, b)| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for j in 0..u.len() {
                let v = if gamma.is_infinite() { b[j] } else { u[j] + gamma * b[j] };
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

#[derive(Clone, Copy)]
struct FrontPoint {
    u: f64,
    v: f64,
    parent: u32,
    action: u32,
}

fn trace_profile(layers: &[Vec<FrontPoint>], depth: usize, mut idx: usize) -> Vec<usize> {
    let mut p = vec![0; depth];
    for l in (0..depth).rev() {
        let pt = layers[l][idx];
        p[l] = pt.action as usize;
        idx = pt.parent as usize;
    }
    p
}

/// Pareto frontier of `(sum mean, sum bonus)` over all joint profiles, or
/// `None` when it exceeds the cap. Among profiles with identical sums the
/// lexicographically smallest is kept.
fn pareto_profiles(means: &[Vec<f64>], bonus: &[Vec<f64>]) -> Option<Vec<Vec<usize>>> {
    let mut layers: Vec<Vec<FrontPoint>> = Vec::with_capacity(means.len());
    for (depth, (u, b)) in means.iter().zip(bonus).enumerate() {
        let mut local: Vec<usize> = (0..u.len()).collect();
        local.sort_by(|&x, &y| b[y].total_cmp(&b[x]).then(u[y].total_cmp(&u[x])).then(x.cmp(&y)));
        let mut keep = Vec::new();
        let mut max_u = f64::NEG_INFINITY;
        for j in local {
            if u[j] > max_u {
                max_u = u[j];
                keep.push(j);
            }
        }
        let mut cand: Vec<FrontPoint> = match layers.last() {
            None => keep.iter().map(|&j| FrontPoint { u: u[j], v: b[j], parent: 0, action: j as u32 }).collect(),
            Some(prev) => {
                let mut c = Vec::with_capacity(prev.len() * keep.len());
                for (pi, p) in prev.iter().enumerate() {
                    for &j in &keep {
                        c.push(FrontPoint { u: p.u + u[j], v: p.v + b[j], parent: pi as u32, action: j as u32 });
                    }
                }
                c
            }
        };
        cand.sort_by(|x, y| y.v.total_cmp(&x.v).then(y.u.total_cmp(&x.u)));
        let mut front: Vec<FrontPoint> = Vec::new();
        let mut max_u = f64::NEG_INFINITY;
        for pt in cand {
            if pt.u > max_u {
                max_u = pt.u;
                front.push(pt);
            } else if let Some(last) = front.last_mut() {
                if pt.u == last.u && pt.v == last.v {
                    let mut a = trace_profile(&layers, depth, pt.parent as usize);
                    a.push(pt.action as usize);
                    let mut bb = trace_profile(&layers, depth, last.parent as usize);
                    bb.push(last.action as usize);
                    if a < bb {
                        *last = pt;
                    }
                }
            }
        }
        if front.len() > FRONTIER_CAP {
            return None;
        }
        layers.push(front);
    }
    let depth = layers.len();
    let last = layers.last().map(|l| l.len()).unwrap_or(0);
    Some((0..last).map(|i| trace_profile(&layers, depth, i)).collect())
}

/// Maximizes the optimistic index over joint profiles given per-task means
/// `<x, theta_hat_i>` and bonuses `||x||^2_{V_i^{-1}}`.
pub fn optimistic_select_scores(means: &[Vec<f64>], bonus: &[Vec<f64>], radius: f64) -> OptimisticChoice {
    let mut best: Option<(f64, Vec<usize>, Option<f64>)> = None;
    let consider = |p: Vec<usize>, g: Option<f64>, best: &mut Option<(f64, Vec<usize>, Option<f64>)>| {
        let f = index_value(&p, means, bonus, radius);
        if best.as_ref().is_none_or(|(bf, bp, _)| better((f, &p), (*bf, bp))) {
            *best = Some((f, p, g));
        }
    };
    for g in gamma_grid() {
        consider(sweep_profile(g, means, bonus), Some(g), &mut best);
    }
    let exact = match pareto_profiles(means, bonus) {
        Some(front) => {
            let sweep_best = best.clone();
            for p in front {
                consider(p, None, &mut best);
            }
            // a frontier point equal to a sweep profile keeps its weight
            if let (Some((_, sp, sg)), Some((_, bp, bg))) = (&sweep_best, &mut best) {
                if sp == bp {
                    *bg = *sg;
                }
            }
            true
        }
        None => {
            let (mut f, mut p, g) = best.clone().expect("sweep produced a profile");
            let mut changed = true;
            let mut moved = false;
            let mut sweeps = 0;
            while changed && sweeps < 100 {
                changed = false;
                sweeps += 1;
                for i in 0..p.len() {
                    for j in 0..means[i].len() {
                        let mut q = p.clone();
                        q[i] = j;
                        let fq = index_value(&q, means, bonus, radius);
                        if fq > f {
                            f = fq;
                            p = q;
                            changed = true;
                            moved = true;
                        }
                    }
                }
            }
            best = Some((f, p, if moved { None } else { g }));
            false
        }
    };
    let (index_value, indices, gamma) = best.expect("non-empty action sets");
    OptimisticChoice { indices, index_value, gamma, exact }
}

pub fn score_actions(
    theta_hat: &DMatrix<f64>,
    designs: &[DesignState],
    action_sets: &[Vec<DVector<f64>>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let means = action_sets
        .iter()
        .enumerate()
        .map(|(i, set)| set.iter().map(|x| x.dot(&theta_hat.column(i))).collect())
        .collect();
    let bonus = action_sets
        .iter()
        .zip(designs)
        .map(|(set, ds)| set.iter().map(|x| ds.inv_norm_sq(x)).collect())
        .collect();
    (means, bonus)
}

pub fn optimistic_select(
    theta_hat: &DMatrix<f64>,
    designs: &[DesignState],
    radius: f64,
    action_sets: &[Vec<DVector<f64>>],
) -> OptimisticChoice {
    let (means, bonus) = score_actions(theta_hat, designs, action_sets);
    optimistic_select_scores(&means, &bonus, radius)
}

/// Exhaustive maximization over all `A^M` profiles; reference for tests.
pub fn enumerate_best(means: &[Vec<f64>], bonus: &[Vec<f64>], radius: f64) -> (Vec<usize>, f64) {
    let m = means.len();
    let mut p = vec![0usize; m];
    let mut best = (p.clone(), index_value(&p, means, bonus, radius));
    loop {
        let mut i = 0;
        loop {
            if i == m {
                return best;
            }
            p[i] += 1;
            if p[i] < means[i].len() {
                break;
            }
            p[i] = 0;
            i += 1;
        }
        let f = index_value(&p, means, bonus, radius);
        if f > best.1 {
            best = (p.clone(), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Learners
// ---------------------------------------------------------------------------

/// Multi-task low-rank OFUL. The shared subspace is refit from scratch
/// (warm-started) whenever the per-task sample count reaches a power of two;
/// in between only the task weights are re-solved against the current basis.
#[derive(Debug, Clone)]
pub struct MtlrOful {
    pub k: usize,
    pub radius: f64,
    pub norm_bound: f64,
    pub stats: Vec<TaskStats>,
    pub designs: Vec<DesignState>,
    pub b_hat: DMatrix<f64>,
    pub w_hat: DMatrix<f64>,
    pub theta_hat: DMatrix<f64>,
    pub samples: usize,
    pub solver: SolverOptions,
    pub refits: usize,
}

impl MtlrOful {
    pub fn new(d: usize, k: usize, m: usize, lambda: f64, radius: f64, solver: SolverOptions) -> Self {
        Self {
            k,
            radius,
            norm_bound: 1.0,
            stats: vec![TaskStats::new(d); m],
            designs: vec![DesignState::new(d, lambda).expect("positive lambda"); m],
            b_hat: crate::linalg::canonical_basis(d, k),
            w_hat: DMatrix::zeros(k, m),
            theta_hat: DMatrix::zeros(d, m),
            samples: 0,
            solver,
            refits: 0,
        }
    }

    pub fn select(&self, action_sets: &[Vec<DVector<f64>>]) -> OptimisticChoice {
        optimistic_select(&self.theta_hat, &self.designs, self.radius, action_sets)
    }

    /// Full low-rank refit on all data so far.
    pub fn refit(&mut self) {
        let mut opts = self.solver.clone();
        opts.seed = rng::combine(opts.seed, self.samples as u64);
        let sol = solve_lowrank_stats(&self.stats, self.k, self.norm_bound, &opts, Some(&self.b_hat))
            .expect("finite bandit data");
        self.b_hat = sol.b;
        self.w_hat = sol.w;
        self.theta_hat = &self.b_hat * &self.w_hat;
        self.refits += 1;
    }

    pub fn observe(&mut self, xs: &[DVector<f64>], ys: &[f64]) {
        for (i, (x, &y)) in xs.iter().zip(ys).enumerate() {
            self.stats[i].push(x, y);
            self.designs[i].update(x).expect("finite action");
        }
        self.samples += 1;
        if self.samples.is_power_of_two() {
            self.refit();
        } else {
            self.w_hat = fit_weights(&self.stats, &self.b_hat, self.norm_bound);
            self.theta_hat = &self.b_hat * &self.w_hat;
        }
    }
}

/// One OFUL learner per task, each with failure probability `delta / M`.
#[derive(Debug, Clone)]
pub struct IndepOful {
    pub designs: Vec<DesignState>,
    pub xy: Vec<DVector<f64>>,
    pub delta: f64,
    pub samples: usize,
}

impl IndepOful {
    pub fn new(d: usize, m: usize, lambda: f64, delta: f64) -> Self {
        Self {
            designs: vec![DesignState::new(d, lambda).expect("positive lambda"); m],
            xy: vec![DVector::zeros(d); m],
            delta,
            samples: 0,
        }
    }

    pub fn beta(&self) -> f64 {
        let ds = &self.designs[0];
        indep_oful_radius(ds.dim(), self.samples, ds.lambda, 1.0, self.delta / self.designs.len() as f64)
            .expect("validated parameters")
    }

    pub fn select(&self, action_sets: &[Vec<DVector<f64>>]) -> Vec<usize> {
        let beta_sqrt = self.beta().sqrt();
        action_sets
            .iter()
            .enumerate()
            .map(|(i, set)| {
                let theta = &self.designs[i].v_inv * &self.xy[i];
                let mut best = (0, f64::NEG_INFINITY);
                for (j, x) in set.iter().enumerate() {
                    let v = x.dot(&theta) + beta_sqrt * self.designs[i].inv_norm_sq(x).sqrt();
                    if v > best.1 {
                        best = (j, v);
                    }
                }
                best.0
            })
            .collect()
    }

    pub fn observe(&mut self, xs: &[DVector<f64>], ys: &[f64]) {
        for (i, (x, &y)) in xs.iter().zip(ys).enumerate() {
            self.designs[i].update(x).expect("finite action");
            self.xy[i].axpy(y, x, 1.0);
        }
        self.samples += 1;
    }
}

// ---------------------------------------------------------------------------
// Run loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BanditRunOptions {
    pub horizon: usize,
    pub delta: f64,
    pub lambda: f64,
    /// Multiplier on the theoretical radius.
    pub radius_scale: f64,
    /// Steps (1-based) at which the estimate is refit and membership recorded.
    pub checkpoints: Vec<usize>,
    pub solver_restarts: usize,
}

impl Default for BanditRunOptions {
    fn default() -> Self {
        Self { horizon: 1000, delta: 0.1, lambda: 1.0, radius_scale: 1.0, checkpoints: Vec::new(), solver_restarts: 5 }
    }
}

/// Radius used by the multi-task learner on this instance.
pub fn mtlr_radius(inst: &BanditInstance, opts: &BanditRunOptions) -> f64 {
    let s = &inst.spec;
    let l = bandit_radius(s.m, s.k, s.d, opts.horizon, opts.delta).expect("validated parameters");
    let base = if s.kind == InstanceKind::Misspecified && s.zeta > 0.0 {
        misspecified_radius(l, s.m, opts.horizon, s.zeta).expect("non-negative zeta")
    } else {
        l
    };
    opts.radius_scale * base
}

pub fn run_bandit(inst: &BanditInstance, algo: BanditAlgorithm, opts: &BanditRunOptions) -> RegretTrace {
    let s = &inst.spec;
    let (d, m) = (s.d, s.m);
    let start = Instant::now();
    let mut trace = RegretTrace::new(algo.tag(), s.seed, m);
    let algo_seed = rng::combine(s.seed, rng::hash_str(algo.tag()));
    let solver = SolverOptions { restarts: opts.solver_restarts, seed: algo_seed, ..SolverOptions::default() };
    let mut mtlr = (algo == BanditAlgorithm::MtlrOful)
        .then(|| MtlrOful::new(d, s.k, m, opts.lambda, mtlr_radius(inst, opts), solver));
    let mut indep = (algo == BanditAlgorithm::IndepOful).then(|| IndepOful::new(d, m, opts.lambda, opts.delta));
    for t in 1..=opts.horizon {
        let sets: Vec<Vec<DVector<f64>>> = (0..m).map(|i| inst.sample_action_set(t, i)).collect();
        let mut stat = None;
        let mut radius = None;
        let chosen: Vec<usize> = match algo {
            BanditAlgorithm::MtlrOful => {
                let learner = mtlr.as_mut().expect("constructed above");
                if opts.checkpoints.contains(&t) {
                    if learner.samples > 0 {
                        learner.refit();
                    }
                    let (_, st) = membership(&learner.theta_hat, &inst.theta, &learner.designs, learner.radius)
                        .expect("matching shapes");
                    stat = Some(st);
                }
                radius = Some(learner.radius);
                learner.select(&sets).indices
            }
            BanditAlgorithm::IndepOful => {
                let learner = indep.as_ref().expect("constructed above");
                radius = Some(learner.beta());
                learner.select(&sets)
            }
            BanditAlgorithm::Random => (0..m)
                .map(|i| rng::stream(algo_seed, "algo:random", i as u64, t as u64).random_range(0..sets[i].len()))
                .collect(),
            BanditAlgorithm::Oracle => (0..m).map(|i| inst.optimal_action(&sets[i], i).0).collect(),
        };
        trace.record_step(inst, &sets, &chosen);
        let xs: Vec<DVector<f64>> = chosen.iter().enumerate().map(|(i, &c)| sets[i][c].clone()).collect();
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| inst.reward(i, x, t)).collect();
        if let Some(l) = mtlr.as_mut() {
            l.observe(&xs, &ys);
        }
        if let Some(l) = indep.as_mut() {
            l.observe(&xs, &ys);
        }
        *trace.membership.last_mut().expect("step recorded") = stat;
        *trace.radius.last_mut().expect("step recorded") = radius;
        *trace.wall_ms.last_mut().expect("step recorded") = start.elapsed().as_secs_f64() * 1e3;
    }
    trace
}
