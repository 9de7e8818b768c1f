//! Optimistic multi-task least-squares value iteration with a shared
//! low-rank parameter structure, its per-task counterpart, and the random
//! policy reference.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bandit_algos::optimistic_select;
use crate::bandit_env::RegretTrace;
use crate::confidence::rl_radii;
use crate::linalg::{solve_lowrank_stats, DesignState, SolverOptions, TaskStats};
use crate::rl_env::MultiTaskMdp;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RlAlgorithm {
    #[serde(rename = "mtlr-lsvi")]
    MtlrLsvi,
    #[serde(rename = "per-task-lsvi")]
    PerTaskLsvi,
    #[serde(rename = "random")]
    Random,
}

impl RlAlgorithm {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::MtlrLsvi => "mtlr-lsvi",
            Self::PerTaskLsvi => "per-task-lsvi",
            Self::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    CoordinateAscent,
    ExactTiny,
}

#[derive(Debug, Clone)]
pub struct LsviOptions {
    pub k: usize,
    /// Episodes the radius is computed for.
    pub horizon: usize,
    pub delta: f64,
    pub lambda: f64,
    pub radius_scale: f64,
    pub mode: SolverMode,
    pub solver_restarts: usize,
    pub max_passes: usize,
    pub pass_tol: f64,
}

impl Default for LsviOptions {
    fn default() -> Self {
        Self {
            k: 2,
            horizon: 300,
            delta: 0.1,
            lambda: 1.0,
            radius_scale: 1.0,
            mode: SolverMode::CoordinateAscent,
            solver_restarts: 1,
            max_passes: 10,
            pass_tol: 1e-6,
        }
    }
}

/// Result of one call to the optimistic program.
#[derive(Debug, Clone)]
pub struct GlobalSolution {
    /// Per step, `d x M` least-squares fits given the chosen later steps.
    pub theta_hat: Vec<DMatrix<f64>>,
    /// Per step, `d x M` optimistic parameters.
    pub theta_bar: Vec<DMatrix<f64>>,
    /// `sum_i max_a <phi_1(s_1^i, a), theta_bar_1^i>`
    pub objective: f64,
    /// Objective with every perturbation set to zero.
    pub baseline: f64,
    /// Per step, `sum_i ||theta_bar - theta_hat||^2_{V}`.
    pub budget_used: Vec<f64>,
    pub passes: usize,
}

impl GlobalSolution {
    pub fn xi(&self, h: usize) -> DMatrix<f64> {
        &self.theta_bar[h] - &self.theta_hat[h]
    }
}

#[derive(Debug, Clone)]
struct Sample {
    row: usize,
    reward: f64,
    next: usize,
}

/// Multi-task LSVI learner state.
#[derive(Debug, Clone)]
pub struct MtlrLsvi {
    pub opts: LsviOptions,
    pub alpha: f64,
    pub param_bound: f64,
    data: Vec<Vec<Vec<Sample>>>,
    pub designs: Vec<Vec<DesignState>>,
    grams: Vec<Vec<DMatrix<f64>>>,
    warm: Vec<Option<DMatrix<f64>>>,
    pub episodes: usize,
    seed: u64,
}

fn greedy_value(mdp: &MultiTaskMdp, h: usize, s: usize, theta: &DVector<f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for a in 0..mdp.a {
        let v = mdp.phi[h].row(mdp.sa(s, a)).transpose().dot(theta);
        if v > best.1 {
            best = (a, v);
        }
    }
    best
}

/// Rank-`k` truncation followed by clipping each column to `bound`.
pub fn project_rank_norm(theta: &DMatrix<f64>, k: usize, bound: f64) -> DMatrix<f64> {
    let (d, m) = theta.shape();
    let mut out = if k >= d.min(m) {
        theta.clone()
    } else {
        let svd = theta.clone().svd(true, true);
        let u = svd.u.expect("requested");
        let vt = svd.v_t.expect("requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut acc = DMatrix::zeros(d, m);
        for &j in order.iter().take(k) {
            acc += u.column(j) * vt.row(j) * svd.singular_values[j];
        }
        acc
    };
    for mut c in out.column_iter_mut() {
        let n = c.norm();
        if n > bound {
            c *= bound / n;
        }
    }
    out
}

impl MtlrLsvi {
    pub fn new(mdp: &MultiTaskMdp, opts: LsviOptions, seed: u64) -> Self {
        let radii = rl_radii(mdp.m, opts.k, mdp.d, opts.horizon, opts.delta, mdp.nominal_ibe, mdp.param_bound, opts.lambda)
            .expect("validated parameters");
        Self {
            alpha: opts.radius_scale * radii.alpha,
            param_bound: mdp.param_bound,
            data: vec![vec![Vec::new(); mdp.m]; mdp.h],
            designs: vec![vec![DesignState::new(mdp.d, opts.lambda).expect("positive lambda"); mdp.m]; mdp.h],
            grams: vec![vec![DMatrix::zeros(mdp.d, mdp.d); mdp.m]; mdp.h],
            warm: vec![None; mdp.h],
            episodes: 0,
            seed,
            opts,
        }
    }

    pub fn record(&mut self, mdp: &MultiTaskMdp, i: usize, tr: &crate::rl_env::Transition) {
        let row = mdp.sa(tr.s, tr.a);
        let x = mdp.phi[tr.h].row(row).transpose();
        self.designs[tr.h][i].update(&x).expect("finite features");
        self.grams[tr.h][i].ger(1.0, &x, &x, 1.0);
        self.data[tr.h][i].push(Sample { row, reward: tr.reward, next: tr.next });
    }

    /// Low-rank regression at step `h` against `r + V_{h+1}(s')`.
    fn fit(&mut self, mdp: &MultiTaskMdp, h: usize, next: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let stats: Vec<TaskStats> = (0..mdp.m)
            .map(|i| {
                let mut st = TaskStats::new(mdp.d);
                st.gram = self.grams[h][i].clone();
                st.count = self.data[h][i].len();
                for smp in &self.data[h][i] {
                    let y = smp.reward
                        + next.map_or(0.0, |th| greedy_value(mdp, h + 1, smp.next, &th.column(i).into_owned()).1);
                    st.xy.axpy(y, &mdp.phi[h].row(smp.row).transpose(), 1.0);
                    st.yy += y * y;
                }
                st
            })
            .collect();
        let so = SolverOptions {
            restarts: self.opts.solver_restarts,
            seed: rng::combine(self.seed, (self.episodes * mdp.h + h) as u64),
            ..SolverOptions::default()
        };
        let sol = solve_lowrank_stats(&stats, self.opts.k, self.param_bound, &so, self.warm[h].as_ref())
            .expect("finite regression data");
        self.warm[h] = Some(sol.b.clone());
        sol.theta()
    }

    fn budget(&self, h: usize, xi: &DMatrix<f64>) -> f64 {
        (0..xi.ncols()).map(|i| self.designs[h][i].norm_sq(&xi.column(i).into_owned())).sum()
    }

    fn start_objective(&self, mdp: &MultiTaskMdp, theta0: &DMatrix<f64>) -> f64 {
        (0..mdp.m).map(|i| greedy_value(mdp, 0, mdp.start[i], &theta0.column(i).into_owned()).1).sum()
    }

    /// Projects `theta_hat + s xi` for the largest `s` in `[0, 1]` that keeps
    /// the perturbation within the budget.
    fn feasible_bar(&self, h: usize, theta_hat: &DMatrix<f64>, xi: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.opts.k;
        let bar = |s: f64| project_rank_norm(&(theta_hat + xi * s), k, self.param_bound);
        let full = bar(1.0);
        if self.budget(h, &(&full - theta_hat)) <= self.alpha {
            return full;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            if self.budget(h, &(&bar(mid) - theta_hat)) <= self.alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let out = bar(lo);
        if self.budget(h, &(&out - theta_hat)) <= self.alpha {
            out
        } else {
            theta_hat.clone()
        }
    }

    /// Closed-form maximizer of `sum_i <g_i, xi_i>` over the joint ellipsoid
    /// `sum_i ||xi_i||^2_{V_i} <= alpha`; task `i` receives the budget share
    /// `||g_i||^2_{V_i^{-1}} / sum_j ||g_j||^2_{V_j^{-1}}`.
    fn ellipsoid_step(&self, h: usize, dirs: &[DVector<f64>]) -> DMatrix<f64> {
        let d = dirs[0].len();
        let norms: Vec<f64> = dirs.iter().enumerate().map(|(i, g)| self.designs[h][i].inv_norm_sq(g)).collect();
        let total: f64 = norms.iter().sum();
        let mut xi = DMatrix::zeros(d, dirs.len());
        if total <= 0.0 {
            return xi;
        }
        let scale = (self.alpha / total).sqrt();
        for (i, g) in dirs.iter().enumerate() {
            xi.set_column(i, &(&self.designs[h][i].v_inv * g * scale));
        }
        xi
    }

    fn backward_baseline(&mut self, mdp: &MultiTaskMdp) -> (Vec<DMatrix<f64>>, f64) {
        let mut hats: Vec<DMatrix<f64>> = vec![DMatrix::zeros(mdp.d, mdp.m); mdp.h];
        for h in (0..mdp.h).rev() {
            let next = if h + 1 < mdp.h { Some(hats[h + 1].clone()) } else { None };
            hats[h] = self.fit(mdp, h, next.as_ref());
        }
        let j = self.start_objective(mdp, &hats[0]);
        (hats, j)
    }

    fn coordinate_ascent(&mut self, mdp: &MultiTaskMdp) -> GlobalSolution {
        let (base_hat, baseline) = self.backward_baseline(mdp);
        let mut best = GlobalSolution {
            theta_hat: base_hat.clone(),
            theta_bar: base_hat.clone(),
            objective: baseline,
            baseline,
            budget_used: vec![0.0; mdp.h],
            passes: 0,
        };
        let mut current_bar = base_hat;
        for pass in 0..self.opts.max_passes {
            let mut hats: Vec<DMatrix<f64>> = vec![DMatrix::zeros(mdp.d, mdp.m); mdp.h];
            let mut bars: Vec<DMatrix<f64>> = vec![DMatrix::zeros(mdp.d, mdp.m); mdp.h];
            for h in (0..mdp.h).rev() {
                let next = if h + 1 < mdp.h { Some(bars[h + 1].clone()) } else { None };
                hats[h] = self.fit(mdp, h, next.as_ref());
                let xi = if h == 0 {
                    let sets: Vec<Vec<DVector<f64>>> = (0..mdp.m)
                        .map(|i| (0..mdp.a).map(|a| mdp.feature(0, mdp.start[i], a)).collect())
                        .collect();
                    let choice = optimistic_select(&hats[0], &self.designs[0], self.alpha, &sets);
                    let dirs: Vec<DVector<f64>> =
                        choice.indices.iter().enumerate().map(|(i, &a)| sets[i][a].clone()).collect();
                    self.ellipsoid_step(0, &dirs)
                } else {
                    // push up the values of the states the previous step lands in
                    let dirs: Vec<DVector<f64>> = (0..mdp.m)
                        .map(|i| {
                            let th = current_bar[h].column(i).into_owned();
                            let mut g = DVector::zeros(mdp.d);
                            let n = self.data[h - 1][i].len().max(1) as f64;
                            for smp in &self.data[h - 1][i] {
                                let (a, _) = greedy_value(mdp, h, smp.next, &th);
                                g += mdp.feature(h, smp.next, a) / n;
                            }
                            g
                        })
                        .collect();
                    self.ellipsoid_step(h, &dirs)
                };
                bars[h] = self.feasible_bar(h, &hats[h], &xi);
            }
            let j = self.start_objective(mdp, &bars[0]);
            let improved = j > best.objective + self.opts.pass_tol;
            current_bar = bars.clone();
            if improved || pass == 0 && j >= best.objective {
                let budget_used = (0..mdp.h).map(|h| self.budget(h, &(&bars[h] - &hats[h]))).collect();
                best = GlobalSolution { theta_hat: hats, theta_bar: bars, objective: j, baseline, budget_used, passes: pass + 1 };
            }
            if !improved {
                break;
            }
        }
        best
    }

    /// Exact maximization over `theta_bar_1` for rank one: grid over unit
    /// directions with local refinement to 1e-2, and for each direction the
    /// per-task weights solved exactly through the budget's Lagrangian.
    fn exact_first_step(&self, mdp: &MultiTaskMdp, theta_hat: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, m) = (mdp.d, mdp.m);
        let feats: Vec<Vec<DVector<f64>>> =
            (0..m).map(|i| (0..mdp.a).map(|a| mdp.feature(0, mdp.start[i], a)).collect()).collect();
        let eval = |b: &DVector<f64>| -> (f64, DVector<f64>) { self.best_weights(theta_hat, &feats, b) };
        let mut cands: Vec<DVector<f64>> = Vec::new();
        let n: i32 = match d {
            1 => 1,
            2 => 40,
            3 => 10,
            _ => 5,
        };
        let mut idx = vec![-n; d];
        loop {
            let v = DVector::from_fn(d, |j, _| idx[j] as f64);
            let first = v.iter().find(|x| **x != 0.0).copied();
            if first.is_some_and(|f| f > 0.0) {
                cands.push(v.normalize());
            }
            let mut j = 0;
            while j < d {
                idx[j] += 1;
                if idx[j] <= n {
                    break;
                }
                idx[j] = -n;
                j += 1;
            }
            if j == d {
                break;
            }
        }
        for i in 0..m {
            let c = theta_hat.column(i);
            if c.norm() > 1e-12 {
                cands.push(c.normalize());
            }
        }
        let mut scored: Vec<(f64, DVector<f64>)> = cands.into_iter().map(|b| (eval(&b).0, b)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut best = scored[0].clone();
        for (v0, b0) in scored.into_iter().take(5) {
            let (mut v, mut b) = (v0, b0);
            let mut step = 0.2;
            while step >= 1e-2 {
                let mut moved = false;
                for j in 0..d {
                    for sgn in [1.0, -1.0] {
                        let mut c = b.clone();
                        c[j] += sgn * step;
                        if c.norm() < 1e-12 {
                            continue;
                        }
                        let c = c.normalize();
                        let cv = eval(&c).0;
                        if cv > v {
                            v = cv;
                            b = c;
                            moved = true;
                        }
                    }
                }
                if !moved {
                    step *= 0.5;
                }
            }
            if v > best.0 {
                best = (v, b);
            }
        }
        let (_, w) = eval(&best.1);
        &best.1 * w.transpose()
    }

    /// Best `w` for direction `b`: maximizes `sum_i max_a <phi_ia, b> w_i`
    /// subject to `|w_i| <= D` and `sum_i ||b w_i - theta_hat_i||^2_{V_i} <= alpha`.
    fn best_weights(&self, theta_hat: &DMatrix<f64>, feats: &[Vec<DVector<f64>>], b: &DVector<f64>) -> (f64, DVector<f64>) {
        let m = feats.len();
        let dd = self.param_bound;
        let v: Vec<f64> = (0..m).map(|i| self.designs[0][i].norm_sq(b).max(1e-300)).collect();
        let p: Vec<f64> = (0..m).map(|i| b.dot(&(&self.designs[0][i].v * theta_hat.column(i)))).collect();
        let r: Vec<f64> = (0..m).map(|i| self.designs[0][i].norm_sq(&theta_hat.column(i).into_owned())).collect();
        let proj: Vec<(f64, f64)> = feats
            .iter()
            .map(|fs| {
                let vals: Vec<f64> = fs.iter().map(|f| f.dot(b)).collect();
                (vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max), vals.iter().cloned().fold(f64::INFINITY, f64::min))
            })
            .collect();
        let mut best = (f64::NEG_INFINITY, DVector::zeros(m));
        for pattern in 0..(1usize << m) {
            let sigma: Vec<f64> = (0..m).map(|i| if pattern >> i & 1 == 0 { 1.0 } else { -1.0 }).collect();
            let e: Vec<f64> = (0..m).map(|i| if sigma[i] > 0.0 { proj[i].0 } else { -proj[i].1 }).collect();
            let q = |t: &[f64]| -> f64 {
                (0..m).map(|i| v[i] * t[i] * t[i] - 2.0 * sigma[i] * t[i] * p[i] + r[i]).sum::<f64>()
            };
            let at = |nu: f64| -> Vec<f64> {
                (0..m)
                    .map(|i| {
                        let t = if nu == f64::INFINITY {
                            sigma[i] * p[i] / v[i]
                        } else if nu == 0.0 {
                            if e[i] > 0.0 {
                                dd
                            } else if e[i] < 0.0 {
                                0.0
                            } else {
                                sigma[i] * p[i] / v[i]
                            }
                        } else {
                            sigma[i] * p[i] / v[i] + e[i] / (2.0 * nu * v[i])
                        };
                        t.clamp(0.0, dd)
                    })
                    .collect()
            };
            let t = if q(&at(0.0)) <= self.alpha {
                at(0.0)
            } else if q(&at(f64::INFINITY)) > self.alpha {
                continue;
            } else {
                let (mut lo, mut hi) = (-60.0f64, 60.0f64);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if q(&at(mid.exp())) > self.alpha {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                at(hi.exp())
            };
            let val: f64 = (0..m).map(|i| e[i] * t[i]).sum();
            if val > best.0 {
                best = (val, DVector::from_fn(m, |i, _| sigma[i] * t[i]));
            }
        }
        best
    }

    fn exact_tiny(&mut self, mdp: &MultiTaskMdp) -> GlobalSolution {
        assert!(
            mdp.d <= 4 && self.opts.k == 1 && mdp.m <= 3 && mdp.h <= 3,
            "exact-tiny solver supports d <= 4, k = 1, M <= 3, H <= 3"
        );
        let (_, baseline) = self.backward_baseline(mdp);
        let later = mdp.h - 1;
        let mut best: Option<GlobalSolution> = None;
        // later steps: either no perturbation or the ellipsoid step toward
        // the greedy features of the states reached, every combination
        for combo in 0..(1usize << later) {
            let mut hats: Vec<DMatrix<f64>> = vec![DMatrix::zeros(mdp.d, mdp.m); mdp.h];
            let mut bars: Vec<DMatrix<f64>> = vec![DMatrix::zeros(mdp.d, mdp.m); mdp.h];
            for h in (1..mdp.h).rev() {
                let next = if h + 1 < mdp.h { Some(bars[h + 1].clone()) } else { None };
                hats[h] = self.fit(mdp, h, next.as_ref());
                bars[h] = if combo >> (h - 1) & 1 == 0 {
                    hats[h].clone()
                } else {
                    let dirs: Vec<DVector<f64>> = (0..mdp.m)
                        .map(|i| {
                            let th = hats[h].column(i).into_owned();
                            let mut g = DVector::zeros(mdp.d);
                            let n = self.data[h - 1][i].len().max(1) as f64;
                            for smp in &self.data[h - 1][i] {
                                let (a, _) = greedy_value(mdp, h, smp.next, &th);
                                g += mdp.feature(h, smp.next, a) / n;
                            }
                            g
                        })
                        .collect();
                    let xi = self.ellipsoid_step(h, &dirs);
                    self.feasible_bar(h, &hats[h], &xi)
                };
            }
            let next = if mdp.h > 1 { Some(bars[1].clone()) } else { None };
            hats[0] = self.fit(mdp, 0, next.as_ref());
            bars[0] = self.exact_first_step(mdp, &hats[0]);
            let j = self.start_objective(mdp, &bars[0]);
            if best.as_ref().is_none_or(|b| j > b.objective) {
                let budget_used = (0..mdp.h).map(|h| self.budget(h, &(&bars[h] - &hats[h]))).collect();
                best = Some(GlobalSolution { theta_hat: hats, theta_bar: bars, objective: j, baseline, budget_used, passes: 1 });
            }
        }
        best.expect("at least one combination")
    }

    pub fn global_optimize(&mut self, mdp: &MultiTaskMdp) -> GlobalSolution {
        match self.opts.mode {
            SolverMode::CoordinateAscent => self.coordinate_ascent(mdp),
            SolverMode::ExactTiny => self.exact_tiny(mdp),
        }
    }

    pub fn policies(mdp: &MultiTaskMdp, sol: &GlobalSolution) -> Vec<Vec<Vec<usize>>> {
        (0..mdp.m)
            .map(|i| {
                (0..mdp.h)
                    .map(|h| {
                        let th = sol.theta_bar[h].column(i).into_owned();
                        (0..mdp.s).map(|s| greedy_value(mdp, h, s, &th).0).collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Copy of task `i` as a single-task MDP.
pub fn task_view(mdp: &MultiTaskMdp, i: usize) -> MultiTaskMdp {
    let mut one = mdp.clone();
    one.m = 1;
    one.p = vec![mdp.p[i].clone()];
    one.r = vec![mdp.r[i].clone()];
    one.start = vec![mdp.start[i]];
    one
}

/// Runs an RL algorithm for `episodes` episodes; step regret is the exact
/// expected regret of the executed policies summed over tasks.
pub fn run_lsvi(mdp: &MultiTaskMdp, algo: RlAlgorithm, opts: &LsviOptions, episodes: usize, seed: u64) -> RegretTrace {
    let start_clock = Instant::now();
    let mut trace = RegretTrace::new(algo.tag(), seed, mdp.m);
    let optimal: Vec<f64> = (0..mdp.m).map(|i| mdp.optimal_start_value(i)).collect();
    let algo_seed = rng::combine(seed, rng::hash_str(algo.tag()));
    let views: Vec<MultiTaskMdp> = (0..mdp.m).map(|i| task_view(mdp, i)).collect();
    let mut joint = (algo == RlAlgorithm::MtlrLsvi).then(|| MtlrLsvi::new(mdp, opts.clone(), algo_seed));
    let mut single: Vec<MtlrLsvi> = if algo == RlAlgorithm::PerTaskLsvi {
        views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let o = LsviOptions { k: mdp.d, delta: opts.delta / mdp.m as f64, ..opts.clone() };
                MtlrLsvi::new(v, o, rng::combine(algo_seed, i as u64))
            })
            .collect()
    } else {
        Vec::new()
    };
    for t in 1..=episodes {
        let mut radius = None;
        let policies: Vec<Vec<Vec<usize>>> = match algo {
            RlAlgorithm::MtlrLsvi => {
                let l = joint.as_mut().expect("constructed above");
                let sol = l.global_optimize(mdp);
                radius = Some(l.alpha);
                MtlrLsvi::policies(mdp, &sol)
            }
            RlAlgorithm::PerTaskLsvi => single
                .iter_mut()
                .zip(&views)
                .map(|(l, v)| {
                    let sol = l.global_optimize(v);
                    radius = Some(l.alpha);
                    MtlrLsvi::policies(v, &sol).remove(0)
                })
                .collect(),
            RlAlgorithm::Random => (0..mdp.m)
                .map(|i| {
                    let mut r = rng::stream(algo_seed, "algo:random", i as u64, t as u64);
                    (0..mdp.h).map(|_| (0..mdp.s).map(|_| r.random_range(0..mdp.a)).collect()).collect()
                })
                .collect(),
        };
        let mut total = 0.0;
        for i in 0..mdp.m {
            let v = mdp.evaluate_policy(i, &policies[i]);
            let reg = (optimal[i] - v[0][mdp.start[i]]).max(0.0);
            trace.per_task_cumulative[i] += reg;
            total += reg;
            let mut r = rng::stream(seed, "rl-transitions", i as u64, t as u64);
            let path = mdp.rollout(i, &policies[i], &mut r);
            for tr in &path {
                if let Some(l) = joint.as_mut() {
                    l.record(mdp, i, tr);
                }
                if let Some(l) = single.get_mut(i) {
                    l.record(&views[i], 0, tr);
                }
            }
        }
        if let Some(l) = joint.as_mut() {
            l.episodes += 1;
        }
        for l in single.iter_mut() {
            l.episodes += 1;
        }
        let cum = trace.cumulative.last().copied().unwrap_or(0.0) + total;
        trace.step_regret.push(total);
        trace.cumulative.push(cum);
        trace.membership.push(None);
        trace.radius.push(radius);
        trace.wall_ms.push(start_clock.elapsed().as_secs_f64() * 1e3);
    }
    trace
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl_env::{gen_linear_mdp, LinearMdpSpec, RewardNoise};

    #[test]
    fn projection_keeps_rank_and_norm() {
        let th = DMatrix::from_row_slice(3, 3, &[3.0, 0.0, 0.1, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let p = project_rank_norm(&th, 1, 1.0);
        assert_eq!(p.clone().svd(false, false).singular_values.iter().filter(|&&s| s > 1e-10).count(), 1);
        assert!(p.column_iter().all(|c| c.norm() <= 1.0 + 1e-12));
    }

    #[test]
    fn empty_data_solution_is_zero_baseline() {
        let mdp = gen_linear_mdp(&LinearMdpSpec { s: 4, a: 2, h: 2, m: 2, d: 3, k: 1, seed: 0, reward_noise: RewardNoise::Zero })
            .unwrap();
        let mut l = MtlrLsvi::new(&mdp, LsviOptions { k: 1, horizon: 10, ..Default::default() }, 0);
        let sol = l.global_optimize(&mdp);
        assert_eq!(sol.baseline, 0.0);
        assert!(sol.objective >= sol.baseline);
        for h in 0..2 {
            assert!(sol.budget_used[h] <= l.alpha + 1e-9);
        }
    }
}
