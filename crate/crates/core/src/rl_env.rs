//! Finite-horizon multi-task MDPs with linear features: a generator whose
//! Bellman backups close exactly over rank-k shared parameters, the hard
//! misspecified instance, exact dynamic programming and an IBE estimator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{random_orthonormal, solve_lowrank_stats, SolverOptions, TaskStats};
use crate::rng::{self, combine, hash_str, splitmix64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlEnvError {
    #[error("invalid MDP parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, RlEnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardNoise {
    Zero,
    /// Uniform on `[-b, b]` with `b = min(r, 1/H - r)`, so every realized
    /// per-step reward stays in `[0, 1/H]`.
    Bounded,
}

/// Extra structure kept for the hard instance.
#[derive(Debug, Clone)]
pub struct HardMdpInfo {
    pub delta_p: f64,
    pub gap: f64,
    pub alpha_c: f64,
    pub beta_c: f64,
    /// `mu[h]` in `{+-gap}^{d-4}`
    pub mu: Vec<DVector<f64>>,
    /// `perturbation[h][a]`, bounded by zeta
    pub perturbation: Vec<Vec<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub zeta: f64,
}

#[derive(Debug, Clone)]
pub struct MultiTaskMdp {
    pub s: usize,
    pub a: usize,
    pub h: usize,
    pub m: usize,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    /// `phi[h]`: `(S*A) x d`, row `s*A + a`.
    pub phi: Vec<DMatrix<f64>>,
    /// `p[i][h]`: `(S*A) x S` transition table.
    pub p: Vec<Vec<DMatrix<f64>>>,
    /// `r[i][h]`: mean rewards, length `S*A`.
    pub r: Vec<Vec<DVector<f64>>>,
    pub start: Vec<usize>,
    /// Norm bound on value parameters that contains the true ones.
    pub param_bound: f64,
    pub reward_noise: RewardNoise,
    /// IBE the construction guarantees (zero for the linear generator).
    pub nominal_ibe: f64,
    pub hard: Option<HardMdpInfo>,
}

/// One transition of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub reward: f64,
    pub next: usize,
}

fn dirichlet<R: Rng + ?Sized>(n: usize, conc: f64, rng: &mut R) -> DVector<f64> {
    let g = Gamma::new(conc, 1.0).expect("positive concentration");
    loop {
        let v = DVector::from_fn(n, |_, _| g.sample(rng));
        let s = v.sum();
        if s > 0.0 {
            return v / s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMdpSpec {
    pub s: usize,
    pub a: usize,
    pub h: usize,
    pub m: usize,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    pub reward_noise: RewardNoise,
}

/// Simplex features over `d` anchors. Anchor `j` moves to next states by
/// `sum_c Z[j, c] G_c` and pays `sum_c Z[j, c] g_c`, where the `d x k`
/// mixing matrix `Z_h` is shared by tasks and the `k` prototype
/// distributions `G_c` and rewards `g_c` are per task. Every backup
/// parameter then lies in `col(Z_h)`, so the multi-task IBE is zero.
pub fn gen_linear_mdp(spec: &LinearMdpSpec) -> Result<MultiTaskMdp> {
    let LinearMdpSpec { s, a, h, m, d, k, seed, reward_noise } = *spec;
    if s == 0 || a == 0 || h == 0 || m == 0 || k == 0 || k > d {
        return Err(RlEnvError::InvalidParameter(format!("need positive sizes and k <= d, got {spec:?}")));
    }
    if d > s * a {
        return Err(RlEnvError::InvalidParameter(format!("d = {d} exceeds S*A = {}", s * a)));
    }
    let mut rng = rng::stream(seed, "linear-mdp", 0, 0);
    let sa = s * a;
    let mut phi = Vec::with_capacity(h);
    let mut mix = Vec::with_capacity(h);
    for _ in 0..h {
        let mut f = DMatrix::zeros(sa, d);
        for row in 0..sa {
            f.set_row(row, &dirichlet(d, 0.5, &mut rng).transpose());
        }
        phi.push(f);
        let mut z = DMatrix::zeros(d, k);
        for j in 0..d {
            z.set_row(j, &dirichlet(k, 1.0, &mut rng).transpose());
        }
        mix.push(z);
    }
    let mut p = Vec::with_capacity(m);
    let mut r = Vec::with_capacity(m);
    for _ in 0..m {
        let mut pi = Vec::with_capacity(h);
        let mut ri = Vec::with_capacity(h);
        for step in 0..h {
            let mut g = DMatrix::zeros(k, s);
            for c in 0..k {
                g.set_row(c, &dirichlet(s, 0.3, &mut rng).transpose());
            }
            let rew = DVector::from_fn(k, |_, _| rng.random_range(0.0..=1.0) / h as f64);
            let fz = &phi[step] * &mix[step];
            pi.push(&fz * g);
            ri.push(&fz * rew);
        }
        p.push(pi);
        r.push(ri);
    }
    Ok(MultiTaskMdp {
        s,
        a,
        h,
        m,
        d,
        k,
        seed,
        phi,
        p,
        r,
        start: vec![0; m],
        param_bound: (d as f64).sqrt(),
        reward_noise,
        nominal_ibe: 0.0,
        hard: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardMdpSpec {
    pub d: usize,
    pub h: usize,
    /// Episode budget the instance is tuned against.
    pub t: usize,
    pub zeta: f64,
    pub a_count: usize,
    pub seed: u64,
}

/// Chain `x_1 .. x_H` that leaks into an absorbing rewarding state
/// `x_{H+2}` with probability `delta + zeta_h(a) + <mu_h, a>`, plus a
/// linear-consistent waypoint `x_{H+1}` that moves to `x_{H+2}`.
/// States are indexed `0..H+2`; index `H+1` pays `1/H` at every step.
pub fn gen_hard_mdp(spec: &HardMdpSpec) -> Result<MultiTaskMdp> {
    let HardMdpSpec { d, h, t, zeta, a_count, seed } = *spec;
    if d < 10 || h < 10 {
        return Err(RlEnvError::InvalidParameter(format!("need d >= 10 and H >= 10, got d={d}, H={h}")));
    }
    if (t as f64) < (d * d * h) as f64 / 4.0 {
        return Err(RlEnvError::InvalidParameter(format!("need T >= d^2 H / 4, got T={t}")));
    }
    if !(zeta >= 0.0) || zeta > 1.0 / (4.0 * h as f64) {
        return Err(RlEnvError::InvalidParameter(format!("need 0 <= zeta <= 1/(4H), got {zeta}")));
    }
    if a_count < 2 {
        return Err(RlEnvError::InvalidParameter("need at least two actions".into()));
    }
    let q = d - 4;
    let hf = h as f64;
    let delta_p = 1.0 / hf;
    let gap = (delta_p / t as f64).sqrt() / (4.0 * 2f64.sqrt());
    let alpha_c = (1.0 / (2.0 + gap * q as f64)).sqrt();
    let beta_c = (gap / (2.0 + gap * q as f64)).sqrt();
    let mut rng = rng::stream(seed, "hard-mdp", 0, 0);
    let mut actions = vec![DVector::from_element(q, 1.0), DVector::from_element(q, -1.0)];
    while actions.len() < a_count {
        let cand = DVector::from_fn(q, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        if !actions.contains(&cand) || actions.len() >= 1 << q {
            actions.push(cand);
        }
    }
    let mu: Vec<DVector<f64>> =
        (0..h).map(|_| DVector::from_fn(q, |_, _| if rng.random::<bool>() { gap } else { -gap })).collect();
    let perturbation: Vec<Vec<f64>> = (0..h)
        .map(|step| {
            (0..a_count)
                .map(|a| {
                    let hh = combine(combine(combine(hash_str("hard-zeta"), seed), step as u64), a as u64);
                    if splitmix64(hh) & 1 == 0 {
                        zeta
                    } else {
                        -zeta
                    }
                })
                .collect()
        })
        .collect();

    let s = h + 2;
    let (waypoint, sink) = (h, h + 1);
    let sa = s * a_count;
    let mut feat = DMatrix::zeros(sa, d);
    for st in 0..s {
        for (ai, act) in actions.iter().enumerate() {
            let row = st * a_count + ai;
            if st < h {
                feat[(row, 1)] = alpha_c;
                feat[(row, 2)] = alpha_c * delta_p;
                for j in 0..q {
                    feat[(row, 4 + j)] = beta_c * act[j];
                }
            } else if st == waypoint {
                feat[(row, 3)] = alpha_c;
            } else {
                feat[(row, 0)] = alpha_c;
                feat[(row, 3)] = alpha_c;
            }
        }
    }
    let mut p = Vec::with_capacity(h);
    let mut r = Vec::with_capacity(h);
    for step in 0..h {
        let mut tab = DMatrix::zeros(sa, s);
        let mut rew = DVector::zeros(sa);
        for st in 0..s {
            for (ai, act) in actions.iter().enumerate() {
                let row = st * a_count + ai;
                if st < h {
                    let leak = delta_p + perturbation[step][ai] + mu[step].dot(act);
                    let chain = (step + 1).min(waypoint);
                    tab[(row, sink)] += leak;
                    tab[(row, chain)] += 1.0 - leak;
                } else {
                    tab[(row, sink)] = 1.0;
                }
                if st == sink {
                    rew[row] = 1.0 / hf;
                }
            }
        }
        p.push(tab);
        r.push(rew);
    }
    Ok(MultiTaskMdp {
        s,
        a: a_count,
        h,
        m: 1,
        d,
        k: 1,
        seed,
        phi: vec![feat; h],
        p: vec![p],
        r: vec![r],
        start: vec![0],
        param_bound: 4.0,
        reward_noise: RewardNoise::Zero,
        nominal_ibe: 2.0 * zeta,
        hard: Some(HardMdpInfo { delta_p, gap, alpha_c, beta_c, mu, perturbation, actions, zeta }),
    })
}

impl MultiTaskMdp {
    pub fn sa(&self, s: usize, a: usize) -> usize {
        s * self.a + a
    }

    pub fn feature(&self, h: usize, s: usize, a: usize) -> DVector<f64> {
        self.phi[h].row(self.sa(s, a)).transpose()
    }

    /// `r + P max_a q_next`; `q_next = None` stands for the zero function
    /// after the last step.
    pub fn bellman_backup(&self, i: usize, h: usize, q_next: Option<&DVector<f64>>) -> DVector<f64> {
        match q_next {
            None => self.r[i][h].clone(),
            Some(q) => &self.r[i][h] + &self.p[i][h] * self.state_values(q),
        }
    }

    /// `max_a q(s, a)` for every state.
    pub fn state_values(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.s, |s, _| (0..self.a).map(|a| q[self.sa(s, a)]).fold(f64::NEG_INFINITY, f64::max))
    }

    /// Optimal `Q*_h` for `h = 0..H` and `V*_h` for `h = 0..=H` (last is zero).
    pub fn exact_optimal_values(&self, i: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut q = vec![DVector::zeros(self.s * self.a); self.h];
        let mut v = vec![DVector::zeros(self.s); self.h + 1];
        for h in (0..self.h).rev() {
            q[h] = &self.r[i][h] + &self.p[i][h] * &v[h + 1];
            v[h] = self.state_values(&q[h]);
        }
        (q, v)
    }

    pub fn optimal_start_value(&self, i: usize) -> f64 {
        self.exact_optimal_values(i).1[0][self.start[i]]
    }

    /// Values of a deterministic policy `policy[h][s]`.
    pub fn evaluate_policy(&self, i: usize, policy: &[Vec<usize>]) -> Vec<DVector<f64>> {
        let mut v = vec![DVector::zeros(self.s); self.h + 1];
        for h in (0..self.h).rev() {
            let q = &self.r[i][h] + &self.p[i][h] * &v[h + 1];
            v[h] = DVector::from_fn(self.s, |s, _| q[self.sa(s, policy[h][s])]);
        }
        v
    }

    /// One environment step: `(reward, next_state)`.
    pub fn step<R: Rng + ?Sized>(&self, i: usize, h: usize, s: usize, a: usize, rng: &mut R) -> (f64, usize) {
        let row = self.sa(s, a);
        let mean = self.r[i][h][row];
        let reward = match self.reward_noise {
            RewardNoise::Zero => mean,
            RewardNoise::Bounded => {
                let b = mean.min(1.0 / self.h as f64 - mean).max(0.0);
                if b > 0.0 {
                    mean + rng.random_range(-b..=b)
                } else {
                    mean
                }
            }
        };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = self.s - 1;
        for sp in 0..self.s {
            acc += self.p[i][h][(row, sp)];
            if u < acc {
                next = sp;
                break;
            }
        }
        (reward, next)
    }

    pub fn rollout<R: Rng + ?Sized>(&self, i: usize, policy: &[Vec<usize>], rng: &mut R) -> Vec<Transition> {
        let mut s = self.start[i];
        let mut out = Vec::with_capacity(self.h);
        for (h, step_policy) in policy.iter().enumerate().take(self.h) {
            let a = step_policy[s];
            let (reward, next) = self.step(i, h, s, a, rng);
            out.push(Transition { h, s, a, reward, next });
            s = next;
        }
        out
    }
}

/// Empirical inherent Bellman error: for each step and sample, draws
/// next-step parameters that are jointly rank `k` with each column in the
/// unit ball (so `|Q| <= 1`), backs them up exactly, fits the backups with
/// the joint low-rank least-squares solver over every state-action pair, and
/// returns the largest sup-norm residual seen.
pub fn estimate_ibe(mdp: &MultiTaskMdp, samples: usize, seed: u64) -> f64 {
    let (d, k, m) = (mdp.d, mdp.k, mdp.m);
    let mut worst: f64 = 0.0;
    let opts = SolverOptions { restarts: 2, seed, ..SolverOptions::default() };
    for h in 0..mdp.h {
        let n = if h + 1 == mdp.h { 1 } else { samples.max(1) };
        for sample in 0..n {
            let mut r = rng::stream(seed, "ibe", h as u64, sample as u64);
            let targets: Vec<DVector<f64>> = if h + 1 == mdp.h {
                (0..m).map(|i| mdp.bellman_backup(i, h, None)).collect()
            } else {
                let b = random_orthonormal(d, k, &mut r);
                (0..m)
                    .map(|i| {
                        let dir = DVector::from_fn(k, |_, _| r.sample::<f64, _>(StandardNormal));
                        let rad = r.random::<f64>().powf(1.0 / k as f64);
                        let w = dir.normalize() * rad;
                        let q_next = &mdp.phi[h + 1] * (&b * w);
                        mdp.bellman_backup(i, h, Some(&q_next))
                    })
                    .collect()
            };
            let x = mdp.phi[h].transpose();
            let stats: Vec<TaskStats> =
                targets.iter().map(|y| TaskStats::from_history(&x, y).expect("finite tables")).collect();
            let sol = solve_lowrank_stats(&stats, k, f64::INFINITY, &opts, None).expect("valid fit");
            for (i, y) in targets.iter().enumerate() {
                let fit = &mdp.phi[h] * sol.theta_col(i);
                worst = worst.max((fit - y).amax());
            }
        }
    }
    worst
}
