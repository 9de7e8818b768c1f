//! Experiment configuration, parallel suite execution, CSV output, slope
//! estimation and coverage studies.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::bandit_algos::{run_bandit, BanditAlgorithm, BanditRunOptions};
use crate::bandit_env::{gen_instance, ActionModel, BanditInstance, InstanceKind, InstanceSpec, NoiseModel, RegretTrace};
use crate::rl_algos::{run_lsvi, LsviOptions, RlAlgorithm, SolverMode};
use crate::rl_env::{gen_hard_mdp, gen_linear_mdp, HardMdpSpec, LinearMdpSpec, MultiTaskMdp, RewardNoise};

pub const CSV_HEADER: &str = "run_id,algorithm,seed,t,cum_regret,step_regret,membership_stat,radius,wall_ms";

/// Environment variable that replaces the configured base seed.
pub const SEED_ENV: &str = "MTLR_SEED";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    /// Process exit code: 2 for validation problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    Bandit,
    Rl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MdpKind {
    Linear,
    Hard,
}

/// One experiment: a set of algorithms run over a range of seeds.
/// Dimension fields left out take setting-specific defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub setting: Setting,
    pub d: Option<usize>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    /// Steps (bandit) or episodes (RL).
    pub horizon: Option<usize>,
    pub algorithms: Option<Vec<String>>,
    pub delta: f64,
    pub lambda: f64,
    pub radius_scale: f64,
    pub seed: u64,
    pub seeds: usize,
    pub checkpoints: Vec<usize>,
    pub workers: usize,
    pub output: Option<String>,
    pub solver_restarts: Option<usize>,

    pub instance_kind: InstanceKind,
    pub zeta: f64,
    pub num_actions: usize,
    pub action_model: Option<ActionModel>,
    pub noise: NoiseModel,

    pub mdp_kind: MdpKind,
    pub s: usize,
    pub a_count: usize,
    pub h: usize,
    pub reward_noise: RewardNoise,
    pub solver: SolverMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Bandit,
            d: None,
            k: None,
            m: None,
            horizon: None,
            algorithms: None,
            delta: 0.1,
            lambda: 1.0,
            radius_scale: 1.0,
            seed: 0,
            seeds: 10,
            checkpoints: Vec::new(),
            workers: 1,
            output: None,
            solver_restarts: None,
            instance_kind: InstanceKind::Exact,
            zeta: 0.0,
            num_actions: 20,
            action_model: None,
            noise: NoiseModel::Gaussian,
            mdp_kind: MdpKind::Linear,
            s: 8,
            a_count: 5,
            h: 3,
            reward_noise: RewardNoise::Bounded,
            solver: SolverMode::CoordinateAscent,
        }
    }
}

/// Algorithm of either setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnyAlgorithm {
    Bandit(BanditAlgorithm),
    Rl(RlAlgorithm),
}

impl AnyAlgorithm {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Bandit(a) => a.tag(),
            Self::Rl(a) => a.tag(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `MTLR_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| HarnessError::Config(format!("{SEED_ENV} is not an integer: {v}")))?;
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d.unwrap_or(match self.setting {
            Setting::Bandit => 10,
            Setting::Rl => 6,
        })
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or(2)
    }

    pub fn m(&self) -> usize {
        self.m.unwrap_or(match self.setting {
            Setting::Bandit => 5,
            Setting::Rl => 4,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(match self.setting {
            Setting::Bandit => 4000,
            Setting::Rl => 300,
        })
    }

    pub fn solver_restarts(&self) -> usize {
        self.solver_restarts.unwrap_or(match self.setting {
            Setting::Bandit => 5,
            Setting::Rl => 1,
        })
    }

    pub fn algorithms(&self) -> Result<Vec<AnyAlgorithm>> {
        let tags: Vec<String> = self.algorithms.clone().unwrap_or_else(|| match self.setting {
            Setting::Bandit => vec!["mtlr-oful".into(), "indep-oful".into(), "random".into()],
            Setting::Rl => vec!["mtlr-lsvi".into(), "per-task-lsvi".into(), "random".into()],
        });
        tags.iter()
            .map(|t| {
                let quoted = format!("\"{t}\"");
                match self.setting {
                    Setting::Bandit => serde_json::from_str::<BanditAlgorithm>(&quoted).map(AnyAlgorithm::Bandit),
                    Setting::Rl => serde_json::from_str::<RlAlgorithm>(&quoted).map(AnyAlgorithm::Rl),
                }
                .map_err(|_| HarnessError::Config(format!("unknown algorithm {t:?} for this setting")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let (d, k, m, t) = (self.d(), self.k(), self.m(), self.horizon());
        if d == 0 || k == 0 || m == 0 || t == 0 {
            return bad("d, k, M and horizon must be positive".into());
        }
        if k > d {
            return bad(format!("rank k={k} exceeds dimension d={d}"));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if !(self.lambda > 0.0) || !(self.radius_scale >= 0.0) || !self.radius_scale.is_finite() {
            return bad("lambda must be positive and radius_scale non-negative".into());
        }
        if self.seeds == 0 || self.workers == 0 {
            return bad("seeds and workers must be positive".into());
        }
        if !(self.zeta >= 0.0) || !self.zeta.is_finite() {
            return bad(format!("zeta must be non-negative, got {}", self.zeta));
        }
        if self.checkpoints.iter().any(|&c| c == 0 || c > t) {
            return bad(format!("checkpoints must lie in 1..={t}"));
        }
        let algos = self.algorithms()?;
        if algos.is_empty() {
            return bad("no algorithms".into());
        }
        match self.setting {
            Setting::Bandit => {
                if self.num_actions == 0 {
                    return bad("num_actions must be positive".into());
                }
                if self.instance_kind == InstanceKind::GroupedHard && m % k != 0 {
                    return bad(format!("grouped-hard needs k | M, got M={m}, k={k}"));
                }
            }
            Setting::Rl => match self.mdp_kind {
                MdpKind::Linear => {
                    if self.s == 0 || self.a_count == 0 || self.h == 0 || d > self.s * self.a_count {
                        return bad("need positive S, A, H and d <= S*A".into());
                    }
                }
                MdpKind::Hard => {
                    self.hard_spec(0).and_then(|s| gen_hard_mdp(&s).map_err(|e| HarnessError::Config(e.to_string())))?;
                }
            },
        }
        if self.solver == SolverMode::ExactTiny && (d > 4 || k != 1 || m > 3 || self.h > 3) {
            return bad("exact-tiny solver needs d <= 4, k = 1, M <= 3, H <= 3".into());
        }
        Ok(())
    }

    pub fn instance_spec(&self, seed: u64) -> InstanceSpec {
        let mut spec = InstanceSpec::new(self.d(), self.k(), self.m(), self.instance_kind, seed);
        spec.zeta = self.zeta;
        spec.num_actions = self.num_actions;
        if let Some(a) = self.action_model {
            spec.action_model = a;
        }
        spec.noise = self.noise;
        spec
    }

    fn hard_spec(&self, seed: u64) -> Result<HardMdpSpec> {
        Ok(HardMdpSpec { d: self.d(), h: self.h, t: self.horizon(), zeta: self.zeta, a_count: self.a_count, seed })
    }

    pub fn build_mdp(&self, seed: u64) -> Result<MultiTaskMdp> {
        match self.mdp_kind {
            MdpKind::Linear => gen_linear_mdp(&LinearMdpSpec {
                s: self.s,
                a: self.a_count,
                h: self.h,
                m: self.m(),
                d: self.d(),
                k: self.k(),
                seed,
                reward_noise: self.reward_noise,
            }),
            MdpKind::Hard => gen_hard_mdp(&self.hard_spec(seed)?),
        }
        .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn bandit_options(&self) -> BanditRunOptions {
        BanditRunOptions {
            horizon: self.horizon(),
            delta: self.delta,
            lambda: self.lambda,
            radius_scale: self.radius_scale,
            checkpoints: self.checkpoints.clone(),
            solver_restarts: self.solver_restarts(),
        }
    }

    pub fn lsvi_options(&self) -> LsviOptions {
        LsviOptions {
            k: self.k(),
            horizon: self.horizon(),
            delta: self.delta,
            lambda: self.lambda,
            radius_scale: self.radius_scale,
            mode: self.solver,
            solver_restarts: self.solver_restarts(),
            ..LsviOptions::default()
        }
    }
}

/// Bandit grid used for the headline experiments: `d` in {10, 20, 30},
/// `M` in {5, 10, 20}, `k = 2`, `T = 4000`, 20 actions per step.
pub fn default_bandit_grid() -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for d in [10, 20, 30] {
        for m in [5, 10, 20] {
            out.push(ExperimentConfig { d: Some(d), m: Some(m), ..ExperimentConfig::default() });
        }
    }
    out
}

pub fn default_rl_config() -> ExperimentConfig {
    ExperimentConfig { setting: Setting::Rl, ..ExperimentConfig::default() }
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: usize,
    pub algorithm: &'static str,
    pub seed: u64,
    pub trace: RegretTrace,
}

pub fn run_one(cfg: &ExperimentConfig, algo: AnyAlgorithm, seed: u64) -> Result<RegretTrace> {
    match algo {
        AnyAlgorithm::Bandit(a) => {
            let inst = gen_instance(&cfg.instance_spec(seed)).map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok(run_bandit(&inst, a, &cfg.bandit_options()))
        }
        AnyAlgorithm::Rl(a) => {
            let mdp = cfg.build_mdp(seed)?;
            Ok(run_lsvi(&mdp, a, &cfg.lsvi_options(), cfg.horizon(), seed))
        }
    }
}

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_float(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

pub fn write_run_rows<W: Write>(out: &mut W, run: &RunResult) -> std::io::Result<()> {
    let tr = &run.trace;
    for t in 0..tr.cumulative.len() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            run.run_id,
            run.algorithm,
            run.seed,
            t + 1,
            fmt_float(tr.cumulative[t]),
            fmt_float(tr.step_regret[t]),
            opt_float(tr.membership[t]),
            opt_float(tr.radius[t]),
            fmt_float(tr.wall_ms[t]),
        )?;
    }
    Ok(())
}

/// Runs every (seed, algorithm) pair on `workers` threads. Run ids are
/// `seed_index * |algorithms| + algorithm_index`; rows reach `sink` in run-id
/// order as soon as every earlier run has finished, so the output is the
/// same for any worker count.
pub fn run_suite<W: Write>(cfg: &ExperimentConfig, workers: usize, mut sink: Option<&mut W>) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let algos = cfg.algorithms()?;
    let jobs: Vec<(usize, AnyAlgorithm, u64)> = (0..cfg.seeds)
        .flat_map(|si| algos.iter().enumerate().map(move |(ai, &a)| (si, ai, a)))
        .map(|(si, ai, a)| (si * algos.len() + ai, a, cfg.seed + si as u64))
        .collect();
    if let Some(w) = sink.as_mut() {
        writeln!(w, "{CSV_HEADER}")?;
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Result<RunResult>>();
    let mut results = Vec::with_capacity(jobs.len());
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers.max(1).min(jobs.len().max(1)) {
            let tx = tx.clone();
            let jobs = &jobs;
            let next = &next;
            scope.spawn(move || loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(run_id, algo, seed)) = jobs.get(j) else { break };
                let res = run_one(cfg, algo, seed).map(|trace| RunResult { run_id, algorithm: algo.tag(), seed, trace });
                if tx.send(res).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, RunResult> = BTreeMap::new();
        let mut emit = 0;
        for res in rx {
            let run = res?;
            pending.insert(run.run_id, run);
            while let Some(run) = pending.remove(&emit) {
                if let Some(w) = sink.as_mut() {
                    write_run_rows(w, &run)?;
                    w.flush()?;
                }
                results.push(run);
                emit += 1;
            }
        }
        Ok(())
    })?;
    if results.len() != jobs.len() {
        return Err(HarnessError::Runtime("some runs did not finish".into()));
    }
    Ok(results)
}

/// `(algorithm, mean, std)` of the final cumulative regret.
pub fn summary(results: &[RunResult]) -> Vec<(String, f64, f64)> {
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in results {
        by.entry(r.algorithm).or_default().push(r.trace.final_regret());
    }
    by.into_iter()
        .map(|(a, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            (a.to_string(), mean, var.sqrt())
        })
        .collect()
}

/// Mean cumulative regret curve of one algorithm across runs.
pub fn mean_curve(results: &[RunResult], algorithm: &str) -> Vec<f64> {
    let runs: Vec<&RunResult> = results.iter().filter(|r| r.algorithm == algorithm).collect();
    let Some(first) = runs.first() else { return Vec::new() };
    let len = first.trace.cumulative.len();
    let mut out = vec![0.0; len];
    for r in &runs {
        for (o, c) in out.iter_mut().zip(&r.trace.cumulative) {
            *o += c / runs.len() as f64;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Slopes and coverage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlopeEstimate {
    Slope(f64),
    /// Cumulative regret is zero throughout the window.
    Exact,
}

/// Least-squares slope of `ln cum` against `ln t` over `t` in `[lo, hi]`
/// (1-based). Points with zero cumulative regret are skipped.
pub fn estimate_slope(cumulative: &[f64], lo: usize, hi: usize) -> Result<SlopeEstimate> {
    if lo < 2 || hi <= lo || hi > cumulative.len() {
        return Err(HarnessError::Config(format!("window [{lo}, {hi}] invalid for {} points", cumulative.len())));
    }
    let pts: Vec<(f64, f64)> =
        (lo..=hi).filter(|&t| cumulative[t - 1] > 0.0).map(|t| ((t as f64).ln(), cumulative[t - 1].ln())).collect();
    if pts.len() < 2 {
        return Ok(SlopeEstimate::Exact);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(SlopeEstimate::Slope(sxy / sxx))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub covered: usize,
    pub trials: usize,
    pub checkpoints: Vec<usize>,
}

impl CoverageReport {
    pub fn coverage(&self) -> f64 {
        self.covered as f64 / self.trials as f64
    }
}

/// Runs the multi-task learner on `seeds` instances and counts the runs in
/// which the joint confidence set contains the truth at every checkpoint.
/// Without configured checkpoints `{1, T/4, T/2, T}` is used.
pub fn coverage_study(cfg: &ExperimentConfig) -> Result<CoverageReport> {
    if cfg.setting != Setting::Bandit {
        return Err(HarnessError::Config("coverage studies need the bandit setting".into()));
    }
    let mut cfg = cfg.clone();
    let t = cfg.horizon();
    if cfg.checkpoints.is_empty() {
        let mut c = vec![1, t / 4, t / 2, t];
        c.retain(|&x| x >= 1);
        c.dedup();
        cfg.checkpoints = c;
    }
    cfg.validate()?;
    let mut covered = 0;
    for si in 0..cfg.seeds {
        let trace = run_one(&cfg, AnyAlgorithm::Bandit(BanditAlgorithm::MtlrOful), cfg.seed + si as u64)?;
        let inside = cfg.checkpoints.iter().all(|&c| match (trace.membership[c - 1], trace.radius[c - 1]) {
            (Some(stat), Some(r)) => stat <= r,
            _ => false,
        });
        if inside {
            covered += 1;
        }
    }
    Ok(CoverageReport { covered, trials: cfg.seeds, checkpoints: cfg.checkpoints })
}

/// Mean cumulative regret per step for one algorithm from CSV rows.
pub fn curve_from_csv(text: &str, algorithm: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(HarnessError::Config("unexpected CSV header".into()));
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(HarnessError::Config(format!("malformed row: {line}")));
        }
        if f[1] != algorithm {
            continue;
        }
        let t: usize = f[3].parse().map_err(|_| HarnessError::Config(format!("bad step in row: {line}")))?;
        let c: f64 = f[4].parse().map_err(|_| HarnessError::Config(format!("bad regret in row: {line}")))?;
        let e = sums.entry(t).or_insert((0.0, 0));
        e.0 += c;
        e.1 += 1;
    }
    if sums.is_empty() {
        return Err(HarnessError::Config(format!("no rows for algorithm {algorithm}")));
    }
    Ok(sums.values().map(|(s, n)| s / *n as f64).collect())
}

// ---------------------------------------------------------------------------
// Instance export
// ---------------------------------------------------------------------------

pub fn bandit_instance_json(inst: &BanditInstance) -> serde_json::Value {
    let s = &inst.spec;
    let theta: Vec<Vec<f64>> = (0..s.m).map(|i| inst.theta.column(i).iter().copied().collect()).collect();
    json!({
        "d": s.d, "k": s.k, "M": s.m, "kind": s.kind, "zeta": s.zeta, "A": s.num_actions, "seed": s.seed,
        "theta": theta,
    })
}

pub fn mdp_json(mdp: &MultiTaskMdp, kind: MdpKind) -> serde_json::Value {
    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
    };
    json!({
        "kind": kind, "S": mdp.s, "A": mdp.a, "H": mdp.h, "M": mdp.m, "d": mdp.d, "k": mdp.k, "seed": mdp.seed,
        "start": mdp.start, "param_bound": mdp.param_bound, "nominal_ibe": mdp.nominal_ibe,
        "phi": mdp.phi.iter().map(rows).collect::<Vec<_>>(),
        "P": mdp.p.iter().map(|pi| pi.iter().map(rows).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "r": mdp.r.iter().map(|ri| ri.iter().map(|v| v.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>()).collect::<Vec<_>>(),
    })
}
