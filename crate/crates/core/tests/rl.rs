use mtlr_core::confidence::rl_radii;
use mtlr_core::rl_algos::{run_lsvi, LsviOptions, MtlrLsvi, RlAlgorithm, SolverMode};
use mtlr_core::rl_env::{gen_hard_mdp, gen_linear_mdp, HardMdpSpec, LinearMdpSpec, MultiTaskMdp, RewardNoise};
use mtlr_core::rng::stream;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

#[allow(clippy::too_many_arguments)]
fn linear(s: usize, a: usize, h: usize, m: usize, d: usize, k: usize, seed: u64, noise: RewardNoise) -> MultiTaskMdp {
    gen_linear_mdp(&LinearMdpSpec { s, a, h, m, d, k, seed, reward_noise: noise }).unwrap()
}

fn hard(seed: u64) -> MultiTaskMdp {
    gen_hard_mdp(&HardMdpSpec { d: 10, h: 10, t: 1000, zeta: 0.01, a_count: 2, seed }).unwrap()
}

fn greedy_policy(mdp: &MultiTaskMdp, q: &[DVector<f64>]) -> Vec<Vec<usize>> {
    q.iter()
        .map(|qh| {
            (0..mdp.s)
                .map(|s| (0..mdp.a).max_by(|&x, &y| qh[mdp.sa(s, x)].total_cmp(&qh[mdp.sa(s, y)]).then(y.cmp(&x))).unwrap())
                .collect()
        })
        .collect()
}

fn monte_carlo(mdp: &MultiTaskMdp, i: usize, policy: &[Vec<usize>], n: u64, tag: &str) -> (f64, f64) {
    let returns: Vec<f64> =
        (0..n).map(|ep| mdp.rollout(i, policy, &mut stream(1, tag, i as u64, ep)).iter().map(|t| t.reward).sum()).collect();
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

#[test]
fn rank_one_tasks_share_reward_direction() {
    let mdp = linear(6, 3, 3, 3, 5, 1, 4, RewardNoise::Zero);
    for h in 0..mdp.h {
        let phi = &mdp.phi[h];
        let normal = (phi.transpose() * phi).pseudo_inverse(1e-12).unwrap();
        let cols: Vec<DVector<f64>> = (0..mdp.m).map(|i| &normal * (phi.transpose() * &mdp.r[i][h])).collect();
        let stacked = DMatrix::from_columns(&cols);
        for (i, c) in cols.iter().enumerate() {
            assert!((phi * c - &mdp.r[i][h]).amax() < 1e-10, "rewards are not linear");
        }
        let sv = stacked.singular_values();
        assert!(sv[1] <= 1e-10, "second singular value {}", sv[1]);
    }
}

#[test]
fn sampled_transitions_follow_the_table() {
    let mdp = linear(5, 2, 2, 1, 4, 1, 7, RewardNoise::Zero);
    let (h, s, a) = (1, 2, 1);
    let n = 10_000;
    let mut counts = vec![0usize; mdp.s];
    let mut r = stream(3, "transitions", 0, 0);
    for _ in 0..n {
        let (reward, next) = mdp.step(0, h, s, a, &mut r);
        assert_eq!(reward, mdp.r[0][h][mdp.sa(s, a)]);
        counts[next] += 1;
    }
    for (sp, &c) in counts.iter().enumerate() {
        let p = mdp.p[0][h][(mdp.sa(s, a), sp)];
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((c as f64 / n as f64 - p).abs() <= 4.0 * sigma + 1e-12, "state {sp}");
    }
}

#[test]
fn deterministic_row_fixes_next_state() {
    let mut mdp = linear(4, 2, 2, 1, 3, 1, 0, RewardNoise::Bounded);
    let row = mdp.sa(1, 0);
    mdp.p[0][0].row_mut(row).fill(0.0);
    mdp.p[0][0][(row, 3)] = 1.0;
    let mut r = stream(0, "det", 0, 0);
    for _ in 0..100 {
        assert_eq!(mdp.step(0, 0, 1, 0, &mut r).1, 3);
    }
    let q_next = DVector::from_fn(mdp.s * mdp.a, |j, _| j as f64);
    let backup = mdp.bellman_backup(0, 0, Some(&q_next));
    let best_at_3 = (0..mdp.a).map(|a| q_next[mdp.sa(3, a)]).fold(f64::MIN, f64::max);
    assert!((backup[row] - mdp.r[0][0][row] - best_at_3).abs() < 1e-12);
}

#[test]
fn backup_matches_direct_summation() {
    let mdp = linear(6, 3, 3, 2, 5, 2, 11, RewardNoise::Zero);
    let mut r = stream(11, "backup", 0, 0);
    let q = DVector::from_fn(mdp.s * mdp.a, |_, _| r.random_range(-1.0..1.0));
    for i in 0..mdp.m {
        let b = mdp.bellman_backup(i, 1, Some(&q));
        for s in 0..mdp.s {
            for a in 0..mdp.a {
                let row = mdp.sa(s, a);
                let mut direct = mdp.r[i][1][row];
                for sp in 0..mdp.s {
                    let v = (0..mdp.a).map(|ap| q[mdp.sa(sp, ap)]).fold(f64::NEG_INFINITY, f64::max);
                    direct += mdp.p[i][1][(row, sp)] * v;
                }
                assert!((b[row] - direct).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn value_iteration_edge_cases() {
    let one_step = linear(4, 3, 1, 2, 4, 1, 5, RewardNoise::Zero);
    for i in 0..2 {
        let (_, v) = one_step.exact_optimal_values(i);
        for (s, &value) in v[0].iter().enumerate() {
            let best = (0..one_step.a).map(|a| one_step.r[i][0][one_step.sa(s, a)]).fold(f64::MIN, f64::max);
            assert_eq!(value, best);
        }
    }
    let mut silent = linear(4, 2, 3, 1, 3, 1, 6, RewardNoise::Zero);
    for r in silent.r[0].iter_mut() {
        r.fill(0.0);
    }
    let (_, v) = silent.exact_optimal_values(0);
    assert!(v.iter().all(|vh| vh.iter().all(|&x| x == 0.0)));
    let any_policy = vec![vec![1; silent.s]; silent.h];
    assert!(silent.evaluate_policy(0, &any_policy).iter().all(|vh| vh.iter().all(|&x| x == 0.0)));
}

#[test]
fn greedy_policy_attains_optimal_values() {
    for mdp in [linear(6, 3, 3, 2, 5, 2, 1, RewardNoise::Zero), hard(2)] {
        for i in 0..mdp.m {
            let (q, v) = mdp.exact_optimal_values(i);
            let vp = mdp.evaluate_policy(i, &greedy_policy(&mdp, &q));
            for h in 0..mdp.h {
                assert!((&vp[h] - &v[h]).amax() < 1e-12);
            }
        }
    }
}

#[test]
fn random_policy_value_matches_monte_carlo_on_hard_mdp() {
    let mdp = hard(3);
    let mut r = stream(3, "random-policy", 0, 0);
    let policy: Vec<Vec<usize>> = (0..mdp.h).map(|_| (0..mdp.s).map(|_| r.random_range(0..mdp.a)).collect()).collect();
    let v = mdp.evaluate_policy(0, &policy)[0][mdp.start[0]];
    let (mean, se) = monte_carlo(&mdp, 0, &policy, 10_000, "mc-random");
    assert!((mean - v).abs() <= 3.0 * se, "{mean} vs {v} (se {se})");
}

#[test]
fn zero_budget_is_plain_least_squares() {
    let mdp = linear(5, 3, 2, 2, 4, 1, 8, RewardNoise::Bounded);
    let opts = LsviOptions { k: 1, horizon: 10, radius_scale: 0.0, ..LsviOptions::default() };
    let mut learner = MtlrLsvi::new(&mdp, opts, 8);
    assert_eq!(learner.alpha, 0.0);
    let first = learner.global_optimize(&mdp);
    assert!(first.theta_hat.iter().all(|t| t.iter().all(|&x| x == 0.0)));
    for ep in 0..5 {
        let sol = learner.global_optimize(&mdp);
        for h in 0..mdp.h {
            assert_eq!(sol.theta_bar[h], sol.theta_hat[h]);
        }
        for (i, pol) in MtlrLsvi::policies(&mdp, &sol).iter().enumerate() {
            for tr in mdp.rollout(i, pol, &mut stream(8, "zero-budget", i as u64, ep)) {
                learner.record(&mdp, i, &tr);
            }
        }
        learner.episodes += 1;
    }
}

#[test]
fn exact_tiny_is_tight_with_spanning_noiseless_data() {
    // One step, so backup targets are the noiseless rewards themselves.
    let mdp = linear(5, 3, 1, 2, 4, 1, 12, RewardNoise::Zero);
    let opts = LsviOptions { k: 1, horizon: 50, radius_scale: 1e-9, mode: SolverMode::ExactTiny, ..LsviOptions::default() };
    let mut learner = MtlrLsvi::new(&mdp, opts, 12);
    let mut r = stream(12, "spanning", 0, 0);
    for _ in 0..5 {
        for i in 0..mdp.m {
            for s in 0..mdp.s {
                for a in 0..mdp.a {
                    let (reward, next) = mdp.step(i, 0, s, a, &mut r);
                    learner.record(&mdp, i, &mtlr_core::rl_env::Transition { h: 0, s, a, reward, next });
                }
            }
        }
    }
    learner.episodes = 5;
    let sol = learner.global_optimize(&mdp);
    let vstar: f64 = (0..mdp.m).map(|i| mdp.optimal_start_value(i)).sum();
    assert!((sol.objective - vstar).abs() <= 1e-3, "{} vs {vstar}", sol.objective);
}

#[test]
fn exact_tiny_regret_vanishes_without_noise() {
    let mdp = linear(5, 3, 1, 2, 4, 1, 13, RewardNoise::Zero);
    let opts = LsviOptions { k: 1, horizon: 40, mode: SolverMode::ExactTiny, ..LsviOptions::default() };
    let tr = run_lsvi(&mdp, RlAlgorithm::MtlrLsvi, &opts, 40, 13);
    let tail = &tr.step_regret[30..];
    assert!(tail.iter().all(|&x| x <= 1e-3), "{tail:?}");
}

#[test]
fn per_task_learner_is_the_joint_learner_at_full_rank() {
    let mdp = linear(5, 3, 2, 1, 4, 2, 14, RewardNoise::Bounded);
    let opts = LsviOptions { k: 4, horizon: 15, ..LsviOptions::default() };
    let joint = run_lsvi(&mdp, RlAlgorithm::MtlrLsvi, &opts, 15, 14);
    let single = run_lsvi(&mdp, RlAlgorithm::PerTaskLsvi, &opts, 15, 14);
    for (a, b) in joint.step_regret.iter().zip(&single.step_regret) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn full_rank_single_task_radius_exceeds_shared_share() {
    let (m, k, d, t) = (10, 2, 30, 300);
    let shared = rl_radii(m, k, d, t, 0.1, 0.0, 1.0, 1.0).unwrap();
    let single = rl_radii(1, d, d, t, 0.1 / m as f64, 0.0, 1.0, 1.0).unwrap();
    assert!(single.alpha > shared.alpha / m as f64, "{} vs {}", single.alpha, shared.alpha / m as f64);
}
