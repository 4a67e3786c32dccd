//! Checks shared by the per-suite integration tests and the acceptance
//! runner. Each returns a short summary on success and a reason on failure.

#![allow(dead_code)]

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Vector3, Vector4};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recpref_core::approximator::{finite_difference, max_relative_error, Activation};
use recpref_core::config::{Mode, RunConfig};
use recpref_core::envs::{circle_tangent, shaped_reward, ActionChannels, CircleSpec, EnvKind, ShapedRewardWeights};
use recpref_core::metrics::AgreementMatrix;
use recpref_core::orchestrator::{run_train, RunContext};
use recpref_core::ppo::{gae, intrinsic_entropy_reward, intrinsic_rewards_batch, ppo_loss_and_grad, value_net, GaussianPolicy, MiniBatch, PpoTrainer};
use recpref_core::preference::{
    extract_segments, pair_disagreement, pair_random, synthetic_label, Label, PairInputs, PreferenceRecord, Segment, JudgeKind,
};
use recpref_core::quad_dynamics::{self, mechanical_energy, CtbrCommand, QuadParams, QuadState, GRAVITY};
use recpref_core::reward_model::{
    aggregate_noisy, loss_ce, loss_ce_and_grad, loss_prob_ce, loss_prob_ce_and_grad, loss_std_target, loss_std_target_and_grad,
    pref_prob_bt, pref_prob_cdf, prediction_matches, std_normal_cdf, EnsembleMode, MemberScore, PreferencePair, RewardEnsemble,
    RewardHead, SegmentRewardDist,
};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for coordinates whose true gradient is essentially 0.
const FD_FLOOR: f64 = 1e-3;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.5..1.5))
}

fn random_head(rng: &mut ChaCha8Rng, input_dim: usize) -> RewardHead {
    let hidden = [rng.gen_range(2..6), rng.gen_range(2..6)];
    let mut head = RewardHead::new(input_dim, &hidden, rng.gen(), 0).unwrap();
    // move away from the init so the std head is not uniformly saturated
    for p in head.net.as_mut_slice() {
        *p += rng.gen_range(-0.3..0.3);
    }
    head
}

fn random_pairs(rng: &mut ChaCha8Rng, input_dim: usize, n: usize) -> Vec<(Array2<f64>, Array2<f64>, f64)> {
    (0..n)
        .map(|_| {
            let (l1, l2) = (rng.gen_range(2..6), rng.gen_range(2..6));
            let target = [0.0, 0.5, 1.0][rng.gen_range(0..3)];
            (random_matrix(rng, l1, input_dim), random_matrix(rng, l2, input_dim), target)
        })
        .collect()
}

fn views(pairs: &[(Array2<f64>, Array2<f64>, f64)]) -> Vec<PreferencePair<'_>> {
    pairs
        .iter()
        .map(|(a, b, t)| PreferencePair {
            first: a.view(),
            second: b.view(),
            target: *t,
        })
        .collect()
}

fn reward_fd_error(
    head: &RewardHead,
    analytic: &[f64],
    loss: impl Fn(&RewardHead) -> f64,
) -> f64 {
    let mut work = head.clone();
    let numeric = finite_difference(head.net.as_slice(), FD_STEP, |p| {
        work.net.as_mut_slice().copy_from_slice(p);
        loss(&work)
    });
    max_relative_error(analytic, &numeric, FD_FLOOR)
}

/// Worst relative error over 20 random nets for each reward loss.
pub fn reward_gradient_errors(seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..20 {
        let input_dim = rng.gen_range(2..5);
        let head = random_head(&mut rng, input_dim);
        let data = random_pairs(&mut rng, input_dim, 4);
        let pairs = views(&data);

        let (_, g) = loss_ce_and_grad(&head, &pairs).unwrap();
        worst[0] = worst[0].max(reward_fd_error(&head, &g, |h| loss_ce(h, &pairs).unwrap()));

        let (_, g) = loss_prob_ce_and_grad(&head, &pairs).unwrap();
        worst[1] = worst[1].max(reward_fd_error(&head, &g, |h| loss_prob_ce(h, &pairs).unwrap()));

        let steps = random_matrix(&mut rng, 7, input_dim);
        let target = rng.gen_range(0.2..2.0);
        let (_, g) = loss_std_target_and_grad(&head, steps.view(), target).unwrap();
        worst[2] = worst[2].max(reward_fd_error(&head, &g, |h| loss_std_target(h, steps.view(), target).unwrap()));
    }
    worst
}

/// Worst relative error of the PPO loss gradient (policy net, log-std and
/// value net) over 20 random small problems.
pub fn ppo_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (od, ad, n) = (rng.gen_range(2..5), rng.gen_range(1..4), rng.gen_range(3..8));
        let arch = [rng.gen_range(2..6)];
        let mut policy = GaussianPolicy::new(od, ad, &arch, Activation::Tanh, rng.gen_range(-1.0..0.0), rng.gen()).unwrap();
        for p in policy.mean_net.as_mut_slice() {
            *p += rng.gen_range(-0.5..0.5);
        }
        let mut value = value_net(od, &arch, Activation::Tanh, rng.gen()).unwrap();
        for p in value.as_mut_slice() {
            *p += rng.gen_range(-0.5..0.5);
        }
        let obs = random_matrix(&mut rng, n, od);
        let actions = Array2::from_shape_fn((n, ad), |_| rng.gen_range(-0.9..0.9));
        let means = policy.mean_actions(obs.view()).unwrap();
        let old_log_probs = (0..n)
            .map(|i| {
                let a = actions.row(i).to_vec();
                let m = means.row(i).to_vec();
                recpref_core::ppo::gaussian_log_prob(&a, &m, &policy.log_std) + rng.gen_range(-0.4..0.4)
            })
            .collect();
        let batch = MiniBatch {
            obs,
            actions,
            old_log_probs,
            advantages: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            returns: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        let (clip, c_ent, vf) = (0.2, rng.gen_range(0.0..0.05), 0.5);
        let (_, grads) = ppo_loss_and_grad(&policy, &value, &batch, clip, c_ent, vf).unwrap();

        let n_net = policy.mean_net.num_params();
        let n_std = policy.log_std.len();
        let mut flat: Vec<f64> = policy.mean_net.as_slice().to_vec();
        flat.extend_from_slice(&policy.log_std);
        flat.extend_from_slice(value.as_slice());
        let mut analytic = grads.policy_net.clone();
        analytic.extend_from_slice(&grads.log_std);
        analytic.extend_from_slice(&grads.value);

        let (mut wp, mut wv) = (policy.clone(), value.clone());
        let numeric = finite_difference(&flat, FD_STEP, |p| {
            wp.mean_net.as_mut_slice().copy_from_slice(&p[..n_net]);
            wp.log_std.copy_from_slice(&p[n_net..n_net + n_std]);
            wv.as_mut_slice().copy_from_slice(&p[n_net + n_std..]);
            ppo_loss_and_grad(&wp, &wv, &batch, clip, c_ent, vf).unwrap().0.total
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, FD_FLOOR));
    }
    worst
}

pub fn gradient_suite() -> Check {
    let start = Instant::now();
    let [ce, prob, std] = reward_gradient_errors(11);
    let ppo = ppo_gradient_error(12);
    let elapsed = start.elapsed().as_secs_f64();
    let summary = format!("max rel err ce={ce:.1e} prob_ce={prob:.1e} std_target={std:.1e} ppo={ppo:.1e}, {elapsed:.1}s");
    ensure(ce <= FD_TOL && prob <= FD_TOL && std <= FD_TOL && ppo <= FD_TOL, || summary.clone())?;
    ensure(elapsed <= 60.0, || format!("too slow: {summary}"))?;
    Ok(summary)
}

// --------------------------------------------------------- preference math

/// Standard normal CDF by composite Simpson integration of the density,
/// independent of the erfc-based implementation.
pub fn simpson_cdf(z: f64) -> f64 {
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (a, n) = (0.0, 20_000);
    let h = (z - a) / n as f64;
    let mut s = pdf(a) + pdf(z);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

pub fn preference_math_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let r = rng.gen_range(-50.0..50.0);
        let s = rng.gen_range(0.01..10.0);
        ensure(pref_prob_bt(r, r) == 0.5, || format!("bt({r},{r}) != 0.5"))?;
        let d = SegmentRewardDist { mean: r, std: s };
        let e = SegmentRewardDist { mean: r, std: rng.gen_range(0.01..10.0) };
        ensure(pref_prob_cdf(&d, &e) == 0.5, || format!("cdf with equal means != 0.5 at {r}"))?;

        let (r1, r2) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        let anti_bt = (pref_prob_bt(r1, r2) + pref_prob_bt(r2, r1) - 1.0).abs();
        let (a, b) = (
            SegmentRewardDist { mean: r1, std: rng.gen_range(0.1..5.0) },
            SegmentRewardDist { mean: r2, std: rng.gen_range(0.1..5.0) },
        );
        let anti_cdf = (pref_prob_cdf(&a, &b) + pref_prob_cdf(&b, &a) - 1.0).abs();
        ensure(anti_bt <= 1e-12 && anti_cdf <= 1e-12, || format!("antisymmetry violated: {anti_bt:e} {anti_cdf:e}"))?;
    }

    let phi1 = std_normal_cdf(1.0);
    let oracle = simpson_cdf(1.0);
    ensure((phi1 - 0.841345).abs() <= 1e-6 && (phi1 - oracle).abs() <= 1e-9, || format!("Phi(1)={phi1}, oracle {oracle}"))?;

    let dist = SegmentRewardDist::from_steps(&[1.0, 2.0], &[3.0, 4.0]);
    ensure(dist.std == 5.0 && dist.mean == 3.0, || format!("segment distribution {dist:?}"))?;

    // with one shared fixed std, CDF and BT order pairs identically
    let sigma = 1.7;
    for _ in 0..1000 {
        // kept below saturation so both likelihoods stay distinguishable
        let sums: Vec<f64> = (0..4).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let d = |m: f64| SegmentRewardDist { mean: m, std: sigma };
        let (c1, c2) = (pref_prob_cdf(&d(sums[0]), &d(sums[1])), pref_prob_cdf(&d(sums[2]), &d(sums[3])));
        let (b1, b2) = (pref_prob_bt(sums[0], sums[1]), pref_prob_bt(sums[2], sums[3]));
        ensure(c1.total_cmp(&c2) == b1.total_cmp(&b2), || {
            format!("ordering differs for sums {sums:?}: cdf {c1} {c2} bt {b1} {b2}")
        })?;
    }
    Ok(format!("Phi(1)={phi1:.7} (oracle {oracle:.7}), 1000 antisymmetry and ordering cases"))
}

// ------------------------------------------------------------- aggregation

pub fn aggregation_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for c in [-3.25, 0.0, 0.7, 12.5] {
        let agg = aggregate_noisy(&[c; 5], &mut rng);
        ensure(agg == c, || format!("agreeing members {c} gave {agg}"))?;
    }
    // members with population std exactly 1
    let members = [-1.0, 1.0, -1.0, 1.0];
    let mean = 0.0;
    let n = 1_000_000;
    let mut total = 0.0;
    for _ in 0..n {
        let a = aggregate_noisy(&members, &mut rng);
        ensure(a >= mean, || format!("aggregate {a} below member mean"))?;
        total += a - mean;
    }
    let bonus = total / n as f64;
    let expected = (2.0 / std::f64::consts::PI).sqrt();
    ensure((bonus - expected).abs() <= 1e-2, || format!("bonus {bonus} vs {expected}"))?;
    Ok(format!("empirical bonus {bonus:.4} vs {expected:.4} over 10^6 draws"))
}

// ----------------------------------------------------------- REC mechanics

pub fn planar_inputs_dim() -> usize {
    8
}

fn synthetic_segment(rng: &mut ChaCha8Rng, id: u64, len: usize) -> Segment {
    let observations: Vec<Vec<f64>> = (0..len).map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let actions: Vec<Vec<f64>> = (0..len).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    Segment {
        id,
        episode_id: id,
        origin_epoch: 0,
        start: 0,
        observations,
        actions,
        shaped_rewards: Some((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        track: Vec::new(),
    }
}

fn small_ensemble(seed: u64) -> RewardEnsemble {
    let mut cfg = RunConfig::defaults_for(EnvKind::Planar).ensemble;
    cfg.n_ensemble = 5;
    cfg.d_hidden = 6;
    cfg.n_layers = 1;
    let mut ens = RewardEnsemble::new(planar_inputs_dim(), &cfg, EnsembleMode::ProbabilisticRec, seed).unwrap();
    ens.trainings = 1;
    ens
}

/// Greedy reference: repeatedly scan every unused pair for the highest
/// disagreement, computing member returns step by step.
fn disagreement_oracle(pool: &[Segment], ens: &RewardEnsemble, k: usize) -> Vec<(u64, u64)> {
    let ret = |s: &Segment, m: usize| -> f64 {
        s.observations.iter().zip(&s.actions).map(|(o, a)| ens.members[m].predict_step(o, a).unwrap().0).sum()
    };
    let returns: Vec<Vec<f64>> = pool.iter().map(|s| (0..ens.len()).map(|m| ret(s, m)).collect()).collect();
    let mut used = HashSet::new();
    let mut out = Vec::new();
    while out.len() < k {
        let mut best: Option<(usize, u64, u64)> = None;
        for i in 0..pool.len() {
            for j in 0..pool.len() {
                let (a, b) = (pool[i].id, pool[j].id);
                if a >= b || used.contains(&a) || used.contains(&b) {
                    continue;
                }
                let first = (0..ens.len()).filter(|&m| returns[i][m] > returns[j][m]).count();
                let second = (0..ens.len()).filter(|&m| returns[i][m] < returns[j][m]).count();
                let score = first.min(second);
                let better = match best {
                    None => true,
                    Some((s, ba, bb)) => score > s || (score == s && (a, b) < (ba, bb)),
                };
                if better {
                    best = Some((score, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        used.insert(a);
        used.insert(b);
        out.push((a, b));
    }
    out
}

pub fn rec_mechanics_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    // reset_worst replaces exactly the injected worst member
    for worst in 0..5 {
        let mut ens = small_ensemble(rng.gen());
        let before = ens.members.clone();
        let scores: Vec<MemberScore> = (0..5)
            .map(|i| MemberScore {
                loss: if i == worst { 9.0 } else { 0.1 + 0.01 * i as f64 },
                accuracy: 0.5,
            })
            .collect();
        let replaced = ens.reset_worst(&scores, 1, 3, 1).map_err(err)?;
        ensure(replaced == vec![worst], || format!("replaced {replaced:?}, expected [{worst}]"))?;
        for i in 0..5 {
            let changed = ens.members[i] != before[i];
            ensure(changed == (i == worst), || format!("member {i} changed={changed}"))?;
        }
    }

    // disagreement pairing against the oracle on every pool size up to 8
    let mut instances = 0;
    for n in 0..=8 {
        for _ in 0..25 {
            let ens = small_ensemble(rng.gen());
            let pool: Vec<Segment> = (0..n).map(|i| synthetic_segment(&mut rng, 100 + (i as u64) * 7 % 13, 3)).collect();
            let mut ids = HashSet::new();
            let pool: Vec<Segment> = pool.into_iter().filter(|s| ids.insert(s.id)).collect();
            let refs: Vec<&Segment> = pool.iter().collect();
            for k in 0..=pool.len() / 2 + 1 {
                let got = pair_disagreement(&refs, Some(&ens), k, &mut rng).map_err(err)?;
                let want = disagreement_oracle(&pool, &ens, k);
                ensure(got.pairs == want, || format!("n={n} k={k}: got {:?}, oracle {want:?}", got.pairs))?;
                ensure(no_reuse(&got.pairs), || format!("segment reused in {:?}", got.pairs))?;
                instances += 1;
            }
            let random = pair_random(&refs, pool.len(), &mut rng);
            ensure(no_reuse(&random.pairs), || format!("random pairing reused a segment: {:?}", random.pairs))?;
        }
    }
    Ok(format!("reset checks on 5 positions, {instances} disagreement instances match the oracle"))
}

pub fn no_reuse(pairs: &[(u64, u64)]) -> bool {
    let mut seen = HashSet::new();
    pairs.iter().all(|&(a, b)| a != b && seen.insert(a) && seen.insert(b))
}

// ------------------------------------------------------------------ oracles

fn brute_force_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| rewards[t] + if dones[t] { 0.0 } else { gamma * values[t + 1] } - values[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut w = 1.0;
            for l in t..n {
                sum += w * delta[l];
                if dones[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            sum
        })
        .collect()
}

fn brute_force_knn(query: &[f64], reference: &[Vec<f64>], k: usize) -> f64 {
    let mut d: Vec<f64> = reference
        .iter()
        .map(|r| r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    (d[k - 1] + recpref_core::ppo::KNN_EPSILON).ln()
}

pub fn oracle_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..60);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let values: Vec<f64> = (0..=n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.1)).collect();
        let (gamma, lambda) = (rng.gen_range(0.8..1.0), rng.gen_range(0.8..1.0));
        let (adv, ret) = gae(&rewards, &values, &dones, gamma, lambda).map_err(err)?;
        let oracle = brute_force_gae(&rewards, &values, &dones, gamma, lambda);
        for t in 0..n {
            worst = worst.max((adv[t] - oracle[t]).abs());
            ensure((ret[t] - adv[t] - values[t]).abs() <= 1e-12, || "returns != advantages + values".into())?;
        }
    }
    ensure(worst <= 1e-10, || format!("gae max abs error {worst:e}"))?;

    for _ in 0..100 {
        let (n, dim, k) = (rng.gen_range(6..40), rng.gen_range(1..5), rng.gen_range(1..5));
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = intrinsic_entropy_reward(&query, &points, k).ok_or("missing reward")?;
        let want = brute_force_knn(&query, &points, k);
        ensure(got == want, || format!("k-NN reward {got} vs brute force {want}"))?;

        let batch = Array2::from_shape_fn((n, dim), |(i, j)| points[i][j]);
        let all = intrinsic_rewards_batch(batch.view(), k).ok_or("missing batch reward")?;
        for i in 0..n {
            let others: Vec<Vec<f64>> = points.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| p.clone()).collect();
            let want = brute_force_knn(&points[i], &others, k);
            ensure(all[i] == want, || format!("batch k-NN reward {} vs brute force {want}", all[i]))?;
        }
    }
    Ok(format!("gae max abs err {worst:.1e} on 100 instances; k-NN exact on 100 point sets"))
}

// ---------------------------------------------------------------- simulator

pub fn simulator_suite() -> Check {
    let dt = 0.004;

    // free fall: motors off, no drag
    let mut params = QuadParams::default();
    params.drag_coeff = Vector3::zeros();
    let mut s = QuadState::at_rest(Vector3::new(0.0, 0.0, 10.0), 0.0);
    let off = CtbrCommand::new(0.0, Vector3::zeros());
    for _ in 0..250 {
        s = quad_dynamics::step(&s, &off, &params, dt).map_err(err)?;
    }
    let fall = s.position.z - 10.0;
    let expected = -0.5 * GRAVITY;
    let fall_err = ((fall - expected) / expected).abs();
    ensure(fall_err <= 1e-3, || format!("free fall {fall} vs {expected}"))?;

    // hover with default drag
    let params = QuadParams::default();
    let start = Vector3::new(0.0, 0.0, 2.0);
    let mut s = QuadState::hover(start, &params);
    let hover = CtbrCommand::new(params.hover_thrust_command(), Vector3::zeros());
    for _ in 0..500 {
        s = quad_dynamics::step(&s, &hover, &params, dt).map_err(err)?;
    }
    let drift = (s.position - start).norm();
    ensure(drift <= 0.02, || format!("hover drift {drift} m"))?;

    // attitude stays unit over 10^4 aggressive steps
    let mut s = QuadState::hover(Vector3::zeros(), &params);
    let mut worst_norm = 0.0f64;
    for i in 0..10_000 {
        let t = i as f64 * dt;
        let cmd = CtbrCommand::new(0.5, Vector3::new(6.0 * (3.0 * t).sin(), 4.0 * (2.0 * t).cos(), 2.0));
        s = quad_dynamics::step(&s, &cmd, &params, dt).map_err(err)?;
        worst_norm = worst_norm.max((s.attitude.norm() - 1.0).abs());
    }
    ensure(worst_norm <= 1e-6, || format!("quaternion norm error {worst_norm:e}"))?;

    // ballistic tumbling without drag conserves mechanical energy
    let mut params = QuadParams::default();
    params.drag_coeff = Vector3::zeros();
    let mut s = QuadState::at_rest(Vector3::new(0.0, 0.0, 5.0), 0.0);
    s.velocity = Vector3::new(1.0, -2.0, 3.0);
    s.body_rates = Vector3::new(1.0, -0.5, 0.3);
    let e0 = mechanical_energy(&s, &params);
    for _ in 0..250 {
        s = quad_dynamics::integrate(&s, &Vector4::zeros(), &params, dt).map_err(err)?;
    }
    let energy_err = ((mechanical_energy(&s, &params) - e0) / e0).abs();
    ensure(energy_err <= 1e-5, || format!("energy drift {energy_err:e}"))?;

    Ok(format!(
        "free-fall rel err {fall_err:.1e}, hover drift {:.2} cm, |q| err {worst_norm:.1e}, energy rel err {energy_err:.1e}",
        drift * 100.0
    ))
}

// ------------------------------------------------------------ shaped reward

pub fn shaped_reward_suite() -> Check {
    let spec = CircleSpec::default();
    let w = ShapedRewardWeights::default();
    let channels = ActionChannels::ctbr();
    let history = vec![vec![0.4, 0.1, -0.2, 0.3]; 3];

    let c = spec.center();
    let off_plane = c + spec.normal() * 1.0 + Vector3::new(spec.radius, 0.0, 0.0);
    let r = shaped_reward(&off_plane, &Vector3::zeros(), &history, &channels, &spec, &w);
    ensure((r.total - -3.0).abs() <= 1e-12, || format!("stationary off-plane total {}", r.total))?;

    let on_circle = c + Vector3::new(spec.radius, 0.0, 0.0);
    let v = circle_tangent(&on_circle, &spec) * spec.v_sat;
    let r2 = shaped_reward(&on_circle, &v, &history, &channels, &spec, &w);
    ensure((r2.total - 0.5 * spec.v_sat).abs() <= 1e-12, || format!("tangential total {}", r2.total))?;

    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = Vector3::from_fn(|_, _| rng.gen_range(-4.0..4.0));
        let v = Vector3::from_fn(|_, _| rng.gen_range(-8.0..8.0));
        let hist: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let b = shaped_reward(&p, &v, &hist, &channels, &spec, &w);
        let recombined = w.alpha * b.r_circ - w.beta * b.p_planar
            - (w.gamma_omega_xy * b.p_reg.omega_xy + w.gamma_omega_z * b.p_reg.omega_z + w.gamma_c * b.p_reg.thrust);
        worst = worst.max((recombined - b.total).abs() / b.total.abs().max(1.0));
    }
    ensure(worst <= 1e-14, || format!("recombination error {worst:e}"))?;
    Ok(format!("off-plane {:.3}, tangential {:.3}, recombination err {worst:.1e}", r.total, r2.total))
}

// --------------------------------------------------- reward-model learning

/// Segments from rollouts of freshly initialized planar policies, seeded
/// differently so returns are spread out.
pub fn planar_segments(n_policies: usize, collects: usize, seed: u64) -> Vec<Segment> {
    let cfg = RunConfig::defaults_for(EnvKind::Planar);
    let mut next_id = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in 0..n_policies {
        let mut ppo = cfg.ppo.clone();
        ppo.log_sigma_init = [-1.5, -0.5, 0.0][p % 3];
        let mut trainer = PpoTrainer::new(ppo, &cfg.environment, seed * 1000 + p as u64).unwrap();
        for _ in 0..collects {
            let (_, eps) = trainer.collect().unwrap();
            out.extend(extract_segments(&eps, cfg.clip_len(), 0, true, &mut next_id, &mut rng).segments);
        }
    }
    out
}

pub fn reward_learning_check(seed: u64) -> Check {
    let start = Instant::now();
    let segs = planar_segments(6, 6, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&Segment> = segs.iter().collect();
    let pairing = pair_random(&refs, segs.len() / 2, &mut rng);
    let by_id: std::collections::HashMap<u64, &Segment> = segs.iter().map(|s| (s.id, s)).collect();
    let mut records = Vec::new();
    for (i, &(a, b)) in pairing.pairs.iter().enumerate() {
        let label = synthetic_label(by_id[&a], by_id[&b], recpref_core::preference::DEFAULT_TIE_EPSILON).map_err(err)?;
        records.push(PreferenceRecord {
            pair_id: i as u64,
            seg1: a,
            seg2: b,
            label,
            judge: JudgeKind::Synthetic,
            epoch_added: 0,
            holdout: false,
            model_prob: None,
        });
    }
    ensure(records.len() >= 600, || format!("only {} pairs formed", records.len()))?;
    let (train, holdout) = records.split_at(500);
    let inputs = PairInputs::new(segs.iter());
    let train_refs: Vec<&PreferenceRecord> = train.iter().collect();
    let hold_refs: Vec<&PreferenceRecord> = holdout.iter().filter(|r| r.label != Label::Tie).collect();
    let train_pairs = inputs.pairs(&train_refs);
    let hold_pairs = inputs.pairs(&hold_refs);

    let mut cfg = RunConfig::defaults_for(EnvKind::Planar).ensemble;
    cfg.n_epochs = 100;
    let mut ens = RewardEnsemble::new(planar_inputs_dim(), &cfg, EnsembleMode::ProbabilisticRec, seed).map_err(err)?;
    // evaluated every 10 epochs; the first pass with every member at 90%
    // ends training
    let mut epochs = 0;
    let mut accs = Vec::new();
    while epochs < cfg.n_epochs {
        ens.train(&train_pairs, 10, cfg.learning_rate, cfg.batch_size, seed).map_err(err)?;
        epochs += 10;
        accs = ens
            .members
            .iter()
            .map(|head| {
                let correct = hold_pairs
                    .iter()
                    .filter(|p| prediction_matches(head.pair_probability(p.first, p.second, EnsembleMode::ProbabilisticRec).unwrap(), p.target))
                    .count();
                correct as f64 / hold_pairs.len() as f64
            })
            .collect();
        if accs.iter().all(|&a| a >= 0.9) {
            break;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let summary = format!(
        "held-out accuracy per member {:?} on {} pairs after {epochs} epochs, {elapsed:.0}s",
        accs.iter().map(|a| format!("{:.1}%", 100.0 * a)).collect::<Vec<_>>(),
        hold_pairs.len()
    );
    ensure(accs.iter().all(|&a| a >= 0.9), || summary.clone())?;
    ensure(elapsed <= 300.0, || format!("too slow: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- agreement

pub fn agreement_check() -> Check {
    let m = AgreementMatrix::from_counts([[323, 167, 37], [196, 238, 39], [0, 0, 0]]);
    let acc = m.accuracy().ok_or("no decided answers")? * 100.0;
    ensure((acc - 60.7).abs() <= 0.05, || format!("accuracy {acc:.3}%"))?;
    Ok(format!("accuracy {acc:.2}%"))
}

// ---------------------------------------------------------- full-run checks

/// Table defaults for every preference field, with environment steps and
/// network sizes scaled down so the schedule runs in seconds.
pub fn schedule_config(dir: &Path) -> RunConfig {
    let paper = RunConfig::defaults_for(EnvKind::Powerloop);
    let mut cfg = RunConfig::defaults_for(EnvKind::Planar);
    cfg.mode = Mode::RecPrefPpo;
    cfg.output_dir = dir.to_path_buf();
    cfg.preference = paper.preference.clone();
    cfg.preference.segment_pool = 3000;
    cfg.preference.disagreement_pool = 60;
    cfg.ppo.n_envs = 4;
    cfg.ppo.n_steps = 250;
    cfg.ppo.n_batch = 500;
    cfg.ppo.n_epochs = 1;
    cfg.ppo.pi_arch = vec![8];
    // round 0 needs 400 segments first, about 26k steps with 4 envs
    cfg.preference.delta_t_retrain = 40_000;
    cfg.ppo.n_timesteps = 10 * cfg.preference.delta_t_retrain + 4_000;
    cfg.ensemble.n_ensemble = 3;
    cfg.ensemble.d_hidden = 8;
    cfg.ensemble.n_layers = 1;
    cfg.ensemble.n_epochs = 1;
    cfg.evaluation.interval = 1_000_000;
    cfg.evaluation.n_episodes = 1;
    cfg
}

pub fn schedule_check(dir: &Path) -> Check {
    let cfg = schedule_config(dir);
    let summary = run_train(&cfg, &RunContext::default()).map_err(err)?;
    let labeled: Vec<usize> = summary.rounds.iter().map(|r| r.labeled).collect();
    let total: usize = labeled.iter().sum();
    let text = format!("{} rounds, labels per round {labeled:?}, total {total}", summary.rounds.len());
    ensure(summary.rounds.len() == cfg.preference.n_query, || text.clone())?;
    ensure(labeled[0] == 200, || text.clone())?;
    ensure(total <= 1000 && summary.labels_used == total, || text.clone())?;
    for r in &summary.rounds[1..] {
        let due = r.round as u64 * cfg.preference.delta_t_retrain;
        let slack = cfg.ppo.rollout_size() as u64;
        ensure(r.env_steps >= due && r.env_steps < due + slack, || format!("round {} at {} steps, due {due}", r.round, r.env_steps))?;
    }
    Ok(text)
}

#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub best: Vec<(Mode, Vec<f64>)>,
    pub seconds: f64,
}

impl EndToEnd {
    pub fn mean(&self, mode: Mode) -> f64 {
        let v = &self.best.iter().find(|(m, _)| *m == mode).expect("mode ran").1;
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn end_to_end_runs(root: &Path, seeds: &[u64]) -> Result<EndToEnd, String> {
    let start = Instant::now();
    let mut best = Vec::new();
    for mode in [Mode::PpoShaped, Mode::PrefPpoBt, Mode::RecPrefPpo] {
        let mut v = Vec::new();
        for &seed in seeds {
            let mut cfg = RunConfig::defaults_for(EnvKind::Planar);
            cfg.mode = mode;
            cfg.seed = seed;
            cfg.output_dir = root.join(format!("{}-{seed}", mode.as_str()));
            // both preference modes start from state-entropy pretraining,
            // counted inside the 500k step budget
            cfg.preference.pretrain_steps = 50_000;
            let s = run_train(&cfg, &RunContext::default()).map_err(err)?;
            v.push(s.best_eval.ok_or("no evaluation")?.1);
        }
        best.push((mode, v));
    }
    Ok(EndToEnd {
        best,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn end_to_end_check(root: &Path) -> Check {
    let e = end_to_end_runs(root, &[1, 2, 3])?;
    let (shaped, bt, rec) = (e.mean(Mode::PpoShaped), e.mean(Mode::PrefPpoBt), e.mean(Mode::RecPrefPpo));
    let summary = format!(
        "mean best return shaped {shaped:.1}, bt {bt:.1} ({:.1}%), rec {rec:.1} ({:.1}%), {:.1} min; per seed {:?}",
        100.0 * bt / shaped,
        100.0 * rec / shaped,
        e.seconds / 60.0,
        e.best
    );
    ensure(rec >= 0.7 * shaped && rec >= bt && e.seconds <= 45.0 * 60.0, || summary.clone())?;
    Ok(summary)
}
