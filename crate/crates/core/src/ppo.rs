//! Proximal policy optimization with generalized advantage estimation over
//! a set of recording environments, plus the k-nearest-neighbour state
//! entropy reward used for unsupervised pretraining.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approximator::{clip_global_norm, init_mlp, Activation, AdamState, MlpParams};
use crate::envs::{make_env, Env, EnvConfig, Episode, RecordingEnv};
use crate::error::{Error, Result};

pub const LOG_STD_BOUNDS: (f64, f64) = (-5.0, 2.0);
pub const KNN_EPSILON: f64 = 1e-6;
pub const POLICY_FORMAT: &str = "recpref-policy";
pub const POLICY_FORMAT_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub n_envs: usize,
    pub n_timesteps: u64,
    pub gamma: f64,
    #[serde(rename = "lambda_GAE")]
    pub lambda_gae: f64,
    pub n_epochs: usize,
    pub n_steps: usize,
    pub epsilon_clip: f64,
    pub n_batch: usize,
    pub log_sigma_init: f64,
    pub pi_arch: Vec<usize>,
    pub pi_activation: Activation,
    pub c_entropy: f64,
    pub vf_coef: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// Standardize learned and intrinsic rewards with running statistics.
    pub normalize_learned_rewards: bool,
    /// Added to standardized rewards. Preference clips all have the same
    /// length, so a learned reward carries no signal about safety
    /// terminations; a positive offset keeps staying in the box worthwhile.
    pub learned_reward_offset: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            n_envs: 50,
            n_timesteps: 30_000_000,
            gamma: 0.995,
            lambda_gae: 0.95,
            n_epochs: 10,
            n_steps: 250,
            epsilon_clip: 0.4,
            n_batch: 12_500,
            log_sigma_init: -0.8,
            pi_arch: vec![128, 128],
            pi_activation: Activation::Tanh,
            c_entropy: 0.001,
            vf_coef: 0.5,
            learning_rate: 3e-4,
            max_grad_norm: 0.5,
            normalize_learned_rewards: true,
            learned_reward_offset: 2.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_envs == 0 || self.n_steps == 0 || self.n_epochs == 0 || self.n_batch == 0 {
            return bad("n_envs, n_steps, n_epochs and n_batch must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda_gae) {
            return bad("gamma and lambda_GAE must lie in [0, 1]");
        }
        if self.epsilon_clip <= 0.0 || self.learning_rate <= 0.0 || self.max_grad_norm <= 0.0 {
            return bad("epsilon_clip, learning_rate and max_grad_norm must be positive");
        }
        if self.pi_arch.iter().any(|&w| w == 0) {
            return bad("pi_arch widths must be positive");
        }
        if !self.learned_reward_offset.is_finite() {
            return bad("learned_reward_offset must be finite");
        }
        Ok(())
    }

    pub fn rollout_size(&self) -> usize {
        self.n_envs * self.n_steps
    }
}

/// Diagonal Gaussian policy with a tanh-squashed mean and a
/// state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean_net: MlpParams,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(obs_dim: usize, action_dim: usize, arch: &[usize], activation: Activation, log_std_init: f64, seed: u64) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(arch);
        sizes.push(action_dim);
        let mut mean_net = init_mlp(&sizes, activation, seed)?;
        // start close to the zero action
        mean_net.scale_output_layer(0.01);
        Ok(Self {
            mean_net,
            log_std: vec![log_std_init.clamp(LOG_STD_BOUNDS.0, LOG_STD_BOUNDS.1); action_dim],
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean_actions(&self, obs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut m = self.mean_net.forward_batch(obs)?;
        m.mapv_inplace(f64::tanh);
        Ok(m)
    }

    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mean_net.forward(obs)?.into_iter().map(f64::tanh).collect())
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| l + 0.5 * (LN_2PI + 1.0)).sum()
    }

    /// Draws one action per row; returns the unclamped samples and their
    /// log-probabilities.
    pub fn sample<R: Rng + ?Sized>(&self, obs: ArrayView2<'_, f64>, rng: &mut R) -> Result<(Array2<f64>, Vec<f64>)> {
        let mean = self.mean_actions(obs)?;
        let mut actions = mean.clone();
        for mut row in actions.rows_mut() {
            for (a, ls) in row.iter_mut().zip(&self.log_std) {
                let z: f64 = rng.sample(StandardNormal);
                *a += ls.exp() * z;
            }
        }
        let logp = mean
            .rows()
            .into_iter()
            .zip(actions.rows())
            .map(|(m, a)| gaussian_log_prob(a.as_slice().unwrap(), m.as_slice().unwrap(), &self.log_std))
            .collect();
        Ok((actions, logp))
    }
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

pub fn value_net(obs_dim: usize, arch: &[usize], activation: Activation, seed: u64) -> Result<MlpParams> {
    let mut sizes = vec![obs_dim];
    sizes.extend_from_slice(arch);
    sizes.push(1);
    init_mlp(&sizes, activation, seed)
}

/// Advantages and returns for one environment's trajectory. `values` holds
/// one more entry than `rewards`: the bootstrap value after the last step.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 {
        return Err(Error::Shape {
            expected: n + 1,
            actual: values.len(),
        });
    }
    if dones.len() != n {
        return Err(Error::Shape {
            expected: n,
            actual: dones.len(),
        });
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Running per-dimension mean and variance (parallel Welford merge).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMeanStd {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningMeanStd {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
        }
    }

    pub fn update(&mut self, rows: ArrayView2<'_, f64>) {
        let n = rows.nrows() as f64;
        if n == 0.0 {
            return;
        }
        let bm = rows.mean_axis(Axis(0)).expect("non-empty");
        let bv = rows.var_axis(Axis(0), 0.0);
        let total = self.count + n;
        for j in 0..self.mean.len() {
            let delta = bm[j] - self.mean[j];
            let m2 = self.var[j] * self.count + bv[j] * n + delta * delta * self.count * n / total;
            self.mean[j] += delta * n / total;
            self.var[j] = m2 / total;
        }
        self.count = total;
    }

    pub fn update_scalars(&mut self, values: &[f64]) {
        let col = ArrayView2::from_shape((values.len(), 1), values).expect("column view");
        self.update(col);
    }

    pub fn std(&self, j: usize) -> f64 {
        self.var[j].sqrt().max(1e-8)
    }

    pub fn normalize_rows(&self, rows: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std(j);
            }
        }
        out
    }
}

/// `log(d_k + eps)` where `d_k` is the Euclidean distance from `query` to
/// its `k`-th nearest neighbour in `reference`. `None` while the reference
/// set holds fewer than `k` states.
pub fn intrinsic_entropy_reward(query: &[f64], reference: &[Vec<f64>], k: usize) -> Option<f64> {
    if k == 0 || reference.len() < k {
        return None;
    }
    let mut d: Vec<f64> = reference.iter().map(|r| sq_dist(query, r)).collect();
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    Some((kth.sqrt() + KNN_EPSILON).ln())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Intrinsic reward of every row against all other rows of `states`.
pub fn intrinsic_rewards_batch(states: ArrayView2<'_, f64>, k: usize) -> Option<Vec<f64>> {
    let n = states.nrows();
    if k == 0 || n < k + 1 {
        return None;
    }
    // squared distances via the Gram matrix would lose exactness, so the
    // pairwise loop is kept
    let rows: Vec<&[f64]> = states.rows().into_iter().map(|r| r.to_slice().expect("standard layout")).collect();
    let mut d = vec![0.0; n - 1];
    Some(
        (0..n)
            .map(|i| {
                let mut c = 0;
                for (j, r) in rows.iter().enumerate() {
                    if j != i {
                        d[c] = sq_dist(rows[i], r);
                        c += 1;
                    }
                }
                let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
                (kth.sqrt() + KNN_EPSILON).ln()
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardTag {
    Shaped,
    Learned,
    Intrinsic,
}

/// One rollout of `n_steps` from each of `n_envs` environments, stored
/// step-major: entry `t * n_envs + e`.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub n_steps: usize,
    pub obs: Array2<f64>,
    /// Sampled (unclamped) actions, used for log-probabilities.
    pub actions: Array2<f64>,
    /// Actions after clamping, as executed by the environment.
    pub executed: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub shaped: Vec<f64>,
    pub reward_tag: RewardTag,
    pub dones: Vec<bool>,
    /// Value of the final observation for steps that hit the time limit.
    pub truncation_values: Vec<f64>,
    /// Bootstrap value of the observation after the last step, per env.
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.n_envs * self.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of `(observation, executed action)` for the reward model.
    pub fn reward_inputs(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.obs.view(), self.executed.view()]).expect("row counts match")
    }

    pub fn use_shaped(&mut self) {
        self.rewards = self.shaped.clone();
        self.reward_tag = RewardTag::Shaped;
        self.advantages.clear();
    }

    pub fn set_rewards(&mut self, rewards: Vec<f64>, tag: RewardTag) -> Result<()> {
        if rewards.len() != self.len() {
            return Err(Error::Shape {
                expected: self.len(),
                actual: rewards.len(),
            });
        }
        self.rewards = rewards;
        self.reward_tag = tag;
        self.advantages.clear();
        Ok(())
    }

    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        let (ne, ns) = (self.n_envs, self.n_steps);
        self.advantages = vec![0.0; ne * ns];
        self.returns = vec![0.0; ne * ns];
        for e in 0..ne {
            let idx: Vec<usize> = (0..ns).map(|t| t * ne + e).collect();
            let rewards: Vec<f64> = idx.iter().map(|&i| self.rewards[i] + gamma * self.truncation_values[i]).collect();
            let mut values: Vec<f64> = idx.iter().map(|&i| self.values[i]).collect();
            values.push(self.last_values[e]);
            let dones: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (adv, ret) = gae(&rewards, &values, &dones, gamma, lambda)?;
            for (k, &i) in idx.iter().enumerate() {
                self.advantages[i] = adv[k];
                self.returns[i] = ret[k];
            }
        }
        Ok(())
    }
}

/// Inputs of one PPO minibatch.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLoss {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoGrads {
    pub policy_net: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: Vec<f64>,
}

/// Clipped surrogate + value regression - entropy bonus, and its gradient
/// with respect to the policy mean network, the log-std vector and the
/// value network.
pub fn ppo_loss_and_grad(
    policy: &GaussianPolicy,
    value: &MlpParams,
    batch: &MiniBatch,
    clip: f64,
    c_entropy: f64,
    vf_coef: f64,
) -> Result<(PpoLoss, PpoGrads)> {
    let n = batch.obs.nrows();
    if n == 0 {
        return Err(Error::Contract("empty PPO minibatch".into()));
    }
    let ad = policy.action_dim();
    let sigma: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();
    let mut g_log_std = vec![0.0; ad];
    let mut stats = PpoLoss::default();

    let (policy_loss, g_net) = policy.mean_net.gradient(batch.obs.view(), |out| {
        let mut adj = Array2::zeros(out.dim());
        let mut loss = 0.0;
        let mut clipped = 0usize;
        let mut kl = 0.0;
        for i in 0..n {
            let mean: Vec<f64> = out.row(i).iter().map(|z| z.tanh()).collect();
            let a = batch.actions.row(i);
            let logp = gaussian_log_prob(a.as_slice().expect("standard layout"), &mean, &policy.log_std);
            let log_ratio = logp - batch.old_log_probs[i];
            let ratio = log_ratio.exp();
            let adv = batch.advantages[i];
            let unclipped = ratio * adv;
            let clipped_ratio = ratio.clamp(1.0 - clip, 1.0 + clip);
            let surr = unclipped.min(clipped_ratio * adv);
            loss -= surr / n as f64;
            if (ratio - 1.0).abs() > clip {
                clipped += 1;
            }
            kl += (ratio - 1.0) - log_ratio;
            // d(surr)/d(logp) is ratio * adv whenever the unclipped branch is active
            let active = unclipped <= clipped_ratio * adv || ratio == clipped_ratio;
            if active {
                let d_logp = -adv * ratio / n as f64;
                for j in 0..ad {
                    let diff = a[j] - mean[j];
                    adj[[i, j]] = d_logp * diff / (sigma[j] * sigma[j]) * (1.0 - mean[j] * mean[j]);
                    g_log_std[j] += d_logp * (diff * diff / (sigma[j] * sigma[j]) - 1.0);
                }
            }
        }
        stats.clip_fraction = clipped as f64 / n as f64;
        stats.approx_kl = kl / n as f64;
        (loss, adj)
    })?;

    // entropy of a diagonal Gaussian is linear in each log-std entry
    let entropy = policy.entropy();
    g_log_std.iter_mut().for_each(|g| *g -= c_entropy);

    let (value_loss, g_value) = value.gradient(batch.obs.view(), |out| {
        let mut adj = Array2::zeros(out.dim());
        let mut loss = 0.0;
        for i in 0..n {
            let err = out[[i, 0]] - batch.returns[i];
            loss += err * err / n as f64;
            adj[[i, 0]] = vf_coef * 2.0 * err / n as f64;
        }
        (loss, adj)
    })?;

    stats.policy = policy_loss;
    stats.value = value_loss;
    stats.entropy = entropy;
    stats.total = policy_loss - c_entropy * entropy + vf_coef * value_loss;
    Ok((
        stats,
        PpoGrads {
            policy_net: g_net,
            log_std: g_log_std,
            value: g_value,
        },
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub aborted: bool,
}

/// Policy/value snapshot written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    pub env_steps: u64,
    pub policy: GaussianPolicy,
    pub value: MlpParams,
}

impl PolicyCheckpoint {
    pub fn new(policy: GaussianPolicy, value: MlpParams, env_steps: u64) -> Self {
        Self {
            format: POLICY_FORMAT.into(),
            version: POLICY_FORMAT_VERSION,
            env_steps,
            policy,
            value,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_slice(&fs::read(path)?)?;
        if c.format != POLICY_FORMAT || c.version != POLICY_FORMAT_VERSION {
            return Err(Error::Format(format!("expected {POLICY_FORMAT} v{POLICY_FORMAT_VERSION}")));
        }
        c.policy.mean_net.validate()?;
        c.value.validate()?;
        if c.policy.log_std.len() != c.policy.mean_net.output_dim() {
            return Err(Error::Format("log-std length does not match the action dimension".into()));
        }
        Ok(c)
    }
}

/// Owns the policy, value function, optimizers and environments of a run.
pub struct PpoTrainer {
    pub cfg: PpoConfig,
    pub policy: GaussianPolicy,
    pub value: MlpParams,
    opt_net: AdamState,
    opt_log_std: AdamState,
    opt_value: AdamState,
    envs: Vec<RecordingEnv>,
    rng: ChaCha8Rng,
    pub env_steps: u64,
    pub reward_rms: RunningMeanStd,
    pub state_rms: RunningMeanStd,
}

impl PpoTrainer {
    pub fn new(cfg: PpoConfig, env_cfg: &EnvConfig, seed: u64) -> Result<Self> {
        let envs = (0..cfg.n_envs).map(|_| make_env(env_cfg)).collect::<Result<Vec<_>>>()?;
        Self::with_envs(cfg, envs, seed)
    }

    /// Builds a trainer over caller-supplied environments.
    pub fn with_envs(cfg: PpoConfig, envs: Vec<Box<dyn Env>>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if envs.len() != cfg.n_envs {
            return Err(Error::Config(format!("expected {} environments, got {}", cfg.n_envs, envs.len())));
        }
        let (od, ad) = (envs[0].obs_dim(), envs[0].action_dim());
        let policy = GaussianPolicy::new(od, ad, &cfg.pi_arch, cfg.pi_activation, cfg.log_sigma_init, seed)?;
        let value = value_net(od, &cfg.pi_arch, cfg.pi_activation, seed.wrapping_add(1))?;
        let envs = envs
            .into_iter()
            .enumerate()
            .map(|(i, env)| {
                let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                RecordingEnv::new(env, s, (i as u64) << 40)
            })
            .collect();
        Ok(Self {
            opt_net: AdamState::new(policy.mean_net.num_params(), cfg.learning_rate),
            opt_log_std: AdamState::new(ad, cfg.learning_rate),
            opt_value: AdamState::new(value.num_params(), cfg.learning_rate),
            policy,
            value,
            envs,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED),
            env_steps: 0,
            reward_rms: RunningMeanStd::new(1),
            state_rms: RunningMeanStd::new(od),
            cfg,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.policy.action_dim()
    }

    fn current_obs(&self) -> Array2<f64> {
        let od = self.obs_dim();
        let mut m = Array2::zeros((self.envs.len(), od));
        for (e, env) in self.envs.iter().enumerate() {
            m.row_mut(e).assign(&ndarray::ArrayView1::from(env.observation()));
        }
        m
    }

    /// Runs every environment for `n_steps` with sampled actions. Shaped
    /// rewards are recorded; the buffer's active rewards start as shaped.
    pub fn collect(&mut self) -> Result<(RolloutBuffer, Vec<Episode>)> {
        let (ne, ns, od, ad) = (self.cfg.n_envs, self.cfg.n_steps, self.obs_dim(), self.action_dim());
        let total = ne * ns;
        let mut buf = RolloutBuffer {
            n_envs: ne,
            n_steps: ns,
            obs: Array2::zeros((total, od)),
            actions: Array2::zeros((total, ad)),
            executed: Array2::zeros((total, ad)),
            log_probs: vec![0.0; total],
            values: vec![0.0; total],
            rewards: vec![0.0; total],
            shaped: vec![0.0; total],
            reward_tag: RewardTag::Shaped,
            dones: vec![false; total],
            truncation_values: vec![0.0; total],
            last_values: vec![0.0; ne],
            advantages: Vec::new(),
            returns: Vec::new(),
        };
        let mut finished = Vec::new();
        for t in 0..ns {
            let obs = self.current_obs();
            let (actions, logp) = self.policy.sample(obs.view(), &mut self.rng)?;
            let values = self.value.forward_batch(obs.view())?;
            let mut truncated_obs: Vec<(usize, Vec<f64>)> = Vec::new();
            for e in 0..ne {
                let i = t * ne + e;
                buf.obs.row_mut(i).assign(&obs.row(e));
                buf.actions.row_mut(i).assign(&actions.row(e));
                buf.log_probs[i] = logp[e];
                buf.values[i] = values[[e, 0]];
                let (tr, ep) = self.envs[e].step(actions.row(e).as_slice().expect("standard layout"));
                buf.executed.row_mut(i).assign(&ndarray::ArrayView1::from(&tr.info.sample.action[..]));
                buf.shaped[i] = tr.info.reward.total;
                buf.dones[i] = tr.done;
                if tr.done && tr.info.truncated && !tr.info.out_of_bounds && !tr.info.diverged {
                    truncated_obs.push((i, tr.obs));
                }
                if let Some(ep) = ep {
                    finished.push(ep);
                }
            }
            for (i, o) in truncated_obs {
                buf.truncation_values[i] = self.value.forward(&o)?[0];
            }
        }
        let last = self.value.forward_batch(self.current_obs().view())?;
        buf.last_values = last.column(0).to_vec();
        buf.rewards = buf.shaped.clone();
        self.env_steps += total as u64;
        Ok((buf, finished))
    }

    /// Standardizes learned or intrinsic rewards with the running
    /// statistics when configured to.
    pub fn normalize_rewards(&mut self, raw: &[f64]) -> Vec<f64> {
        if !self.cfg.normalize_learned_rewards {
            return raw.to_vec();
        }
        self.reward_rms.update_scalars(raw);
        let (m, s) = (self.reward_rms.mean[0], self.reward_rms.std(0));
        let offset = self.cfg.learned_reward_offset;
        raw.iter().map(|r| (r - m) / s + offset).collect()
    }

    /// Replaces the buffer rewards with k-NN state-entropy rewards.
    pub fn assign_intrinsic(&mut self, buf: &mut RolloutBuffer, k: usize) -> Result<bool> {
        self.state_rms.update(buf.obs.view());
        let states = self.state_rms.normalize_rows(buf.obs.view());
        match intrinsic_rewards_batch(states.view(), k) {
            Some(r) => {
                let r = self.normalize_rewards(&r);
                buf.set_rewards(r, RewardTag::Intrinsic)?;
                Ok(true)
            }
            None => {
                buf.set_rewards(vec![0.0; buf.len()], RewardTag::Intrinsic)?;
                Ok(false)
            }
        }
    }

    /// Runs `n_epochs` of minibatch updates. A non-finite loss or gradient
    /// restores the pre-update parameters and flags the stats.
    pub fn update(&mut self, buf: &mut RolloutBuffer) -> Result<UpdateStats> {
        if buf.advantages.len() != buf.len() {
            buf.compute_advantages(self.cfg.gamma, self.cfg.lambda_gae)?;
        }
        let backup = (
            self.policy.clone(),
            self.value.clone(),
            self.opt_net.clone(),
            self.opt_log_std.clone(),
            self.opt_value.clone(),
        );
        match self.run_epochs(buf) {
            Ok(stats) => Ok(stats),
            Err(err) => {
                tracing::warn!(error = %err, "PPO update aborted; rollout discarded");
                (self.policy, self.value, self.opt_net, self.opt_log_std, self.opt_value) = backup;
                Ok(UpdateStats {
                    aborted: true,
                    ..UpdateStats::default()
                })
            }
        }
    }

    fn run_epochs(&mut self, buf: &RolloutBuffer) -> Result<UpdateStats> {
        let n = buf.len();
        let bs = self.cfg.n_batch.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut stats = UpdateStats::default();
        let mut count = 0.0;
        for _ in 0..self.cfg.n_epochs {
            idx.shuffle(&mut self.rng);
            for chunk in idx.chunks(bs) {
                let batch = gather(buf, chunk);
                let (loss, mut g) = ppo_loss_and_grad(&self.policy, &self.value, &batch, self.cfg.epsilon_clip, self.cfg.c_entropy, self.cfg.vf_coef)?;
                if !loss.total.is_finite() {
                    return Err(Error::NonFinite { layer: 0 });
                }
                let norm = clip_global_norm(&mut [&mut g.policy_net, &mut g.log_std, &mut g.value], self.cfg.max_grad_norm);
                self.opt_net.step(self.policy.mean_net.as_mut_slice(), &g.policy_net)?;
                self.opt_log_std.step(&mut self.policy.log_std, &g.log_std)?;
                self.opt_value.step(self.value.as_mut_slice(), &g.value)?;
                for l in &mut self.policy.log_std {
                    *l = l.clamp(LOG_STD_BOUNDS.0, LOG_STD_BOUNDS.1);
                }
                stats.policy_loss += loss.policy;
                stats.value_loss += loss.value;
                stats.entropy += loss.entropy;
                stats.approx_kl += loss.approx_kl;
                stats.clip_fraction += loss.clip_fraction;
                stats.grad_norm += norm;
                count += 1.0;
            }
        }
        for v in [
            &mut stats.policy_loss,
            &mut stats.value_loss,
            &mut stats.entropy,
            &mut stats.approx_kl,
            &mut stats.clip_fraction,
            &mut stats.grad_norm,
        ] {
            *v /= count;
        }
        Ok(stats)
    }

    pub fn checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint::new(self.policy.clone(), self.value.clone(), self.env_steps)
    }

    /// Unsupervised pretraining on the state-entropy reward. Returns the
    /// episodes finished along the way.
    pub fn pretrain(&mut self, steps: u64, k: usize) -> Result<Vec<Episode>> {
        let mut episodes = Vec::new();
        let start = self.env_steps;
        while self.env_steps - start < steps {
            let (mut buf, eps) = self.collect()?;
            episodes.extend(eps);
            if !self.assign_intrinsic(&mut buf, k)? {
                tracing::warn!("intrinsic reward warm-up: fewer states than k");
            }
            self.update(&mut buf)?;
        }
        Ok(episodes)
    }
}

/// Copies the selected rows into a minibatch with per-batch advantage
/// normalization.
fn gather(buf: &RolloutBuffer, idx: &[usize]) -> MiniBatch {
    let obs = buf.obs.select(Axis(0), idx);
    let actions = buf.actions.select(Axis(0), idx);
    let mut advantages: Vec<f64> = idx.iter().map(|&i| buf.advantages[i]).collect();
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let std = (advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    advantages.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
    MiniBatch {
        obs,
        actions,
        old_log_probs: idx.iter().map(|&i| buf.log_probs[i]).collect(),
        advantages,
        returns: idx.iter().map(|&i| buf.returns[i]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Deterministic rollouts with the mean action; reports shaped-reward
/// returns. Episode `i` resets with seed `seed + i`.
pub fn evaluate_policy(policy: &GaussianPolicy, env_cfg: &EnvConfig, n_episodes: usize, seed: u64) -> Result<EvalReport> {
    let mut env = make_env(env_cfg)?;
    if env.obs_dim() != policy.obs_dim() || env.action_dim() != policy.action_dim() {
        return Err(Error::Config(format!(
            "policy expects obs {} / action {}, environment provides {} / {}",
            policy.obs_dim(),
            policy.action_dim(),
            env.obs_dim(),
            env.action_dim()
        )));
    }
    let mut returns = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let mut obs = env.reset(seed.wrapping_add(i as u64));
        let mut total = 0.0;
        loop {
            let a = policy.mean_action(&obs)?;
            let tr = env.step(&a);
            total += tr.info.reward.total;
            if tr.done {
                break;
            }
            obs = tr.obs;
        }
        returns.push(total);
    }
    let n = returns.len().max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport { returns, mean, std })
}
