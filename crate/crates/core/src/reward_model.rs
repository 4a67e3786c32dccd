//! Reward ensemble with Gaussian per-step heads.
//!
//! Each head maps a concatenated `(observation, action)` row to a mean and
//! a standard deviation. A segment's reward is the sum of independent
//! per-step Gaussians, so segment means add and variances add. Two
//! preference likelihoods are supported: the Bradley-Terry softmax over
//! summed means, and the probability that one segment's Gaussian return
//! exceeds the other's.
//!
//! Preference targets passed to the losses are the probability that the
//! *first* segment of the pair is preferred.

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approximator::{init_mlp, Activation, AdamState, MlpParams};
use crate::error::{Error, Result};

/// Lower bound on every predicted per-step standard deviation.
pub const STD_FLOOR: f64 = 1e-3;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Predictions inside this band count as a tie for accuracy.
pub const TIE_BAND: (f64, f64) = (0.45, 0.55);

pub const ENSEMBLE_FORMAT: &str = "recpref-ensemble";
pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnsembleMode {
    /// Bradley-Terry cross-entropy on summed means; the std output is unused.
    #[serde(rename = "deterministic-bt")]
    DeterministicBt,
    /// Gaussian CDF likelihood plus the std-target regularizer.
    #[serde(rename = "probabilistic-rec")]
    ProbabilisticRec,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softplus floored at [`STD_FLOOR`], with its derivative.
fn std_transform(raw: f64) -> (f64, f64) {
    let s = softplus(raw);
    if s < STD_FLOOR {
        (STD_FLOOR, 0.0)
    } else {
        (s, sigmoid(raw))
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Gaussian return of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentRewardDist {
    pub mean: f64,
    pub std: f64,
}

impl SegmentRewardDist {
    /// Sum of independent per-step Gaussians.
    pub fn from_steps(means: &[f64], stds: &[f64]) -> Self {
        Self {
            mean: means.iter().sum(),
            std: stds.iter().map(|s| s * s).sum::<f64>().sqrt(),
        }
    }
}

/// `P(first > second)` for two independent Gaussian returns. When both
/// standard deviations are zero this degrades to a hard comparison.
pub fn pref_prob_cdf(first: &SegmentRewardDist, second: &SegmentRewardDist) -> f64 {
    let var = first.std * first.std + second.std * second.std;
    let gap = first.mean - second.mean;
    if var <= 0.0 {
        return if gap > 0.0 {
            1.0
        } else if gap < 0.0 {
            0.0
        } else {
            0.5
        };
    }
    std_normal_cdf(gap / var.sqrt())
}

/// Bradley-Terry preference probability `exp(r1) / (exp(r1) + exp(r2))`,
/// kept strictly inside `(0, 1)`.
pub fn pref_prob_bt(r1: f64, r2: f64) -> f64 {
    sigmoid(r1 - r2).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// A single reward-ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardHead {
    pub net: MlpParams,
    /// Preference epoch at which the member was (re)initialized.
    pub birth_epoch: u64,
}

impl RewardHead {
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64, birth_epoch: u64) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2);
        Ok(Self {
            net: init_mlp(&sizes, Activation::Tanh, seed)?,
            birth_epoch,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn predict_step(&self, obs: &[f64], action: &[f64]) -> Result<(f64, f64)> {
        let mut input = Vec::with_capacity(obs.len() + action.len());
        input.extend_from_slice(obs);
        input.extend_from_slice(action);
        let out = self.net.forward(&input)?;
        Ok((out[0], std_transform(out[1]).0))
    }

    /// Per-row means and standard deviations.
    pub fn predict_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.net.forward_batch(inputs)?;
        let means = out.column(0).to_vec();
        let stds = out.column(1).iter().map(|&r| std_transform(r).0).collect();
        Ok((means, stds))
    }

    pub fn segment_distribution(&self, segment: ArrayView2<'_, f64>) -> Result<SegmentRewardDist> {
        if segment.nrows() == 0 {
            return Err(Error::Contract("segment_distribution on an empty segment".into()));
        }
        let (means, stds) = self.predict_batch(segment)?;
        Ok(SegmentRewardDist::from_steps(&means, &stds))
    }

    /// Mode-matched probability that the first segment is preferred.
    pub fn pair_probability(&self, first: ArrayView2<'_, f64>, second: ArrayView2<'_, f64>, mode: EnsembleMode) -> Result<f64> {
        let a = self.segment_distribution(first)?;
        let b = self.segment_distribution(second)?;
        Ok(match mode {
            EnsembleMode::DeterministicBt => pref_prob_bt(a.mean, b.mean),
            EnsembleMode::ProbabilisticRec => pref_prob_cdf(&a, &b),
        })
    }
}

/// One labeled comparison, borrowed from segment input matrices.
#[derive(Debug, Clone, Copy)]
pub struct PreferencePair<'a> {
    pub first: ArrayView2<'a, f64>,
    pub second: ArrayView2<'a, f64>,
    /// Probability that `first` is preferred: 1, 0 or 0.5.
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Likelihood {
    BradleyTerry,
    GaussianCdf,
}

#[derive(Debug, Clone, Copy)]
struct Objective {
    likelihood: Option<Likelihood>,
    ce_scale: f64,
    std_weight: f64,
    sigma_target: f64,
}

/// Stacks the pairs into one matrix and records each segment's row range.
fn stack_pairs(pairs: &[PreferencePair<'_>], cols: usize) -> Result<(Array2<f64>, Vec<(Range<usize>, Range<usize>, f64)>)> {
    let rows: usize = pairs.iter().map(|p| p.first.nrows() + p.second.nrows()).sum();
    let mut stacked = Array2::zeros((rows, cols));
    let mut ranges = Vec::with_capacity(pairs.len());
    let mut at = 0;
    for p in pairs {
        if p.first.nrows() == 0 || p.second.nrows() == 0 {
            return Err(Error::Contract("preference pair with an empty segment".into()));
        }
        let mut place = |seg: &ArrayView2<'_, f64>| -> Result<Range<usize>> {
            if seg.ncols() != cols {
                return Err(Error::Shape {
                    expected: cols,
                    actual: seg.ncols(),
                });
            }
            let r = at..at + seg.nrows();
            stacked.slice_mut(ndarray::s![r.clone(), ..]).assign(seg);
            at = r.end;
            Ok(r)
        };
        let a = place(&p.first)?;
        let b = place(&p.second)?;
        ranges.push((a, b, p.target));
    }
    Ok((stacked, ranges))
}

/// Loss value and per-row output adjoints for stacked head outputs.
fn objective_adjoint(out: &Array2<f64>, ranges: &[(Range<usize>, Range<usize>, f64)], obj: &Objective) -> (f64, Array2<f64>) {
    let n = out.nrows();
    let mut grad = Array2::zeros((n, 2));
    let mut loss = 0.0;
    let means = out.column(0);
    let transformed: Vec<(f64, f64)> = out.column(1).iter().map(|&r| std_transform(r)).collect();
    let mut d_std = vec![0.0; n];

    if let Some(likelihood) = obj.likelihood {
        for (r1, r2, p) in ranges {
            let m1: f64 = means.slice(ndarray::s![r1.clone()]).sum();
            let m2: f64 = means.slice(ndarray::s![r2.clone()]).sum();
            let gap = m1 - m2;
            let (pair_loss, d_gap, d_var) = match likelihood {
                Likelihood::BradleyTerry => {
                    let p12 = sigmoid(gap);
                    let p21 = sigmoid(-gap);
                    let (c12, c21) = (p12.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP), p21.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
                    let l = -(p * c12.ln() + (1.0 - p) * c21.ln());
                    let mut d = 0.0;
                    if c12 == p12 {
                        d -= p * p21;
                    }
                    if c21 == p21 {
                        d += (1.0 - p) * p12;
                    }
                    (l, d, 0.0)
                }
                Likelihood::GaussianCdf => {
                    let var: f64 = r1.clone().chain(r2.clone()).map(|t| transformed[t].0 * transformed[t].0).sum();
                    let s = var.sqrt();
                    let z = gap / s;
                    let hi = std_normal_cdf(z);
                    let lo = std_normal_cdf(-z);
                    let (chi, clo) = (hi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP), lo.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
                    let l = -(p * chi.ln() + (1.0 - p) * clo.ln());
                    let pdf = std_normal_pdf(z);
                    let mut d_z = 0.0;
                    if chi == hi {
                        d_z -= p * pdf / hi;
                    }
                    if clo == lo {
                        d_z += (1.0 - p) * pdf / lo;
                    }
                    (l, d_z / s, -d_z * z / (2.0 * var))
                }
            };
            loss += obj.ce_scale * pair_loss;
            let (dg, dv) = (obj.ce_scale * d_gap, obj.ce_scale * d_var);
            for t in r1.clone() {
                grad[[t, 0]] += dg;
                d_std[t] += dv * 2.0 * transformed[t].0;
            }
            for t in r2.clone() {
                grad[[t, 0]] -= dg;
                d_std[t] += dv * 2.0 * transformed[t].0;
            }
        }
    }

    if obj.std_weight > 0.0 {
        let mean_std = transformed.iter().map(|t| t.0).sum::<f64>() / n as f64;
        let gap = mean_std - obj.sigma_target;
        loss += obj.std_weight * gap * gap;
        let d = obj.std_weight * 2.0 * gap / n as f64;
        d_std.iter_mut().for_each(|v| *v += d);
    }

    for t in 0..n {
        grad[[t, 1]] = d_std[t] * transformed[t].1;
    }
    (loss, grad)
}

fn evaluate_objective(head: &RewardHead, pairs: &[PreferencePair<'_>], obj: &Objective) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Contract("preference loss on an empty batch".into()));
    }
    for p in pairs {
        if ![0.0, 0.5, 1.0].contains(&p.target) {
            return Err(Error::Contract(format!("preference target {} not in {{0, 0.5, 1}}", p.target)));
        }
    }
    let (stacked, ranges) = stack_pairs(pairs, head.input_dim())?;
    head.net.gradient(stacked.view(), |out| objective_adjoint(out, &ranges, obj))
}

/// Summed Bradley-Terry cross-entropy and its parameter gradient.
pub fn loss_ce_and_grad(head: &RewardHead, pairs: &[PreferencePair<'_>]) -> Result<(f64, Vec<f64>)> {
    evaluate_objective(
        head,
        pairs,
        &Objective {
            likelihood: Some(Likelihood::BradleyTerry),
            ce_scale: 1.0,
            std_weight: 0.0,
            sigma_target: 0.0,
        },
    )
}

/// Summed cross-entropy under the Gaussian CDF likelihood and its gradient.
pub fn loss_prob_ce_and_grad(head: &RewardHead, pairs: &[PreferencePair<'_>]) -> Result<(f64, Vec<f64>)> {
    evaluate_objective(
        head,
        pairs,
        &Objective {
            likelihood: Some(Likelihood::GaussianCdf),
            ce_scale: 1.0,
            std_weight: 0.0,
            sigma_target: 0.0,
        },
    )
}

/// `(mean_std - sigma_target)^2` over all rows of `steps`, and its gradient.
pub fn loss_std_target_and_grad(head: &RewardHead, steps: ArrayView2<'_, f64>, sigma_target: f64) -> Result<(f64, Vec<f64>)> {
    if steps.nrows() == 0 {
        return Err(Error::Contract("std-target loss on an empty dataset".into()));
    }
    let obj = Objective {
        likelihood: None,
        ce_scale: 0.0,
        std_weight: 1.0,
        sigma_target,
    };
    head.net.gradient(steps, |out| objective_adjoint(out, &[], &obj))
}

pub fn loss_ce(head: &RewardHead, pairs: &[PreferencePair<'_>]) -> Result<f64> {
    Ok(loss_ce_and_grad(head, pairs)?.0)
}

pub fn loss_prob_ce(head: &RewardHead, pairs: &[PreferencePair<'_>]) -> Result<f64> {
    Ok(loss_prob_ce_and_grad(head, pairs)?.0)
}

pub fn loss_std_target(head: &RewardHead, steps: ArrayView2<'_, f64>, sigma_target: f64) -> Result<f64> {
    Ok(loss_std_target_and_grad(head, steps, sigma_target)?.0)
}

/// The per-member training objective: mean cross-entropy over the batch,
/// plus `lambda_sigma` times the std-target loss over the batch's steps in
/// REC mode.
pub fn training_objective_and_grad(
    head: &RewardHead,
    pairs: &[PreferencePair<'_>],
    mode: EnsembleMode,
    sigma_target: f64,
    lambda_sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    let obj = match mode {
        EnsembleMode::DeterministicBt => Objective {
            likelihood: Some(Likelihood::BradleyTerry),
            ce_scale: 1.0 / pairs.len().max(1) as f64,
            std_weight: 0.0,
            sigma_target,
        },
        EnsembleMode::ProbabilisticRec => Objective {
            likelihood: Some(Likelihood::GaussianCdf),
            ce_scale: 1.0 / pairs.len().max(1) as f64,
            std_weight: lambda_sigma,
            sigma_target,
        },
    };
    evaluate_objective(head, pairs, &obj)
}

/// Mean of the member predictions plus a half-normal bonus whose scale is
/// the population standard deviation of the predictions.
pub fn aggregate_noisy<R: Rng + ?Sized>(member_means: &[f64], rng: &mut R) -> f64 {
    assert!(!member_means.is_empty(), "aggregate over an empty ensemble");
    // running mean so identical predictions reproduce their value exactly
    let mean = member_means.iter().enumerate().fold(0.0, |m, (k, &x)| m + (x - m) / (k + 1) as f64);
    let n = member_means.len() as f64;
    let spread = (member_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    let x: f64 = rng.sample(StandardNormal);
    mean + (x * spread).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub n_ensemble: usize,
    pub n_reset: usize,
    pub sigma_target: f64,
    pub lambda_sigma: f64,
    #[serde(rename = "d_hidden_R")]
    pub d_hidden: usize,
    #[serde(rename = "n_layers_R")]
    pub n_layers: usize,
    #[serde(rename = "phi_R")]
    pub activation: Activation,
    #[serde(rename = "n_epochs_R")]
    pub n_epochs: usize,
    #[serde(rename = "eta_R")]
    pub learning_rate: f64,
    /// Pairs per reward-model minibatch.
    pub batch_size: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_ensemble: 5,
            n_reset: 1,
            sigma_target: 1.0,
            lambda_sigma: 0.1,
            d_hidden: 256,
            n_layers: 2,
            activation: Activation::Tanh,
            n_epochs: 100,
            learning_rate: 3e-4,
            batch_size: 64,
        }
    }
}

impl EnsembleConfig {
    pub fn hidden(&self) -> Vec<usize> {
        vec![self.d_hidden; self.n_layers]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ensemble == 0 {
            return Err(Error::Config("n_ensemble must be positive".into()));
        }
        if self.n_reset > self.n_ensemble {
            return Err(Error::Config("n_reset must not exceed n_ensemble".into()));
        }
        if self.sigma_target <= 0.0 || self.lambda_sigma < 0.0 || self.batch_size == 0 {
            return Err(Error::Config("invalid ensemble loss settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberScore {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberTrainReport {
    pub final_loss: f64,
    pub steps: u64,
    pub rolled_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEnsemble {
    pub members: Vec<RewardHead>,
    pub mode: EnsembleMode,
    pub sigma_target: f64,
    pub lambda_sigma: f64,
    pub n_reset: usize,
    hidden: Vec<usize>,
    seed: u64,
    /// Number of completed trainings.
    pub trainings: u64,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RewardEnsemble {
    pub fn new(input_dim: usize, cfg: &EnsembleConfig, mode: EnsembleMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden();
        let members = (0..cfg.n_ensemble)
            .map(|i| RewardHead::new(input_dim, &hidden, mix_seed(seed, i as u64, 0), 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            members,
            mode,
            sigma_target: cfg.sigma_target,
            lambda_sigma: cfg.lambda_sigma,
            n_reset: cfg.n_reset,
            hidden,
            seed,
            trainings: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    /// Per-member mean predictions, shaped `(members, rows)`.
    pub fn predict_means(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.members.len(), inputs.nrows()));
        for (i, m) in self.members.iter().enumerate() {
            let o = m.net.forward_batch(inputs)?;
            out.row_mut(i).assign(&o.column(0));
        }
        Ok(out)
    }

    /// Per-row policy reward: the noisy optimistic aggregate in REC mode,
    /// the plain ensemble mean in BT mode.
    pub fn aggregate_rows<R: Rng + ?Sized>(&self, inputs: ArrayView2<'_, f64>, rng: &mut R) -> Result<Vec<f64>> {
        let means = self.predict_means(inputs)?;
        Ok(match self.mode {
            // plain Preference PPO: ensemble mean, no exploration bonus
            EnsembleMode::DeterministicBt => means.mean_axis(Axis(0)).expect("non-empty ensemble").to_vec(),
            EnsembleMode::ProbabilisticRec => means.axis_iter(Axis(1)).map(|col| aggregate_noisy(&col.to_vec(), rng)).collect(),
        })
    }

    /// Per-member summed means of a segment.
    pub fn segment_sums(&self, segment: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.predict_means(segment)?.sum_axis(Axis(1)).to_vec())
    }

    /// Mode-matched mean loss and hard-label accuracy of every member on
    /// `pairs`. Returns `None` when there is nothing to evaluate.
    pub fn evaluate_members(&self, pairs: &[PreferencePair<'_>]) -> Result<Option<Vec<MemberScore>>> {
        if pairs.is_empty() {
            return Ok(None);
        }
        let mut scores = Vec::with_capacity(self.members.len());
        for head in &self.members {
            let loss = match self.mode {
                EnsembleMode::DeterministicBt => loss_ce(head, pairs)?,
                EnsembleMode::ProbabilisticRec => loss_prob_ce(head, pairs)?,
            } / pairs.len() as f64;
            let mut correct = 0usize;
            for p in pairs {
                let prob = head.pair_probability(p.first, p.second, self.mode)?;
                if prediction_matches(prob, p.target) {
                    correct += 1;
                }
            }
            scores.push(MemberScore {
                loss,
                accuracy: correct as f64 / pairs.len() as f64,
            });
        }
        Ok(Some(scores))
    }

    /// Re-initializes the `n_reset` members with the highest evaluation
    /// loss (ties go to the lower index). Returns the replaced indices.
    pub fn reset_worst(&mut self, scores: &[MemberScore], n_reset: usize, seed: u64, epoch: u64) -> Result<Vec<usize>> {
        if scores.len() != self.members.len() {
            return Err(Error::Shape {
                expected: self.members.len(),
                actual: scores.len(),
            });
        }
        let n_reset = n_reset.min(self.members.len());
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].loss.total_cmp(&scores[a].loss).then(a.cmp(&b)));
        let replaced: Vec<usize> = order.into_iter().take(n_reset).collect();
        let input_dim = self.input_dim();
        for &i in &replaced {
            self.members[i] = RewardHead::new(input_dim, &self.hidden, mix_seed(seed, i as u64, epoch + 1), epoch)?;
        }
        Ok(replaced)
    }

    /// Trains every member independently on `pairs` with its own shuffle
    /// stream. A member whose update fails numerically is restored to its
    /// pre-training parameters.
    pub fn train(&mut self, pairs: &[PreferencePair<'_>], epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Result<Vec<MemberTrainReport>> {
        if pairs.is_empty() {
            return Err(Error::Contract("reward training on an empty dataset".into()));
        }
        let (mode, sigma_target, lambda_sigma) = (self.mode, self.sigma_target, self.lambda_sigma);
        let round = self.trainings;
        let reports = self
            .members
            .iter_mut()
            .enumerate()
            .map(|(i, head)| {
                let backup = head.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64, 1000 + round));
                let mut opt = AdamState::new(head.net.num_params(), lr);
                let mut order: Vec<usize> = (0..pairs.len()).collect();
                let mut last = f64::NAN;
                let outcome: Result<()> = (|| {
                    for _ in 0..epochs {
                        order.shuffle(&mut rng);
                        for chunk in order.chunks(batch_size) {
                            let batch: Vec<PreferencePair<'_>> = chunk.iter().map(|&k| pairs[k]).collect();
                            let (loss, grad) = training_objective_and_grad(head, &batch, mode, sigma_target, lambda_sigma)?;
                            opt.step(head.net.as_mut_slice(), &grad)?;
                            last = loss;
                        }
                    }
                    Ok(())
                })();
                match outcome {
                    Ok(()) if head.net.is_finite() => MemberTrainReport {
                        final_loss: last,
                        steps: opt.steps(),
                        rolled_back: false,
                    },
                    _ => {
                        tracing::warn!(member = i, "reward member training failed numerically; rolled back");
                        *head = backup;
                        MemberTrainReport {
                            final_loss: f64::NAN,
                            steps: opt.steps(),
                            rolled_back: true,
                        }
                    }
                }
            })
            .collect();
        self.trainings += 1;
        Ok(reports)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = EnsembleFile {
            format: ENSEMBLE_FORMAT.into(),
            version: ENSEMBLE_FORMAT_VERSION,
            ensemble: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: EnsembleFile = serde_json::from_slice(&fs::read(path)?)?;
        if file.format != ENSEMBLE_FORMAT || file.version != ENSEMBLE_FORMAT_VERSION {
            return Err(Error::Format(format!("expected {ENSEMBLE_FORMAT} v{ENSEMBLE_FORMAT_VERSION}")));
        }
        for m in &file.ensemble.members {
            m.net.validate()?;
        }
        Ok(file.ensemble)
    }
}

/// Hard-label agreement: ties must land inside [`TIE_BAND`], decided labels
/// on the correct side of one half.
pub fn prediction_matches(prob_first: f64, target: f64) -> bool {
    if target == 0.5 {
        (TIE_BAND.0..=TIE_BAND.1).contains(&prob_first)
    } else if target == 1.0 {
        prob_first > 0.5
    } else {
        prob_first < 0.5
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    ensemble: RewardEnsemble,
}
