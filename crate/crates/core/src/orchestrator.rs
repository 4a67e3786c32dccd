//! The training run: query/retrain schedule, judges, evaluation,
//! checkpoints, status reporting and the run directory layout.
//!
//! Run directory:
//!
//! ```text
//! config.resolved.toml   full configuration, non-paper values annotated
//! status.json            latest status snapshot
//! deployment.json        checkpoint chosen for deployment
//! dataset.json           preference dataset (segments + records)
//! labels.jsonl           human answers, appended before acknowledgement
//! ensemble.json          latest reward ensemble
//! checkpoints/step_<N>.json
//! logs/eval_return.csv   x,mean,std of deterministic evaluation returns
//! logs/ppo.csv           per-update PPO statistics
//! logs/reward_model.csv  per-round reward-model statistics
//! logs/rounds.csv        per-round query accounting
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::metrics::{AgreementMatrix, AgreementReport, MetricLog};
use crate::ppo::{evaluate_policy, EvalReport, PolicyCheckpoint, PpoTrainer, RewardTag};
use crate::preference::{
    extract_segments, pair_random, select_pairs, synthetic_label, HumanQueue, JudgeKind, Label, PairInputs, PreferenceDataset,
    PreferenceRecord, Segment, SegmentStore,
};
use crate::reward_model::{pref_prob_bt, pref_prob_cdf, EnsembleMode, RewardEnsemble};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const STATUS_FILE: &str = "status.json";
pub const DEPLOYMENT_FILE: &str = "deployment.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const JOURNAL_FILE: &str = "labels.jsonl";
pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const EVAL_METRIC: &str = "eval_return.csv";

/// Label budget of each of the `n_query` rounds: the first takes
/// `f_init * n_prefs`, later rounds split what is left evenly, rounding up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySchedule {
    pub n_prefs: usize,
    pub f_init: f64,
    pub n_query: usize,
    pub delta_t_retrain: u64,
}

impl QuerySchedule {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            n_prefs: cfg.preference.n_prefs,
            f_init: cfg.preference.f_init,
            n_query: cfg.preference.n_query,
            delta_t_retrain: cfg.preference.delta_t_retrain,
        }
    }

    pub fn first_round(&self) -> usize {
        ((self.f_init * self.n_prefs as f64).round() as usize).min(self.n_prefs)
    }

    /// Budget of `round` given the labels already used.
    pub fn round_budget(&self, round: usize, labels_used: usize) -> usize {
        if round >= self.n_query {
            return 0;
        }
        if round == 0 {
            return self.first_round();
        }
        let remaining = self.n_prefs.saturating_sub(labels_used);
        remaining.div_ceil(self.n_query - round)
    }

    /// Environment step at which `round` (>= 1) becomes due.
    pub fn due_at(&self, round: usize) -> u64 {
        round as u64 * self.delta_t_retrain
    }
}

/// Snapshot published to the annotation service and `status.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub mode: String,
    pub judge: String,
    pub env_steps: u64,
    pub n_timesteps: u64,
    pub epoch: u64,
    pub round: u64,
    pub labels_used: usize,
    pub labels_remaining: usize,
    pub n_prefs: usize,
    pub checkpoints: Vec<String>,
    pub deployment: Option<String>,
    pub paused: bool,
    pub active: bool,
    pub finished: bool,
    pub last_eval: Option<f64>,
}

/// Shared, consistent view of the run status.
#[derive(Debug, Default)]
pub struct StatusBoard {
    inner: RwLock<RunStatus>,
    run_dir: RwLock<Option<PathBuf>>,
}

impl StatusBoard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> RunStatus {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn update(&self, f: impl FnOnce(&mut RunStatus)) {
        let snapshot = {
            let mut g = self.inner.write().unwrap_or_else(|e| e.into_inner());
            f(&mut g);
            g.clone()
        };
        if let Some(dir) = self.run_dir() {
            if let Ok(bytes) = serde_json::to_vec_pretty(&snapshot) {
                let tmp = dir.join("status.json.tmp");
                if fs::write(&tmp, bytes).is_ok() {
                    let _ = fs::rename(tmp, dir.join(STATUS_FILE));
                }
            }
        }
    }

    pub fn attach(&self, run_dir: &Path) {
        *self.run_dir.write().unwrap_or_else(|e| e.into_inner()) = Some(run_dir.to_path_buf());
    }

    pub fn run_dir(&self) -> Option<PathBuf> {
        self.run_dir.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deployment {
    pub checkpoint: String,
    /// `annotator` or `best-eval`.
    pub selected_by: String,
}

pub fn checkpoint_path(run_dir: &Path, id: &str) -> PathBuf {
    run_dir.join("checkpoints").join(format!("{id}.json"))
}

/// Records `id` as the deployment checkpoint. Later selections replace
/// earlier ones.
pub fn select_deployment(run_dir: &Path, id: &str, selected_by: &str) -> Result<Deployment> {
    let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if !valid || !checkpoint_path(run_dir, id).is_file() {
        return Err(Error::UnknownCheckpoint(id.to_string()));
    }
    let d = Deployment {
        checkpoint: id.to_string(),
        selected_by: selected_by.to_string(),
    };
    fs::write(run_dir.join(DEPLOYMENT_FILE), serde_json::to_vec_pretty(&d)?)?;
    Ok(d)
}

pub fn read_deployment(run_dir: &Path) -> Result<Option<Deployment>> {
    let p = run_dir.join(DEPLOYMENT_FILE);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
}

/// Handles shared with an annotation service running next to the trainer.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub status: Arc<StatusBoard>,
    pub queue: Option<Arc<HumanQueue>>,
    pub cancel: Arc<AtomicBool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub env_steps: u64,
    pub budget: usize,
    pub labeled: usize,
    pub discarded: usize,
    pub from_disagreement: usize,
    pub from_epoch_mix: usize,
    pub from_random: usize,
    pub reset_members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub env_steps: u64,
    pub epochs: u64,
    pub labels_used: usize,
    pub rounds: Vec<RoundReport>,
    pub evaluations: Vec<(u64, EvalReport)>,
    pub best_eval: Option<(u64, f64)>,
    pub ensemble_created: bool,
    pub segments_extracted: usize,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Creates the run directory tree and checks that it is writable.
pub fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("logs"))?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_annotated_toml()?)?;
    Ok(dir)
}

struct Run<'a> {
    cfg: &'a RunConfig,
    ctx: &'a RunContext,
    dir: PathBuf,
    trainer: PpoTrainer,
    ensemble: Option<RewardEnsemble>,
    dataset: PreferenceDataset,
    store: SegmentStore,
    next_segment_id: u64,
    next_pair_id: u64,
    epoch: u64,
    schedule: QuerySchedule,
    rounds: Vec<RoundReport>,
    evaluations: Vec<(u64, EvalReport)>,
    best: Option<(u64, f64)>,
    next_eval: u64,
    select_rng: ChaCha8Rng,
    segment_rng: ChaCha8Rng,
    reward_rng: ChaCha8Rng,
    eval_log: MetricLog,
    ppo_log: MetricLog,
    reward_log: MetricLog,
    rounds_log: MetricLog,
    segments_extracted: usize,
}

/// Executes a full training run as configured.
pub fn run_train(cfg: &RunConfig, ctx: &RunContext) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = prepare_run_dir(cfg)?;
    let logs = dir.join("logs");
    let ensemble = match cfg.mode.ensemble_mode() {
        Some(mode) => {
            let input_dim = cfg.environment.obs_dim() + cfg.environment.action_dim();
            Some(RewardEnsemble::new(input_dim, &cfg.ensemble, mode, sub_seed(cfg.seed, 2))?)
        }
        None => None,
    };
    let mut run = Run {
        cfg,
        ctx,
        trainer: PpoTrainer::new(cfg.ppo.clone(), &cfg.environment, sub_seed(cfg.seed, 1))?,
        ensemble,
        dataset: PreferenceDataset::new(cfg.preference.n_prefs, cfg.preference.holdout_fraction),
        store: SegmentStore::new(cfg.preference.segment_pool),
        next_segment_id: 0,
        next_pair_id: 0,
        epoch: 0,
        schedule: QuerySchedule::from_config(cfg),
        rounds: Vec::new(),
        evaluations: Vec::new(),
        best: None,
        next_eval: cfg.evaluation.interval,
        select_rng: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3)),
        segment_rng: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 4)),
        reward_rng: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 5)),
        eval_log: MetricLog::curve(&logs.join(EVAL_METRIC))?,
        ppo_log: MetricLog::create(&logs.join("ppo.csv"), "x,policy_loss,value_loss,entropy,approx_kl,clip_fraction,grad_norm,train_reward")?,
        reward_log: MetricLog::create(
            &logs.join("reward_model.csv"),
            "x,round,epoch,train_pairs,final_loss_mean,holdout_accuracy_mean,holdout_accuracy_min,rolled_back",
        )?,
        rounds_log: MetricLog::create(&logs.join("rounds.csv"), "x,round,budget,labeled,discarded,disagreement,epoch_mix,random")?,
        segments_extracted: 0,
        dir: dir.clone(),
    };
    ctx.status.attach(&dir);
    ctx.status.update(|s| {
        *s = RunStatus {
            run_id: dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            mode: cfg.mode.as_str().into(),
            judge: format!("{:?}", cfg.judge).to_lowercase(),
            n_timesteps: cfg.ppo.n_timesteps,
            n_prefs: cfg.preference.n_prefs,
            labels_remaining: if cfg.mode == Mode::PpoShaped { 0 } else { cfg.preference.n_prefs },
            active: true,
            ..RunStatus::default()
        }
    });
    if let Some(q) = &ctx.queue {
        q.reserve_pair_ids(0);
    }
    let result = run.execute();
    ctx.status.update(|s| {
        s.active = false;
        s.finished = result.is_ok();
        s.paused = false;
    });
    result
}

impl Run<'_> {
    fn execute(&mut self) -> Result<RunSummary> {
        let pref = self.cfg.mode != Mode::PpoShaped;
        if pref {
            self.restore_human_labels()?;
            if self.cfg.preference.pretrain_steps > 0 {
                let eps = self.trainer.pretrain(self.cfg.preference.pretrain_steps, self.cfg.preference.knn_k)?;
                self.add_episodes(&eps);
            }
            // gather enough segments for the first round with the initial policy
            let needed = 2 * self.schedule.round_budget(0, 0);
            while self.store.len() < needed && self.trainer.env_steps < self.cfg.ppo.n_timesteps {
                self.check_cancel()?;
                let (_, eps) = self.trainer.collect()?;
                self.add_episodes(&eps);
                self.publish_steps();
            }
            self.query_round()?;
        }

        while self.trainer.env_steps < self.cfg.ppo.n_timesteps {
            self.check_cancel()?;
            let (mut buf, eps) = self.trainer.collect()?;
            if self.ensemble.is_some() {
                self.add_episodes(&eps);
            }
            match &self.ensemble {
                Some(ens) => {
                    let raw = ens.aggregate_rows(buf.reward_inputs().view(), &mut self.reward_rng)?;
                    let r = self.trainer.normalize_rewards(&raw);
                    buf.set_rewards(r, RewardTag::Learned)?;
                }
                None => buf.use_shaped(),
            }
            let mean_reward = buf.rewards.iter().sum::<f64>() / buf.len() as f64;
            let stats = self.trainer.update(&mut buf)?;
            self.ppo_log.append(
                self.trainer.env_steps as f64,
                &[
                    stats.policy_loss,
                    stats.value_loss,
                    stats.entropy,
                    stats.approx_kl,
                    stats.clip_fraction,
                    stats.grad_norm,
                    mean_reward,
                ],
            )?;
            self.publish_steps();
            if pref {
                let round = self.rounds.len();
                if round < self.schedule.n_query && self.trainer.env_steps >= self.schedule.due_at(round) {
                    self.query_round()?;
                }
            }
            if self.trainer.env_steps >= self.next_eval {
                self.evaluate()?;
                while self.next_eval <= self.trainer.env_steps {
                    self.next_eval += self.cfg.evaluation.interval;
                }
            }
        }
        if self.evaluations.last().map_or(true, |(s, _)| *s != self.trainer.env_steps) {
            self.evaluate()?;
        }
        Ok(RunSummary {
            run_dir: self.dir.clone(),
            env_steps: self.trainer.env_steps,
            epochs: self.epoch,
            labels_used: self.dataset.labeled_count(),
            rounds: self.rounds.clone(),
            evaluations: self.evaluations.clone(),
            best_eval: self.best,
            ensemble_created: self.ensemble.is_some(),
            segments_extracted: self.segments_extracted,
        })
    }

    fn check_cancel(&self) -> Result<()> {
        if self.ctx.cancel.load(Ordering::Relaxed) {
            return Err(Error::Contract("run cancelled".into()));
        }
        Ok(())
    }

    fn publish_steps(&self) {
        let steps = self.trainer.env_steps;
        self.ctx.status.update(|s| s.env_steps = steps);
    }

    fn add_episodes(&mut self, eps: &[crate::envs::Episode]) {
        if eps.is_empty() {
            return;
        }
        let keep_shaped = self.cfg.judge == JudgeKind::Synthetic;
        let ex = extract_segments(eps, self.cfg.clip_len(), self.epoch, keep_shaped, &mut self.next_segment_id, &mut self.segment_rng);
        self.segments_extracted += ex.segments.len();
        self.store.push(ex.segments);
    }

    /// Replays answers journaled by an earlier process into the dataset.
    fn restore_human_labels(&mut self) -> Result<()> {
        if self.cfg.judge != JudgeKind::Human {
            return Ok(());
        }
        let Some(q) = &self.ctx.queue else {
            return Err(Error::Config("human judge requires an annotation queue".into()));
        };
        for (rec, s1, s2) in q.drain_completed() {
            self.next_pair_id = self.next_pair_id.max(rec.pair_id + 1);
            self.next_segment_id = self.next_segment_id.max(s1.id.max(s2.id) + 1);
            self.dataset.add(rec, &s1, &s2)?;
        }
        q.reserve_pair_ids(self.next_pair_id);
        Ok(())
    }

    /// Ensemble-mean probability that the first segment is preferred.
    fn model_probability(&self, a: &Segment, b: &Segment) -> Result<Option<f64>> {
        let Some(ens) = self.ensemble.as_ref().filter(|e| e.trainings > 0) else {
            return Ok(None);
        };
        let (ia, ib) = (a.inputs(), b.inputs());
        let mut total = 0.0;
        for head in &ens.members {
            let (da, db) = (head.segment_distribution(ia.view())?, head.segment_distribution(ib.view())?);
            total += match ens.mode {
                EnsembleMode::DeterministicBt => pref_prob_bt(da.mean, db.mean),
                EnsembleMode::ProbabilisticRec => pref_prob_cdf(&da, &db),
            };
        }
        Ok(Some(total / ens.len() as f64))
    }

    fn query_round(&mut self) -> Result<()> {
        let round = self.rounds.len();
        let budget = self
            .schedule
            .round_budget(round, self.dataset.labeled_count())
            .min(self.dataset.remaining());
        self.ctx.status.update(|s| s.round = round as u64);
        let trained = self.ensemble.as_ref().filter(|e| e.trainings > 0);
        let sel = select_pairs(
            budget,
            &self.cfg.preference.pairing,
            &self.store,
            trained,
            self.cfg.preference.disagreement_pool,
            &mut self.select_rng,
        )?;
        let used: std::collections::HashSet<u64> = sel.pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        let pairs: Vec<(Segment, Segment)> = sel
            .pairs
            .iter()
            .map(|&(a, b)| (self.store.get(a).cloned().expect("selected from store"), self.store.get(b).cloned().expect("selected from store")))
            .collect();
        self.store.take(&used);

        let before = self.dataset.records.len();
        match self.cfg.judge {
            JudgeKind::Synthetic => {
                for (a, b) in &pairs {
                    let label = synthetic_label(a, b, self.cfg.preference.tie_epsilon)?;
                    let rec = PreferenceRecord {
                        pair_id: self.next_pair_id,
                        seg1: a.id,
                        seg2: b.id,
                        label,
                        judge: JudgeKind::Synthetic,
                        epoch_added: self.epoch,
                        holdout: false,
                        model_prob: self.model_probability(a, b)?,
                    };
                    self.next_pair_id += 1;
                    self.dataset.add(rec, a, b)?;
                }
            }
            JudgeKind::Human => self.human_round(round, pairs, budget)?,
        }
        let new: Vec<&PreferenceRecord> = self.dataset.records[before..].iter().collect();
        let labeled = new.iter().filter(|r| r.label != Label::Discarded).count();
        let discarded = new.len() - labeled;

        let mut report = RoundReport {
            round,
            env_steps: self.trainer.env_steps,
            budget,
            labeled,
            discarded,
            from_disagreement: sel.from_disagreement,
            from_epoch_mix: sel.from_epoch_mix,
            from_random: sel.from_random,
            reset_members: Vec::new(),
        };
        self.retrain(&mut report)?;
        self.rounds_log.append(
            round as f64,
            &[
                round as f64,
                budget as f64,
                labeled as f64,
                discarded as f64,
                sel.from_disagreement as f64,
                sel.from_epoch_mix as f64,
                sel.from_random as f64,
            ],
        )?;
        tracing::info!(round, env_steps = report.env_steps, budget, labeled, discarded, "preference round");
        self.rounds.push(report);
        let (used_labels, remaining, epoch) = (self.dataset.labeled_count(), self.dataset.remaining(), self.epoch);
        self.ctx.status.update(|s| {
            s.labels_used = used_labels;
            s.labels_remaining = remaining;
            s.epoch = epoch;
        });
        Ok(())
    }

    fn human_round(&mut self, round: usize, pairs: Vec<(Segment, Segment)>, budget: usize) -> Result<()> {
        let q = self.ctx.queue.clone().ok_or_else(|| Error::Config("human judge requires an annotation queue".into()))?;
        let mut with_probs = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            let p = self.model_probability(&a, &b)?;
            with_probs.push((a, b, p));
        }
        let n_spares = (budget as f64 * self.cfg.preference.spare_fraction).ceil() as usize;
        let spare_pool: Vec<&Segment> = self.store.current.iter().chain(&self.store.previous).collect();
        let spare_ids = pair_random(&spare_pool, n_spares, &mut self.select_rng).pairs;
        let mut spares = Vec::with_capacity(spare_ids.len());
        for &(a, b) in &spare_ids {
            let (sa, sb) = (self.store.get(a).cloned().expect("in store"), self.store.get(b).cloned().expect("in store"));
            let p = self.model_probability(&sa, &sb)?;
            spares.push((sa, sb, p));
        }
        self.store.take(&spare_ids.iter().flat_map(|&(a, b)| [a, b]).collect());
        q.reserve_pair_ids(self.next_pair_id);
        q.enqueue_round(round as u64, self.epoch, with_probs, spares);

        let timeout = Duration::from_secs_f64(self.cfg.preference.human_timeout_s);
        let mut last_progress = Instant::now();
        let mut paused = false;
        loop {
            self.check_cancel()?;
            let done = q.drain_completed();
            if !done.is_empty() {
                last_progress = Instant::now();
                if paused {
                    paused = false;
                    self.ctx.status.update(|s| s.paused = false);
                }
                for (rec, s1, s2) in done {
                    self.next_pair_id = self.next_pair_id.max(rec.pair_id + 1);
                    self.dataset.add(rec, &s1, &s2)?;
                }
                let (used, remaining) = (self.dataset.labeled_count(), self.dataset.remaining());
                self.ctx.status.update(|s| {
                    s.labels_used = used;
                    s.labels_remaining = remaining;
                });
                self.dataset.save(&self.dir.join(DATASET_FILE))?;
            }
            // pairs left once the budget is spent can never be answered
            if q.pending_len() == 0 || q.labels_remaining() == 0 {
                break;
            }
            if !paused && last_progress.elapsed() > timeout {
                paused = true;
                tracing::warn!("no human answer within {:?}; training paused", timeout);
                self.ctx.status.update(|s| s.paused = true);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        q.clear_pending();
        Ok(())
    }

    fn retrain(&mut self, report: &mut RoundReport) -> Result<()> {
        let Some(ens) = self.ensemble.as_mut() else {
            return Ok(());
        };
        let inputs = PairInputs::new(self.dataset.segments.values());
        if report.round > 0 && ens.mode == EnsembleMode::ProbabilisticRec {
            let new = self.dataset.new_since_retrain();
            let pairs = inputs.pairs(&new);
            if let Some(scores) = ens.evaluate_members(&pairs)? {
                let n_reset = ens.n_reset;
                report.reset_members = ens.reset_worst(&scores, n_reset, sub_seed(self.cfg.seed, 6), self.epoch)?;
            }
        }
        let train = self.dataset.training_records();
        let pairs = inputs.pairs(&train);
        if pairs.is_empty() {
            tracing::warn!(round = report.round, "no labeled pairs; reward model not retrained");
            return Ok(());
        }
        let reports = ens.train(
            &pairs,
            self.cfg.ensemble.n_epochs,
            self.cfg.ensemble.learning_rate,
            self.cfg.ensemble.batch_size,
            sub_seed(self.cfg.seed, 7),
        )?;
        self.dataset.mark_retrained();
        self.epoch += 1;
        self.store.advance_epoch();

        let holdout = self.dataset.holdout_records();
        let hold_pairs = inputs.pairs(&holdout);
        let (acc_mean, acc_min) = match ens.evaluate_members(&hold_pairs)? {
            Some(s) => (
                s.iter().map(|m| m.accuracy).sum::<f64>() / s.len() as f64,
                s.iter().map(|m| m.accuracy).fold(f64::INFINITY, f64::min),
            ),
            None => (f64::NAN, f64::NAN),
        };
        let finite: Vec<f64> = reports.iter().map(|r| r.final_loss).filter(|l| l.is_finite()).collect();
        let loss_mean = if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 };
        let rolled = reports.iter().filter(|r| r.rolled_back).count();
        self.reward_log.append(
            report.round as f64,
            &[report.round as f64, self.epoch as f64, pairs.len() as f64, loss_mean, acc_mean, acc_min, rolled as f64],
        )?;
        ens.save(&self.dir.join(ENSEMBLE_FILE))?;
        self.dataset.save(&self.dir.join(DATASET_FILE))?;
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let steps = self.trainer.env_steps;
        let ev = &self.cfg.evaluation;
        let report = evaluate_policy(&self.trainer.policy, &self.cfg.environment, ev.n_episodes, ev.seed)?;
        self.eval_log.append(steps as f64, &[report.mean, report.std])?;
        let id = format!("step_{steps}");
        self.trainer.checkpoint().save(&checkpoint_path(&self.dir, &id))?;
        if self.best.map_or(true, |(_, b)| report.mean > b) {
            self.best = Some((steps, report.mean));
            if self.cfg.judge == JudgeKind::Synthetic {
                select_deployment(&self.dir, &id, "best-eval")?;
            }
        }
        let mean = report.mean;
        tracing::info!(env_steps = steps, mean, std = report.std, "evaluation");
        let deployment = read_deployment(&self.dir)?.map(|d| d.checkpoint);
        self.ctx.status.update(|s| {
            s.checkpoints.push(id.clone());
            s.last_eval = Some(mean);
            s.deployment = deployment;
        });
        self.evaluations.push((steps, report));
        Ok(())
    }
}

/// Loads a checkpoint and evaluates it on `env`.
pub fn eval_checkpoint(path: &Path, env: &EnvConfig, n_episodes: usize, seed: u64) -> Result<EvalReport> {
    let ckpt = PolicyCheckpoint::load(path)?;
    evaluate_policy(&ckpt.policy, env, n_episodes, seed)
}

/// Agreement between stored model predictions and human answers in a
/// run's dataset.
pub fn agreement_for_run(run_dir: &Path) -> Result<AgreementReport> {
    let ds = PreferenceDataset::load(&run_dir.join(DATASET_FILE))?;
    Ok(AgreementMatrix::from_records(&ds.records).report())
}

/// Seed used for the `i`-th member of a multi-seed experiment.
pub fn experiment_seed(base: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..=i).map(|_| rng.gen_range(0..1u64 << 31)).last().expect("at least one draw")
}
