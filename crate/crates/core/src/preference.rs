//! Segments, pairing heuristics, judges and the preference dataset.
//!
//! Labels follow the convention `0` = first segment preferred, `1` = second
//! preferred, `0.5` = tie. Losses consume the complementary quantity, the
//! probability that the first segment is preferred.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Episode, KinematicSample};
use crate::error::{Error, Result};
use crate::reward_model::{PreferencePair, RewardEnsemble};

pub const DATASET_FORMAT: &str = "recpref-dataset";
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TIE_EPSILON: f64 = 1e-6;

/// Number of control steps in one clip.
pub fn clip_length(t_clip: f64, control_rate: f64) -> usize {
    (t_clip * control_rate + 1e-9).floor() as usize
}

/// A fixed-length slice of an episode, the unit shown to a judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u64,
    pub episode_id: u64,
    /// Reward-retrain epoch at collection time.
    pub origin_epoch: u64,
    /// Index of the first step inside the source episode.
    pub start: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Per-step shaped rewards; only kept when a synthetic judge is used.
    pub shaped_rewards: Option<Vec<f64>>,
    pub track: Vec<KinematicSample>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Rows of concatenated `(observation, action)` for the reward model.
    pub fn inputs(&self) -> Array2<f64> {
        let cols = self.observations.first().map_or(0, Vec::len) + self.actions.first().map_or(0, Vec::len);
        let mut out = Array2::zeros((self.len(), cols));
        for (t, (o, a)) in self.observations.iter().zip(&self.actions).enumerate() {
            for (j, v) in o.iter().chain(a).enumerate() {
                out[[t, j]] = *v;
            }
        }
        out
    }

    pub fn shaped_sum(&self) -> Option<f64> {
        self.shaped_rewards.as_ref().map(|r| r.iter().sum())
    }
}

/// Result of cutting episodes into clips.
#[derive(Debug, Default)]
pub struct Extraction {
    pub segments: Vec<Segment>,
    /// Episodes shorter than one clip.
    pub skipped: usize,
}

/// Cuts each episode into contiguous, non-overlapping clips starting at a
/// uniformly random offset. Segment ids are drawn from `next_id`.
pub fn extract_segments<R: Rng + ?Sized>(
    episodes: &[Episode],
    clip_len: usize,
    epoch: u64,
    keep_shaped: bool,
    next_id: &mut u64,
    rng: &mut R,
) -> Extraction {
    assert!(clip_len > 0, "clip length must be positive");
    let mut out = Extraction::default();
    for ep in episodes {
        let n = ep.len() / clip_len;
        if n == 0 {
            out.skipped += 1;
            continue;
        }
        let slack = ep.len() - n * clip_len;
        let offset = rng.gen_range(0..=slack);
        for c in 0..n {
            let r = offset + c * clip_len..offset + (c + 1) * clip_len;
            out.segments.push(Segment {
                id: *next_id,
                episode_id: ep.id,
                origin_epoch: epoch,
                start: r.start,
                observations: ep.observations[r.clone()].to_vec(),
                actions: ep.actions[r.clone()].to_vec(),
                shaped_rewards: keep_shaped.then(|| ep.shaped_rewards[r.clone()].to_vec()),
                track: ep.track[r].to_vec(),
            });
            *next_id += 1;
        }
    }
    out
}

/// Pairs produced by a heuristic. `short` is set when fewer than the
/// requested number could be formed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<(u64, u64)>,
    pub short: bool,
    /// Set when the heuristic could not run and fell back to random pairing.
    pub fell_back: bool,
}

/// Uniform matching without replacement.
pub fn pair_random<R: Rng + ?Sized>(pool: &[&Segment], k: usize, rng: &mut R) -> Pairing {
    let mut ids: Vec<u64> = pool.iter().map(|s| s.id).collect();
    ids.shuffle(rng);
    let pairs: Vec<(u64, u64)> = ids.chunks_exact(2).take(k).map(|c| (c[0], c[1])).collect();
    Pairing {
        short: pairs.len() < k,
        pairs,
        fell_back: false,
    }
}

/// Number of ensemble members contradicting the others on a pair: the size
/// of the smaller camp among members with a strict preference.
pub fn disagreement_score(sums_a: &[f64], sums_b: &[f64]) -> usize {
    let first = sums_a.iter().zip(sums_b).filter(|(a, b)| a > b).count();
    let second = sums_a.iter().zip(sums_b).filter(|(a, b)| a < b).count();
    first.min(second)
}

/// Greedy selection over all candidate pairs, highest disagreement first,
/// never reusing a segment. `member_sums[i]` holds each member's summed
/// mean reward for `ids[i]`. Ties are broken by ascending `(id_a, id_b)`.
pub fn greedy_disagreement(ids: &[u64], member_sums: &[Vec<f64>], k: usize) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    let mut candidates = Vec::with_capacity(ids.len() * ids.len().saturating_sub(1) / 2);
    for (x, &i) in order.iter().enumerate() {
        for &j in &order[x + 1..] {
            candidates.push((disagreement_score(&member_sums[i], &member_sums[j]), ids[i], ids[j]));
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(k);
    for (_, a, b) in candidates {
        if out.len() == k {
            break;
        }
        if used.contains(&a) || used.contains(&b) {
            continue;
        }
        used.insert(a);
        used.insert(b);
        out.push((a, b));
    }
    out
}

/// Per-member summed mean rewards for each segment in `pool`.
pub fn member_segment_sums(pool: &[&Segment], ensemble: &RewardEnsemble) -> Result<Vec<Vec<f64>>> {
    pool.iter().map(|s| ensemble.segment_sums(s.inputs().view())).collect()
}

/// Ensemble-disagreement pairing; falls back to random pairing while the
/// ensemble is untrained.
pub fn pair_disagreement<R: Rng + ?Sized>(
    pool: &[&Segment],
    ensemble: Option<&RewardEnsemble>,
    k: usize,
    rng: &mut R,
) -> Result<Pairing> {
    let Some(ensemble) = ensemble.filter(|e| e.trainings > 0) else {
        let mut p = pair_random(pool, k, rng);
        p.fell_back = true;
        return Ok(p);
    };
    let ids: Vec<u64> = pool.iter().map(|s| s.id).collect();
    let sums = member_segment_sums(pool, ensemble)?;
    let pairs = greedy_disagreement(&ids, &sums, k);
    Ok(Pairing {
        short: pairs.len() < k,
        pairs,
        fell_back: false,
    })
}

/// Pairs a segment from the current epoch with one from before the last
/// retrain. Falls back to random pairing over the union when a pool is empty.
pub fn pair_epoch_mix<R: Rng + ?Sized>(current: &[&Segment], previous: &[&Segment], k: usize, rng: &mut R) -> Pairing {
    if current.is_empty() || previous.is_empty() {
        let union: Vec<&Segment> = current.iter().chain(previous).copied().collect();
        let mut p = pair_random(&union, k, rng);
        p.fell_back = true;
        return p;
    }
    let mut a: Vec<u64> = current.iter().map(|s| s.id).collect();
    let mut b: Vec<u64> = previous.iter().map(|s| s.id).collect();
    a.shuffle(rng);
    b.shuffle(rng);
    let pairs: Vec<(u64, u64)> = a.into_iter().zip(b).take(k).collect();
    Pairing {
        short: pairs.len() < k,
        pairs,
        fell_back: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    First,
    Second,
    Tie,
    Discarded,
}

impl Label {
    /// Numeric label: 0 first preferred, 1 second preferred, 0.5 tie.
    pub fn value(self) -> Option<f64> {
        match self {
            Label::First => Some(0.0),
            Label::Second => Some(1.0),
            Label::Tie => Some(0.5),
            Label::Discarded => None,
        }
    }

    /// Probability that the first segment is preferred.
    pub fn target(self) -> Option<f64> {
        self.value().map(|v| 1.0 - v)
    }

    pub fn swapped(self) -> Self {
        match self {
            Label::First => Label::Second,
            Label::Second => Label::First,
            other => other,
        }
    }
}

/// Labels a pair by comparing summed shaped rewards.
pub fn synthetic_label(seg1: &Segment, seg2: &Segment, tie_epsilon: f64) -> Result<Label> {
    let (Some(r1), Some(r2)) = (seg1.shaped_sum(), seg2.shaped_sum()) else {
        return Err(Error::Contract("synthetic judge needs shaped rewards on both segments".into()));
    };
    Ok(label_from_returns(r1, r2, tie_epsilon))
}

pub fn label_from_returns(r1: f64, r2: f64, tie_epsilon: f64) -> Label {
    if (r1 - r2).abs() <= tie_epsilon {
        Label::Tie
    } else if r1 > r2 {
        Label::First
    } else {
        Label::Second
    }
}

/// Answer a human gives for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    First,
    Second,
    Tie,
    CantTell,
}

impl Choice {
    pub fn label(self) -> Label {
        match self {
            Choice::First => Label::First,
            Choice::Second => Label::Second,
            Choice::Tie => Label::Tie,
            Choice::CantTell => Label::Discarded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Synthetic,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub pair_id: u64,
    pub seg1: u64,
    pub seg2: u64,
    pub label: Label,
    pub judge: JudgeKind,
    pub epoch_added: u64,
    pub holdout: bool,
    /// Ensemble-mean probability that `seg1` is preferred, at query time.
    pub model_prob: Option<f64>,
}

/// Deterministic holdout assignment from the pair id.
fn is_holdout(pair_id: u64, fraction: f64) -> bool {
    let mut z = pair_id.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ((z >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub n_prefs: usize,
    pub holdout_fraction: f64,
    pub records: Vec<PreferenceRecord>,
    /// Every segment referenced by a record.
    pub segments: BTreeMap<u64, Segment>,
    /// Records at or after this index arrived since the last retrain.
    pub retrain_marker: usize,
}

impl PreferenceDataset {
    pub fn new(n_prefs: usize, holdout_fraction: f64) -> Self {
        Self {
            n_prefs,
            holdout_fraction,
            records: Vec::new(),
            segments: BTreeMap::new(),
            retrain_marker: 0,
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.records.iter().filter(|r| r.label != Label::Discarded).count()
    }

    pub fn remaining(&self) -> usize {
        self.n_prefs.saturating_sub(self.labeled_count())
    }

    /// Adds a record and its segments. Discarded records are kept for
    /// bookkeeping but never charged against the budget.
    pub fn add(&mut self, mut record: PreferenceRecord, seg1: &Segment, seg2: &Segment) -> Result<()> {
        if record.seg1 != seg1.id || record.seg2 != seg2.id {
            return Err(Error::Contract("record does not reference the given segments".into()));
        }
        if record.label != Label::Discarded && self.remaining() == 0 {
            return Err(Error::BudgetExhausted(self.n_prefs));
        }
        if self.records.iter().any(|r| r.pair_id == record.pair_id) {
            return Err(Error::DuplicateLabel(record.pair_id));
        }
        record.holdout = record.label != Label::Discarded && is_holdout(record.pair_id, self.holdout_fraction);
        self.segments.entry(seg1.id).or_insert_with(|| seg1.clone());
        self.segments.entry(seg2.id).or_insert_with(|| seg2.clone());
        self.records.push(record);
        Ok(())
    }

    pub fn labeled(&self) -> impl Iterator<Item = &PreferenceRecord> {
        self.records.iter().filter(|r| r.label != Label::Discarded)
    }

    pub fn training_records(&self) -> Vec<&PreferenceRecord> {
        self.labeled().filter(|r| !r.holdout).collect()
    }

    pub fn holdout_records(&self) -> Vec<&PreferenceRecord> {
        self.labeled().filter(|r| r.holdout).collect()
    }

    /// Labeled records added since the last call to [`Self::mark_retrained`].
    pub fn new_since_retrain(&self) -> Vec<&PreferenceRecord> {
        self.records[self.retrain_marker.min(self.records.len())..]
            .iter()
            .filter(|r| r.label != Label::Discarded)
            .collect()
    }

    pub fn mark_retrained(&mut self) {
        self.retrain_marker = self.records.len();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DatasetFile {
            format: DATASET_FORMAT.into(),
            version: DATASET_FORMAT_VERSION,
            n_prefs: self.n_prefs,
            holdout_fraction: self.holdout_fraction,
            retrain_marker: self.retrain_marker,
            records: self.records.clone(),
            segments: self.segments.values().cloned().collect(),
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(&file)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: DatasetFile = serde_json::from_slice(&fs::read(path)?)?;
        if file.format != DATASET_FORMAT || file.version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!("expected {DATASET_FORMAT} v{DATASET_FORMAT_VERSION}")));
        }
        let dataset = Self {
            n_prefs: file.n_prefs,
            holdout_fraction: file.holdout_fraction,
            records: file.records,
            segments: file.segments.into_iter().map(|s| (s.id, s)).collect(),
            retrain_marker: file.retrain_marker,
        };
        for r in &dataset.records {
            if !dataset.segments.contains_key(&r.seg1) || !dataset.segments.contains_key(&r.seg2) {
                return Err(Error::Format(format!("record {} references a missing segment", r.pair_id)));
            }
        }
        Ok(dataset)
    }
}

/// On-disk layout; field order is part of the format.
#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    n_prefs: usize,
    holdout_fraction: f64,
    retrain_marker: usize,
    records: Vec<PreferenceRecord>,
    segments: Vec<Segment>,
}

/// Reward-model input matrices for a set of segments, so that
/// [`PreferencePair`]s can borrow them.
#[derive(Debug, Default)]
pub struct PairInputs {
    mats: HashMap<u64, Array2<f64>>,
}

impl PairInputs {
    pub fn new<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> Self {
        Self {
            mats: segments.into_iter().map(|s| (s.id, s.inputs())).collect(),
        }
    }

    pub fn get(&self, id: u64) -> Option<&Array2<f64>> {
        self.mats.get(&id)
    }

    /// Loss-ready pairs for labeled records. Records whose segments are
    /// missing or whose label is discarded are skipped.
    pub fn pairs<'a>(&'a self, records: &[&PreferenceRecord]) -> Vec<PreferencePair<'a>> {
        records
            .iter()
            .filter_map(|r| {
                Some(PreferencePair {
                    first: self.mats.get(&r.seg1)?.view(),
                    second: self.mats.get(&r.seg2)?.view(),
                    target: r.label.target()?,
                })
            })
            .collect()
    }
}

/// Fractions of each round's budget assigned to each heuristic. Whatever
/// the fractions leave over goes to random pairing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairingMix {
    pub disagreement: f64,
    pub epoch_mix: f64,
}

impl Default for PairingMix {
    fn default() -> Self {
        Self {
            disagreement: 0.5,
            epoch_mix: 0.0,
        }
    }
}

impl PairingMix {
    pub fn thirds() -> Self {
        Self {
            disagreement: 1.0 / 3.0,
            epoch_mix: 1.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.disagreement) || !ok(self.epoch_mix) || self.disagreement + self.epoch_mix > 1.0 + 1e-12 {
            return Err(Error::Config("pairing fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        Ok(())
    }

    /// Per-heuristic counts `(disagreement, epoch_mix, random)`.
    pub fn split(&self, budget: usize) -> (usize, usize, usize) {
        // small epsilon so that e.g. 9 * (1/3) floors to 3
        let d = (budget as f64 * self.disagreement + 1e-9).floor() as usize;
        let e = (budget as f64 * self.epoch_mix + 1e-9).floor() as usize;
        let d = d.min(budget);
        let e = e.min(budget - d);
        (d, e, budget - d - e)
    }
}

/// Segments awaiting comparison, split by retrain epoch.
#[derive(Debug, Clone, Default)]
pub struct SegmentStore {
    pub current: Vec<Segment>,
    pub previous: Vec<Segment>,
    /// Upper bound on each pool; the oldest segments are dropped first.
    pub capacity: usize,
}

impl SegmentStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            current: Vec::new(),
            previous: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.current.len() + self.previous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, segments: Vec<Segment>) {
        self.current.extend(segments);
        trim_front(&mut self.current, self.capacity);
    }

    /// Moves the current pool into the previous one after a retrain.
    pub fn advance_epoch(&mut self) {
        self.previous.append(&mut self.current);
        trim_front(&mut self.previous, self.capacity);
    }

    pub fn get(&self, id: u64) -> Option<&Segment> {
        self.current.iter().chain(&self.previous).find(|s| s.id == id)
    }

    /// Removes the given segments so they are never paired again.
    pub fn take(&mut self, ids: &HashSet<u64>) -> Vec<Segment> {
        let mut taken = Vec::new();
        for pool in [&mut self.current, &mut self.previous] {
            let (used, kept): (Vec<_>, Vec<_>) = std::mem::take(pool).into_iter().partition(|s| ids.contains(&s.id));
            *pool = kept;
            taken.extend(used);
        }
        taken
    }
}

fn trim_front(v: &mut Vec<Segment>, capacity: usize) {
    if capacity > 0 && v.len() > capacity {
        v.drain(..v.len() - capacity);
    }
}

/// Outcome of one selection round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selection {
    pub pairs: Vec<(u64, u64)>,
    pub from_disagreement: usize,
    pub from_epoch_mix: usize,
    pub from_random: usize,
}

/// Splits `budget` across the heuristics and runs them in the order
/// disagreement, epoch mix, random. Any shortfall of the first two is
/// handed to random pairing. The disagreement candidates are limited to a
/// random subset of `disagreement_pool` segments.
pub fn select_pairs<R: Rng + ?Sized>(
    budget: usize,
    mix: &PairingMix,
    store: &SegmentStore,
    ensemble: Option<&RewardEnsemble>,
    disagreement_pool: usize,
    rng: &mut R,
) -> Result<Selection> {
    let (n_dis, n_mix, _) = mix.split(budget);
    let mut used: HashSet<u64> = HashSet::new();
    let mut sel = Selection::default();
    let free = |pool: &[Segment], used: &HashSet<u64>| -> Vec<usize> { (0..pool.len()).filter(|&i| !used.contains(&pool[i].id)).collect() };

    if n_dis > 0 {
        let all: Vec<&Segment> = store.current.iter().chain(&store.previous).collect();
        let mut idx: Vec<usize> = (0..all.len()).collect();
        if disagreement_pool > 0 && idx.len() > disagreement_pool {
            idx.shuffle(rng);
            idx.truncate(disagreement_pool);
        }
        let pool: Vec<&Segment> = idx.into_iter().map(|i| all[i]).collect();
        let p = pair_disagreement(&pool, ensemble, n_dis, rng)?;
        for &(a, b) in &p.pairs {
            used.insert(a);
            used.insert(b);
        }
        sel.from_disagreement = p.pairs.len();
        sel.pairs.extend(p.pairs);
    }
    if n_mix > 0 {
        let cur: Vec<&Segment> = free(&store.current, &used).into_iter().map(|i| &store.current[i]).collect();
        let prev: Vec<&Segment> = free(&store.previous, &used).into_iter().map(|i| &store.previous[i]).collect();
        let p = pair_epoch_mix(&cur, &prev, n_mix, rng);
        for &(a, b) in &p.pairs {
            used.insert(a);
            used.insert(b);
        }
        sel.from_epoch_mix = p.pairs.len();
        sel.pairs.extend(p.pairs);
    }
    let rest = budget - sel.pairs.len();
    if rest > 0 {
        let pool: Vec<&Segment> = store.current.iter().chain(&store.previous).filter(|s| !used.contains(&s.id)).collect();
        let p = pair_random(&pool, rest, rng);
        sel.from_random = p.pairs.len();
        sel.pairs.extend(p.pairs);
    }
    if sel.pairs.is_empty() && budget > 0 {
        tracing::warn!(budget, segments = store.len(), "no pairs could be formed; round skipped");
    }
    Ok(sel)
}

/// A pair waiting for a human answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub pair_id: u64,
    pub seg1: Segment,
    pub seg2: Segment,
    pub round: u64,
    pub model_prob: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub pair_id: u64,
    pub accepted_label: Label,
    pub labels_used: usize,
    pub labels_remaining: usize,
    /// Pair id of the replacement query scheduled after a `cant_tell`.
    pub replacement: Option<u64>,
}

/// Journal line: everything needed to rebuild an answered record.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct JournalEntry {
    record: PreferenceRecord,
    seg1: Segment,
    seg2: Segment,
    timestamp: f64,
}

#[derive(Debug, Default)]
struct QueueState {
    pending: VecDeque<PendingQuery>,
    reserve: VecDeque<(Segment, Segment, Option<f64>)>,
    answered: HashSet<u64>,
    completed: Vec<(PreferenceRecord, Segment, Segment)>,
    labels_used: usize,
    shown: usize,
    next_pair_id: u64,
    round: u64,
    epoch: u64,
}

/// The shared human-label queue. Every operation takes the single lock, so
/// concurrent submissions are linearizable.
#[derive(Debug)]
pub struct HumanQueue {
    n_prefs: usize,
    journal: Option<PathBuf>,
    state: Mutex<QueueState>,
}

impl HumanQueue {
    pub fn new(n_prefs: usize, journal: Option<PathBuf>) -> Self {
        Self {
            n_prefs,
            journal,
            state: Mutex::new(QueueState::default()),
        }
    }

    /// Rebuilds the answered records from a journal written by an earlier
    /// process. Recovered records are handed out by the next
    /// [`drain_completed`](Self::drain_completed); returns their count.
    pub fn restore(n_prefs: usize, journal: PathBuf) -> Result<(Self, usize)> {
        let q = Self::new(n_prefs, Some(journal.clone()));
        let mut recovered = 0;
        if journal.exists() {
            let reader = BufReader::new(File::open(&journal)?);
            let mut st = q.lock();
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: JournalEntry = serde_json::from_str(&line)?;
                st.answered.insert(e.record.pair_id);
                st.next_pair_id = st.next_pair_id.max(e.record.pair_id + 1);
                st.shown += 1;
                if e.record.label != Label::Discarded {
                    st.labels_used += 1;
                }
                st.completed.push((e.record, e.seg1, e.seg2));
                recovered += 1;
            }
        }
        Ok((q, recovered))
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn n_prefs(&self) -> usize {
        self.n_prefs
    }

    pub fn labels_used(&self) -> usize {
        self.lock().labels_used
    }

    pub fn labels_remaining(&self) -> usize {
        self.n_prefs.saturating_sub(self.labels_used())
    }

    /// Number of answered pairs, discarded ones included.
    pub fn shown(&self) -> usize {
        self.lock().shown
    }

    pub fn pending_len(&self) -> usize {
        self.lock().pending.len()
    }

    /// Continues pair numbering after previously recorded pairs.
    pub fn reserve_pair_ids(&self, next: u64) {
        let mut st = self.lock();
        st.next_pair_id = st.next_pair_id.max(next);
    }

    /// Queues a round of pairs, plus spare pairs used to replace discarded
    /// answers. Returns the assigned pair ids.
    pub fn enqueue_round(
        &self,
        round: u64,
        epoch: u64,
        pairs: Vec<(Segment, Segment, Option<f64>)>,
        spares: Vec<(Segment, Segment, Option<f64>)>,
    ) -> Vec<u64> {
        let mut st = self.lock();
        st.round = round;
        st.epoch = epoch;
        st.reserve = spares.into();
        let mut ids = Vec::with_capacity(pairs.len());
        for (seg1, seg2, model_prob) in pairs {
            let pair_id = st.next_pair_id;
            st.next_pair_id += 1;
            st.pending.push_back(PendingQuery {
                pair_id,
                seg1,
                seg2,
                round,
                model_prob,
            });
            ids.push(pair_id);
        }
        ids
    }

    /// Oldest unanswered pair.
    pub fn next_query(&self) -> Option<PendingQuery> {
        self.lock().pending.front().cloned()
    }

    pub fn find_segment(&self, id: u64) -> Option<Segment> {
        let st = self.lock();
        let found = st
            .pending
            .iter()
            .flat_map(|q| [&q.seg1, &q.seg2])
            .chain(st.completed.iter().flat_map(|c| [&c.1, &c.2]))
            .find(|s| s.id == id)
            .cloned();
        found
    }

    /// Records an answer. The journal line is flushed before returning.
    pub fn submit(&self, pair_id: u64, choice: Choice, timestamp: f64) -> Result<SubmitAck> {
        let mut st = self.lock();
        if st.answered.contains(&pair_id) {
            return Err(Error::DuplicateLabel(pair_id));
        }
        let Some(pos) = st.pending.iter().position(|q| q.pair_id == pair_id) else {
            return Err(Error::UnknownPair(pair_id));
        };
        let label = choice.label();
        if label != Label::Discarded && st.labels_used >= self.n_prefs {
            return Err(Error::BudgetExhausted(self.n_prefs));
        }
        let query = st.pending[pos].clone();
        let record = PreferenceRecord {
            pair_id,
            seg1: query.seg1.id,
            seg2: query.seg2.id,
            label,
            judge: JudgeKind::Human,
            epoch_added: st.epoch,
            holdout: false,
            model_prob: query.model_prob,
        };
        if let Some(path) = &self.journal {
            let entry = JournalEntry {
                record: record.clone(),
                seg1: query.seg1.clone(),
                seg2: query.seg2.clone(),
                timestamp,
            };
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            f.sync_data()?;
        }
        st.pending.remove(pos);
        st.answered.insert(pair_id);
        st.shown += 1;
        if label != Label::Discarded {
            st.labels_used += 1;
        }
        let mut replacement = None;
        if label == Label::Discarded {
            if let Some((seg1, seg2, model_prob)) = st.reserve.pop_front() {
                let id = st.next_pair_id;
                st.next_pair_id += 1;
                let round = st.round;
                st.pending.push_back(PendingQuery {
                    pair_id: id,
                    seg1,
                    seg2,
                    round,
                    model_prob,
                });
                replacement = Some(id);
            }
        }
        st.completed.push((record, query.seg1, query.seg2));
        Ok(SubmitAck {
            pair_id,
            accepted_label: label,
            labels_used: st.labels_used,
            labels_remaining: self.n_prefs.saturating_sub(st.labels_used),
            replacement,
        })
    }

    /// Hands answered records to the trainer.
    pub fn drain_completed(&self) -> Vec<(PreferenceRecord, Segment, Segment)> {
        std::mem::take(&mut self.lock().completed)
    }

    /// Drops unanswered pairs and spares, e.g. when a round is abandoned.
    pub fn clear_pending(&self) {
        let mut st = self.lock();
        st.pending.clear();
        st.reserve.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(id: u64, len: usize) -> Episode {
        Episode {
            id,
            observations: (0..len).map(|t| vec![t as f64, 1.0]).collect(),
            actions: (0..len).map(|t| vec![-(t as f64)]).collect(),
            shaped_rewards: (0..len).map(|t| t as f64 * 0.1).collect(),
            track: (0..len)
                .map(|t| KinematicSample {
                    t: t as f64 * 0.02,
                    position: [0.0; 3],
                    attitude: [1.0, 0.0, 0.0, 0.0],
                    velocity: [0.0; 3],
                    body_rates: [0.0; 3],
                    action: vec![0.0],
                })
                .collect(),
            terminated_early: false,
        }
    }

    pub(crate) fn seg(id: u64, shaped: Option<Vec<f64>>) -> Segment {
        Segment {
            id,
            episode_id: 0,
            origin_epoch: 0,
            start: 0,
            observations: vec![vec![id as f64]; 2],
            actions: vec![vec![0.0]; 2],
            shaped_rewards: shaped,
            track: Vec::new(),
        }
    }

    #[test]
    fn clip_length_floors() {
        assert_eq!(clip_length(1.25, 50.0), 62);
        assert_eq!(clip_length(1.0, 50.0), 50);
    }

    #[test]
    fn extraction_counts_and_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut next = 0;
        let ex = extract_segments(&[episode(1, 250), episode(2, 30)], 62, 3, true, &mut next, &mut rng);
        assert_eq!(ex.segments.len(), 4);
        assert_eq!(ex.skipped, 1);
        assert!(ex.segments.iter().all(|s| s.len() == 62 && s.origin_epoch == 3));
        let ids: Vec<u64> = ex.segments.iter().map(|s| s.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        // contiguous and non-overlapping
        for w in ex.segments.windows(2) {
            assert_eq!(w[1].start, w[0].start + 62);
        }
        // observations line up with the recorded step index
        let s = &ex.segments[1];
        assert_eq!(s.observations[0][0], s.start as f64);
        assert_eq!(s.shaped_rewards.as_ref().unwrap().len(), 62);
    }

    #[test]
    fn extraction_is_seeded() {
        let eps = [episode(1, 200), episode(2, 170)];
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut next = 0;
            extract_segments(&eps, 62, 0, false, &mut next, &mut rng)
                .segments
                .iter()
                .map(|s| s.start)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn random_pairing_sizes() {
        let segs: Vec<Segment> = (0..4).map(|i| seg(i, None)).collect();
        let refs: Vec<&Segment> = segs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = pair_random(&refs, 2, &mut rng);
        assert_eq!(p.pairs.len(), 2);
        assert!(!p.short);
        let p = pair_random(&refs[..3], 2, &mut rng);
        assert_eq!(p.pairs.len(), 1);
        assert!(p.short);
        let a = pair_random(&refs, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let b = pair_random(&refs, 2, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn identical_members_fall_back_to_id_order() {
        let ids = [5, 3, 9, 1];
        let sums = vec![vec![1.0; 5]; 4];
        assert_eq!(greedy_disagreement(&ids, &sums, 2), vec![(1, 3), (5, 9)]);
    }

    #[test]
    fn epoch_mix_spans_pools() {
        let cur: Vec<Segment> = (0..3).map(|i| seg(i, None)).collect();
        let prev: Vec<Segment> = (10..13).map(|i| seg(i, None)).collect();
        let c: Vec<&Segment> = cur.iter().collect();
        let p: Vec<&Segment> = prev.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = pair_epoch_mix(&c, &p, 3, &mut rng);
        assert_eq!(out.pairs.len(), 3);
        assert!(out.pairs.iter().all(|&(a, b)| a < 10 && b >= 10));
        let fb = pair_epoch_mix(&c, &[], 1, &mut rng);
        assert!(fb.fell_back);
        assert_eq!(fb.pairs.len(), 1);
    }

    #[test]
    fn synthetic_labels() {
        let a = seg(0, Some(vec![5.0, 5.0]));
        let b = seg(1, Some(vec![6.0, 4.0]));
        let c = seg(2, Some(vec![6.0, 6.0]));
        assert_eq!(synthetic_label(&a, &b, DEFAULT_TIE_EPSILON).unwrap(), Label::Tie);
        assert_eq!(synthetic_label(&c, &a, DEFAULT_TIE_EPSILON).unwrap(), Label::First);
        assert_eq!(synthetic_label(&c, &a, DEFAULT_TIE_EPSILON).unwrap().value(), Some(0.0));
        assert_eq!(synthetic_label(&a, &c, DEFAULT_TIE_EPSILON).unwrap().value(), Some(1.0));
        assert!(matches!(synthetic_label(&a, &seg(3, None), 1e-6), Err(Error::Contract(_))));
    }

    #[test]
    fn mix_split_rounding() {
        assert_eq!(PairingMix::default().split(10), (5, 0, 5));
        assert_eq!(PairingMix::thirds().split(9), (3, 3, 3));
        assert_eq!(PairingMix::thirds().split(10), (3, 3, 4));
    }

    #[test]
    fn select_pairs_fills_budget_without_reuse() {
        let mut store = SegmentStore::new(0);
        store.push((0..10).map(|i| seg(i, None)).collect());
        store.advance_epoch();
        store.push((10..20).map(|i| seg(i, None)).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sel = select_pairs(9, &PairingMix::thirds(), &store, None, 0, &mut rng).unwrap();
        assert_eq!(sel.pairs.len(), 9);
        assert_eq!((sel.from_disagreement, sel.from_epoch_mix, sel.from_random), (3, 3, 3));
        let mut seen = HashSet::new();
        for (a, b) in &sel.pairs {
            assert!(seen.insert(*a) && seen.insert(*b));
        }
    }

    #[test]
    fn queue_flow() {
        let q = HumanQueue::new(3, None);
        let ids = q.enqueue_round(
            0,
            0,
            vec![(seg(0, None), seg(1, None), None), (seg(2, None), seg(3, None), Some(0.7))],
            vec![(seg(4, None), seg(5, None), None)],
        );
        assert_eq!(q.next_query().unwrap().pair_id, ids[0]);
        let ack = q.submit(ids[0], Choice::First, 0.0).unwrap();
        assert_eq!((ack.labels_used, ack.accepted_label), (1, Label::First));
        assert!(matches!(q.submit(ids[0], Choice::Second, 0.0), Err(Error::DuplicateLabel(_))));
        assert!(matches!(q.submit(999, Choice::Second, 0.0), Err(Error::UnknownPair(999))));
        let ack = q.submit(ids[1], Choice::CantTell, 0.0).unwrap();
        assert_eq!(ack.labels_used, 1);
        let rep = ack.replacement.unwrap();
        assert_eq!(q.next_query().unwrap().pair_id, rep);
        assert_eq!(q.drain_completed().len(), 2);
        assert_eq!(q.shown(), 2);
    }

    #[test]
    fn journal_restores_answers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let q = HumanQueue::new(10, Some(path.clone()));
        let ids = q.enqueue_round(0, 0, vec![(seg(0, None), seg(1, None), None), (seg(2, None), seg(3, None), None)], vec![]);
        q.submit(ids[0], Choice::Tie, 1.0).unwrap();
        q.submit(ids[1], Choice::CantTell, 2.0).unwrap();
        drop(q);
        let (q2, recovered) = HumanQueue::restore(10, path).unwrap();
        assert_eq!(recovered, 2);
        assert_eq!(q2.labels_used(), 1);
        let drained = q2.drain_completed();
        assert_eq!(drained[0].0.label, Label::Tie);
        assert_eq!(drained[1].0.label, Label::Discarded);
        assert_eq!(q2.labels_used(), 1);
        assert!(matches!(q2.submit(ids[0], Choice::First, 3.0), Err(Error::DuplicateLabel(_))));
    }

    #[test]
    fn dataset_budget_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = PreferenceDataset::new(2, 0.5);
        let (a, b, c) = (seg(0, None), seg(1, None), seg(2, None));
        let rec = |pair_id, s1: &Segment, s2: &Segment, label| PreferenceRecord {
            pair_id,
            seg1: s1.id,
            seg2: s2.id,
            label,
            judge: JudgeKind::Synthetic,
            epoch_added: 0,
            holdout: false,
            model_prob: None,
        };
        ds.add(rec(0, &a, &b, Label::First), &a, &b).unwrap();
        ds.add(rec(1, &a, &c, Label::Discarded), &a, &c).unwrap();
        ds.add(rec(2, &b, &c, Label::Tie), &b, &c).unwrap();
        assert!(matches!(ds.add(rec(3, &b, &c, Label::Second), &b, &c), Err(Error::BudgetExhausted(2))));
        assert_eq!(ds.labeled_count(), 2);
        assert_eq!(ds.new_since_retrain().len(), 2);
        ds.mark_retrained();
        assert!(ds.new_since_retrain().is_empty());
        let path = dir.path().join("ds.json");
        ds.save(&path).unwrap();
        assert_eq!(PreferenceDataset::load(&path).unwrap(), ds);
    }
}
