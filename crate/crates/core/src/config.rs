//! Run configuration: defaults per environment, TOML loading with deep
//! merge over those defaults, and the annotated resolved-config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::ppo::PpoConfig;
use crate::preference::{JudgeKind, PairingMix, DEFAULT_TIE_EPSILON};
use crate::reward_model::{EnsembleConfig, EnsembleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    PpoShaped,
    PrefPpoBt,
    RecPrefPpo,
}

impl Mode {
    pub fn ensemble_mode(self) -> Option<EnsembleMode> {
        match self {
            Mode::PpoShaped => None,
            Mode::PrefPpoBt => Some(EnsembleMode::DeterministicBt),
            Mode::RecPrefPpo => Some(EnsembleMode::ProbabilisticRec),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PpoShaped => "ppo-shaped",
            Mode::PrefPpoBt => "pref-ppo-bt",
            Mode::RecPrefPpo => "rec-pref-ppo",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo-shaped" => Ok(Mode::PpoShaped),
            "pref-ppo-bt" => Ok(Mode::PrefPpoBt),
            "rec-pref-ppo" => Ok(Mode::RecPrefPpo),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreferenceConfig {
    pub n_prefs: usize,
    #[serde(rename = "T_clip")]
    pub t_clip: f64,
    pub f_init: f64,
    pub n_query: usize,
    #[serde(rename = "Delta_t_retrain")]
    pub delta_t_retrain: u64,
    pub pairing: PairingMix,
    pub tie_epsilon: f64,
    pub holdout_fraction: f64,
    /// Upper bound on each segment pool (current and previous epoch).
    pub segment_pool: usize,
    /// Segments considered by the disagreement heuristic per round.
    pub disagreement_pool: usize,
    /// Environment steps of state-entropy pretraining; 0 disables it.
    pub pretrain_steps: u64,
    pub knn_k: usize,
    /// Seconds without a human answer before the run reports itself paused.
    pub human_timeout_s: f64,
    /// Spare pairs queued per round to replace `cant_tell` answers, as a
    /// fraction of the round budget.
    pub spare_fraction: f64,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        Self {
            n_prefs: 1000,
            t_clip: 1.25,
            f_init: 0.2,
            n_query: 10,
            delta_t_retrain: 400_000,
            pairing: PairingMix::default(),
            tie_epsilon: DEFAULT_TIE_EPSILON,
            holdout_fraction: 0.1,
            segment_pool: 4000,
            disagreement_pool: 400,
            pretrain_steps: 0,
            knn_k: 5,
            human_timeout_s: 120.0,
            spare_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Environment steps between evaluations and checkpoints.
    pub interval: u64,
    pub n_episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 800_000,
            n_episodes: 10,
            seed: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub mode: Mode,
    pub judge: JudgeKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub annotation_bind: String,
    pub environment: EnvConfig,
    pub ppo: PpoConfig,
    pub preference: PreferenceConfig,
    pub ensemble: EnsembleConfig,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    /// Paper settings for the quadrotor task, desk-scale settings for the
    /// planar task.
    pub fn defaults_for(env: EnvKind) -> Self {
        let base = Self {
            env: EnvKind::Powerloop,
            mode: Mode::RecPrefPpo,
            judge: JudgeKind::Synthetic,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            annotation_bind: "127.0.0.1:8077".into(),
            environment: EnvConfig::default(),
            ppo: PpoConfig::default(),
            preference: PreferenceConfig::default(),
            ensemble: EnsembleConfig::default(),
            evaluation: EvalConfig::default(),
        };
        match env {
            EnvKind::Powerloop => base,
            EnvKind::Planar => Self {
                env: EnvKind::Planar,
                environment: EnvConfig::planar(),
                ppo: PpoConfig {
                    n_envs: 16,
                    n_timesteps: 500_000,
                    gamma: 0.99,
                    n_epochs: 5,
                    n_steps: 250,
                    epsilon_clip: 0.2,
                    n_batch: 1000,
                    log_sigma_init: -0.5,
                    pi_arch: vec![64, 64],
                    c_entropy: 0.0,
                    ..PpoConfig::default()
                },
                preference: PreferenceConfig {
                    n_prefs: 200,
                    n_query: 5,
                    delta_t_retrain: 100_000,
                    disagreement_pool: 200,
                    segment_pool: 1000,
                    ..PreferenceConfig::default()
                },
                ensemble: EnsembleConfig {
                    d_hidden: 64,
                    n_epochs: 50,
                    learning_rate: 1e-3,
                    ..EnsembleConfig::default()
                },
                evaluation: EvalConfig {
                    interval: 50_000,
                    ..EvalConfig::default()
                },
                ..base
            },
        }
    }

    /// Parses a TOML document and merges it over the defaults of the
    /// environment it names (`env`, default `powerloop`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let env = match user.get("env") {
            None => EnvKind::Powerloop,
            Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| Error::Config(format!("env: {e}")))?,
        };
        let mut merged = toml::Value::try_from(Self::defaults_for(env)).map_err(|e| Error::Config(e.to_string()))?;
        deep_merge(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.environment.kind != self.env {
            return Err(Error::Config("environment.kind must match env".into()));
        }
        self.environment.validate()?;
        self.ppo.validate()?;
        self.ensemble.validate()?;
        self.preference.pairing.validate()?;
        let p = &self.preference;
        if !(0.0..=1.0).contains(&p.f_init) || p.t_clip <= 0.0 || p.n_query == 0 || p.delta_t_retrain == 0 {
            return Err(Error::Config("invalid preference schedule".into()));
        }
        if !(0.0..1.0).contains(&p.holdout_fraction) || p.knn_k == 0 {
            return Err(Error::Config("invalid holdout_fraction or knn_k".into()));
        }
        if self.clip_len() == 0 || self.clip_len() > self.environment.episode_length {
            return Err(Error::Config("T_clip must cover at least one step and fit inside an episode".into()));
        }
        if self.evaluation.interval == 0 {
            return Err(Error::Config("evaluation.interval must be positive".into()));
        }
        Ok(())
    }

    pub fn clip_len(&self) -> usize {
        crate::preference::clip_length(self.preference.t_clip, self.environment.control_rate())
    }

    /// TOML text of the full configuration. Lines holding settings that do
    /// not come from the published hyperparameter tables end in
    /// `# non-paper`.
    pub fn to_annotated_toml(&self) -> Result<String> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let reference = toml::Value::try_from(Self::defaults_for(EnvKind::Powerloop)).map_err(|e| Error::Config(e.to_string()))?;
        let mut section: Vec<String> = Vec::new();
        let mut out = String::with_capacity(text.len() * 2);
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && !trimmed.starts_with("[[") {
                section = trimmed.trim_matches(|c| c == '[' || c == ']').split('.').map(str::to_string).collect();
                out.push_str(line);
                out.push('\n');
                continue;
            }
            out.push_str(line);
            if let Some((key, value)) = trimmed.split_once(" = ") {
                let key = key.trim_matches('"');
                let mut path = section.clone();
                path.push(key.to_string());
                let differs = lookup(&reference, &path).is_some_and(|v| {
                    let parsed: std::result::Result<toml::Value, _> = format!("x = {value}").parse::<toml::Table>().map(|t| t["x"].clone());
                    parsed.map_or(true, |p| &p != v)
                });
                if !is_paper_key(&path) || differs {
                    out.push_str("  # non-paper");
                }
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Keys whose default values come from the published hyperparameter
/// tables, the shaped-reward definition, or values stated in the text.
fn is_paper_key(path: &[String]) -> bool {
    let p: Vec<&str> = path.iter().map(String::as_str).collect();
    matches!(
        p.as_slice(),
        ["ppo", "n_envs" | "n_timesteps" | "gamma" | "lambda_GAE" | "n_epochs" | "n_steps" | "epsilon_clip" | "n_batch" | "log_sigma_init" | "pi_arch" | "pi_activation" | "c_entropy"]
            | ["preference", "n_prefs" | "T_clip" | "f_init" | "n_query" | "Delta_t_retrain"]
            | ["preference", "pairing", "disagreement" | "epoch_mix"]
            | ["ensemble", "n_ensemble" | "n_reset" | "d_hidden_R" | "n_layers_R" | "phi_R" | "n_epochs_R" | "eta_R"]
            | ["environment", "weights", _]
            | ["evaluation", "interval"]
            | ["env" | "mode" | "judge" | "seed" | "output_dir" | "annotation_bind"]
    )
}

fn lookup<'a>(v: &'a toml::Value, path: &[String]) -> Option<&'a toml::Value> {
    path.iter().try_fold(v, |cur, k| cur.get(k.as_str()))
}

fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => deep_merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
