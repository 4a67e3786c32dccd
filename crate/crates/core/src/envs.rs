//! Powerloop tasks: the 3-D quadrotor environment, a planar point-mass
//! variant for fast experiments, and the shaped loop reward both share.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad_dynamics::{self, CtbrCommand, QuadParams, QuadState};

/// Target circle of the loop maneuver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircleSpec {
    pub center: [f64; 3],
    pub normal: [f64; 3],
    pub radius: f64,
    /// +1 or -1; flips the tangent direction.
    pub direction: f64,
    /// Planar speed above which the circular reward saturates, m/s.
    pub v_sat: f64,
}

impl Default for CircleSpec {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, 2.5],
            normal: [0.0, 1.0, 0.0],
            radius: 1.5,
            direction: 1.0,
            v_sat: 6.0,
        }
    }
}

impl CircleSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.normal();
        if (n.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("circle normal must be a unit vector".into()));
        }
        if self.radius <= 0.0 || self.v_sat <= 0.0 {
            return Err(Error::Config("circle radius and v_sat must be positive".into()));
        }
        if self.direction != 1.0 && self.direction != -1.0 {
            return Err(Error::Config("circle direction must be +1 or -1".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::from(self.normal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapedRewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_omega_xy: f64,
    pub gamma_omega_z: f64,
    pub gamma_c: f64,
}

impl Default for ShapedRewardWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 3.0,
            gamma_omega_xy: 0.008,
            gamma_omega_z: 0.008,
            gamma_c: 0.0001,
        }
    }
}

/// Which action components feed each regularization channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionChannels {
    pub omega_xy: Vec<usize>,
    pub omega_z: Vec<usize>,
    pub thrust: Vec<usize>,
}

impl ActionChannels {
    /// Quadrotor CTBR layout `[thrust, wx, wy, wz]`.
    pub fn ctbr() -> Self {
        Self {
            omega_xy: vec![1, 2],
            omega_z: vec![3],
            thrust: vec![0],
        }
    }

    /// Planar layout: both acceleration components count as `omega_xy`.
    pub fn planar() -> Self {
        Self {
            omega_xy: vec![0, 1],
            omega_z: vec![],
            thrust: vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegularizationPenalty {
    pub omega_xy: f64,
    pub omega_z: f64,
    pub thrust: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_circ: f64,
    pub p_planar: f64,
    pub p_reg: RegularizationPenalty,
    pub total: f64,
}

/// Absolute out-of-plane distance of `position` from the circle plane.
pub fn planar_penalty(position: &Vector3<f64>, spec: &CircleSpec) -> f64 {
    (position - spec.center()).dot(&spec.normal()).abs()
}

/// Loop tangent at the projection of `position` onto the circle.
///
/// On the circle axis the radial direction is undefined; there the radial
/// direction of the lowest circle point (gravity projected into the plane)
/// is used, falling back to world x when the plane is horizontal.
pub fn circle_tangent(position: &Vector3<f64>, spec: &CircleSpec) -> Vector3<f64> {
    let n = spec.normal();
    let project = |v: Vector3<f64>| v - n * v.dot(&n);
    let mut radial = project(position - spec.center());
    if radial.norm() < 1e-6 {
        radial = project(Vector3::new(0.0, 0.0, -1.0));
        if radial.norm() < 1e-6 {
            radial = project(Vector3::new(1.0, 0.0, 0.0));
        }
    }
    n.cross(&radial.normalize()) * spec.direction
}

/// Tangential component of the in-plane velocity, with the in-plane speed
/// saturated at `v_sat`.
pub fn circular_motion_reward(position: &Vector3<f64>, velocity: &Vector3<f64>, spec: &CircleSpec) -> f64 {
    let n = spec.normal();
    let planar = velocity - n * velocity.dot(&n);
    let speed = planar.norm();
    let saturated = if speed > spec.v_sat { planar * (spec.v_sat / speed) } else { planar };
    circle_tangent(position, spec).dot(&saturated)
}

/// `|d| + d^2` summed over the components of each channel, where `d` is the
/// first difference of the two most recent actions. Fewer than two actions
/// give zero penalty.
pub fn action_regularization(history: &[Vec<f64>], channels: &ActionChannels) -> RegularizationPenalty {
    if history.len() < 2 {
        return RegularizationPenalty::default();
    }
    let cur = &history[history.len() - 1];
    let prev = &history[history.len() - 2];
    let channel = |idx: &[usize]| {
        idx.iter()
            .map(|&i| {
                let d = (cur[i] - prev[i]).abs();
                d + d * d
            })
            .sum()
    };
    RegularizationPenalty {
        omega_xy: channel(&channels.omega_xy),
        omega_z: channel(&channels.omega_z),
        thrust: channel(&channels.thrust),
    }
}

pub fn shaped_reward(
    position: &Vector3<f64>,
    velocity: &Vector3<f64>,
    history: &[Vec<f64>],
    channels: &ActionChannels,
    spec: &CircleSpec,
    weights: &ShapedRewardWeights,
) -> RewardBreakdown {
    let r_circ = circular_motion_reward(position, velocity, spec);
    let p_planar = planar_penalty(position, spec);
    let p_reg = action_regularization(history, channels);
    let total = weights.alpha * r_circ
        - weights.beta * p_planar
        - (weights.gamma_omega_xy * p_reg.omega_xy
            + weights.gamma_omega_z * p_reg.omega_z
            + weights.gamma_c * p_reg.thrust);
    RewardBreakdown {
        r_circ,
        p_planar,
        p_reg,
        total,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Powerloop,
    Planar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyBox {
    pub xy_limit: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub max_speed: f64,
}

impl Default for SafetyBox {
    fn default() -> Self {
        Self {
            xy_limit: 6.0,
            z_min: 0.1,
            z_max: 6.0,
            max_speed: 15.0,
        }
    }
}

impl SafetyBox {
    pub fn contains(&self, position: &Vector3<f64>, velocity: &Vector3<f64>) -> bool {
        position.x.abs() <= self.xy_limit
            && position.y.abs() <= self.xy_limit
            && position.z >= self.z_min
            && position.z <= self.z_max
            && velocity.norm() <= self.max_speed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub circle: CircleSpec,
    pub weights: ShapedRewardWeights,
    pub safety: SafetyBox,
    /// Control steps per episode.
    pub episode_length: usize,
    /// Policy period, s.
    pub control_dt: f64,
    /// Integration step, s.
    pub sim_dt: f64,
    pub init_position: [f64; 3],
    pub init_position_noise: f64,
    pub init_velocity_noise: f64,
    pub init_attitude_noise: f64,
    /// Planar task only: acceleration produced by a unit action, m/s^2.
    /// Gravity is compensated, so a zero action holds altitude.
    pub planar_max_accel: f64,
    /// Planar task only: linear drag, 1/s.
    pub planar_drag: f64,
    pub quad: QuadParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::Powerloop,
            circle: CircleSpec::default(),
            weights: ShapedRewardWeights::default(),
            safety: SafetyBox::default(),
            episode_length: 250,
            control_dt: 0.02,
            sim_dt: 0.004,
            init_position: [0.0, 0.0, 1.2],
            init_position_noise: 0.1,
            init_velocity_noise: 0.1,
            init_attitude_noise: 0.05,
            planar_max_accel: 20.0,
            planar_drag: 0.1,
            quad: QuadParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn planar() -> Self {
        Self {
            kind: EnvKind::Planar,
            ..Self::default()
        }
    }

    pub fn control_rate(&self) -> f64 {
        1.0 / self.control_dt
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::Powerloop => 19,
            EnvKind::Planar => 6,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            EnvKind::Powerloop => 4,
            EnvKind::Planar => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.circle.validate()?;
        if self.kind == EnvKind::Planar && (self.circle.normal() - Vector3::y()).norm() > 1e-12 {
            return Err(Error::Config("the planar task requires the circle normal (0, 1, 0)".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode_length must be positive".into()));
        }
        let substeps = self.control_dt / self.sim_dt;
        if !(self.sim_dt > 0.0 && self.sim_dt <= 0.02) || (substeps - substeps.round()).abs() > 1e-9 {
            return Err(Error::Config("control_dt must be a whole multiple of sim_dt in (0, 0.02]".into()));
        }
        self.quad.validate()
    }

    fn substeps(&self) -> usize {
        (self.control_dt / self.sim_dt).round() as usize
    }
}

/// Kinematic snapshot exported for playback and trajectory files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicSample {
    pub t: f64,
    pub position: [f64; 3],
    /// `[w, x, y, z]`.
    pub attitude: [f64; 4],
    pub velocity: [f64; 3],
    pub body_rates: [f64; 3],
    pub action: Vec<f64>,
}

/// Column order of exported trajectory files.
pub fn trajectory_header(action_dim: usize) -> String {
    let mut cols: Vec<String> = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((0..action_dim).map(|i| format!("a{i}")));
    cols.join(",")
}

pub fn write_trajectory_csv(path: &std::path::Path, samples: &[KinematicSample]) -> Result<()> {
    use std::fmt::Write as _;
    let dim = samples.first().map_or(0, |s| s.action.len());
    let mut out = trajectory_header(dim);
    out.push('\n');
    for s in samples {
        let mut row = vec![s.t];
        row.extend(s.position);
        row.extend(s.attitude);
        row.extend(s.velocity);
        row.extend(s.body_rates);
        row.extend(&s.action);
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(",")).expect("writing to a String");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub sample: KinematicSample,
    pub reward: RewardBreakdown,
    pub out_of_bounds: bool,
    pub diverged: bool,
    /// Episode length reached.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub done: bool,
    pub info: StepInfo,
}

pub trait Env: Send {
    fn kind(&self) -> EnvKind;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Samples an initial state deterministically from `seed`, clears the
    /// action history and returns the first observation.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Applies one control period. Actions are clamped to `[-1, 1]`.
    fn step(&mut self, action: &[f64]) -> Transition;
    fn steps_elapsed(&self) -> usize;
    fn config(&self) -> &EnvConfig;
}

pub fn make_env(cfg: &EnvConfig) -> Result<Box<dyn Env>> {
    cfg.validate()?;
    Ok(match cfg.kind {
        EnvKind::Powerloop => Box::new(QuadEnv::new(cfg.clone())),
        EnvKind::Planar => Box::new(PlanarEnv::new(cfg.clone())),
    })
}

fn clamp_action(action: &[f64], dim: usize) -> Vec<f64> {
    assert_eq!(action.len(), dim, "action dimension");
    action.iter().map(|a| if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) }).collect()
}

fn push_history(history: &mut Vec<Vec<f64>>, action: Vec<f64>) {
    if history.len() == 2 {
        history.remove(0);
    }
    history.push(action);
}

/// First two columns of the rotation matrix, column-major.
pub fn rotation_columns(rotation: &UnitQuaternion<f64>) -> [f64; 6] {
    let m = rotation.to_rotation_matrix();
    let m = m.matrix();
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

pub struct QuadEnv {
    cfg: EnvConfig,
    state: QuadState,
    history: Vec<Vec<f64>>,
    steps: usize,
}

impl QuadEnv {
    pub fn new(cfg: EnvConfig) -> Self {
        let state = QuadState::hover(Vector3::from(cfg.init_position), &cfg.quad);
        Self {
            cfg,
            state,
            history: Vec::new(),
            steps: 0,
        }
    }

    pub fn state(&self) -> &QuadState {
        &self.state
    }

    /// Overrides the vehicle state; used by tests and scripted controllers.
    pub fn set_state(&mut self, state: QuadState) {
        self.state = state;
    }

    fn previous_action(&self) -> Vec<f64> {
        self.history.last().cloned().unwrap_or_else(|| vec![0.0; 4])
    }

    fn observation(&self) -> Vec<f64> {
        let s = &self.state;
        let mut obs = Vec::with_capacity(19);
        obs.extend(s.position.iter());
        obs.extend(rotation_columns(&s.rotation()));
        obs.extend(s.velocity.iter());
        obs.extend(s.body_rates.iter());
        obs.extend(self.previous_action());
        obs
    }

    /// Maps a normalized action to a CTBR command.
    pub fn command(&self, action: &[f64]) -> CtbrCommand {
        let lim = self.cfg.quad.max_body_rate;
        CtbrCommand::new(
            0.5 * (action[0] + 1.0),
            Vector3::new(action[1] * lim.x, action[2] * lim.y, action[3] * lim.z),
        )
    }

    fn sample(&self, action: &[f64]) -> KinematicSample {
        let s = &self.state;
        KinematicSample {
            t: self.steps as f64 * self.cfg.control_dt,
            position: s.position.into(),
            attitude: [s.attitude.w, s.attitude.i, s.attitude.j, s.attitude.k],
            velocity: s.velocity.into(),
            body_rates: s.body_rates.into(),
            action: action.to_vec(),
        }
    }
}

impl Env for QuadEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::Powerloop
    }

    fn obs_dim(&self) -> usize {
        19
    }

    fn action_dim(&self) -> usize {
        4
    }

    fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.cfg;
        let mut jitter = |scale: f64| Vector3::from_fn(|_, _| rng.gen_range(-1.0..=1.0) * scale);
        let position = Vector3::from(c.init_position) + jitter(c.init_position_noise);
        let velocity = jitter(c.init_velocity_noise);
        let tilt = jitter(c.init_attitude_noise);
        let mut state = QuadState::hover(position, &c.quad);
        state.velocity = velocity;
        state.attitude = *UnitQuaternion::from_scaled_axis(tilt).quaternion();
        self.state = state;
        self.history.clear();
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Transition {
        let action = clamp_action(action, 4);
        let cmd = self.command(&action);
        let mut diverged = false;
        for _ in 0..self.cfg.substeps() {
            match quad_dynamics::step(&self.state, &cmd, &self.cfg.quad, self.cfg.sim_dt) {
                Ok(next) => self.state = next,
                Err(_) => {
                    diverged = true;
                    break;
                }
            }
        }
        self.steps += 1;
        push_history(&mut self.history, action.clone());
        let reward = shaped_reward(
            &self.state.position,
            &self.state.velocity,
            &self.history,
            &ActionChannels::ctbr(),
            &self.cfg.circle,
            &self.cfg.weights,
        );
        let out_of_bounds = !self.cfg.safety.contains(&self.state.position, &self.state.velocity);
        let truncated = self.steps >= self.cfg.episode_length;
        Transition {
            obs: self.observation(),
            done: diverged || out_of_bounds || truncated,
            info: StepInfo {
                sample: self.sample(&action),
                reward,
                out_of_bounds,
                diverged,
                truncated,
            },
        }
    }

    fn steps_elapsed(&self) -> usize {
        self.steps
    }
}

/// Point mass moving in the vertical xz-plane of the loop.
pub struct PlanarEnv {
    cfg: EnvConfig,
    position: [f64; 2],
    velocity: [f64; 2],
    history: Vec<Vec<f64>>,
    steps: usize,
}

impl PlanarEnv {
    pub fn new(cfg: EnvConfig) -> Self {
        let p = cfg.init_position;
        Self {
            cfg,
            position: [p[0], p[2]],
            velocity: [0.0; 2],
            history: Vec::new(),
            steps: 0,
        }
    }

    /// World-frame embedding of the planar state.
    pub fn position3(&self) -> Vector3<f64> {
        Vector3::new(self.position[0], 0.0, self.position[1])
    }

    pub fn velocity3(&self) -> Vector3<f64> {
        Vector3::new(self.velocity[0], 0.0, self.velocity[1])
    }

    pub fn set_state(&mut self, position: [f64; 2], velocity: [f64; 2]) {
        self.position = position;
        self.velocity = velocity;
    }

    fn observation(&self) -> Vec<f64> {
        let prev = self.history.last().cloned().unwrap_or_else(|| vec![0.0; 2]);
        vec![
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
            prev[0],
            prev[1],
        ]
    }
}

impl Env for PlanarEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::Planar
    }

    fn obs_dim(&self) -> usize {
        6
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.cfg;
        let mut u = || rng.gen_range(-1.0..=1.0);
        self.position = [
            c.init_position[0] + u() * c.init_position_noise,
            c.init_position[2] + u() * c.init_position_noise,
        ];
        self.velocity = [u() * c.init_velocity_noise, u() * c.init_velocity_noise];
        self.history.clear();
        self.steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Transition {
        let action = clamp_action(action, 2);
        let c = &self.cfg;
        let accel_cmd = [action[0] * c.planar_max_accel, action[1] * c.planar_max_accel];
        let h = c.sim_dt;
        for _ in 0..c.substeps() {
            for k in 0..2 {
                let a = accel_cmd[k] - c.planar_drag * self.velocity[k];
                self.velocity[k] += a * h;
                self.position[k] += self.velocity[k] * h;
            }
        }
        self.steps += 1;
        push_history(&mut self.history, action.clone());
        let (p, v) = (self.position3(), self.velocity3());
        let reward = shaped_reward(&p, &v, &self.history, &ActionChannels::planar(), &c.circle, &c.weights);
        let out_of_bounds = !c.safety.contains(&p, &v);
        let truncated = self.steps >= c.episode_length;
        let sample = KinematicSample {
            t: self.steps as f64 * c.control_dt,
            position: p.into(),
            attitude: [1.0, 0.0, 0.0, 0.0],
            velocity: v.into(),
            body_rates: [0.0; 3],
            action: action.clone(),
        };
        Transition {
            obs: self.observation(),
            done: out_of_bounds || truncated,
            info: StepInfo {
                sample,
                reward,
                out_of_bounds,
                diverged: false,
                truncated,
            },
        }
    }

    fn steps_elapsed(&self) -> usize {
        self.steps
    }
}

/// One completed (or cut-off) episode as recorded by [`RecordingEnv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    /// Observation on which each action was taken.
    pub observations: Vec<Vec<f64>>,
    /// Executed (clamped) actions.
    pub actions: Vec<Vec<f64>>,
    pub shaped_rewards: Vec<f64>,
    pub track: Vec<KinematicSample>,
    pub terminated_early: bool,
}

impl Episode {
    fn new(id: u64) -> Self {
        Self {
            id,
            observations: Vec::new(),
            actions: Vec::new(),
            shaped_rewards: Vec::new(),
            track: Vec::new(),
            terminated_early: false,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn shaped_return(&self) -> f64 {
        self.shaped_rewards.iter().sum()
    }
}

/// Wraps an environment, keeps the current observation and records every
/// step of the running episode. Resets automatically on `done`.
pub struct RecordingEnv {
    env: Box<dyn Env>,
    obs: Vec<f64>,
    episode: Episode,
    reset_seed: u64,
    next_episode_id: u64,
}

impl RecordingEnv {
    /// `seed` drives the sequence of reset seeds; `episode_id_base` keeps ids
    /// unique across parallel instances.
    pub fn new(mut env: Box<dyn Env>, seed: u64, episode_id_base: u64) -> Self {
        let obs = env.reset(seed);
        Self {
            env,
            obs,
            episode: Episode::new(episode_id_base),
            reset_seed: seed,
            next_episode_id: episode_id_base + 1,
        }
    }

    pub fn observation(&self) -> &[f64] {
        &self.obs
    }

    pub fn env(&self) -> &dyn Env {
        self.env.as_ref()
    }

    pub fn current_episode(&self) -> &Episode {
        &self.episode
    }

    /// Steps the environment. Returns the transition and, when the episode
    /// ended, the finished episode record.
    pub fn step(&mut self, action: &[f64]) -> (Transition, Option<Episode>) {
        let transition = self.env.step(action);
        self.episode.observations.push(std::mem::take(&mut self.obs));
        self.episode.actions.push(transition.info.sample.action.clone());
        self.episode.shaped_rewards.push(transition.info.reward.total);
        self.episode.track.push(transition.info.sample.clone());
        if transition.done {
            self.episode.terminated_early = !transition.info.truncated;
            let finished = std::mem::replace(&mut self.episode, Episode::new(self.next_episode_id));
            self.next_episode_id += 1;
            self.reset_seed = self.reset_seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            self.obs = self.env.reset(self.reset_seed);
            (transition, Some(finished))
        } else {
            self.obs = transition.obs.clone();
            (transition, None)
        }
    }
}

/// Reference quaternion-to-matrix conversion written out element by element.
pub fn quaternion_matrix_columns(q: &Quaternion<f64>) -> [f64; 6] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y + w * z),
        2.0 * (x * z - w * y),
        2.0 * (x * y - w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z + w * x),
    ]
}
