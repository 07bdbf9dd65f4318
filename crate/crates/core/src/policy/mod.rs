//! Robot policies: the learned port-Hamiltonian diffusion policy and the
//! hand-written baselines it is compared against.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ConditionVector, DiffusionError, DiffusionHead, DiffusionNoise, DiffusionSchedule};
use crate::encoder::{
    EncoderConfig, EncoderError, HamiltonianHeads, HeadInit, LearnedHamiltonian, ObservationWindow, RobotCoupling, SpatialTemporalEncoder,
};
use crate::env::{clip_norm, ScenarioConfig, orca_velocity, social_force, ForceAgent, Observation, OrcaAgent, SocialForceConfig, Vec2};
use crate::tensor::Checkpoint;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const CONDITION_DIM: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("policy config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("policy does not fit scenario: {0}")]
    Mismatch(String),
    #[error("non-finite policy output")]
    NonFinite,
}

/// Decides the robot velocity from the observation history (last entry is
/// the current observation). `step_seed` fixes any internal noise.
pub trait RobotPolicy: Send + Sync {
    fn name(&self) -> &str;
    fn act(&self, history: &[Observation], step_seed: u64) -> Result<Vec2, PolicyError>;
    /// Rejects scenarios the policy was not built for.
    fn check_scenario(&self, _scenario: &ScenarioConfig) -> Result<(), PolicyError> {
        Ok(())
    }
}

fn check_time_step(policy: f64, scenario: &ScenarioConfig) -> Result<(), PolicyError> {
    if (policy - scenario.time_step).abs() > 1e-12 {
        return Err(PolicyError::Mismatch(format!(
            "policy time step {policy} s, scenario time step {} s",
            scenario.time_step
        )));
    }
    Ok(())
}

fn robot_goal_velocity(o: &Observation, time_step: f64) -> Vec2 {
    let r = &o.robot;
    let d = [r[5] - r[0], r[6] - r[1]];
    let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if dist < 1e-12 {
        return [0.0, 0.0];
    }
    let speed = r[7].min(dist / time_step);
    [d[0] * speed / dist, d[1] * speed / dist]
}

/// Heads straight for the goal at the preferred speed.
#[derive(Debug, Clone, Copy)]
pub struct StraightLine {
    pub time_step: f64,
}

impl RobotPolicy for StraightLine {
    fn name(&self) -> &str {
        "straight"
    }

    fn act(&self, history: &[Observation], _: u64) -> Result<Vec2, PolicyError> {
        let o = history.last().ok_or(EncoderError::NoSteps)?;
        Ok(robot_goal_velocity(o, self.time_step))
    }

    fn check_scenario(&self, scenario: &ScenarioConfig) -> Result<(), PolicyError> {
        check_time_step(self.time_step, scenario)
    }
}

/// Never moves.
#[derive(Debug, Clone, Copy)]
pub struct Frozen;

impl RobotPolicy for Frozen {
    fn name(&self) -> &str {
        "frozen"
    }

    fn act(&self, _: &[Observation], _: u64) -> Result<Vec2, PolicyError> {
        Ok([0.0, 0.0])
    }
}

/// Reciprocal collision avoidance with the observed pedestrians, assuming
/// they share the avoidance effort (they do not, since they cannot see
/// the robot).
#[derive(Debug, Clone, Copy)]
pub struct OrcaRobot {
    pub horizon: f64,
    pub time_step: f64,
}

impl RobotPolicy for OrcaRobot {
    fn name(&self) -> &str {
        "orca"
    }

    fn act(&self, history: &[Observation], _: u64) -> Result<Vec2, PolicyError> {
        let o = history.last().ok_or(EncoderError::NoSteps)?;
        let r = &o.robot;
        let me = OrcaAgent {
            position: [r[0], r[1]],
            velocity: [r[2], r[3]],
            radius: r[4],
        };
        let neighbors: Vec<OrcaAgent> = o
            .humans
            .iter()
            .map(|h| OrcaAgent {
                position: [h[0], h[1]],
                velocity: [h[2], h[3]],
                radius: h[4],
            })
            .collect();
        let pref = robot_goal_velocity(o, self.time_step);
        Ok(orca_velocity(&me, &neighbors, pref, r[7], self.horizon, self.time_step).velocity)
    }

    fn check_scenario(&self, scenario: &ScenarioConfig) -> Result<(), PolicyError> {
        check_time_step(self.time_step, scenario)
    }
}

/// Social-force agent steering the robot.
#[derive(Debug, Clone, Copy)]
pub struct SocialForceRobot {
    pub config: SocialForceConfig,
    pub time_step: f64,
}

impl RobotPolicy for SocialForceRobot {
    fn name(&self) -> &str {
        "sf"
    }

    fn act(&self, history: &[Observation], step_seed: u64) -> Result<Vec2, PolicyError> {
        let o = history.last().ok_or(EncoderError::NoSteps)?;
        let r = &o.robot;
        let me = ForceAgent {
            position: [r[0], r[1]],
            velocity: [r[2], r[3]],
            radius: r[4],
        };
        let neighbors: Vec<ForceAgent> = o
            .humans
            .iter()
            .map(|h| ForceAgent {
                position: [h[0], h[1]],
                velocity: [h[2], h[3]],
                radius: h[4],
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let a = social_force(&me, &neighbors, [r[5], r[6]], r[7], &self.config, &mut rng);
        Ok(clip_norm([r[2] + a[0] * self.time_step, r[3] + a[1] * self.time_step], r[7]))
    }

    fn check_scenario(&self, scenario: &ScenarioConfig) -> Result<(), PolicyError> {
        check_time_step(self.time_step, scenario)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub kappa: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub candidates: usize,
    pub hidden: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            kappa: 5,
            alpha_min: 1e-4,
            alpha_max: 0.05,
            candidates: 20,
            hidden: 32,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule, DiffusionError> {
        DiffusionSchedule::linear(self.steps, self.kappa, self.alpha_min, self.alpha_max, self.candidates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Seed of the parameter initialization.
    pub seed: u64,
    pub time_step: f64,
    pub encoder: EncoderConfig,
    pub diffusion: DiffusionConfig,
    pub init: HeadInit,
    /// Preferred social distance fed to the condition vector, m.
    pub social_distance: f64,
    /// Static-obstacle summary fed to the condition vector.
    pub obstacle_summary: f64,
    /// Initial log standard deviation of the exploration Gaussian.
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            time_step: 0.25,
            encoder: EncoderConfig::default(),
            diffusion: DiffusionConfig::default(),
            init: HeadInit::default(),
            social_distance: 0.5,
            obstacle_summary: 0.0,
            init_log_std: -0.7,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let e = &self.encoder;
        if e.width == 0 || e.heads == 0 || e.width % e.heads != 0 {
            return Err(PolicyError::Config(format!(
                "encoder width {} must be a positive multiple of heads {}",
                e.width, e.heads
            )));
        }
        if e.window == 0 {
            return Err(PolicyError::Config("encoder window must be at least 1".into()));
        }
        if !(self.time_step > 0.0) {
            return Err(PolicyError::Config(format!("time step {} must be positive", self.time_step)));
        }
        if self.diffusion.hidden == 0 {
            return Err(PolicyError::Config("diffusion hidden width must be positive".into()));
        }
        self.diffusion.schedule()?;
        Ok(())
    }
}

/// Everything the learned policy computes for one decision.
#[derive(Debug, Clone, Copy)]
pub struct PolicyForward<'t> {
    /// `[1×2]` port-Hamiltonian velocity action.
    pub u_ph: Var<'t>,
    /// `[1×2]` eval-mode diffusion mean, clipped to the preferred speed.
    pub mean: Var<'t>,
    pub coupling: RobotCoupling<'t>,
}

/// Spatial-temporal encoder, learned Hamiltonian heads and the leapfrog
/// diffusion head, with a state-independent exploration log-std.
#[derive(Debug, Clone)]
pub struct HamiltonianPolicy {
    pub config: PolicyConfig,
    pub store: ParamStore,
    pub encoder: SpatialTemporalEncoder,
    pub heads: HamiltonianHeads,
    pub diffusion: DiffusionHead,
    pub log_std: ParamId,
}

impl HamiltonianPolicy {
    pub fn new(config: PolicyConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.encoder.width;
        let encoder = SpatialTemporalEncoder::new(&mut store, "encoder", config.encoder, &mut rng);
        let heads = HamiltonianHeads::new(&mut store, "hamiltonian", d, &config.init, &mut rng);
        let diffusion = DiffusionHead::new(
            &mut store,
            "diffusion",
            config.diffusion.schedule()?,
            d,
            CONDITION_DIM,
            config.diffusion.hidden,
            &mut rng,
        );
        let log_std = store.insert("policy.log_std", Tensor::filled(&[2], config.init_log_std));
        Ok(Self {
            config,
            store,
            encoder,
            heads,
            diffusion,
            log_std,
        })
    }

    pub fn window(&self, history: &[Observation]) -> Result<ObservationWindow, PolicyError> {
        Ok(ObservationWindow::from_history(history, self.config.encoder.window)?)
    }

    /// `I_C = [goal offset / 8, social distance, obstacle summary]`.
    pub fn condition(&self, window: &ObservationWindow) -> Result<ConditionVector, PolicyError> {
        let p = window.states()[0];
        let g = window.robot_goal();
        Ok(ConditionVector::new(vec![
            (g[0] - p[0]) / 8.0,
            (g[1] - p[1]) / 8.0,
            self.config.social_distance,
            self.config.obstacle_summary,
        ])?)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, window: &ObservationWindow, noise: &DiffusionNoise) -> Result<PolicyForward<'t>, PolicyError> {
        let f = self.encoder.encode(tape, &self.store, window);
        let coupling = self.heads.robot_coupling(tape, &self.store, &f, window);
        let s = window.states()[0];
        let velocity = tape.constant(Tensor::from_raw(vec![1, 2], vec![s[2], s[3]]));
        let u_ph = velocity + coupling.force.scale(self.config.time_step);
        let context = f.y_f.gather_rows(Rc::new(vec![window.steps() - 1]));
        let condition = self.condition(window)?;
        let out = self.diffusion.forward(
            tape,
            &self.store,
            u_ph,
            context,
            &condition,
            noise,
            window.robot_v_pref(),
        )?;
        Ok(PolicyForward {
            u_ph,
            mean: out.action,
            coupling,
        })
    }

    pub fn noise(&self, seed: u64) -> DiffusionNoise {
        DiffusionNoise::from_seed(&self.diffusion.schedule, seed)
    }

    /// Learned port-Hamiltonian terms for the window ending at the last
    /// observation.
    pub fn learned_hamiltonian(&self, history: &[Observation]) -> Result<LearnedHamiltonian, PolicyError> {
        let window = self.window(history)?;
        let tape = Tape::new();
        let f = self.encoder.encode(&tape, &self.store, &window);
        Ok(self.heads.hamiltonian(&tape, &self.store, &f, &window))
    }

    /// Eval-mode action as plain numbers.
    pub fn mean_action(&self, history: &[Observation], noise_seed: u64) -> Result<Vec2, PolicyError> {
        let window = self.window(history)?;
        let tape = Tape::new();
        let out = self.forward(&tape, &window, &self.noise(noise_seed))?;
        let m = out.mean.value();
        let a = [m.data()[0], m.data()[1]];
        if !a[0].is_finite() || !a[1].is_finite() {
            return Err(PolicyError::NonFinite);
        }
        Ok(a)
    }

    pub fn std(&self) -> Vec2 {
        let l = self.store.value(self.log_std).data();
        [l[0].exp(), l[1].exp()]
    }

    /// Parameters plus the policy config as TOML metadata, prefixed by
    /// `extra` (e.g. the training config).
    pub fn to_checkpoint(&self, extra: &str) -> Checkpoint {
        let policy = toml::to_string(&self.config).expect("policy config serializes");
        Checkpoint {
            metadata: format!("{extra}{POLICY_MARKER}\n{policy}"),
            tensors: self.store.named_values(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PolicyError> {
        let text = ckpt
            .metadata
            .split_once(POLICY_MARKER)
            .map(|(_, t)| t)
            .ok_or_else(|| PolicyError::Checkpoint("metadata lacks a policy config".into()))?;
        let config: PolicyConfig = toml::from_str(text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let mut policy = Self::new(config)?;
        policy
            .store
            .load_named(&ckpt.tensors)
            .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        Ok(policy)
    }
}

const POLICY_MARKER: &str = "# policy config";

/// `log N(action; mean, diag(exp(log_std))²)` summed over components.
pub fn gaussian_log_prob<'t>(mean: Var<'t>, log_std: Var<'t>, action: Vec2) -> Var<'t> {
    let tape = mean.tape();
    let a = tape.constant(Tensor::from_raw(vec![1, 2], action.to_vec()));
    let z = (a - mean).div((log_std).exp());
    (z.square().scale(-0.5) - log_std).sum().add_scalar(-(2.0 * PI).ln())
}

/// Plain-number twin of [`gaussian_log_prob`].
pub fn gaussian_log_prob_value(mean: Vec2, std: Vec2, action: Vec2) -> f64 {
    (0..2)
        .map(|k| {
            let z = (action[k] - mean[k]) / std[k];
            -0.5 * z * z - std[k].ln() - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

impl RobotPolicy for HamiltonianPolicy {
    fn name(&self) -> &str {
        "ph-diffusion"
    }

    fn act(&self, history: &[Observation], step_seed: u64) -> Result<Vec2, PolicyError> {
        self.mean_action(history, step_seed)
    }

    fn check_scenario(&self, scenario: &ScenarioConfig) -> Result<(), PolicyError> {
        check_time_step(self.config.time_step, scenario)
    }
}
