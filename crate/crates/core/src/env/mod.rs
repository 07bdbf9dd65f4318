//! Circle-crossing crowd simulator with an invisible robot.
//!
//! Pedestrians follow ORCA or the social-force model and react to each
//! other and to static obstacles but never to the robot. Everything
//! advances by an explicit Euler step `p ← p + v·T`.

pub mod orca;
pub mod social_force;
mod trajectory;

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use orca::{orca_velocity, HalfPlane, OrcaAgent, OrcaSolution};
pub use social_force::{social_force, ForceAgent, SocialForceConfig};
pub use trajectory::{TrajectoryError, TrajectoryLog, TrajectoryRecord};

pub type Vec2 = [f64; 2];

pub const ROBOT_STATE_DIM: usize = 8;
pub const HUMAN_STATE_DIM: usize = 5;
pub const MAX_HUMANS: usize = 15;
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("could not place agent {agent} without overlap after {attempts} attempts")]
    Placement { agent: usize, attempts: usize },
    #[error("episode already finished ({0:?})")]
    Finished(Termination),
    #[error("non-finite robot action {0:?}")]
    BadAction(Vec2),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PedPolicy {
    Orca,
    Sf,
}

impl std::str::FromStr for PedPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "orca" => Ok(Self::Orca),
            "sf" | "social-force" | "social_force" => Ok(Self::Sf),
            other => Err(format!("unknown pedestrian policy {other:?} (expected orca or sf)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Robot,
    Human(PedPolicy),
    Obstacle,
}

impl AgentKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Robot => "robot",
            Self::Human(_) => "human",
            Self::Obstacle => "obstacle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub p: Vec2,
    pub v: Vec2,
    pub radius: f64,
    pub goal: Vec2,
    pub v_pref: f64,
    pub kind: AgentKind,
    /// Where the agent spawned; humans turn back towards it on arrival.
    pub start: Vec2,
}

impl AgentState {
    pub fn speed(&self) -> f64 {
        norm(self.v)
    }

    pub fn goal_distance(&self) -> f64 {
        norm(sub(self.goal, self.p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub success: f64,
    pub collision: f64,
    pub discomfort_scale: f64,
    pub social_distance: f64,
    pub progress: f64,
    pub step: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            success: 10.0,
            collision: -20.0,
            discomfort_scale: 0.5,
            social_distance: 0.5,
            progress: 2.0,
            step: -0.01,
        }
    }
}

/// Declarative scenario description, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub humans: usize,
    pub ped_policy: PedPolicy,
    /// Fraction of pedestrians that use social force instead of
    /// `ped_policy`; the last `round(fraction·N)` pedestrians switch.
    pub sf_fraction: f64,
    pub seed: u64,
    pub time_step: f64,
    pub time_limit: f64,
    pub arena_half_width: f64,
    pub circle_radius: f64,
    /// Half-width of the uniform angular jitter around evenly spaced
    /// spawn angles, rad.
    pub angle_jitter: f64,
    pub radius: f64,
    pub v_pref: f64,
    pub robot_radius: f64,
    pub robot_v_pref: f64,
    pub orca_horizon: f64,
    /// Clockwise rotation applied to ORCA preferred velocities, rad; breaks
    /// the deadlock of exactly opposed agents (everyone passes on the right).
    pub orca_pref_rotation: f64,
    /// Added to radii inside ORCA only, m.
    pub orca_safety_margin: f64,
    pub social_force: SocialForceConfig,
    pub reward: RewardConfig,
    /// Standard deviation of Gaussian noise added to the robot position
    /// after each move, m.
    pub sigma_env: f64,
    /// `[x, y, radius]` motionless obstacles.
    pub static_obstacles: Vec<[f64; 3]>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            humans: 5,
            ped_policy: PedPolicy::Orca,
            sf_fraction: 0.0,
            seed: 0,
            time_step: 0.25,
            time_limit: 40.0,
            arena_half_width: 10.0,
            circle_radius: 8.0,
            angle_jitter: PI,
            radius: 0.3,
            v_pref: 1.0,
            robot_radius: 0.3,
            robot_v_pref: 1.0,
            orca_horizon: 5.0,
            orca_pref_rotation: 0.02,
            orca_safety_margin: 0.05,
            social_force: SocialForceConfig::default(),
            reward: RewardConfig::default(),
            sigma_env: 0.0,
            static_obstacles: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        let cfg: Self = toml::from_str(text).map_err(|e| EnvError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        if self.humans > MAX_HUMANS {
            return bad(format!("{} humans exceeds the maximum of {MAX_HUMANS}", self.humans));
        }
        if !(self.time_step > 0.0) || !(self.time_limit > 0.0) {
            return bad("time step and time limit must be positive".into());
        }
        if !(self.radius > 0.0 && self.robot_radius > 0.0) {
            return bad("radii must be positive".into());
        }
        if !(self.v_pref > 0.0 && self.robot_v_pref > 0.0) {
            return bad("preferred speeds must be positive".into());
        }
        if !(self.circle_radius > 0.0) || self.circle_radius + self.radius.max(self.robot_radius) > self.arena_half_width {
            return bad("spawn circle must fit inside the arena".into());
        }
        if !(0.0..=1.0).contains(&self.sf_fraction) {
            return bad("sf_fraction must lie in [0, 1]".into());
        }
        if !(self.sigma_env >= 0.0) || !(self.angle_jitter >= 0.0) || !(self.orca_horizon > 0.0) {
            return bad("noise, jitter and horizon must be non-negative".into());
        }
        if !(self.reward.social_distance > 0.0) {
            return bad("social distance must be positive".into());
        }
        let sf = &self.social_force;
        if !(sf.tau > 0.0 && sf.range > 0.0 && sf.strength >= 0.0 && sf.max_force > 0.0) {
            return bad("social-force parameters must be positive".into());
        }
        for o in &self.static_obstacles {
            if !(o[2] > 0.0) || o[0].abs() > self.arena_half_width || o[1].abs() > self.arena_half_width {
                return bad(format!("static obstacle {o:?} is invalid"));
            }
        }
        Ok(())
    }

    fn policy_of(&self, index: usize) -> PedPolicy {
        let switched = (self.sf_fraction * self.humans as f64).round() as usize;
        if index >= self.humans - switched {
            PedPolicy::Sf
        } else {
            self.ped_policy
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Termination {
    Running,
    Success,
    Collision,
    Timeout,
}

impl Termination {
    pub fn is_done(self) -> bool {
        self != Self::Running
    }
}

/// Robot view: `[p_x, p_y, v_x, v_y, ρ, g_x, g_y, v_pref]` and the public
/// `[p_x, p_y, v_x, v_y, ρ]` of every pedestrian and obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub robot: [f64; ROBOT_STATE_DIM],
    pub humans: Vec<[f64; HUMAN_STATE_DIM]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RewardBreakdown {
    pub terminal: f64,
    pub discomfort: f64,
    pub progress: f64,
    pub step: f64,
}

impl RewardBreakdown {
    pub fn total(&self) -> f64 {
        self.terminal + self.discomfort + self.progress + self.step
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Smallest surface-to-surface distance between robot and any other
    /// agent after the move, m; negative when overlapping.
    pub min_separation: f64,
    pub reward: RewardBreakdown,
    /// The robot action was longer than `v_pref` and got clipped.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: Termination,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub robot: AgentState,
    pub humans: Vec<AgentState>,
    pub t: f64,
    pub steps: usize,
    pub time_step: f64,
    pub done: Termination,
    rng: ChaCha8Rng,
}

impl WorldState {
    pub fn observe(&self) -> Observation {
        let r = &self.robot;
        Observation {
            robot: [r.p[0], r.p[1], r.v[0], r.v[1], r.radius, r.goal[0], r.goal[1], r.v_pref],
            humans: self
                .humans
                .iter()
                .map(|h| [h.p[0], h.p[1], h.v[0], h.v[1], h.radius])
                .collect(),
        }
    }

    /// Surface distance from the robot to the nearest other agent.
    pub fn min_separation(&self) -> f64 {
        self.humans
            .iter()
            .map(|h| norm(sub(h.p, self.robot.p)) - h.radius - self.robot.radius)
            .fold(f64::INFINITY, f64::min)
    }

    /// Replaces the world's random stream, e.g. to decorrelate copies.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}

/// Environment dynamics for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct CrowdEnv {
    pub config: ScenarioConfig,
}

impl CrowdEnv {
    pub fn new(config: ScenarioConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Circle-crossing layout: the robot runs from `(0, −R)` to `(0, R)`,
    /// pedestrian `i` spawns at angle `2πi/N` plus jitter with the
    /// antipodal point as goal; overlapping draws are rejected.
    pub fn reset(&self, seed: u64) -> Result<(WorldState, Observation), EnvError> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = c.circle_radius;
        let robot = AgentState {
            p: [0.0, -r],
            v: [0.0, 0.0],
            radius: c.robot_radius,
            goal: [0.0, r],
            v_pref: c.robot_v_pref,
            kind: AgentKind::Robot,
            start: [0.0, -r],
        };
        let mut humans: Vec<AgentState> = Vec::with_capacity(c.humans + c.static_obstacles.len());
        let clear = |a: Vec2, ra: f64, b: Vec2, rb: f64| norm(sub(a, b)) >= ra + rb + 0.2;
        for i in 0..c.humans {
            let base = TAU * i as f64 / c.humans as f64;
            let mut placed = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let jitter = if c.angle_jitter > 0.0 {
                    rng.gen_range(-c.angle_jitter..=c.angle_jitter)
                } else {
                    0.0
                };
                let theta = base + jitter;
                let p = [r * theta.cos(), r * theta.sin()];
                let g = [-p[0], -p[1]];
                let ok = clear(p, c.radius, robot.p, robot.radius)
                    && clear(p, c.radius, robot.goal, robot.radius)
                    && humans
                        .iter()
                        .all(|h| clear(p, c.radius, h.p, h.radius) && clear(g, c.radius, h.goal, h.radius));
                if ok {
                    placed = Some((p, g));
                    break;
                }
            }
            let (p, g) = placed.ok_or(EnvError::Placement {
                agent: i + 1,
                attempts: PLACEMENT_ATTEMPTS,
            })?;
            humans.push(AgentState {
                p,
                v: [0.0, 0.0],
                radius: c.radius,
                goal: g,
                v_pref: c.v_pref,
                kind: AgentKind::Human(c.policy_of(i)),
                start: p,
            });
        }
        for o in &c.static_obstacles {
            humans.push(AgentState {
                p: [o[0], o[1]],
                v: [0.0, 0.0],
                radius: o[2],
                goal: [o[0], o[1]],
                v_pref: 0.0,
                kind: AgentKind::Obstacle,
                start: [o[0], o[1]],
            });
        }
        let state = WorldState {
            robot,
            humans,
            t: 0.0,
            steps: 0,
            time_step: c.time_step,
            done: Termination::Running,
            rng,
        };
        let obs = state.observe();
        Ok((state, obs))
    }

    /// Velocity every pedestrian chooses from the current state. The robot
    /// is never part of a neighbor list.
    pub fn human_velocities(&self, state: &mut WorldState) -> Vec<Vec2> {
        let c = &self.config;
        let mut out = Vec::with_capacity(state.humans.len());
        for (i, h) in state.humans.iter().enumerate() {
            let v = match h.kind {
                AgentKind::Obstacle | AgentKind::Robot => [0.0, 0.0],
                AgentKind::Human(PedPolicy::Orca) => {
                    let me = orca_agent(h, c.orca_safety_margin);
                    let neighbors: Vec<OrcaAgent> = state
                        .humans
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, o)| orca_agent(o, c.orca_safety_margin))
                        .collect();
                    let pref = rotate(preferred_velocity(h, c.time_step), -c.orca_pref_rotation);
                    orca_velocity(&me, &neighbors, pref, h.v_pref, c.orca_horizon, c.time_step).velocity
                }
                AgentKind::Human(PedPolicy::Sf) => {
                    let me = force_agent(h);
                    let neighbors: Vec<ForceAgent> = state
                        .humans
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, o)| force_agent(o))
                        .collect();
                    let a = social_force(&me, &neighbors, h.goal, h.v_pref, &c.social_force, &mut state.rng);
                    clip_norm([h.v[0] + a[0] * c.time_step, h.v[1] + a[1] * c.time_step], h.v_pref)
                }
            };
            out.push(v);
        }
        out
    }

    pub fn step(&self, state: &WorldState, action: Vec2) -> Result<(StepOutcome, WorldState), EnvError> {
        if state.done.is_done() {
            return Err(EnvError::Finished(state.done));
        }
        if !action[0].is_finite() || !action[1].is_finite() {
            return Err(EnvError::BadAction(action));
        }
        let c = &self.config;
        let dt = c.time_step;
        let mut next = state.clone();
        let clipped_action = clip_norm(action, next.robot.v_pref);
        let clipped = clipped_action != action;
        if clipped {
            log::debug!("robot action {action:?} clipped to speed {}", next.robot.v_pref);
        }

        let velocities = self.human_velocities(&mut next);
        for (h, v) in next.humans.iter_mut().zip(velocities) {
            h.v = v;
            h.p = [h.p[0] + v[0] * dt, h.p[1] + v[1] * dt];
        }
        let prev_goal_dist = state.robot.goal_distance();
        // keep the robot inside the arena without breaking p' − p = v·T
        let lim = c.arena_half_width - next.robot.radius;
        let target = [
            (next.robot.p[0] + clipped_action[0] * dt).clamp(-lim, lim),
            (next.robot.p[1] + clipped_action[1] * dt).clamp(-lim, lim),
        ];
        let v = [(target[0] - next.robot.p[0]) / dt, (target[1] - next.robot.p[1]) / dt];
        next.robot.v = v;
        next.robot.p = [next.robot.p[0] + v[0] * dt, next.robot.p[1] + v[1] * dt];
        if c.sigma_env > 0.0 {
            for k in 0..2 {
                let n: f64 = next.rng.sample(StandardNormal);
                next.robot.p[k] += c.sigma_env * n;
            }
        }

        for h in next.humans.iter_mut() {
            if matches!(h.kind, AgentKind::Human(_)) && h.goal_distance() < h.radius {
                std::mem::swap(&mut h.goal, &mut h.start);
            }
        }

        next.steps += 1;
        next.t = next.steps as f64 * dt;
        let min_sep = next.min_separation();
        let collision = min_sep < 0.0;
        let success = next.robot.goal_distance() < next.robot.radius;
        next.done = if collision {
            Termination::Collision
        } else if success {
            Termination::Success
        } else if next.t > c.time_limit {
            Termination::Timeout
        } else {
            Termination::Running
        };
        let breakdown = reward(&c.reward, prev_goal_dist, next.robot.goal_distance(), min_sep, next.done);
        let outcome = StepOutcome {
            observation: next.observe(),
            reward: breakdown.total(),
            done: next.done,
            info: StepInfo {
                min_separation: min_sep,
                reward: breakdown,
                clipped,
            },
        };
        Ok((outcome, next))
    }
}

/// Per-step reward: terminal bonus or penalty, discomfort inside the
/// social distance, progress shaping and a per-step cost on non-terminal
/// steps.
pub fn reward(cfg: &RewardConfig, prev_goal_dist: f64, goal_dist: f64, min_separation: f64, done: Termination) -> RewardBreakdown {
    let terminal = match done {
        Termination::Success => cfg.success,
        Termination::Collision => cfg.collision,
        _ => 0.0,
    };
    let discomfort = if min_separation < cfg.social_distance {
        -cfg.discomfort_scale * (cfg.social_distance - min_separation) / cfg.social_distance
    } else {
        0.0
    };
    RewardBreakdown {
        terminal,
        discomfort,
        progress: cfg.progress * (prev_goal_dist - goal_dist),
        step: if done == Termination::Running { cfg.step } else { 0.0 },
    }
}

pub fn preferred_velocity(agent: &AgentState, time_step: f64) -> Vec2 {
    let to_goal = sub(agent.goal, agent.p);
    let d = norm(to_goal);
    if d < 1e-12 {
        return [0.0, 0.0];
    }
    let speed = agent.v_pref.min(d / time_step);
    [to_goal[0] * speed / d, to_goal[1] * speed / d]
}

pub fn orca_agent(a: &AgentState, margin: f64) -> OrcaAgent {
    OrcaAgent {
        position: a.p,
        velocity: a.v,
        radius: a.radius + margin,
    }
}

pub fn rotate(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn force_agent(a: &AgentState) -> ForceAgent {
    ForceAgent {
        position: a.p,
        velocity: a.v,
        radius: a.radius,
    }
}

pub(crate) fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn norm(a: Vec2) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

pub fn clip_norm(a: Vec2, max: f64) -> Vec2 {
    let n = norm(a);
    if n > max {
        [a[0] * max / n, a[1] * max / n]
    } else {
        a
    }
}

#[cfg(test)]
mod tests;
