//! Batch evaluation, energy diagnostics and trajectory rendering.

mod audit;
mod render;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{CrowdEnv, EnvError, Observation, ScenarioConfig, Termination, TrajectoryLog, Vec2, WorldState};
use crate::policy::{PolicyError, RobotPolicy};
use crate::train::mix_seed;

pub use audit::{energy_audit, record_trace, AuditRow, EnergyAudit, TraceStep, PASSIVITY_TOLERANCE};
pub use render::{render_svg, RenderError};

pub const SOCIAL_SCORE_LABEL: &str = "social score (non-paper metric)";

/// Weights of success, comfort and path efficiency in the social score.
pub const SOCIAL_SCORE_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("n_runs must be at least 1")]
    NoRuns,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ph(#[from] crate::ph::PhError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_runs: usize,
    pub seed: u64,
    /// Comfort distance for the social score, m.
    pub social_distance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_runs: 500,
            seed: 0,
            social_distance: 0.5,
        }
    }
}

/// Summary of one finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub termination: Termination,
    pub steps: usize,
    /// Episode duration, s.
    pub time: f64,
    /// Smallest robot surface distance over the run; `None` without other agents.
    pub min_separation: Option<f64>,
    pub path_length: f64,
    pub straight_distance: f64,
    /// Fraction of steps with separation at least the comfort distance.
    pub comfort: f64,
    pub total_reward: f64,
}

impl EpisodeRecord {
    pub fn success(&self) -> bool {
        self.termination == Termination::Success
    }

    /// Straight-line distance over path length, clipped to `[0, 1]`; zero
    /// when the robot never moved.
    pub fn efficiency(&self) -> f64 {
        if self.path_length <= 1e-12 {
            return 0.0;
        }
        (self.straight_distance / self.path_length).clamp(0.0, 1.0)
    }
}

/// `100·(0.5·success + 0.3·comfort + 0.2·efficiency)`.
pub fn social_score(record: &EpisodeRecord) -> f64 {
    let [ws, wc, we] = SOCIAL_SCORE_WEIGHTS;
    let success = if record.success() { 1.0 } else { 0.0 };
    100.0 * (ws * success + wc * record.comfort.clamp(0.0, 1.0) + we * record.efficiency())
}

/// Runs one episode in eval mode. `observe` sees every step as
/// `(state before, history, action, state after)`.
pub fn run_episode_with(
    policy: &dyn RobotPolicy,
    env: &CrowdEnv,
    seed: u64,
    social_distance: f64,
    observe: &mut dyn FnMut(&WorldState, &[Observation], Vec2, &WorldState) -> Result<(), EvalError>,
) -> Result<EpisodeRecord, EvalError> {
    let (mut state, obs) = env.reset(seed)?;
    let mut history: Vec<Observation> = vec![obs];
    let mut path = 0.0;
    let mut comfortable = 0usize;
    let mut min_sep = f64::INFINITY;
    let mut total = 0.0;
    loop {
        let action = policy.act(&history, mix_seed(seed, state.steps as u64))?;
        let (outcome, next) = env.step(&state, action)?;
        observe(&state, &history, action, &next)?;
        path += distance(&state, &next);
        total += outcome.reward;
        min_sep = min_sep.min(outcome.info.min_separation);
        if outcome.info.min_separation >= social_distance {
            comfortable += 1;
        }
        history.push(outcome.observation);
        state = next;
        if outcome.done.is_done() {
            let r = &state.robot;
            return Ok(EpisodeRecord {
                seed,
                termination: outcome.done,
                steps: state.steps,
                time: state.t,
                min_separation: min_sep.is_finite().then_some(min_sep),
                path_length: path,
                straight_distance: ((r.goal[0] - r.start[0]).powi(2) + (r.goal[1] - r.start[1]).powi(2)).sqrt(),
                comfort: comfortable as f64 / state.steps.max(1) as f64,
                total_reward: total,
            });
        }
    }
}

pub fn run_episode(policy: &dyn RobotPolicy, env: &CrowdEnv, seed: u64, social_distance: f64) -> Result<EpisodeRecord, EvalError> {
    run_episode_with(policy, env, seed, social_distance, &mut |_, _, _, _| Ok(()))
}

fn distance(a: &WorldState, b: &WorldState) -> f64 {
    let (p, q) = (a.robot.p, b.robot.p);
    ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub policy: String,
    pub humans: usize,
    pub seed: u64,
    pub n_runs: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    /// Mean of [`social_score`] over all runs.
    pub social_score: f64,
    /// Mean time of successful runs, s.
    pub mean_navigation_time: Option<f64>,
    pub mean_min_separation: Option<f64>,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn from_episodes(policy: &str, humans: usize, seed: u64, episodes: Vec<EpisodeRecord>) -> Self {
        let n = episodes.len();
        let pct = |t: Termination| 100.0 * episodes.iter().filter(|e| e.termination == t).count() as f64 / n as f64;
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Self {
            policy: policy.to_string(),
            humans,
            seed,
            n_runs: n,
            success_rate: pct(Termination::Success),
            collision_rate: pct(Termination::Collision),
            timeout_rate: pct(Termination::Timeout),
            social_score: episodes.iter().map(social_score).sum::<f64>() / n as f64,
            mean_navigation_time: mean(episodes.iter().filter(|e| e.success()).map(|e| e.time).collect()),
            mean_min_separation: mean(episodes.iter().filter_map(|e| e.min_separation).collect()),
            episodes,
        }
    }

    /// Tab-separated per-episode table.
    pub fn to_table(&self) -> String {
        let mut s = String::from(
            "episode\tseed\toutcome\tsteps\ttime_s\tmin_separation_m\tpath_length_m\tcomfort\tefficiency\tsocial_score_non_paper\treturn\n",
        );
        for (i, e) in self.episodes.iter().enumerate() {
            let sep = e.min_separation.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
            writeln!(
                s,
                "{i}\t{}\t{}\t{}\t{:.3}\t{sep}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}",
                e.seed,
                outcome_label(e.termination),
                e.steps,
                e.time,
                e.path_length,
                e.comfort,
                e.efficiency(),
                social_score(e),
                e.total_reward
            )
            .expect("string write");
        }
        s
    }

    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>, unit: &str| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3} {unit}"));
        format!(
            "policy: {}\nhumans: {}\nruns: {} (seed {})\nsuccess rate: {:.1}%\ncollision rate: {:.1}%\ntimeout rate: {:.1}%\n{SOCIAL_SCORE_LABEL}: {:.1}\nmean navigation time: {}\nmean min separation: {}\n",
            self.policy,
            self.humans,
            self.n_runs,
            self.seed,
            self.success_rate,
            self.collision_rate,
            self.timeout_rate,
            self.social_score,
            opt(self.mean_navigation_time, "s"),
            opt(self.mean_min_separation, "m"),
        )
    }
}

pub fn outcome_label(t: Termination) -> &'static str {
    match t {
        Termination::Running => "running",
        Termination::Success => "success",
        Termination::Collision => "collision",
        Termination::Timeout => "timeout",
    }
}

/// Seed of run `i` in an evaluation with base seed `seed`.
pub fn run_seed(seed: u64, i: usize) -> u64 {
    mix_seed(seed, i as u64)
}

/// Evaluates `policy` on `n_runs` seeded episodes in parallel.
pub fn evaluate(policy: &dyn RobotPolicy, scenario: &ScenarioConfig, config: &EvalConfig) -> Result<EvalReport, EvalError> {
    if config.n_runs == 0 {
        return Err(EvalError::NoRuns);
    }
    policy.check_scenario(scenario)?;
    let env = CrowdEnv::new(scenario.clone())?;
    let episodes = (0..config.n_runs)
        .into_par_iter()
        .map(|i| run_episode(policy, &env, run_seed(config.seed, i), config.social_distance))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_episodes(policy.name(), scenario.humans, config.seed, episodes))
}

/// One logged episode, as written by the `simulate` command.
pub fn simulate(policy: &dyn RobotPolicy, scenario: &ScenarioConfig, seed: u64) -> Result<(TrajectoryLog, EpisodeRecord), EvalError> {
    policy.check_scenario(scenario)?;
    let env = CrowdEnv::new(scenario.clone())?;
    let (start, _) = env.reset(seed)?;
    let mut log = TrajectoryLog::new(&start);
    let record = run_episode_with(policy, &env, seed, EvalConfig::default().social_distance, &mut |_, _, _, next| {
        log.push(next);
        Ok(())
    })?;
    Ok((log, record))
}

#[cfg(test)]
mod tests;
