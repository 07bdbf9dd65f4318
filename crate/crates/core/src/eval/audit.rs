//! Per-step power balance of the learned port-Hamiltonian terms.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::{run_episode_with, run_seed, EpisodeRecord, EvalError};
use crate::encoder::AGENT_STATE_DIM;
use crate::env::{CrowdEnv, ScenarioConfig, Termination};
use crate::ph::{open_loop_dynamics, PhTerms};
use crate::policy::{HamiltonianPolicy, RobotPolicy};

/// Slack on `Ḣ ≤ uᵀy` before a step is flagged.
pub const PASSIVITY_TOLERANCE: f64 = 1e-6;

/// Terms and port input at one recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: f64,
    pub terms: PhTerms,
    pub input: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditRow {
    pub step: usize,
    pub t: f64,
    pub h: f64,
    /// `∇Hᵀẋ` along the open-loop flow.
    pub h_dot: f64,
    /// `uᵀy`.
    pub supplied: f64,
    /// `∇HᵀR∇H`.
    pub dissipated: f64,
    pub violation: bool,
}

/// Power balance of every traced step.
pub fn energy_audit(trace: &[TraceStep]) -> Result<Vec<AuditRow>, EvalError> {
    trace
        .iter()
        .enumerate()
        .map(|(step, s)| {
            let x = DVector::zeros(s.terms.state_dim());
            let flow = open_loop_dynamics(&x, &s.input, &s.terms)?;
            let grad = s.terms.grad_h();
            let h_dot = grad.dot(&flow.x_dot);
            let supplied = s.input.dot(&flow.y);
            Ok(AuditRow {
                step,
                t: s.t,
                h: s.terms.h(),
                h_dot,
                supplied,
                dissipated: grad.dot(&(s.terms.r() * grad)),
                violation: h_dot > supplied + PASSIVITY_TOLERANCE,
            })
        })
        .collect()
}

/// Robot velocity rows of the stacked agent state.
fn robot_input_map(agents: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(AGENT_STATE_DIM * agents, 2);
    g[(2, 0)] = 1.0;
    g[(3, 1)] = 1.0;
    g
}

/// Rolls out the policy in eval mode, recording the learned terms at each
/// step with the commanded velocity change per second as port input.
pub fn record_trace(
    policy: &HamiltonianPolicy,
    env: &CrowdEnv,
    seed: u64,
    social_distance: f64,
) -> Result<(EpisodeRecord, Vec<TraceStep>), EvalError> {
    let mut trace = Vec::new();
    let record = run_episode_with(policy, env, seed, social_distance, &mut |state, history, action, _| {
        let lh = policy.learned_hamiltonian(history)?;
        let v = state.robot.v;
        let dt = state.time_step;
        let input = DVector::from_vec(vec![(action[0] - v[0]) / dt, (action[1] - v[1]) / dt]);
        let terms = PhTerms::new(
            lh.interconnection(),
            lh.r_theta.clone(),
            lh.grad_h.clone(),
            lh.energy(),
            robot_input_map(lh.agents()),
        )?;
        trace.push(TraceStep { t: state.t, terms, input });
        Ok(())
    })?;
    Ok((record, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyAudit {
    /// `(episode, outcome, rows)`.
    pub episodes: Vec<(usize, Termination, Vec<AuditRow>)>,
}

impl EnergyAudit {
    /// Audits `episodes` seeded runs of the learned policy.
    pub fn run(policy: &HamiltonianPolicy, scenario: &ScenarioConfig, episodes: usize, seed: u64) -> Result<Self, EvalError> {
        policy.check_scenario(scenario)?;
        let env = CrowdEnv::new(scenario.clone())?;
        let mut out = Vec::with_capacity(episodes);
        for i in 0..episodes {
            let (record, trace) = record_trace(policy, &env, run_seed(seed, i), super::EvalConfig::default().social_distance)?;
            out.push((i, record.termination, energy_audit(&trace)?));
        }
        Ok(Self { episodes: out })
    }

    pub fn violations(&self) -> usize {
        self.episodes.iter().flat_map(|(_, _, r)| r).filter(|r| r.violation).count()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("episode\tstep\tt_s\tH\tH_dot\tsupplied_uTy\tdissipated\tviolation\n");
        for (e, _, rows) in &self.episodes {
            for r in rows {
                writeln!(
                    s,
                    "{e}\t{}\t{:.3}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{}",
                    r.step,
                    r.t,
                    r.h,
                    r.h_dot,
                    r.supplied,
                    r.dissipated,
                    u8::from(r.violation)
                )
                .expect("string write");
            }
        }
        s
    }
}
