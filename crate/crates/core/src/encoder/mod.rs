//! Spatial-temporal attention encoder and learned port-Hamiltonian terms.
//!
//! A window holds the last `T` observations of `N` agents (agent 0 is the
//! robot). Tokens attend across agents within a time step, across time
//! within an agent (causally), and then jointly after fusion. Pairwise
//! features `F^ij` are temporal means of mixed token products; they feed
//! the damping, interconnection and energy heads.

use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Observation, Vec2, HUMAN_STATE_DIM, ROBOT_STATE_DIM};
use crate::tensor::nn::{AttentionBlock, Linear};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Raw per-token state: the robot layout, humans zero-padded.
pub const RAW_DIM: usize = ROBOT_STATE_DIM;
/// Normalized token features fed to the embedding.
pub const TOKEN_DIM: usize = 11;
/// Per-agent port-Hamiltonian state `[p_x, p_y, v_x, v_y]`.
pub const AGENT_STATE_DIM: usize = 4;
/// Floor on the learned repulsion range, m.
pub const MIN_RANGE: f64 = 0.05;
/// Softening length of the goal potential, m.
pub const GOAL_SOFTENING: f64 = 1.0;

const POSITION_SCALE: f64 = 4.0;
const GOAL_SCALE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("window has no agents")]
    NoAgents,
    #[error("window has no time steps")]
    NoSteps,
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("agent count changed inside the window ({expected} then {got})")]
    AgentCount { expected: usize, got: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("robot token missing at the latest step")]
    RobotAbsent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub width: usize,
    pub heads: usize,
    pub window: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 2,
            window: 5,
        }
    }
}

/// `N` agents by `T` steps of raw states, row `i·T + t`, oldest step first.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    agents: usize,
    steps: usize,
    entries: Tensor,
    mask: Vec<bool>,
}

impl ObservationWindow {
    /// `entries` is `[N·T × RAW_DIM]`; masked rows must be zero.
    pub fn new(agents: usize, steps: usize, entries: Tensor, mask: Vec<bool>) -> Result<Self, EncoderError> {
        if agents == 0 {
            return Err(EncoderError::NoAgents);
        }
        if steps == 0 {
            return Err(EncoderError::NoSteps);
        }
        let rows = agents * steps;
        if entries.rows() != rows || mask.len() != rows {
            return Err(EncoderError::Shape {
                what: "window rows",
                expected: rows,
                got: entries.rows().min(mask.len()),
            });
        }
        if entries.cols() != RAW_DIM {
            return Err(EncoderError::Shape {
                what: "raw feature width",
                expected: RAW_DIM,
                got: entries.cols(),
            });
        }
        if !entries.all_finite() {
            return Err(EncoderError::NonFinite("window entry"));
        }
        for (r, &present) in mask.iter().enumerate() {
            if !present && entries.row(r).iter().any(|&x| x != 0.0) {
                return Err(EncoderError::Shape {
                    what: "nonzero padding in masked row",
                    expected: 0,
                    got: r,
                });
            }
        }
        if !mask[steps - 1] {
            return Err(EncoderError::RobotAbsent);
        }
        Ok(Self {
            agents,
            steps,
            entries,
            mask,
        })
    }

    /// Builds a `steps`-long window ending at the last observation. Missing
    /// earlier steps are zero-padded and masked.
    pub fn from_history(history: &[Observation], steps: usize) -> Result<Self, EncoderError> {
        let latest = history.last().ok_or(EncoderError::NoSteps)?;
        if steps == 0 {
            return Err(EncoderError::NoSteps);
        }
        let agents = 1 + latest.humans.len();
        let take = history.len().min(steps);
        let recent = &history[history.len() - take..];
        if let Some(o) = recent.iter().find(|o| o.humans.len() + 1 != agents) {
            return Err(EncoderError::AgentCount {
                expected: agents,
                got: o.humans.len() + 1,
            });
        }
        let pad = steps - take;
        let mut data = vec![0.0; agents * steps * RAW_DIM];
        let mut mask = vec![false; agents * steps];
        for (k, o) in recent.iter().enumerate() {
            let t = pad + k;
            let row = |i: usize| (i * steps + t) * RAW_DIM;
            data[row(0)..row(0) + RAW_DIM].copy_from_slice(&o.robot);
            mask[t] = true;
            for (h, s) in o.humans.iter().enumerate() {
                let r = row(h + 1);
                data[r..r + HUMAN_STATE_DIM].copy_from_slice(s);
                mask[(h + 1) * steps + t] = true;
            }
        }
        Self::new(agents, steps, Tensor::from_raw(vec![agents * steps, RAW_DIM], data), mask)
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn present(&self, agent: usize, step: usize) -> bool {
        self.mask[agent * self.steps + step]
    }

    pub fn raw(&self, agent: usize, step: usize) -> &[f64] {
        self.entries.row(agent * self.steps + step)
    }

    /// Latest `[p, v]` of every agent; agents absent at the last step get
    /// their most recent state.
    pub fn states(&self) -> Vec<[f64; AGENT_STATE_DIM]> {
        (0..self.agents)
            .map(|i| {
                let t = (0..self.steps).rev().find(|&t| self.present(i, t)).unwrap_or(self.steps - 1);
                let r = self.raw(i, t);
                [r[0], r[1], r[2], r[3]]
            })
            .collect()
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.agents)
            .map(|i| {
                (0..self.steps)
                    .rev()
                    .find(|&t| self.present(i, t))
                    .map_or(0.0, |t| self.raw(i, t)[4])
            })
            .collect()
    }

    pub fn robot_goal(&self) -> Vec2 {
        let r = self.raw(0, self.steps - 1);
        [r[5], r[6]]
    }

    pub fn robot_v_pref(&self) -> f64 {
        self.raw(0, self.steps - 1)[7]
    }

    /// Normalized tokens relative to the robot's latest position.
    pub fn tokens(&self) -> Tensor {
        let origin = {
            let r = self.raw(0, self.steps - 1);
            [r[0], r[1]]
        };
        let mut data = vec![0.0; self.agents * self.steps * TOKEN_DIM];
        for i in 0..self.agents {
            for t in 0..self.steps {
                if !self.present(i, t) {
                    continue;
                }
                let r = self.raw(i, t);
                let o = &mut data[(i * self.steps + t) * TOKEN_DIM..(i * self.steps + t + 1) * TOKEN_DIM];
                let dx = r[0] - origin[0];
                let dy = r[1] - origin[1];
                o[0] = dx / POSITION_SCALE;
                o[1] = dy / POSITION_SCALE;
                o[2] = r[2];
                o[3] = r[3];
                o[4] = r[4];
                if i == 0 {
                    let gx = r[5] - r[0];
                    let gy = r[6] - r[1];
                    o[5] = gx / GOAL_SCALE;
                    o[6] = gy / GOAL_SCALE;
                    o[7] = (gx * gx + gy * gy).sqrt() / GOAL_SCALE;
                    o[8] = r[7];
                    o[9] = 1.0;
                }
                o[10] = (dx * dx + dy * dy).sqrt() / POSITION_SCALE;
            }
        }
        Tensor::from_raw(vec![self.agents * self.steps, TOKEN_DIM], data)
    }

    /// Tokens may attend to present tokens selected by `related`; every
    /// token may always attend to itself so no row is fully masked.
    fn attention_mask(&self, related: impl Fn(usize, usize, usize, usize) -> bool) -> Vec<bool> {
        let len = self.agents * self.steps;
        let mut m = vec![false; len * len];
        for a in 0..len {
            let (ia, ta) = (a / self.steps, a % self.steps);
            for b in 0..len {
                let (ib, tb) = (b / self.steps, b % self.steps);
                m[a * len + b] = a == b || (self.mask[b] && related(ia, ta, ib, tb));
            }
        }
        m
    }
}

/// Encoder outputs on a tape. Token rows are `i·T + t`; pair rows `i·N + j`.
#[derive(Debug, Clone, Copy)]
pub struct FusedFeatures<'t> {
    pub y_s: Var<'t>,
    pub y_t: Var<'t>,
    pub y_f: Var<'t>,
    pub pair: Var<'t>,
    pub agents: usize,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct SpatialTemporalEncoder {
    pub config: EncoderConfig,
    embed: Linear,
    spatial: AttentionBlock,
    temporal: AttentionBlock,
    fuse: Linear,
    fusion: AttentionBlock,
    mix_a: Linear,
    mix_b: Linear,
}

impl SpatialTemporalEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut R) -> Self {
        let d = config.width;
        Self {
            config,
            embed: Linear::new(store, &format!("{name}.embed"), TOKEN_DIM, d, rng),
            spatial: AttentionBlock::new(store, &format!("{name}.spatial"), d, config.heads, rng),
            temporal: AttentionBlock::new(store, &format!("{name}.temporal"), d, config.heads, rng),
            fuse: Linear::new(store, &format!("{name}.fuse"), 2 * d, d, rng),
            fusion: AttentionBlock::new(store, &format!("{name}.fusion"), d, config.heads, rng),
            mix_a: Linear::new(store, &format!("{name}.mix_a"), d, d, rng),
            mix_b: Linear::new(store, &format!("{name}.mix_b"), d, d, rng),
        }
    }

    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, window: &ObservationWindow) -> FusedFeatures<'t> {
        let (n, steps) = (window.agents, window.steps);
        let x = self.embed.forward(tape, store, tape.constant(window.tokens())).tanh();
        let same_step = window.attention_mask(|_, ta, _, tb| ta == tb);
        let y_s = self.spatial.forward(tape, store, x, Some(&same_step));
        let causal = window.attention_mask(|ia, ta, ib, tb| ia == ib && tb <= ta);
        let y_t = self.temporal.forward(tape, store, x, Some(&causal));
        let joint = self.fuse.forward(tape, store, tape.concat_cols(&[y_s, y_t]));
        let all = window.attention_mask(|_, _, _, _| true);
        let y_f = self.fusion.forward(tape, store, joint, Some(&all));
        let presence = Tensor::from_raw(
            vec![n * steps, 1],
            window.mask.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect(),
        );
        let kept = y_f.mul_col(tape.constant(presence));
        let pair = self
            .mix_a
            .forward(tape, store, kept)
            .pair_mean(self.mix_b.forward(tape, store, kept), n, steps);
        FusedFeatures {
            y_s,
            y_t,
            y_f,
            pair,
            agents: n,
            steps,
        }
    }
}

/// Pre-softplus biases of the energy and damping heads at initialization.
/// The defaults make the untrained policy a damped potential-field
/// navigator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadInit {
    /// `(r_p, r_v)` damping biases.
    pub damping: [f64; 2],
    pub mass: f64,
    pub stiffness: f64,
    /// `(amplitude, range)` repulsion biases.
    pub repulsion: [f64; 2],
    /// Weight scale of the interconnection head.
    pub interconnect_scale: f64,
}

impl Default for HeadInit {
    fn default() -> Self {
        Self {
            damping: [-1.0, -2.0],
            mass: 0.5,
            stiffness: 2.0,
            repulsion: [3.0, -1.0],
            interconnect_scale: 0.01,
        }
    }
}

/// Learned energy coefficients, all positive.
#[derive(Debug, Clone, Copy)]
pub struct CoefficientVars<'t> {
    /// `[N×1]` kinetic masses.
    pub mass: Var<'t>,
    /// `[1×1]` goal stiffness.
    pub stiffness: Var<'t>,
    /// `[(N−1)×1]` robot–agent repulsion amplitudes, or `None` when `N = 1`.
    pub amplitude: Option<Var<'t>>,
    /// `[(N−1)×1]` repulsion ranges, m.
    pub range: Option<Var<'t>>,
}

/// Plain-value copy of [`CoefficientVars`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyCoefficients {
    pub mass: Vec<f64>,
    pub stiffness: f64,
    pub amplitude: Vec<f64>,
    pub range: Vec<f64>,
}

impl EnergyCoefficients {
    pub fn from_vars(c: &CoefficientVars<'_>) -> Self {
        Self {
            mass: c.mass.value().into_data(),
            stiffness: c.stiffness.item(),
            amplitude: c.amplitude.map_or_else(Vec::new, |v| v.value().into_data()),
            range: c.range.map_or_else(Vec::new, |v| v.value().into_data()),
        }
    }

    pub fn to_vars<'t>(&self, tape: &'t Tape) -> CoefficientVars<'t> {
        let col = |v: &[f64]| tape.constant(Tensor::from_raw(vec![v.len(), 1], v.to_vec()));
        CoefficientVars {
            mass: col(&self.mass),
            stiffness: tape.constant(Tensor::from_raw(vec![1, 1], vec![self.stiffness])),
            amplitude: (!self.amplitude.is_empty()).then(|| col(&self.amplitude)),
            range: (!self.range.is_empty()).then(|| col(&self.range)),
        }
    }
}

/// Geometry the energy depends on besides the agent states.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGeometry {
    pub goal: Vec2,
    pub radii: Vec<f64>,
}

/// `E = Σ ½ m_n ‖v_n‖²` and
/// `U = k(√(‖p_r − g‖² + δ²) − δ) + Σ_n a_n exp(−(‖p_r − p_n‖ − ρ_r − ρ_n)/ℓ_n)`
/// with `states` a `[N×4]` tape value. Returns `(E, U)`.
pub fn energy_on_tape<'t>(
    tape: &'t Tape,
    states: Var<'t>,
    coeff: &CoefficientVars<'t>,
    geometry: &EnergyGeometry,
) -> (Var<'t>, Var<'t>) {
    let n = geometry.radii.len();
    let v = states.slice_cols(2, 4);
    let kinetic = v.square().sum_cols().mul_col(coeff.mass).sum().scale(0.5);
    let p_r = states.gather_rows(Rc::new(vec![0])).slice_cols(0, 2);
    let to_goal = p_r.add_row(tape.constant(Tensor::from_raw(vec![1, 2], vec![-geometry.goal[0], -geometry.goal[1]])));
    let goal_term = to_goal
        .square()
        .sum()
        .add_scalar(GOAL_SOFTENING * GOAL_SOFTENING)
        .sqrt()
        .add_scalar(-GOAL_SOFTENING)
        .mul_col(coeff.stiffness);
    let potential = match (coeff.amplitude, coeff.range) {
        (Some(a), Some(l)) if n > 1 => {
            let robot_rep = states.gather_rows(Rc::new(vec![0; n - 1])).slice_cols(0, 2);
            let others = states.gather_rows(Rc::new((1..n).collect())).slice_cols(0, 2);
            let dist = (robot_rep - others).square().sum_cols().sqrt();
            let contact: Vec<f64> = geometry.radii[1..].iter().map(|r| -(geometry.radii[0] + r)).collect();
            let gap = dist + tape.constant(Tensor::from_raw(vec![n - 1, 1], contact));
            let rep = (-gap.div(l)).exp() * a;
            goal_term + rep.sum()
        }
        _ => goal_term,
    };
    (kinetic, potential.sum())
}

/// Closed-form `∇_x H` with coefficients held fixed, `[N×4]` rows
/// `[∂H/∂p_n, ∂H/∂v_n]`. Differentiable in the coefficients.
pub fn grad_h_on_tape<'t>(
    tape: &'t Tape,
    states: &[[f64; AGENT_STATE_DIM]],
    coeff: &CoefficientVars<'t>,
    geometry: &EnergyGeometry,
) -> Var<'t> {
    let n = states.len();
    let vel = Tensor::from_raw(vec![n, 2], states.iter().flat_map(|s| [s[2], s[3]]).collect());
    let vel_grad = tape.constant(vel).mul_col(coeff.mass);
    let g = [states[0][0] - geometry.goal[0], states[0][1] - geometry.goal[1]];
    let s = (g[0] * g[0] + g[1] * g[1] + GOAL_SOFTENING * GOAL_SOFTENING).sqrt();
    let mut robot_pos = tape
        .constant(Tensor::from_raw(vec![1, 2], vec![g[0] / s, g[1] / s]))
        .mul_col(coeff.stiffness);
    let mut rows = Vec::with_capacity(2);
    match (coeff.amplitude, coeff.range) {
        (Some(a), Some(l)) if n > 1 => {
            let mut unit = Vec::with_capacity(2 * (n - 1));
            let mut gap = Vec::with_capacity(n - 1);
            for (k, o) in states[1..].iter().enumerate() {
                let d = [states[0][0] - o[0], states[0][1] - o[1]];
                let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
                if dist > 0.0 {
                    unit.extend([d[0] / dist, d[1] / dist]);
                } else {
                    unit.extend([0.0, 0.0]);
                }
                gap.push(dist - geometry.radii[0] - geometry.radii[k + 1]);
            }
            let e = (-tape.constant(Tensor::from_raw(vec![n - 1, 1], gap)).div(l)).exp();
            let c = (e * a).div(l);
            // ∂/∂p_n of a·exp(−gap/ℓ) is +c·û_n with û_n pointing from n to the robot
            let human_pos = tape.constant(Tensor::from_raw(vec![n - 1, 2], unit)).mul_col(c);
            robot_pos = robot_pos - human_pos.sum_rows();
            rows.push(robot_pos);
            rows.push(human_pos);
        }
        _ => rows.push(robot_pos),
    }
    let pos = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };
    tape.concat_cols(&[pos, vel_grad])
}

/// Robot-row quantities needed by the policy, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct RobotCoupling<'t> {
    /// `[1×2]` velocity rows of `Σ_n ([J]_rn − [R]_rn)·∇_{x_n}H`, where `J`
    /// includes each agent's canonical symplectic block.
    pub force: Var<'t>,
    /// `[N×4]` closed-form `∇_x H`.
    pub grad_h: Var<'t>,
    pub coefficients: CoefficientVars<'t>,
}

/// Damping, interconnection and energy heads over pairwise features.
#[derive(Debug, Clone)]
pub struct HamiltonianHeads {
    damping: Linear,
    key: Linear,
    query: Linear,
    interconnect: Linear,
    mass: Linear,
    stiffness: Linear,
    repulsion: Linear,
}

fn swap_index(n: usize) -> Rc<Vec<usize>> {
    Rc::new((0..n * n).map(|r| (r % n) * n + r / n).collect())
}

fn block_transpose_index() -> Rc<Vec<usize>> {
    Rc::new((0..16).map(|c| (c % 4) * 4 + c / 4).collect())
}

impl HamiltonianHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, init: &HeadInit, rng: &mut R) -> Self {
        let heads = Self {
            damping: Linear::new(store, &format!("{name}.damping"), width, 2, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            interconnect: Linear::new(store, &format!("{name}.interconnect"), width, 16, rng),
            mass: Linear::new(store, &format!("{name}.mass"), width, 1, rng),
            stiffness: Linear::new(store, &format!("{name}.stiffness"), width, 1, rng),
            repulsion: Linear::new(store, &format!("{name}.repulsion"), width, 2, rng),
        };
        let shrink = |store: &mut ParamStore, layer: &Linear, factor: f64, bias: &[f64]| {
            let w = store.value(layer.weight).clone();
            let shape = w.shape().to_vec();
            let scaled = Tensor::from_raw(shape, w.into_data().into_iter().map(|x| x * factor).collect());
            store.set_value(layer.weight, scaled).expect("same shape");
            store
                .set_value(layer.bias, Tensor::from_raw(vec![bias.len()], bias.to_vec()))
                .expect("same shape");
        };
        shrink(store, &heads.interconnect, init.interconnect_scale, &[0.0; 16]);
        shrink(store, &heads.damping, 0.1, &init.damping);
        shrink(store, &heads.mass, 0.1, &[init.mass]);
        shrink(store, &heads.stiffness, 0.1, &[init.stiffness]);
        shrink(store, &heads.repulsion, 0.1, &init.repulsion);
        heads
    }

    /// Energy coefficients: masses from time-pooled agent tokens, stiffness
    /// from the robot's, repulsion from robot–agent pair features.
    pub fn coefficients<'t>(&self, tape: &'t Tape, store: &ParamStore, f: &FusedFeatures<'t>, window: &ObservationWindow) -> CoefficientVars<'t> {
        let (n, steps) = (f.agents, f.steps);
        let mut pool = vec![0.0; n * n * steps];
        for i in 0..n {
            let count = (0..steps).filter(|&t| window.present(i, t)).count().max(1) as f64;
            for t in 0..steps {
                if window.present(i, t) {
                    pool[i * n * steps + i * steps + t] = 1.0 / count;
                }
            }
        }
        let pooled = tape.constant(Tensor::from_raw(vec![n, n * steps], pool)).matmul(f.y_f);
        let mass = self.mass.forward(tape, store, pooled).softplus();
        let robot = pooled.gather_rows(Rc::new(vec![0]));
        let stiffness = self.stiffness.forward(tape, store, robot).softplus();
        let (amplitude, range) = if n > 1 {
            let rows = f.pair.gather_rows(Rc::new((1..n).collect()));
            let out = self.repulsion.forward(tape, store, rows);
            (
                Some(out.slice_cols(0, 1).softplus()),
                Some(out.slice_cols(1, 2).softplus().add_scalar(MIN_RANGE)),
            )
        } else {
            (None, None)
        };
        CoefficientVars {
            mass,
            stiffness,
            amplitude,
            range,
        }
    }

    /// `[N²×2]` damping rates `(r_p, r_v)` of every block, row `i·N + j`.
    fn damping_rates<'t>(&self, tape: &'t Tape, store: &ParamStore, f: &FusedFeatures<'t>) -> Var<'t> {
        let n = f.agents;
        let swapped = f.pair.gather_rows(swap_index(n));
        let off = self.damping.forward(tape, store, -(f.pair + swapped)).softplus();
        let diag_idx: Rc<Vec<usize>> = Rc::new((0..n).map(|i| i * n + i).collect());
        let own = self
            .damping
            .forward(tape, store, f.pair.gather_rows(diag_idx))
            .softplus();
        let mut off_mask = vec![1.0; n * n];
        for i in 0..n {
            off_mask[i * n + i] = 0.0;
        }
        let off = off.mul_col(tape.constant(Tensor::from_raw(vec![n * n, 1], off_mask)));
        // row i of the diagonal block adds Σ_{j≠i} of row i's off-diagonal rates
        let mut sum_rows = vec![0.0; n * n * n];
        let mut place = vec![0.0; n * n * n];
        for i in 0..n {
            for j in 0..n {
                sum_rows[i * n * n + i * n + j] = 1.0;
            }
            place[(i * n + i) * n + i] = 1.0;
        }
        let totals = tape
            .constant(Tensor::from_raw(vec![n, n * n], sum_rows))
            .matmul(off)
            + own;
        off + tape.constant(Tensor::from_raw(vec![n * n, n], place)).matmul(totals)
    }

    /// `[N²×16]` raw interconnection blocks `A_ij = f_J(W_K F^ij − W_M F^ji)`.
    fn interconnection_raw<'t>(&self, tape: &'t Tape, store: &ParamStore, f: &FusedFeatures<'t>) -> Var<'t> {
        let k = self.key.forward(tape, store, f.pair);
        let m = self.query.forward(tape, store, f.pair).gather_rows(swap_index(f.agents));
        self.interconnect.forward(tape, store, k - m)
    }

    /// Full learned terms for every agent pair, as plain matrices.
    pub fn hamiltonian<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        f: &FusedFeatures<'t>,
        window: &ObservationWindow,
    ) -> LearnedHamiltonian {
        let n = f.agents;
        let a = self.interconnection_raw(tape, store, f).value();
        let rates = self.damping_rates(tape, store, f).value();
        let dim = AGENT_STATE_DIM * n;
        let mut j = DMatrix::zeros(dim, dim);
        let mut r = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for k in 0..n {
                let aik = a.row(i * n + k);
                let aki = a.row(k * n + i);
                for row in 0..4 {
                    for col in 0..4 {
                        j[(4 * i + row, 4 * k + col)] = 0.5 * (aik[row * 4 + col] - aki[col * 4 + row]);
                    }
                }
                let rate = rates.row(i * n + k);
                for d in 0..4 {
                    r[(4 * i + d, 4 * k + d)] = rate[d / 2];
                }
            }
        }
        let coefficients = EnergyCoefficients::from_vars(&self.coefficients(tape, store, f, window));
        let geometry = EnergyGeometry {
            goal: window.robot_goal(),
            radii: window.radii(),
        };
        LearnedHamiltonian::new(j, r, window.states(), coefficients, geometry)
    }

    /// Robot-row coupling used by the policy; differentiable in all heads.
    pub fn robot_coupling<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        f: &FusedFeatures<'t>,
        window: &ObservationWindow,
    ) -> RobotCoupling<'t> {
        let n = f.agents;
        let coefficients = self.coefficients(tape, store, f, window);
        let geometry = EnergyGeometry {
            goal: window.robot_goal(),
            radii: window.radii(),
        };
        let grad_h = grad_h_on_tape(tape, &window.states(), &coefficients, &geometry);

        let out_rows: Rc<Vec<usize>> = Rc::new((0..n).collect());
        let in_rows: Rc<Vec<usize>> = Rc::new((0..n).map(|k| k * n).collect());
        let (f_out, f_in) = (f.pair.gather_rows(out_rows.clone()), f.pair.gather_rows(in_rows));
        let a_out = self.interconnect.forward(
            tape,
            store,
            self.key.forward(tape, store, f_out) - self.query.forward(tape, store, f_in),
        );
        let a_in = self.interconnect.forward(
            tape,
            store,
            self.key.forward(tape, store, f_in) - self.query.forward(tape, store, f_out),
        );
        let a_in_t = a_in.transpose().gather_rows(block_transpose_index()).transpose();
        let j_row = (a_out - a_in_t).scale(0.5);
        let force_j: Vec<Var<'t>> = (0..2)
            .map(|k| (j_row.slice_cols((2 + k) * 4, (3 + k) * 4) * grad_h).sum())
            .collect();
        let mut force = tape.concat_cols(&force_j);

        // canonical block: v̇ gets −∂H/∂p_r
        let robot_grad = grad_h.gather_rows(Rc::new(vec![0]));
        force = force - robot_grad.slice_cols(0, 2);

        let rates = self.damping_rates(tape, store, f).gather_rows(out_rows);
        let damping = grad_h.slice_cols(2, 4).mul_col(rates.slice_cols(1, 2)).sum_rows();
        force = force - damping;
        RobotCoupling {
            force,
            grad_h,
            coefficients,
        }
    }
}

/// Learned port-Hamiltonian terms for one window, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedHamiltonian {
    /// Learned interconnection, exactly skew.
    pub j_theta: DMatrix<f64>,
    /// Learned damping, symmetric and diagonally dominant.
    pub r_theta: DMatrix<f64>,
    pub kinetic: f64,
    pub potential: f64,
    /// Stacked `∇_{x_n}H` in agent order.
    pub grad_h: DVector<f64>,
    pub states: Vec<[f64; AGENT_STATE_DIM]>,
    pub coefficients: EnergyCoefficients,
    pub geometry: EnergyGeometry,
}

impl LearnedHamiltonian {
    /// Evaluates the energy and differentiates it through the tape.
    pub fn new(
        j_theta: DMatrix<f64>,
        r_theta: DMatrix<f64>,
        states: Vec<[f64; AGENT_STATE_DIM]>,
        coefficients: EnergyCoefficients,
        geometry: EnergyGeometry,
    ) -> Self {
        let tape = Tape::new();
        let x = tape.leaf(flat_states(&states));
        let c = coefficients.to_vars(&tape);
        let (e, u) = energy_on_tape(&tape, x, &c, &geometry);
        let grads = tape.backward(e + u).expect("scalar energy");
        let grad_h = DVector::from_vec(grads.wrt(x).into_data());
        Self {
            j_theta,
            r_theta,
            kinetic: e.item(),
            potential: u.item(),
            grad_h,
            states,
            coefficients,
            geometry,
        }
    }

    pub fn agents(&self) -> usize {
        self.states.len()
    }

    pub fn energy(&self) -> f64 {
        self.kinetic + self.potential
    }

    /// `H` at other states with the same coefficients.
    pub fn energy_at(&self, states: &[[f64; AGENT_STATE_DIM]]) -> f64 {
        let tape = Tape::new();
        let c = self.coefficients.to_vars(&tape);
        let (e, u) = energy_on_tape(&tape, tape.constant(flat_states(states)), &c, &self.geometry);
        e.item() + u.item()
    }

    /// `J_θ` plus each agent's canonical `[[0, I], [−I, 0]]` block.
    pub fn interconnection(&self) -> DMatrix<f64> {
        let mut j = self.j_theta.clone();
        for i in 0..self.agents() {
            for d in 0..2 {
                j[(4 * i + d, 4 * i + 2 + d)] += 1.0;
                j[(4 * i + 2 + d, 4 * i + d)] -= 1.0;
            }
        }
        j
    }

    /// `(J − R)·∇H` using [`Self::interconnection`].
    pub fn drift(&self) -> DVector<f64> {
        (self.interconnection() - &self.r_theta) * &self.grad_h
    }

    /// Robot-row `(J, R)` blocks and per-agent gradients in the layout the
    /// port-Hamiltonian policy head expects.
    pub fn pair_terms(&self) -> crate::ph::PairTerms {
        let j = self.interconnection();
        let n = self.agents();
        crate::ph::PairTerms {
            blocks: (0..n)
                .map(|k| {
                    Some((
                        j.view((0, 4 * k), (4, 4)).into_owned(),
                        self.r_theta.view((0, 4 * k), (4, 4)).into_owned(),
                    ))
                })
                .collect(),
            grad_h: (0..n).map(|k| self.grad_h.rows(4 * k, 4).into_owned()).collect(),
            visible: (0..n).collect(),
        }
    }
}

fn flat_states(states: &[[f64; AGENT_STATE_DIM]]) -> Tensor {
    Tensor::from_raw(
        vec![states.len(), AGENT_STATE_DIM],
        states.iter().flat_map(|s| s.iter().copied()).collect(),
    )
}

#[cfg(test)]
mod tests;
