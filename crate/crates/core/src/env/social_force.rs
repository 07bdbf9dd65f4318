//! Goal relaxation plus exponential interpersonal repulsion, in
//! acceleration units for unit-mass pedestrians.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SocialForceConfig {
    /// Relaxation time, s.
    pub tau: f64,
    /// Repulsion strength, m/s².
    pub strength: f64,
    /// Repulsion range, m.
    pub range: f64,
    /// Cap on a single pairwise repulsion, m/s².
    pub max_force: f64,
}

impl Default for SocialForceConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            strength: 2.0,
            range: 0.08,
            max_force: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceAgent {
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
}

/// Repulsion on `me` from one neighbor. Coincident pairs push along a
/// direction drawn from `rng`.
pub fn repulsion<R: Rng>(me: &ForceAgent, other: &ForceAgent, cfg: &SocialForceConfig, rng: &mut R) -> Vec2 {
    let diff = [me.position[0] - other.position[0], me.position[1] - other.position[1]];
    let d = (diff[0] * diff[0] + diff[1] * diff[1]).sqrt();
    let magnitude = (cfg.strength * ((me.radius + other.radius - d) / cfg.range).exp()).min(cfg.max_force);
    let n = if d > 0.0 {
        [diff[0] / d, diff[1] / d]
    } else {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        [theta.cos(), theta.sin()]
    };
    [magnitude * n[0], magnitude * n[1]]
}

/// `(v_pref·ê_goal − v)/τ + Σ repulsion`. At the goal the driving
/// direction is zero.
pub fn social_force<R: Rng>(
    me: &ForceAgent,
    neighbors: &[ForceAgent],
    goal: Vec2,
    v_pref: f64,
    cfg: &SocialForceConfig,
    rng: &mut R,
) -> Vec2 {
    let to_goal = [goal[0] - me.position[0], goal[1] - me.position[1]];
    let dist = (to_goal[0] * to_goal[0] + to_goal[1] * to_goal[1]).sqrt();
    let desired = if dist > 1e-9 {
        [v_pref * to_goal[0] / dist, v_pref * to_goal[1] / dist]
    } else {
        [0.0, 0.0]
    };
    let mut acc = [
        (desired[0] - me.velocity[0]) / cfg.tau,
        (desired[1] - me.velocity[1]) / cfg.tau,
    ];
    for other in neighbors {
        let f = repulsion(me, other, cfg, rng);
        acc[0] += f[0];
        acc[1] += f[1];
    }
    acc
}
