//! Optimal reciprocal collision avoidance for disc agents.
//!
//! Each neighbor contributes one half-plane of admissible velocities; the
//! velocity closest to the preferred one inside all half-planes and the
//! speed disc is found by incremental 2-D linear programming. When the
//! constraints are infeasible a 3-D program minimizes the largest
//! penetration instead.

use super::Vec2;

const EPSILON: f64 = 1e-5;

/// Directed line; admissible velocities lie on its left:
/// `det(direction, v − point) ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub point: Vec2,
    pub direction: Vec2,
}

impl HalfPlane {
    /// Signed violation, positive when `v` lies outside.
    pub fn violation(&self, v: Vec2) -> f64 {
        det(self.direction, sub(self.point, v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrcaSolution {
    pub velocity: Vec2,
    /// Set when the half-planes had no common point in the speed disc and
    /// the least-penetration fallback produced the velocity.
    pub infeasible: bool,
    pub constraints: Vec<HalfPlane>,
}

/// Kinematic inputs of one disc agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrcaAgent {
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
}

fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}
fn mul(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}
fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}
fn det(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}
fn abs_sq(a: Vec2) -> f64 {
    dot(a, a)
}
fn normalize(a: Vec2) -> Vec2 {
    mul(a, 1.0 / abs_sq(a).sqrt())
}

/// Half-plane induced by `other` on `me`, taking half the avoidance effort.
pub fn half_plane(me: &OrcaAgent, other: &OrcaAgent, horizon: f64, time_step: f64) -> HalfPlane {
    let rel_pos = sub(other.position, me.position);
    let rel_vel = sub(me.velocity, other.velocity);
    let dist_sq = abs_sq(rel_pos);
    let combined = me.radius + other.radius;
    let combined_sq = combined * combined;
    let inv_h = 1.0 / horizon;
    let (direction, u);
    if dist_sq > combined_sq {
        let w = sub(rel_vel, mul(rel_pos, inv_h));
        let w_len_sq = abs_sq(w);
        let dot1 = dot(w, rel_pos);
        if dot1 < 0.0 && dot1 * dot1 > combined_sq * w_len_sq {
            // closest point is on the cut-off circle
            let w_len = w_len_sq.sqrt();
            let unit_w = mul(w, 1.0 / w_len);
            direction = [unit_w[1], -unit_w[0]];
            u = mul(unit_w, combined * inv_h - w_len);
        } else {
            let leg = (dist_sq - combined_sq).sqrt();
            direction = if det(rel_pos, w) > 0.0 {
                mul(
                    [
                        rel_pos[0] * leg - rel_pos[1] * combined,
                        rel_pos[0] * combined + rel_pos[1] * leg,
                    ],
                    1.0 / dist_sq,
                )
            } else {
                mul(
                    [
                        rel_pos[0] * leg + rel_pos[1] * combined,
                        -rel_pos[0] * combined + rel_pos[1] * leg,
                    ],
                    -1.0 / dist_sq,
                )
            };
            u = sub(mul(direction, dot(rel_vel, direction)), rel_vel);
        }
    } else {
        // already overlapping: resolve within one step
        let inv_t = 1.0 / time_step;
        let w = sub(rel_vel, mul(rel_pos, inv_t));
        let w_len = abs_sq(w).sqrt();
        let unit_w = if w_len > 0.0 { mul(w, 1.0 / w_len) } else { [1.0, 0.0] };
        direction = [unit_w[1], -unit_w[0]];
        u = mul(unit_w, combined * inv_t - w_len);
    }
    HalfPlane {
        point: add(me.velocity, mul(u, 0.5)),
        direction,
    }
}

/// Velocity for `me` given neighbors (which must not include `me`).
pub fn orca_velocity(
    me: &OrcaAgent,
    neighbors: &[OrcaAgent],
    preferred: Vec2,
    max_speed: f64,
    horizon: f64,
    time_step: f64,
) -> OrcaSolution {
    let lines: Vec<HalfPlane> = neighbors
        .iter()
        .map(|o| half_plane(me, o, horizon, time_step))
        .collect();
    let mut velocity = [0.0, 0.0];
    let fail = linear_program2(&lines, max_speed, preferred, false, &mut velocity);
    let infeasible = fail < lines.len();
    if infeasible {
        linear_program3(&lines, fail, max_speed, &mut velocity);
    }
    OrcaSolution {
        velocity,
        infeasible,
        constraints: lines,
    }
}

fn linear_program1(lines: &[HalfPlane], line_no: usize, radius: f64, opt: Vec2, direction_opt: bool, result: &mut Vec2) -> bool {
    let line = lines[line_no];
    let dot_p = dot(line.point, line.direction);
    let disc = dot_p * dot_p + radius * radius - abs_sq(line.point);
    if disc < 0.0 {
        return false;
    }
    let sqrt_disc = disc.sqrt();
    let mut t_left = -dot_p - sqrt_disc;
    let mut t_right = -dot_p + sqrt_disc;
    for other in &lines[..line_no] {
        let denom = det(line.direction, other.direction);
        let numer = det(other.direction, sub(line.point, other.point));
        if denom.abs() <= EPSILON {
            if numer < 0.0 {
                return false;
            }
            continue;
        }
        let t = numer / denom;
        if denom >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return false;
        }
    }
    let t = if direction_opt {
        if dot(opt, line.direction) > 0.0 {
            t_right
        } else {
            t_left
        }
    } else {
        dot(line.direction, sub(opt, line.point)).clamp(t_left, t_right)
    };
    *result = add(line.point, mul(line.direction, t));
    true
}

fn linear_program2(lines: &[HalfPlane], radius: f64, opt: Vec2, direction_opt: bool, result: &mut Vec2) -> usize {
    *result = if direction_opt {
        mul(opt, radius)
    } else if abs_sq(opt) > radius * radius {
        mul(normalize(opt), radius)
    } else {
        opt
    };
    for i in 0..lines.len() {
        if det(lines[i].direction, sub(lines[i].point, *result)) > 0.0 {
            let saved = *result;
            if !linear_program1(lines, i, radius, opt, direction_opt, result) {
                *result = saved;
                return i;
            }
        }
    }
    lines.len()
}

fn linear_program3(lines: &[HalfPlane], begin: usize, radius: f64, result: &mut Vec2) {
    let mut distance = 0.0;
    for i in begin..lines.len() {
        if det(lines[i].direction, sub(lines[i].point, *result)) > distance {
            let mut projected = Vec::with_capacity(i);
            for j in 0..i {
                let d = det(lines[i].direction, lines[j].direction);
                let point = if d.abs() <= EPSILON {
                    if dot(lines[i].direction, lines[j].direction) > 0.0 {
                        continue;
                    }
                    mul(add(lines[i].point, lines[j].point), 0.5)
                } else {
                    add(
                        lines[i].point,
                        mul(
                            lines[i].direction,
                            det(lines[j].direction, sub(lines[i].point, lines[j].point)) / d,
                        ),
                    )
                };
                projected.push(HalfPlane {
                    point,
                    direction: normalize(sub(lines[j].direction, lines[i].direction)),
                });
            }
            let saved = *result;
            let opt = [-lines[i].direction[1], lines[i].direction[0]];
            if linear_program2(&projected, radius, opt, true, result) < projected.len() {
                *result = saved;
            }
            distance = det(lines[i].direction, sub(lines[i].point, *result));
        }
    }
}
