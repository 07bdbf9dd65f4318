//! Line-oriented trajectory files.
//!
//! ```text
//! # t[s],agent_id,kind,x[m],y[m],vx[m/s],vy[m/s],radius[m]
//! # goal,0,0.000000,8.000000
//! 0.000000,0,robot,0.000000,-8.000000,0.000000,0.000000,0.300000
//! ```
//!
//! Lines starting with `#` are comments, except `# goal,id,x,y` which
//! records an agent's goal.

use std::fmt::Write as _;

use super::{Vec2, WorldState};

pub const TRAJECTORY_HEADER: &str = "# t[s],agent_id,kind,x[m],y[m],vx[m/s],vy[m/s],radius[m]";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct TrajectoryError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub agent_id: usize,
    pub kind: String,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub goals: Vec<(usize, Vec2)>,
    pub records: Vec<TrajectoryRecord>,
}

impl TrajectoryLog {
    /// Starts a log with the goals of the robot and pedestrians.
    pub fn new(state: &WorldState) -> Self {
        let mut log = Self::default();
        log.goals.push((0, state.robot.goal));
        for (i, h) in state.humans.iter().enumerate() {
            if matches!(h.kind, super::AgentKind::Human(_)) {
                log.goals.push((i + 1, h.goal));
            }
        }
        log.push(state);
        log
    }

    pub fn push(&mut self, state: &WorldState) {
        let agents = std::iter::once(&state.robot).chain(state.humans.iter());
        for (id, a) in agents.enumerate() {
            self.records.push(TrajectoryRecord {
                t: state.t,
                agent_id: id,
                kind: a.kind.label().to_string(),
                x: a.p[0],
                y: a.p[1],
                vx: a.v[0],
                vy: a.v[1],
                radius: a.radius,
            });
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(TRAJECTORY_HEADER);
        out.push('\n');
        for (id, g) in &self.goals {
            writeln!(out, "# goal,{id},{:.6},{:.6}", g[0], g[1]).expect("string write");
        }
        for r in &self.records {
            writeln!(
                out,
                "{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.t, r.agent_id, r.kind, r.x, r.y, r.vx, r.vy, r.radius
            )
            .expect("string write");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TrajectoryError> {
        let mut log = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| TrajectoryError { line, message };
            let s = raw.trim();
            if s.is_empty() {
                continue;
            }
            if let Some(rest) = s.strip_prefix('#') {
                let fields: Vec<&str> = rest.trim().split(',').map(str::trim).collect();
                if fields.first() == Some(&"goal") {
                    if fields.len() != 4 {
                        return Err(err(format!("goal line needs 4 fields, found {}", fields.len())));
                    }
                    let id = fields[1].parse().map_err(|_| err(format!("bad agent id {:?}", fields[1])))?;
                    let x = parse_num(fields[2]).map_err(err)?;
                    let y = parse_num(fields[3]).map_err(err)?;
                    log.goals.push((id, [x, y]));
                }
                continue;
            }
            let f: Vec<&str> = s.split(',').map(str::trim).collect();
            if f.len() != 8 {
                return Err(err(format!("expected 8 comma-separated fields, found {}", f.len())));
            }
            let agent_id = f[1].parse().map_err(|_| err(format!("bad agent id {:?}", f[1])))?;
            if f[2].is_empty() {
                return Err(err("empty kind".into()));
            }
            let num = |i: usize| parse_num(f[i]).map_err(err);
            log.records.push(TrajectoryRecord {
                t: num(0)?,
                agent_id,
                kind: f[2].to_string(),
                x: num(3)?,
                y: num(4)?,
                vx: num(5)?,
                vy: num(6)?,
                radius: num(7)?,
            });
        }
        Ok(log)
    }
}

fn parse_num(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("bad number {s:?}")),
    }
}
