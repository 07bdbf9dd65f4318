//! SVG plates of trajectory files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::env::{TrajectoryError, TrajectoryLog, TrajectoryRecord};

const PX_PER_M: f64 = 30.0;
const MARGIN_PX: f64 = 20.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];
const ROBOT_COLOR: &str = "#d62728";

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error(transparent)]
    Parse(#[from] TrajectoryError),
    #[error("trajectory has no records")]
    Empty,
}

fn color(id: usize, kind: &str) -> &'static str {
    if kind == "robot" {
        ROBOT_COLOR
    } else {
        PALETTE[id % PALETTE.len()]
    }
}

/// Renders a trajectory file. The arena is the square of half-width
/// `arena_half_width`, grown to fit the data.
pub fn render_svg(text: &str, arena_half_width: f64) -> Result<String, RenderError> {
    let log = TrajectoryLog::parse(text)?;
    if log.records.is_empty() {
        return Err(RenderError::Empty);
    }
    let mut half = arena_half_width;
    for r in &log.records {
        half = half.max(r.x.abs() + r.radius).max(r.y.abs() + r.radius);
    }
    for (_, g) in &log.goals {
        half = half.max(g[0].abs()).max(g[1].abs());
    }
    let size = 2.0 * half * PX_PER_M + 2.0 * MARGIN_PX;
    let sx = |x: f64| MARGIN_PX + (x + half) * PX_PER_M;
    let sy = |y: f64| MARGIN_PX + (half - y) * PX_PER_M;

    let mut agents: BTreeMap<usize, Vec<&TrajectoryRecord>> = BTreeMap::new();
    for r in &log.records {
        agents.entry(r.agent_id).or_default().push(r);
    }
    let t_max = log.records.iter().map(|r| r.t).fold(0.0f64, f64::max);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size:.1}" height="{size:.1}" viewBox="0 0 {size:.1} {size:.1}">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("string write");
    writeln!(
        s,
        r#"<rect class="arena" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black" stroke-width="1"/>"#,
        sx(-half),
        sy(half),
        2.0 * half * PX_PER_M,
        2.0 * half * PX_PER_M
    )
    .expect("string write");

    for (id, g) in &log.goals {
        let kind = agents.get(id).and_then(|v| v.first()).map_or("human", |r| r.kind.as_str());
        let (x, y) = (sx(g[0]), sy(g[1]));
        writeln!(
            s,
            r#"<path class="goal" data-agent="{id}" d="M {:.2} {:.2} L {:.2} {:.2} M {:.2} {:.2} L {:.2} {:.2}" stroke="{}" stroke-width="2"/>"#,
            x - 5.0,
            y - 5.0,
            x + 5.0,
            y + 5.0,
            x - 5.0,
            y + 5.0,
            x + 5.0,
            y - 5.0,
            color(*id, kind)
        )
        .expect("string write");
    }

    for (id, recs) in &agents {
        let c = color(*id, &recs[0].kind);
        for w in recs.windows(2) {
            let (a, b) = (w[0], w[1]);
            if (a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12 {
                continue;
            }
            let alpha = if t_max > 0.0 { 0.15 + 0.85 * b.t / t_max } else { 1.0 };
            writeln!(
                s,
                r#"<line class="path" data-agent="{id}" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{c}" stroke-opacity="{alpha:.3}" stroke-width="2"/>"#,
                sx(a.x),
                sy(a.y),
                sx(b.x),
                sy(b.y)
            )
            .expect("string write");
        }
        let last = recs[recs.len() - 1];
        writeln!(
            s,
            r#"<circle class="agent" data-agent="{id}" cx="{:.2}" cy="{:.2}" r="{:.2}" fill="{c}" fill-opacity="0.35" stroke="{c}"/>"#,
            sx(last.x),
            sy(last.y),
            last.radius * PX_PER_M
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
