use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::env::PedPolicy;
use crate::ph::{NominalSystem, PhTerms};
use crate::policy::{Frozen, HamiltonianPolicy, OrcaRobot, PolicyConfig, StraightLine};

fn record(termination: Termination, comfort: f64, straight: f64, path: f64) -> EpisodeRecord {
    EpisodeRecord {
        seed: 0,
        termination,
        steps: 10,
        time: 2.5,
        min_separation: Some(1.0),
        path_length: path,
        straight_distance: straight,
        comfort,
        total_reward: 0.0,
    }
}

fn scenario(humans: usize) -> ScenarioConfig {
    ScenarioConfig {
        humans,
        ..ScenarioConfig::default()
    }
}

fn eval_config(n_runs: usize) -> EvalConfig {
    EvalConfig {
        n_runs,
        seed: 7,
        ..EvalConfig::default()
    }
}

#[test]
fn social_score_examples() {
    assert!((social_score(&record(Termination::Success, 1.0, 16.0, 16.0)) - 100.0).abs() < 1e-12);
    assert!(social_score(&record(Termination::Collision, 1.0, 16.0, 16.0)) <= 50.0 + 1e-12);
    assert!((social_score(&record(Termination::Success, 0.5, 16.0, 20.0)) - 81.0).abs() < 1e-12);
}

#[test]
fn social_score_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let t = [Termination::Success, Termination::Collision, Termination::Timeout][rng.gen_range(0..3)];
        let r = record(t, rng.gen_range(0.0..=1.0), rng.gen_range(0.0..20.0), rng.gen_range(0.0..40.0));
        let s = social_score(&r);
        assert!((0.0..=100.0).contains(&s), "{s}");
    }
}

#[test]
fn straight_line_in_empty_world_always_succeeds() {
    let r = evaluate(&StraightLine { time_step: 0.25 }, &scenario(0), &eval_config(20)).unwrap();
    assert_eq!(r.n_runs, 20);
    assert_eq!(r.success_rate, 100.0);
    assert_eq!(r.collision_rate, 0.0);
    assert!(r.mean_min_separation.is_none());
}

#[test]
fn frozen_robot_always_times_out() {
    let r = evaluate(&Frozen, &scenario(0), &eval_config(5)).unwrap();
    assert_eq!(r.timeout_rate, 100.0);
    assert!(r.mean_navigation_time.is_none());
}

#[test]
fn rates_account_for_every_run_and_are_deterministic() {
    let orca = OrcaRobot {
        horizon: 5.0,
        time_step: 0.25,
    };
    let a = evaluate(&orca, &scenario(5), &eval_config(40)).unwrap();
    let b = evaluate(&orca, &scenario(5), &eval_config(40)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episodes.len(), 40);
    assert!((a.success_rate + a.collision_rate + a.timeout_rate - 100.0).abs() < 1e-9);
    assert_eq!(a.to_table().lines().count(), 41);
    assert!(a.summary().contains(SOCIAL_SCORE_LABEL));
}

#[test]
fn orca_robot_success_does_not_grow_with_crowd_size() {
    let orca = OrcaRobot {
        horizon: 5.0,
        time_step: 0.25,
    };
    let few = evaluate(&orca, &scenario(5), &eval_config(100)).unwrap();
    let many = evaluate(&orca, &scenario(15), &eval_config(100)).unwrap();
    assert!(few.success_rate >= many.success_rate, "{} vs {}", few.success_rate, many.success_rate);
}

#[test]
fn invalid_requests_fail_before_running() {
    assert!(matches!(evaluate(&Frozen, &scenario(0), &eval_config(0)), Err(EvalError::NoRuns)));
    let slow = StraightLine { time_step: 0.5 };
    assert!(matches!(
        evaluate(&slow, &scenario(0), &eval_config(3)),
        Err(EvalError::Policy(PolicyError::Mismatch(_)))
    ));
}

#[test]
fn unforced_nominal_system_never_gains_energy() {
    let sys = NominalSystem::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trace: Vec<TraceStep> = (0..50)
        .map(|k| {
            let x = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let terms = sys.terms(&x);
            TraceStep {
                t: k as f64 * 0.25,
                input: DVector::zeros(terms.input_dim()),
                terms,
            }
        })
        .collect();
    for row in energy_audit(&trace).unwrap() {
        assert!(row.h_dot <= 0.0, "{row:?}");
        assert!(!row.violation);
    }
}

#[test]
fn lossless_terms_balance_supplied_power() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let grad = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
        let g = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let terms = PhTerms::assemble(&a - a.transpose(), DMatrix::zeros(4, 4), grad, 1.0, g).unwrap();
        let input = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let rows = energy_audit(&[TraceStep { t: 0.0, terms, input }]).unwrap();
        assert!((rows[0].h_dot - rows[0].supplied).abs() < 1e-8);
        assert_eq!(rows[0].dissipated, 0.0);
    }
}

#[test]
fn learned_policy_audit_has_no_violations() {
    let mut c = PolicyConfig::default();
    c.diffusion.steps = 20;
    c.diffusion.kappa = 3;
    let policy = HamiltonianPolicy::new(c).unwrap();
    let audit = EnergyAudit::run(&policy, &scenario(3), 3, 1).unwrap();
    assert_eq!(audit.episodes.len(), 3);
    assert_eq!(audit.violations(), 0);
    for (_, _, rows) in &audit.episodes {
        assert!(rows.iter().all(|r| r.dissipated >= -1e-12));
    }
}

#[test]
fn simulate_logs_every_step() {
    let (log, rec) = simulate(&StraightLine { time_step: 0.25 }, &scenario(2), 4).unwrap();
    assert_eq!(log.records.len(), 3 * (rec.steps + 1));
    assert_eq!(log.goals.len(), 3);
    let again = simulate(&StraightLine { time_step: 0.25 }, &scenario(2), 4).unwrap().0;
    assert_eq!(log.to_text(), again.to_text());
}

fn path_segments(svg: &str, agent: usize) -> Vec<[f64; 4]> {
    let tag = format!(r#"class="path" data-agent="{agent}""#);
    svg.lines()
        .filter(|l| l.contains(&tag))
        .map(|l| {
            let attr = |name: &str| -> f64 {
                let key = format!(" {name}=\"");
                let start = l.find(&key).unwrap() + key.len();
                l[start..start + l[start..].find('"').unwrap()].parse().unwrap()
            };
            [attr("x1"), attr("y1"), attr("x2"), attr("y2")]
        })
        .collect()
}

fn segments_cross(a: [f64; 4], b: [f64; 4]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
    let (p1, p2, q1, q2) = ([a[0], a[1]], [a[2], a[3]], [b[0], b[1]], [b[2], b[3]]);
    orient(p1, p2, q1) * orient(p1, p2, q2) < 0.0 && orient(q1, q2, p1) * orient(q1, q2, p2) < 0.0
}

#[test]
fn stationary_agent_renders_as_a_single_circle() {
    let text = "# goal,0,0,0\n0,0,robot,1,1,0,0,0.3\n0.25,0,robot,1,1,0,0,0.3\n";
    let svg = render_svg(text, 10.0).unwrap();
    assert_eq!(svg.matches("class=\"agent\"").count(), 1);
    assert_eq!(svg.matches("class=\"path\"").count(), 0);
    assert_eq!(svg.matches("class=\"arena\"").count(), 1);
    assert_eq!(svg.matches("class=\"goal\"").count(), 1);
}

#[test]
fn crossing_agents_render_intersecting_paths() {
    let mut text = String::new();
    for k in 0..=8 {
        let s = -4.0 + k as f64;
        text.push_str(&format!("{},0,robot,{s},0,1,0,0.3\n", k as f64 * 0.25));
        text.push_str(&format!("{},1,human,0.5,{},0,1,0.3\n", k as f64 * 0.25, s + 0.5));
    }
    let svg = render_svg(&text, 10.0).unwrap();
    let (a, b) = (path_segments(&svg, 0), path_segments(&svg, 1));
    assert_eq!((a.len(), b.len()), (8, 8));
    assert!(a.iter().any(|&s| b.iter().any(|&t| segments_cross(s, t))));
    assert_eq!(svg, render_svg(&text, 10.0).unwrap());
}

#[test]
fn malformed_trajectory_reports_line() {
    let err = render_svg("# header\n0,0,robot,1,1,0,0,0.3\n0,0,robot,1\n", 10.0).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}

#[test]
fn sf_pedestrians_are_supported() {
    let s = ScenarioConfig {
        ped_policy: PedPolicy::Sf,
        ..scenario(4)
    };
    let r = evaluate(&StraightLine { time_step: 0.25 }, &s, &eval_config(5)).unwrap();
    assert_eq!(r.n_runs, 5);
}
