use super::*;

fn env_with(humans: usize, f: impl FnOnce(&mut ScenarioConfig)) -> CrowdEnv {
    let mut c = ScenarioConfig {
        humans,
        ..ScenarioConfig::default()
    };
    f(&mut c);
    CrowdEnv::new(c).unwrap()
}

#[test]
fn single_human_without_jitter_sits_at_angle_zero() {
    let env = env_with(1, |c| c.angle_jitter = 0.0);
    let (s, obs) = env.reset(3).unwrap();
    let h = &s.humans[0];
    assert!((h.p[0] - 8.0).abs() < 1e-12 && h.p[1].abs() < 1e-12);
    assert!((h.goal[0] + 8.0).abs() < 1e-12 && h.goal[1].abs() < 1e-12);
    assert_eq!(obs.humans.len(), 1);
    assert_eq!(obs.robot, [0.0, -8.0, 0.0, 0.0, 0.3, 0.0, 8.0, 1.0]);
}

#[test]
fn reset_is_deterministic() {
    let env = env_with(10, |_| {});
    assert_eq!(env.reset(42).unwrap(), env.reset(42).unwrap());
    assert_ne!(env.reset(42).unwrap().0, env.reset(43).unwrap().0);
}

#[test]
fn seeded_resets_never_overlap() {
    let env = env_with(10, |_| {});
    for seed in 0..500 {
        let (s, _) = env.reset(seed).unwrap();
        let all: Vec<&AgentState> = std::iter::once(&s.robot).chain(&s.humans).collect();
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                let d = norm(sub(all[i].p, all[j].p));
                assert!(d >= all[i].radius + all[j].radius, "seed {seed}: agents {i},{j} overlap");
            }
        }
    }
}

#[test]
fn placement_failure_is_reported() {
    let env = env_with(4, |c| c.angle_jitter = 0.0);
    assert!(matches!(env.reset(0), Err(EnvError::Placement { agent: 2, .. })));
}

#[test]
fn config_validation() {
    assert!(CrowdEnv::new(ScenarioConfig {
        humans: 16,
        ..ScenarioConfig::default()
    })
    .is_err());
    assert!(CrowdEnv::new(ScenarioConfig {
        time_step: 0.0,
        ..ScenarioConfig::default()
    })
    .is_err());
    let text = ScenarioConfig::default().to_toml();
    assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), ScenarioConfig::default());
    let partial = ScenarioConfig::from_toml("humans = 3\nped_policy = \"sf\"\n[reward]\nsuccess = 5.0\n").unwrap();
    assert_eq!(partial.humans, 3);
    assert_eq!(partial.ped_policy, PedPolicy::Sf);
    assert_eq!(partial.reward.success, 5.0);
    assert_eq!(partial.reward.collision, -20.0);
    assert!(ScenarioConfig::from_toml("hummans = 3").is_err());
}

#[test]
fn empty_world_robot_reaches_goal() {
    let env = env_with(0, |_| {});
    let (mut s, _) = env.reset(0).unwrap();
    let dist: f64 = 16.0;
    let vt = 0.25;
    // first k with dist − k·v·T below the robot radius
    let expected = (0..).find(|&k| dist - k as f64 * vt < 0.3).unwrap();
    let mut steps = 0;
    loop {
        let (out, next) = env.step(&s, [0.0, 1.0]).unwrap();
        steps += 1;
        s = next;
        if out.done.is_done() {
            assert_eq!(out.done, Termination::Success);
            assert!((out.reward - (10.0 + 2.0 * 0.25)).abs() < 1e-9);
            break;
        }
        assert!((out.reward - (0.5 - 0.01)).abs() < 1e-9);
    }
    assert_eq!(steps, expected);
    assert!(matches!(env.step(&s, [0.0, 0.0]), Err(EnvError::Finished(Termination::Success))));
}

#[test]
fn human_on_robot_collides_immediately() {
    let env = env_with(0, |c| c.static_obstacles = vec![[0.0, -8.0, 0.3]]);
    let (s, _) = env.reset(0).unwrap();
    let (out, _) = env.step(&s, [0.0, 0.0]).unwrap();
    assert_eq!(out.done, Termination::Collision);
    assert!(out.reward < -19.0);
}

#[test]
fn frozen_robot_times_out() {
    let env = env_with(0, |_| {});
    let (mut s, _) = env.reset(0).unwrap();
    let mut n = 0;
    loop {
        let (out, next) = env.step(&s, [0.0, 0.0]).unwrap();
        n += 1;
        s = next;
        if out.done.is_done() {
            assert_eq!(out.done, Termination::Timeout);
            break;
        }
    }
    assert_eq!(n, 161);
    assert!(s.t > 40.0);
}

#[test]
fn action_is_clipped() {
    let env = env_with(0, |_| {});
    let (s, _) = env.reset(0).unwrap();
    let (out, next) = env.step(&s, [0.0, 3.0]).unwrap();
    assert!(out.info.clipped);
    assert!((next.robot.v[1] - 1.0).abs() < 1e-12);
    assert!(env.step(&s, [f64::NAN, 0.0]).is_err());
}

fn pairwise_min(humans: &[AgentState]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..humans.len() {
        for j in (i + 1)..humans.len() {
            m = m.min(norm(sub(humans[i].p, humans[j].p)) - humans[i].radius - humans[j].radius);
        }
    }
    m
}

#[test]
fn orca_crowd_has_no_human_collisions() {
    let env = env_with(10, |_| {});
    for seed in 0..100 {
        let (mut s, _) = env.reset(seed).unwrap();
        for _ in 0..200 {
            s.done = Termination::Running;
            let (_, next) = env.step(&s, [0.0, 0.0]).unwrap();
            s = next;
            assert!(pairwise_min(&s.humans) >= 0.0, "seed {seed} t {} sep {}", s.t, pairwise_min(&s.humans));
            for h in &s.humans {
                assert!(h.speed() <= h.v_pref + 1e-9);
            }
        }
    }
}

#[test]
fn kinematics_and_invisibility() {
    let env = env_with(6, |c| c.sf_fraction = 0.5);
    let (s0, _) = env.reset(9).unwrap();
    let mut a = s0.clone();
    let mut b = s0;
    for k in 0..60 {
        let (_, na) = env.step(&a, [0.5, 0.5]).unwrap();
        let (_, nb) = env.step(&b, [-0.3 * (k as f64).sin(), 0.2]).unwrap();
        for (prev, next) in std::iter::once((&a.robot, &na.robot)).chain(a.humans.iter().zip(&na.humans)) {
            for d in 0..2 {
                assert_eq!(next.p[d] - prev.p[d], next.v[d] * 0.25 + (next.p[d] - prev.p[d] - next.v[d] * 0.25));
                assert!((next.p[d] - prev.p[d] - next.v[d] * 0.25).abs() < 1e-12);
            }
        }
        // pedestrians ignore the robot entirely
        for (ha, hb) in na.humans.iter().zip(&nb.humans) {
            assert_eq!(ha.p, hb.p);
        }
        a = na;
        b = nb;
        a.done = Termination::Running;
        b.done = Termination::Running;
    }
}

#[test]
fn orca_without_neighbors_returns_preferred() {
    let me = OrcaAgent {
        position: [0.0, 0.0],
        velocity: [0.3, 0.1],
        radius: 0.3,
    };
    let sol = orca_velocity(&me, &[], [0.6, -0.8], 1.0, 5.0, 0.25);
    assert_eq!(sol.velocity, [0.6, -0.8]);
    assert!(!sol.infeasible);
}

#[test]
fn orca_head_on_pair_sidesteps_symmetrically() {
    let env = env_with(0, |c| c.angle_jitter = 0.0);
    let (mut s, _) = env.reset(0).unwrap();
    let mk = |x: f64, gx: f64| AgentState {
        p: [x, 0.0],
        v: [0.0, 0.0],
        radius: 0.3,
        goal: [gx, 0.0],
        v_pref: 1.0,
        kind: AgentKind::Human(PedPolicy::Orca),
        start: [x, 0.0],
    };
    // centres 4 m apart
    s.humans = vec![mk(-2.0, 6.0), mk(2.0, -6.0)];
    let mut min_sep = f64::INFINITY;
    let mut lateral = 0.0f64;
    for _ in 0..40 {
        let v = env.human_velocities(&mut s.clone());
        assert!((v[0][0] + v[1][0]).abs() < 1e-9 && (v[0][1] + v[1][1]).abs() < 1e-9);
        for (h, v) in s.humans.iter_mut().zip(v) {
            h.v = v;
            h.p = [h.p[0] + v[0] * 0.25, h.p[1] + v[1] * 0.25];
        }
        min_sep = min_sep.min(norm(sub(s.humans[0].p, s.humans[1].p)));
        lateral = lateral.max(s.humans[0].p[1].abs());
    }
    assert!(min_sep >= 0.6, "min separation {min_sep}");
    assert!(lateral > 0.05);
}

#[test]
fn orca_random_instances_beat_grid() {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 50 {
        let me = OrcaAgent {
            position: [0.0, 0.0],
            velocity: [rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7)],
            radius: 0.3,
        };
        let k = rng.gen_range(1..=5);
        let neighbors: Vec<OrcaAgent> = (0..k)
            .map(|_| {
                let th: f64 = rng.gen_range(0.0..TAU);
                let d = rng.gen_range(0.8..4.0);
                OrcaAgent {
                    position: [d * th.cos(), d * th.sin()],
                    velocity: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    radius: 0.3,
                }
            })
            .collect();
        let th: f64 = rng.gen_range(0.0..TAU);
        let pref = [th.cos(), th.sin()];
        let sol = orca_velocity(&me, &neighbors, pref, 1.0, 5.0, 0.25);
        if sol.infeasible {
            continue;
        }
        checked += 1;
        for hp in &sol.constraints {
            assert!(hp.violation(sol.velocity) <= 1e-9);
        }
        let best = norm(sub(sol.velocity, pref));
        for i in 0..100 {
            for j in 0..100 {
                let v = [-1.0 + 2.0 * (i as f64 + 0.5) / 100.0, -1.0 + 2.0 * (j as f64 + 0.5) / 100.0];
                if norm(v) > 1.0 || sol.constraints.iter().any(|h| h.violation(v) > 0.0) {
                    continue;
                }
                assert!(norm(sub(v, pref)) >= best - 1e-9);
            }
        }
    }
}

#[test]
fn social_force_examples() {
    use rand::SeedableRng;
    let cfg = SocialForceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let at = |p: Vec2, v: Vec2| ForceAgent {
        position: p,
        velocity: v,
        radius: 0.3,
    };
    assert_eq!(social_force(&at([1.0, 1.0], [0.0, 0.0]), &[], [1.0, 1.0], 1.0, &cfg, &mut rng), [0.0, 0.0]);

    let me = at([0.0, 0.0], [0.0, 0.0]);
    let far = social_force(&me, &[at([5.0, 0.0], [0.0, 0.0])], [0.0, 10.0], 1.0, &cfg, &mut rng);
    let alone = social_force(&me, &[], [0.0, 10.0], 1.0, &cfg, &mut rng);
    assert!(norm(sub(far, alone)) < 1e-6);

    let f = social_force::repulsion(&me, &at([0.5, 0.0], [0.0, 0.0]), &cfg, &mut rng);
    let expected = 2.0 * ((0.6f64 - 0.5) / 0.08).exp();
    assert!((norm(f) - expected).abs() < 1e-12);
    assert!(f[0] < 0.0);

    let coincident = social_force::repulsion(&me, &at([0.0, 0.0], [0.0, 0.0]), &cfg, &mut rng);
    assert!((norm(coincident) - cfg.max_force).abs() < 1e-9);
}

#[test]
fn reward_examples() {
    let cfg = RewardConfig::default();
    let r = reward(&cfg, 0.5, 0.25, 2.0, Termination::Success);
    assert!((r.total() - (10.0 + 0.5)).abs() < 1e-12);
    let r = reward(&cfg, 3.0, 2.9, -0.1, Termination::Collision);
    assert!(r.total() < -19.0);
    let r = reward(&cfg, 3.0, 2.9, 0.25, Termination::Running);
    assert!((r.discomfort + 0.25).abs() < 1e-12);
    assert!((r.total() - (-0.25 + 0.2 - 0.01)).abs() < 1e-12);
}

#[test]
fn trajectory_roundtrip_and_errors() {
    let env = env_with(2, |_| {});
    let (mut s, _) = env.reset(1).unwrap();
    let mut log = TrajectoryLog::new(&s);
    for _ in 0..5 {
        let (_, next) = env.step(&s, [0.0, 1.0]).unwrap();
        s = next;
        log.push(&s);
    }
    let text = log.to_text();
    assert!(text.starts_with("# t[s],agent_id,kind,x[m]"));
    let back = TrajectoryLog::parse(&text).unwrap();
    assert_eq!(back.records.len(), 18);
    assert_eq!(back.goals.len(), 3);
    assert_eq!(back.to_text(), text);

    let broken = format!("{text}0.5,1,human,1.0,oops,0,0,0.3\n");
    let err = TrajectoryLog::parse(&broken).unwrap_err();
    assert_eq!(err.line, text.lines().count() + 1);
    assert!(err.to_string().starts_with(&format!("line {}", err.line)));
}
