use nalgebra::{DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::env::{CrowdEnv, ScenarioConfig};
use crate::ph::{discretize_step, open_loop_dynamics, ph_policy_head, NominalSystem};

struct Model {
    store: ParamStore,
    encoder: SpatialTemporalEncoder,
    heads: HamiltonianHeads,
}

fn model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let encoder = SpatialTemporalEncoder::new(&mut store, "enc", EncoderConfig::default(), &mut rng);
    let heads = HamiltonianHeads::new(&mut store, "ham", 32, &HeadInit::default(), &mut rng);
    Model { store, encoder, heads }
}

/// History from a seeded crowd rollout with random robot actions.
fn history(humans: usize, len: usize, seed: u64) -> Vec<Observation> {
    let env = CrowdEnv::new(ScenarioConfig {
        humans,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, obs) = env.reset(seed).unwrap();
    let mut out = vec![obs];
    while out.len() < len {
        let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let (o, next) = env.step(&state, a).unwrap();
        out.push(o.observation);
        if o.done.is_done() {
            break;
        }
        state = next;
    }
    out
}

fn window(humans: usize, steps: usize, seed: u64) -> ObservationWindow {
    ObservationWindow::from_history(&history(humans, steps, seed), steps).unwrap()
}

fn learned(m: &Model, w: &ObservationWindow) -> LearnedHamiltonian {
    let tape = Tape::new();
    let f = m.encoder.encode(&tape, &m.store, w);
    m.heads.hamiltonian(&tape, &m.store, &f, w)
}

#[test]
fn empty_window_is_rejected() {
    let err = ObservationWindow::new(0, 1, Tensor::zeros(&[0, RAW_DIM]), vec![]).unwrap_err();
    assert_eq!(err, EncoderError::NoAgents);
    assert_eq!(ObservationWindow::from_history(&[], 5).unwrap_err(), EncoderError::NoSteps);
}

#[test]
fn short_history_is_padded_and_masked() {
    let w = ObservationWindow::from_history(&history(2, 2, 3), 5).unwrap();
    assert_eq!((w.agents(), w.steps()), (3, 5));
    for i in 0..3 {
        for t in 0..5 {
            assert_eq!(w.present(i, t), t >= 3);
            if t < 3 {
                assert!(w.raw(i, t).iter().all(|&x| x == 0.0));
            }
        }
    }
    // humans carry no goal or preferred speed
    assert!(w.raw(1, 4)[5..].iter().all(|&x| x == 0.0));
}

#[test]
fn single_token_attention_passes_value_through() {
    let m = model(1);
    let w = window(0, 1, 4);
    let tape = Tape::new();
    let f = m.encoder.encode(&tape, &m.store, &w);
    assert_eq!(f.y_s.dims(), (1, 32));

    // with one token the softmax weight is exactly 1, so the block reduces
    // to LN(x + W_o(W_v x + b_v) + b_o)
    let x = m.encoder.embed.forward(&tape, &m.store, tape.constant(w.tokens())).tanh();
    let block = &m.encoder.spatial;
    let v = block.value.forward(&tape, &m.store, x);
    let expect = block.norm.forward(&tape, &m.store, x + block.output.forward(&tape, &m.store, v));
    assert!(f.y_s.value().max_abs_diff(&expect.value()) < 1e-12);
}

#[test]
fn shapes_and_determinism() {
    let m = model(2);
    let w = window(2, 4, 5);
    let run = || {
        let tape = Tape::new();
        let f = m.encoder.encode(&tape, &m.store, &w);
        (f.y_s.value(), f.y_t.value(), f.y_f.value(), f.pair.value())
    };
    let (ys, yt, yf, pair) = run();
    for t in [&ys, &yt, &yf] {
        assert_eq!(t.shape(), &[12, 32]);
        assert!(t.all_finite());
    }
    assert_eq!(pair.shape(), &[9, 32]);
    assert_eq!(run(), (ys, yt, yf, pair));
}

#[test]
fn temporal_attention_is_causal() {
    let m = model(3);
    let hist = history(2, 5, 6);
    let w = ObservationWindow::from_history(&hist, 5).unwrap();
    let mut later = hist.clone();
    later[4].humans[0][2] += 0.7;
    let w2 = ObservationWindow::from_history(&later, 5).unwrap();
    let tape = Tape::new();
    let a = m.encoder.encode(&tape, &m.store, &w).y_t.value();
    let b = m.encoder.encode(&tape, &m.store, &w2).y_t.value();
    for r in 0..15 {
        let same = a.row(r) == b.row(r);
        // only agent 1's last token sees the change
        assert_eq!(same, r != 5 + 4, "row {r}");
    }
}

#[test]
fn swapping_pedestrians_permutes_outputs() {
    let m = model(4);
    let hist = history(2, 5, 7);
    let swapped: Vec<Observation> = hist
        .iter()
        .map(|o| Observation {
            robot: o.robot,
            humans: vec![o.humans[1], o.humans[0]],
        })
        .collect();
    let (w, ws) = (
        ObservationWindow::from_history(&hist, 5).unwrap(),
        ObservationWindow::from_history(&swapped, 5).unwrap(),
    );
    let tape = Tape::new();
    let (fa, fb) = (m.encoder.encode(&tape, &m.store, &w), m.encoder.encode(&tape, &m.store, &ws));
    let perm = [0usize, 2, 1];
    let (ya, yb) = (fa.y_f.value(), fb.y_f.value());
    for i in 0..3 {
        for t in 0..5 {
            let d = ya
                .row(i * 5 + t)
                .iter()
                .zip(yb.row(perm[i] * 5 + t))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(d < 1e-12, "agent {i} step {t}: {d}");
        }
    }
    let (ha, hb) = (learned(&m, &w), learned(&m, &ws));
    for i in 0..3 {
        for k in 0..3 {
            let ba = ha.j_theta.view((4 * i, 4 * k), (4, 4));
            let bb = hb.j_theta.view((4 * perm[i], 4 * perm[k]), (4, 4));
            assert!((ba - bb).amax() < 1e-12);
            let ra = ha.r_theta.view((4 * i, 4 * k), (4, 4));
            let rb = hb.r_theta.view((4 * perm[i], 4 * perm[k]), (4, 4));
            assert!((ra - rb).amax() < 1e-12);
        }
    }
    assert!((ha.energy() - hb.energy()).abs() < 1e-12);
}

#[test]
fn identical_agents_get_identical_features() {
    let m = model(5);
    let mut hist = history(2, 3, 8);
    for o in &mut hist {
        o.humans[1] = o.humans[0];
    }
    let w = ObservationWindow::from_history(&hist, 5).unwrap();
    let tape = Tape::new();
    let y = m.encoder.encode(&tape, &m.store, &w).y_f.value();
    for t in 0..5 {
        assert_eq!(y.row(5 + t), y.row(10 + t));
    }
}

#[test]
fn learned_terms_are_skew_and_psd() {
    let m = model(6);
    for seed in 0..40 {
        let w = window(1 + seed as usize % 6, 1 + seed as usize % 5, 100 + seed);
        let h = learned(&m, &w);
        let skew = (&h.j_theta + h.j_theta.transpose()).amax();
        assert_eq!(skew, 0.0, "seed {seed}");
        assert_eq!(h.r_theta, h.r_theta.transpose(), "seed {seed}");
        let min = SymmetricEigen::new(h.r_theta.clone()).eigenvalues.min();
        assert!(min >= -1e-10, "seed {seed}: {min}");
        assert!(h.energy().is_finite());
        let full = h.interconnection();
        assert_eq!((&full + full.transpose()).amax(), 0.0);
    }
}

#[test]
fn zero_features_give_zero_interconnection() {
    let mut m = model(7);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let shape = m.store.value(id).shape().to_vec();
        if m.store.name(id).starts_with("ham.") {
            m.store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }
    let w = window(2, 5, 9);
    let tape = Tape::new();
    let zeros = tape.constant(Tensor::zeros(&[15, 32]));
    let f = FusedFeatures {
        y_s: zeros,
        y_t: zeros,
        y_f: zeros,
        pair: tape.constant(Tensor::zeros(&[9, 32])),
        agents: 3,
        steps: 5,
    };
    let h = m.heads.hamiltonian(&tape, &m.store, &f, &w);
    assert_eq!(h.j_theta.amax(), 0.0);
    // softplus(0) = ln 2 on every off-diagonal block, diagonal dominance
    // then puts 3·ln 2 on the diagonal
    let ln2 = std::f64::consts::LN_2;
    for i in 0..12 {
        for k in 0..12 {
            let expect = if k % 4 != i % 4 {
                0.0
            } else if i / 4 == k / 4 {
                3.0 * ln2
            } else {
                ln2
            };
            assert!((h.r_theta[(i, k)] - expect).abs() < 1e-15, "({i},{k})");
        }
    }
    assert!(h.coefficients.mass.iter().all(|&x| (x - ln2).abs() < 1e-15));
    // at rest on the goal with no neighbours every energy term vanishes
    let still = ObservationWindow::new(
        1,
        1,
        Tensor::matrix(1, RAW_DIM, vec![1.0, 2.0, 0.0, 0.0, 0.3, 1.0, 2.0, 1.0]).unwrap(),
        vec![true],
    )
    .unwrap();
    let tape = Tape::new();
    let f = FusedFeatures {
        y_s: tape.constant(Tensor::zeros(&[1, 32])),
        y_t: tape.constant(Tensor::zeros(&[1, 32])),
        y_f: tape.constant(Tensor::zeros(&[1, 32])),
        pair: tape.constant(Tensor::zeros(&[1, 32])),
        agents: 1,
        steps: 1,
    };
    let h = m.heads.hamiltonian(&tape, &m.store, &f, &still);
    assert_eq!(h.energy(), 0.0);
    assert_eq!(h.grad_h.amax(), 0.0);
}

#[test]
fn energy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = model(8);
    for case in 0..100 {
        let w = window(1, 1 + case % 5, 200 + case as u64);
        let mut h = learned(&m, &w);
        // random coefficients and displaced states widen the coverage
        h.coefficients.mass = vec![rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0)];
        h.coefficients.stiffness = rng.gen_range(0.1..3.0);
        h.coefficients.amplitude = vec![rng.gen_range(0.1..5.0)];
        h.coefficients.range = vec![rng.gen_range(0.1..2.0)];
        let states: Vec<[f64; 4]> = (0..2)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-3.0..3.0)))
            .collect();
        let h = LearnedHamiltonian::new(h.j_theta, h.r_theta, states.clone(), h.coefficients, h.geometry);
        let eps = 1e-5;
        for k in 0..8 {
            let (mut up, mut down) = (states.clone(), states.clone());
            up[k / 4][k % 4] += eps;
            down[k / 4][k % 4] -= eps;
            let fd = (h.energy_at(&up) - h.energy_at(&down)) / (2.0 * eps);
            let g = h.grad_h[k];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-4, "case {case} coord {k}: {g} vs {fd}");
        }
    }
}

#[test]
fn closed_form_gradient_matches_autodiff() {
    let m = model(9);
    for seed in 0..20 {
        let w = window(1 + seed as usize % 5, 5, 300 + seed);
        let h = learned(&m, &w);
        let tape = Tape::new();
        let c = h.coefficients.to_vars(&tape);
        let g = grad_h_on_tape(&tape, &h.states, &c, &h.geometry).value();
        let diff = g
            .data()
            .iter()
            .zip(h.grad_h.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn robot_coupling_matches_full_terms() {
    let m = model(11);
    for seed in 0..20 {
        let w = window(seed as usize % 6, 5, 400 + seed);
        let h = learned(&m, &w);
        let tape = Tape::new();
        let f = m.encoder.encode(&tape, &m.store, &w);
        let coupling = m.heads.robot_coupling(&tape, &m.store, &f, &w);
        let force = coupling.force.value();
        let drift = h.drift();
        for k in 0..2 {
            assert!((force.data()[k] - drift[2 + k]).abs() < 1e-12, "seed {seed}");
        }

        // the same force through the matching controller and one Euler step
        let s = h.states[0];
        let x = DVector::from_row_slice(&s);
        let nominal = NominalSystem::new(1.3, w.robot_goal(), 0.7, 0.4).unwrap().terms(&s);
        let u = ph_policy_head(&x, &h.pair_terms(), &nominal).unwrap();
        let next = discretize_step(&x, &u, 0.25, |x, u| {
            open_loop_dynamics(x, u, &nominal).unwrap().x_dot
        })
        .unwrap();
        for k in 0..2 {
            let euler = s[2 + k] + 0.25 * force.data()[k];
            assert!((next[2 + k] - euler).abs() < 1e-12, "seed {seed}");
        }
    }
}
