use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rk4<F: Fn(&DVector<f64>) -> DVector<f64>>(x: &DVector<f64>, h: f64, f: F) -> DVector<f64> {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 2.0)));
    let k3 = f(&(x + &k2 * (h / 2.0)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn quadratic_terms(j: DMatrix<f64>, r: DMatrix<f64>, g: DMatrix<f64>, x: &DVector<f64>) -> PhTerms {
    PhTerms::new(j, r, x.clone(), 0.5 * x.norm_squared(), g).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_skew(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    &a - a.transpose()
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    &a * a.transpose()
}

#[test]
fn conservative_rotation() {
    let x = DVector::from_vec(vec![1.0, 0.0]);
    let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let t = quadratic_terms(j.clone(), DMatrix::zeros(2, 2), DMatrix::zeros(2, 0), &x);
    let flow = open_loop_dynamics(&x, &DVector::zeros(0), &t).unwrap();
    assert_eq!(flow.x_dot.as_slice(), &[0.0, -1.0]);
    let f = |x: &DVector<f64>| &j * x;
    let mut s = x.clone();
    for _ in 0..1000 {
        s = rk4(&s, 0.01, f);
    }
    assert!((0.5 * s.norm_squared() - 0.5).abs() < 1e-8);
}

#[test]
fn pure_dissipation_decreases_energy() {
    let x = DVector::from_vec(vec![0.7, -1.2]);
    let t = quadratic_terms(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), DMatrix::zeros(2, 0), &x);
    let flow = open_loop_dynamics(&x, &DVector::zeros(0), &t).unwrap();
    assert_eq!(flow.x_dot, -&x);
    let mut s = x.clone();
    let mut h = 0.5 * s.norm_squared();
    for _ in 0..200 {
        s = rk4(&s, 0.05, |x| -x);
        let h_next = 0.5 * s.norm_squared();
        assert!(h_next < h);
        h = h_next;
    }
}

#[test]
fn pure_input() {
    let x = DVector::from_vec(vec![3.0, 4.0]);
    let t = PhTerms::new(
        DMatrix::zeros(2, 2),
        DMatrix::zeros(2, 2),
        DVector::zeros(2),
        0.0,
        DMatrix::identity(2, 2),
    )
    .unwrap();
    let u = DVector::from_vec(vec![0.5, -2.0]);
    assert_eq!(open_loop_dynamics(&x, &u, &t).unwrap().x_dot, u);
    assert!(matches!(
        open_loop_dynamics(&x, &DVector::zeros(3), &t),
        Err(PhError::Dimension { .. })
    ));
}

#[test]
fn term_invariants_enforced() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = DMatrix::identity(3, 3);
    let bad_j = random_matrix(&mut rng, 3, 3);
    assert!(matches!(
        PhTerms::new(bad_j.clone(), DMatrix::zeros(3, 3), DVector::zeros(3), 0.0, g.clone()),
        Err(PhError::NotSkew(_))
    ));
    let neg = -DMatrix::<f64>::identity(3, 3);
    assert!(matches!(
        PhTerms::new(DMatrix::zeros(3, 3), neg.clone(), DVector::zeros(3), 0.0, g.clone()),
        Err(PhError::NotPsd(_))
    ));
    let t = PhTerms::assemble(bad_j, neg, DVector::zeros(3), 0.0, g.clone()).unwrap();
    assert_eq!(max_abs(&(t.j() + t.j().transpose())), 0.0);
    assert!(min_eigenvalue(t.r()) >= -PSD_TOLERANCE);
    assert!(matches!(
        PhTerms::new(DMatrix::zeros(3, 3), DMatrix::zeros(3, 3), DVector::zeros(3), f64::NAN, g),
        Err(PhError::NonFinite(_))
    ));
    assert!(matches!(
        PhTerms::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
            0.0,
            DMatrix::zeros(2, 3)
        ),
        Err(PhError::TooManyInputs { .. })
    ));
}

#[test]
fn skew_part_exact_for_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 1..8 {
        let j = random_skew(&mut rng, n) * 0.37;
        let t = PhTerms::new(j, DMatrix::zeros(n, n), DVector::zeros(n), 0.0, DMatrix::zeros(n, 1)).unwrap();
        assert_eq!(max_abs(&(t.j() + t.j().transpose())), 0.0);
    }
}

#[test]
fn power_balance_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let x = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
        let r = random_psd(&mut rng, 4);
        let g = random_matrix(&mut rng, 4, 2);
        let t = quadratic_terms(random_skew(&mut rng, 4), r, g.clone(), &x);
        let pb = power_balance(&x, &DVector::zeros(2), &t).unwrap();
        assert!(pb.h_dot <= 0.0);
        assert!(pb.dissipated >= -1e-10);

        let u = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let lossless = quadratic_terms(random_skew(&mut rng, 4), DMatrix::zeros(4, 4), g, &x);
        let pb = power_balance(&x, &u, &lossless).unwrap();
        assert_eq!(pb.h_dot, pb.supplied);
        assert!(pb.is_passive(1e-9));
    }
}

#[test]
fn power_balance_matches_rk4_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let j = random_skew(&mut rng, 4);
        let r = random_psd(&mut rng, 4);
        let g = random_matrix(&mut rng, 4, 2);
        let u = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let f = |x: &DVector<f64>| (&j - &r) * x + &g * &u;
        let mut x = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
        for _ in 0..5 {
            let t = quadratic_terms(j.clone(), r.clone(), g.clone(), &x);
            let pb = power_balance(&x, &u, &t).unwrap();
            let h = 1e-4;
            let fwd = rk4(&x, h, f);
            let bwd = rk4(&x, -h, f);
            let fd = (0.5 * fwd.norm_squared() - 0.5 * bwd.norm_squared()) / (2.0 * h);
            let rel = (fd - pb.h_dot).abs() / pb.h_dot.abs().max(1e-3);
            assert!(rel < 1e-5, "fd {fd} vs {}", pb.h_dot);
            x = rk4(&x, 0.02, f);
        }
    }
}

#[test]
fn pseudo_inverse_cases() {
    let eye = DMatrix::<f64>::identity(3, 3);
    assert!((pseudo_inverse(&eye).unwrap() - &eye).abs().max() < 1e-15);
    assert!((pseudo_inverse(&(&eye * 2.0)).unwrap() - &eye * 0.5).abs().max() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let g = random_matrix(&mut rng, 4, 2);
        let p = pseudo_inverse(&g).unwrap();
        assert!((&p * &g - DMatrix::identity(2, 2)).abs().max() < 1e-9);
        let m = g.transpose() * &g;
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let inv = DMatrix::from_row_slice(2, 2, &[m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]]) / det;
        let oracle = inv * g.transpose();
        assert!((&p - oracle).abs().max() < 1e-9);
    }
}

#[test]
fn pseudo_inverse_rejects_rank_deficiency() {
    let g = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
    match pseudo_inverse(&g) {
        Err(PhError::Singular { smallest_singular_value }) => assert!(smallest_singular_value < 1e-6),
        other => panic!("expected singular error, got {other:?}"),
    }
    let msg = pseudo_inverse(&g).unwrap_err().to_string();
    assert!(msg.contains("smallest singular value"));
}

#[test]
fn ebpbc_identity_and_scalar_damping() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
    let t = quadratic_terms(random_skew(&mut rng, 4), random_psd(&mut rng, 4), random_matrix(&mut rng, 4, 2), &x);
    let c = ebpbc_policy(&x, &t, &t).unwrap();
    assert!(c.u.abs().max() < 1e-12);

    let c_damp = 0.8;
    let x = DVector::from_vec(vec![1.7]);
    let g = DMatrix::identity(1, 1);
    let nominal = quadratic_terms(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), g.clone(), &x);
    let desired = quadratic_terms(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, c_damp), g, &x);
    let u = ebpbc_policy(&x, &nominal, &desired).unwrap().u;
    assert!((u[0] + c_damp * 1.7).abs() < 1e-15);
}

#[test]
fn ebpbc_closed_loop_matching() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.gen_range(1..6);
        let g = random_matrix(&mut rng, n, n);
        let sv = g.clone().svd(false, false).singular_values;
        if sv.min() < 0.05 {
            continue;
        }
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let nominal = PhTerms::new(
            random_skew(&mut rng, n),
            random_psd(&mut rng, n),
            DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            0.0,
            g.clone(),
        )
        .unwrap();
        let desired = PhTerms::new(
            random_skew(&mut rng, n),
            random_psd(&mut rng, n),
            DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            1.0,
            g,
        )
        .unwrap();
        let c = ebpbc_policy(&x, &nominal, &desired).unwrap();
        let flow = open_loop_dynamics(&x, &c.u, &nominal).unwrap();
        assert!((flow.x_dot - desired.drift()).norm() < 1e-8);
        assert!(c.residual < 1e-8);
        checked += 1;
    }
}

#[test]
fn ebpbc_requires_shared_input_map() {
    let x = DVector::from_vec(vec![1.0, 2.0]);
    let a = quadratic_terms(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), DMatrix::identity(2, 2), &x);
    let b = quadratic_terms(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), DMatrix::identity(2, 2) * 2.0, &x);
    assert_eq!(ebpbc_policy(&x, &a, &b), Err(PhError::InputMapMismatch));
}

#[test]
fn damping_injection_form_agrees_for_scaled_identity_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let n = rng.gen_range(1..5);
        let scale = rng.gen_range(0.5..3.0);
        let g = DMatrix::identity(n, n) * scale;
        let x = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let nominal = PhTerms::new(
            random_skew(&mut rng, n),
            random_psd(&mut rng, n),
            DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            0.0,
            g.clone(),
        )
        .unwrap();
        let desired = PhTerms::new(
            random_skew(&mut rng, n),
            random_psd(&mut rng, n),
            DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            0.0,
            g,
        )
        .unwrap();
        let d = DampingMatrix::from_terms(&nominal).unwrap();
        let a = damping_injection_policy(&nominal, &desired, &d).unwrap();
        let b = ebpbc_policy(&x, &nominal, &desired).unwrap().u;
        assert!((a - b).abs().max() < 1e-9);
    }
}

#[test]
fn policy_head_self_consistency() {
    let nominal = NominalSystem::new(1.0, [3.0, -1.0], 0.7, 0.4).unwrap();
    let x = [0.5, 0.2, 0.3, -0.1];
    let t = nominal.terms(&x);
    let xr = DVector::from_row_slice(&x);
    let theta = PairTerms {
        blocks: vec![Some((t.j().clone(), t.r().clone()))],
        grad_h: vec![t.grad_h().clone()],
        visible: vec![0],
    };
    let u = ph_policy_head(&xr, &theta, &t).unwrap();
    assert!(u.abs().max() < 1e-15);
}

#[test]
fn policy_head_zero_learned_counteracts_damping() {
    let nominal = NominalSystem::new(1.0, [0.0, 0.0], 0.0, 0.6).unwrap();
    let x = [0.0, 0.0, 0.8, -0.5];
    let t = nominal.terms(&x);
    let theta = PairTerms {
        blocks: vec![Some((DMatrix::zeros(4, 4), DMatrix::zeros(4, 4)))],
        grad_h: vec![DVector::zeros(4)],
        visible: vec![0],
    };
    let u = ph_policy_head(&DVector::from_row_slice(&x), &theta, &t).unwrap();
    let expected = pseudo_inverse(t.g()).unwrap() * (t.r() * t.grad_h());
    assert!((u - &expected).abs().max() < 1e-15);
    assert!((expected[0] - 0.6 * 0.8).abs() < 1e-15);
}

#[test]
fn policy_head_two_pedestrians_summation() {
    let g = DMatrix::identity(2, 2);
    let xr = DVector::from_vec(vec![0.4, -0.3]);
    let nominal = PhTerms::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 0.5, -0.5, 0.0]),
        DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.3]),
        xr.clone(),
        0.125,
        g,
    )
    .unwrap();
    let j1 = [0.1, 0.2, -0.3, 0.4];
    let r1 = [0.5, 0.1, 0.1, 0.2];
    let j2 = [-0.2, 0.0, 0.7, 0.1];
    let r2 = [0.3, 0.0, 0.0, 0.6];
    let g1 = [1.0, -2.0];
    let g2 = [0.5, 0.25];
    let theta = PairTerms {
        blocks: vec![
            Some((DMatrix::zeros(2, 2), DMatrix::zeros(2, 2))),
            Some((DMatrix::from_row_slice(2, 2, &j1), DMatrix::from_row_slice(2, 2, &r1))),
            Some((DMatrix::from_row_slice(2, 2, &j2), DMatrix::from_row_slice(2, 2, &r2))),
        ],
        grad_h: vec![DVector::zeros(2), DVector::from_row_slice(&g1), DVector::from_row_slice(&g2)],
        visible: vec![0, 1, 2],
    };
    let u = ph_policy_head(&xr, &theta, &nominal).unwrap();

    // spelled out cell by cell
    let s0 = (j1[0] - r1[0]) * g1[0] + (j1[1] - r1[1]) * g1[1] + (j2[0] - r2[0]) * g2[0] + (j2[1] - r2[1]) * g2[1];
    let s1 = (j1[2] - r1[2]) * g1[0] + (j1[3] - r1[3]) * g1[1] + (j2[2] - r2[2]) * g2[0] + (j2[3] - r2[3]) * g2[1];
    let n0 = (0.0 - 0.2) * 0.4 + (0.5 - 0.0) * -0.3;
    let n1 = (-0.5 - 0.0) * 0.4 + (0.0 - 0.3) * -0.3;
    assert!((u[0] - (s0 - n0)).abs() < 1e-14);
    assert!((u[1] - (s1 - n1)).abs() < 1e-14);
}

#[test]
fn policy_head_reports_missing_agents() {
    let nominal = NominalSystem::default();
    let t = nominal.terms(&[0.0; 4]);
    let theta = PairTerms {
        blocks: vec![Some((DMatrix::zeros(4, 4), DMatrix::zeros(4, 4))), None],
        grad_h: vec![DVector::zeros(4), DVector::zeros(4)],
        visible: vec![0, 1, 3],
    };
    let err = ph_policy_head(&DVector::zeros(4), &theta, &t).unwrap_err();
    assert_eq!(err, PhError::MissingPair(vec![1, 3]));
    assert!(err.to_string().contains("[1, 3]"));
}

#[test]
fn nominal_invariants() {
    assert!(NominalSystem::new(0.0, [0.0; 2], 1.0, 0.0).is_err());
    assert!(NominalSystem::new(1.0, [0.0; 2], -1.0, 0.0).is_err());
    assert!(NominalSystem::new(1.0, [0.0; 2], 1.0, -0.1).is_err());
    let n = NominalSystem::new(2.0, [1.0, 1.0], 3.0, 0.5).unwrap();
    let x = [2.0, 1.0, 0.5, 0.0];
    let t = n.terms(&x);
    assert!((t.h() - (0.5 * 2.0 * 0.25 + 0.5 * 3.0)).abs() < 1e-15);
    // unforced nominal drift is passive
    let pb = power_balance(&DVector::from_row_slice(&x), &DVector::zeros(2), &t).unwrap();
    assert!(pb.h_dot <= 0.0);
}

#[test]
fn discretize_cases() {
    let s = DVector::from_vec(vec![0.0, 0.0]);
    let a = DVector::zeros(0);
    let next = discretize_step(&s, &a, 0.25, |_, _| DVector::from_vec(vec![1.0, 0.0])).unwrap();
    assert_eq!(next.as_slice(), &[0.25, 0.0]);
    assert_eq!(
        discretize_step(&s, &a, 0.0, |x, _| x.clone()),
        Err(PhError::BadTimestep(0.0))
    );
    assert_eq!(
        discretize_step(&s, &a, 0.1, |_, _| DVector::from_vec(vec![f64::NAN, 0.0])),
        Err(PhError::Integration)
    );
}

#[test]
fn euler_tracks_rk4_oscillator() {
    let j = canonical_j(1);
    let f = |x: &DVector<f64>, _: &DVector<f64>| &j * x;
    let mut euler = DVector::from_vec(vec![1.0, 0.0]);
    let mut reference = euler.clone();
    let a = DVector::zeros(0);
    for _ in 0..100 {
        euler = discretize_step(&euler, &a, 0.01, f).unwrap();
        reference = rk4(&reference, 0.01, |x| &j * x);
    }
    // Euler amplifies the oscillator by (1 + T²)^(k/2) ≈ 1.005 here
    assert!((euler[0] - reference[0]).abs() < 2e-2);
    assert!((reference[0] - 1.0f64.cos()).abs() < 1e-9);
}

#[test]
fn open_loop_trajectory_is_passive() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let j = random_skew(&mut rng, 4);
    let r = random_psd(&mut rng, 4) * 0.1;
    let g = random_matrix(&mut rng, 4, 2);
    let mut x = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
    for _ in 0..500 {
        let u = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let t = quadratic_terms(j.clone(), r.clone(), g.clone(), &x);
        let pb = power_balance(&x, &u, &t).unwrap();
        assert!(pb.is_passive(1e-9));
        assert!(pb.dissipated >= -1e-10);
        x = discretize_step(&x, &u, 0.01, |s, a| open_loop_dynamics(s, a, &quadratic_terms(j.clone(), r.clone(), g.clone(), s)).unwrap().x_dot).unwrap();
    }
}
