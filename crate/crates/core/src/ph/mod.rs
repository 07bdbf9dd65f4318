//! Port-Hamiltonian algebra.
//!
//! An input-state-output PH system is `ẋ = (J − R)∇H + G·u`, `y = Gᵀ∇H`
//! with `J` skew-symmetric (lossless interconnection), `R` symmetric PSD
//! (dissipation), `H` the stored energy and `G` the input map. Everything
//! here is evaluated at a single state, so [`PhTerms`] carries the already
//! evaluated matrices and gradient.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Largest tolerated `|J + Jᵀ|` entry before a term set is rejected.
pub const SKEW_TOLERANCE: f64 = 1e-12;
/// Most negative eigenvalue tolerated in `R`.
pub const PSD_TOLERANCE: f64 = 1e-10;
/// Condition number above which `GᵀG` is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("interconnection matrix is not skew-symmetric (max |J+Jᵀ| = {0:e})")]
    NotSkew(f64),
    #[error("dissipation matrix is not symmetric (max |R−Rᵀ| = {0:e})")]
    NotSymmetric(f64),
    #[error("dissipation matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("input map has {inputs} columns for a {states}-dimensional state")]
    TooManyInputs { inputs: usize, states: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("input map is rank deficient (smallest singular value {smallest_singular_value:e})")]
    Singular { smallest_singular_value: f64 },
    #[error("nominal and desired systems must share the input map")]
    InputMapMismatch,
    #[error("no learned pair block for agent(s) {0:?}")]
    MissingPair(Vec<usize>),
    #[error("timestep must be positive, got {0}")]
    BadTimestep(f64),
    #[error("integration produced a non-finite derivative")]
    Integration,
}

fn dim_err(what: &'static str, expected: impl ToString, got: impl ToString) -> PhError {
    PhError::Dimension {
        what,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// `(J, R, ∇H, H, G)` evaluated at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct PhTerms {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    grad_h: DVector<f64>,
    h: f64,
    g: DMatrix<f64>,
}

impl PhTerms {
    /// Validates all invariants. `J` within [`SKEW_TOLERANCE`] of skew is
    /// accepted and then projected so that `J = −Jᵀ` holds exactly.
    pub fn new(
        j: DMatrix<f64>,
        r: DMatrix<f64>,
        grad_h: DVector<f64>,
        h: f64,
        g: DMatrix<f64>,
    ) -> Result<Self, PhError> {
        let n = grad_h.len();
        Self::check_shapes(&j, &r, n, &g)?;
        if !h.is_finite() {
            return Err(PhError::NonFinite("energy"));
        }
        for (name, ok) in [
            ("J", j.iter().all(|v| v.is_finite())),
            ("R", r.iter().all(|v| v.is_finite())),
            ("gradient", grad_h.iter().all(|v| v.is_finite())),
            ("G", g.iter().all(|v| v.is_finite())),
        ] {
            if !ok {
                return Err(PhError::NonFinite(name));
            }
        }
        let skew_err = max_abs(&(&j + j.transpose()));
        if skew_err > SKEW_TOLERANCE {
            return Err(PhError::NotSkew(skew_err));
        }
        let sym_err = max_abs(&(&r - r.transpose()));
        if sym_err > SKEW_TOLERANCE {
            return Err(PhError::NotSymmetric(sym_err));
        }
        let r = (&r + r.transpose()) * 0.5;
        let min_eig = min_eigenvalue(&r);
        if min_eig < -PSD_TOLERANCE {
            return Err(PhError::NotPsd(min_eig));
        }
        Ok(Self {
            j: skew_part(&j),
            r,
            grad_h,
            h,
            g,
        })
    }

    /// Builds terms from hand-made matrices: `J` is replaced by its skew
    /// part, `R` is symmetrized and negative eigenvalues are clipped to 0.
    pub fn assemble(
        j: DMatrix<f64>,
        r: DMatrix<f64>,
        grad_h: DVector<f64>,
        h: f64,
        g: DMatrix<f64>,
    ) -> Result<Self, PhError> {
        let n = grad_h.len();
        Self::check_shapes(&j, &r, n, &g)?;
        let sym = (&r + r.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        let r = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        let r = (&r + r.transpose()) * 0.5;
        Self::new(skew_part(&j), r, grad_h, h, g)
    }

    fn check_shapes(j: &DMatrix<f64>, r: &DMatrix<f64>, n: usize, g: &DMatrix<f64>) -> Result<(), PhError> {
        if j.shape() != (n, n) {
            return Err(dim_err("J", format!("{n}x{n}"), format!("{:?}", j.shape())));
        }
        if r.shape() != (n, n) {
            return Err(dim_err("R", format!("{n}x{n}"), format!("{:?}", r.shape())));
        }
        if g.nrows() != n {
            return Err(dim_err("G rows", n, g.nrows()));
        }
        if g.ncols() > n {
            return Err(PhError::TooManyInputs {
                inputs: g.ncols(),
                states: n,
            });
        }
        Ok(())
    }

    pub fn j(&self) -> &DMatrix<f64> {
        &self.j
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn grad_h(&self) -> &DVector<f64> {
        &self.grad_h
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn state_dim(&self) -> usize {
        self.grad_h.len()
    }
    pub fn input_dim(&self) -> usize {
        self.g.ncols()
    }

    /// `(J − R)·∇H`, the unforced flow.
    pub fn drift(&self) -> DVector<f64> {
        (&self.j - &self.r) * &self.grad_h
    }

    /// Port output `y = Gᵀ∇H`.
    pub fn output(&self) -> DVector<f64> {
        self.g.transpose() * &self.grad_h
    }
}

fn skew_part(j: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = (j - j.transpose()) * 0.5;
    // make the diagonal and mirrored entries exact
    let n = s.nrows();
    for a in 0..n {
        s[(a, a)] = 0.0;
        for b in (a + 1)..n {
            s[(b, a)] = -s[(a, b)];
        }
    }
    s
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Unit-free point-mass plant used as the non-learned part of the policy:
/// `H = ½·m‖v‖² + ½·k‖p − goal‖²`, state `x = (p, v)`, canonical `J`,
/// `R = c·diag(0, I)` and force input `G = [0; I]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NominalSystem {
    pub mass: f64,
    pub goal: [f64; 2],
    pub stiffness: f64,
    pub damping: f64,
}

impl Default for NominalSystem {
    fn default() -> Self {
        Self {
            mass: 1.0,
            goal: [0.0, 0.0],
            stiffness: 1.0,
            damping: 0.5,
        }
    }
}

impl NominalSystem {
    pub fn new(mass: f64, goal: [f64; 2], stiffness: f64, damping: f64) -> Result<Self, PhError> {
        if !(mass > 0.0) || !(stiffness >= 0.0) || !(damping >= 0.0) {
            return Err(PhError::Dimension {
                what: "nominal parameters",
                expected: "mass > 0, stiffness ≥ 0, damping ≥ 0".into(),
                got: format!("mass {mass}, stiffness {stiffness}, damping {damping}"),
            });
        }
        Ok(Self {
            mass,
            goal,
            stiffness,
            damping,
        })
    }

    pub fn energy(&self, x: &[f64; 4]) -> f64 {
        let dp = [x[0] - self.goal[0], x[1] - self.goal[1]];
        0.5 * self.mass * (x[2] * x[2] + x[3] * x[3]) + 0.5 * self.stiffness * (dp[0] * dp[0] + dp[1] * dp[1])
    }

    pub fn terms(&self, x: &[f64; 4]) -> PhTerms {
        let grad = DVector::from_vec(vec![
            self.stiffness * (x[0] - self.goal[0]),
            self.stiffness * (x[1] - self.goal[1]),
            self.mass * x[2],
            self.mass * x[3],
        ]);
        PhTerms::new(
            canonical_j(2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, self.damping, self.damping])),
            grad,
            self.energy(x),
            force_input_map(2),
        )
        .expect("nominal terms satisfy PH invariants by construction")
    }
}

/// `[[0, I], [−I, 0]]` of size `2·half`.
pub fn canonical_j(half: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * half, 2 * half);
    for i in 0..half {
        j[(i, half + i)] = 1.0;
        j[(half + i, i)] = -1.0;
    }
    j
}

/// `[0; I]`: inputs drive the second half of the state.
pub fn force_input_map(half: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(2 * half, half);
    for i in 0..half {
        g[(half + i, i)] = 1.0;
    }
    g
}

/// `D = (GᵀG)⁻¹(J − R)`, defined for square input maps.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingMatrix(pub DMatrix<f64>);

impl DampingMatrix {
    pub fn from_terms(terms: &PhTerms) -> Result<Self, PhError> {
        let (n, m) = terms.g.shape();
        if n != m {
            return Err(dim_err("damping injection input map", format!("{n}x{n}"), format!("{n}x{m}")));
        }
        let gtg = terms.g.transpose() * &terms.g;
        let inv = gtg.try_inverse().ok_or(PhError::Singular {
            smallest_singular_value: 0.0,
        })?;
        Ok(Self(inv * (&terms.j - &terms.r)))
    }
}

/// Result of the open-loop vector field at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub x_dot: DVector<f64>,
    pub y: DVector<f64>,
}

/// `ẋ = (J − R)∇H + G·u` together with `y = Gᵀ∇H`.
pub fn open_loop_dynamics(x: &DVector<f64>, u: &DVector<f64>, terms: &PhTerms) -> Result<Flow, PhError> {
    if x.len() != terms.state_dim() {
        return Err(dim_err("state", terms.state_dim(), x.len()));
    }
    if u.len() != terms.input_dim() {
        return Err(dim_err("input", terms.input_dim(), u.len()));
    }
    Ok(Flow {
        x_dot: terms.drift() + &terms.g * u,
        y: terms.output(),
    })
}

/// Power balance components, all in watts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerBalance {
    pub h_dot: f64,
    pub supplied: f64,
    pub dissipated: f64,
}

impl PowerBalance {
    /// `Ḣ ≤ uᵀy + tol`.
    pub fn is_passive(&self, tol: f64) -> bool {
        self.h_dot <= self.supplied + tol
    }
}

/// `Ḣ = −∇HᵀR∇H + uᵀy`.
pub fn power_balance(x: &DVector<f64>, u: &DVector<f64>, terms: &PhTerms) -> Result<PowerBalance, PhError> {
    let flow = open_loop_dynamics(x, u, terms)?;
    let supplied = u.dot(&flow.y);
    let dissipated = terms.grad_h.dot(&(&terms.r * &terms.grad_h));
    Ok(PowerBalance {
        h_dot: supplied - dissipated,
        supplied,
        dissipated,
    })
}

/// `G† = (GᵀG)⁻¹Gᵀ` for full-column-rank `G`.
pub fn pseudo_inverse(g: &DMatrix<f64>) -> Result<DMatrix<f64>, PhError> {
    let (n, m) = g.shape();
    if m == 0 || m > n {
        return Err(PhError::TooManyInputs { inputs: m, states: n });
    }
    let sv = g.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    // cond(GᵀG) = (smax/smin)²
    if !(smin > 0.0) || (smax / smin).powi(2) > MAX_CONDITION {
        return Err(PhError::Singular {
            smallest_singular_value: smin,
        });
    }
    let gtg = g.transpose() * g;
    let chol = gtg.cholesky().ok_or(PhError::Singular {
        smallest_singular_value: smin,
    })?;
    Ok(chol.solve(&g.transpose()))
}

/// Energy-balancing control with its matching residual.
#[derive(Debug, Clone, PartialEq)]
pub struct EbpbcControl {
    pub u: DVector<f64>,
    /// `‖f_PH(x, u) − (J_d − R_d)∇H_d‖`; zero up to rounding when `G` is
    /// square and invertible, the least-squares mismatch otherwise.
    pub residual: f64,
}

/// `u = G†[(J_d − R_d)∇H_d − (J − R)∇H]`.
pub fn ebpbc_policy(x: &DVector<f64>, nominal: &PhTerms, desired: &PhTerms) -> Result<EbpbcControl, PhError> {
    if nominal.state_dim() != desired.state_dim() {
        return Err(dim_err("desired state", nominal.state_dim(), desired.state_dim()));
    }
    if nominal.g.shape() != desired.g.shape() || max_abs(&(&nominal.g - &desired.g)) > 0.0 {
        return Err(PhError::InputMapMismatch);
    }
    let pinv = pseudo_inverse(&nominal.g)?;
    let target = desired.drift();
    let u = &pinv * (&target - nominal.drift());
    let flow = open_loop_dynamics(x, &u, nominal)?;
    let residual = (&flow.x_dot - &target).norm();
    if residual > 1e-6 {
        log::debug!("energy-balancing match is inexact, residual {residual:e}");
    }
    Ok(EbpbcControl { u, residual })
}

/// Damping-injection form `u = G†(J_d − R_d)∇H_d − D·y`.
pub fn damping_injection_policy(nominal: &PhTerms, desired: &PhTerms, d: &DampingMatrix) -> Result<DVector<f64>, PhError> {
    let pinv = pseudo_inverse(&nominal.g)?;
    Ok(&pinv * desired.drift() - &d.0 * nominal.output())
}

/// Learned interaction blocks seen from the robot.
///
/// For each agent `n` the robot row of the learned interconnection and
/// dissipation matrices, `[J_θ]_rn` and `[R_θ]_rn`, each
/// `robot_dim × agent_dim`, and `∇_{x_n} H_θ`. Absent agents are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTerms {
    pub blocks: Vec<Option<(DMatrix<f64>, DMatrix<f64>)>>,
    pub grad_h: Vec<DVector<f64>>,
    /// Agents the policy must account for; each needs a block.
    pub visible: Vec<usize>,
}

/// `u = G†(Σ_n ([J_θ]_rn − [R_θ]_rn)·∇_{x_n}H_θ − (J − R)·∇_{x_r}H)`.
pub fn ph_policy_head(x_robot: &DVector<f64>, theta: &PairTerms, nominal: &PhTerms) -> Result<DVector<f64>, PhError> {
    let n = nominal.state_dim();
    if x_robot.len() != n {
        return Err(dim_err("robot state", n, x_robot.len()));
    }
    let missing: Vec<usize> = theta
        .visible
        .iter()
        .copied()
        .filter(|&a| theta.blocks.get(a).map_or(true, Option::is_none) || a >= theta.grad_h.len())
        .collect();
    if !missing.is_empty() {
        return Err(PhError::MissingPair(missing));
    }
    let mut sum = DVector::zeros(n);
    for &a in &theta.visible {
        let (j, r) = theta.blocks[a].as_ref().expect("checked above");
        let grad = &theta.grad_h[a];
        if j.nrows() != n || j.ncols() != grad.len() || r.shape() != j.shape() {
            return Err(dim_err(
                "pair block",
                format!("{n}x{}", grad.len()),
                format!("{:?}/{:?}", j.shape(), r.shape()),
            ));
        }
        sum += (j - r) * grad;
    }
    let pinv = pseudo_inverse(&nominal.g)?;
    let u = pinv * (sum - nominal.drift());
    if u.iter().any(|v| !v.is_finite()) {
        return Err(PhError::NonFinite("policy output"));
    }
    Ok(u)
}

/// Zero-order-hold explicit Euler step `s' = s + T·f(s, a)`.
pub fn discretize_step<F>(s: &DVector<f64>, a: &DVector<f64>, timestep: f64, dynamics: F) -> Result<DVector<f64>, PhError>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    if !(timestep > 0.0) || !timestep.is_finite() {
        return Err(PhError::BadTimestep(timestep));
    }
    let f = dynamics(s, a);
    if f.len() != s.len() {
        return Err(dim_err("state derivative", s.len(), f.len()));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(PhError::Integration);
    }
    Ok(s + f * timestep)
}

#[cfg(test)]
mod tests;
