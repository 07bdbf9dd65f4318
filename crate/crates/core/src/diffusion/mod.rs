//! Leapfrog diffusion action head.
//!
//! The PH velocity action is lifted to `𝒯` candidates at an intermediate
//! step `κ` by a learned mean/spread initializer, denoised for `κ` reverse
//! steps by a conditioned noise predictor and finally reduced to one action.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::SeedableRng;

use crate::tensor::nn::Linear;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("step {step} outside 1..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite condition value at index {0}")]
    NonFinite(usize),
}

/// Noise rates `α_1..α_K`, leapfrog step `κ` and candidate count `𝒯`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    kappa: usize,
    candidates: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(100, 5, 1e-4, 0.05, 20).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn new(alphas: Vec<f64>, kappa: usize, candidates: usize) -> Result<Self, DiffusionError> {
        if alphas.is_empty() {
            return Err(DiffusionError::Schedule("no steps".into()));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(DiffusionError::Schedule(format!("noise rate {a} outside (0, 1)")));
        }
        if kappa == 0 || kappa > alphas.len() {
            return Err(DiffusionError::Schedule(format!(
                "kappa {kappa} outside 1..={}",
                alphas.len()
            )));
        }
        if candidates == 0 {
            return Err(DiffusionError::Schedule("candidate count must be at least 1".into()));
        }
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= 1.0 - a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            alphas,
            alpha_bars,
            kappa,
            candidates,
        })
    }

    /// `α_k` spaced linearly from `lo` to `hi` over `steps` entries.
    pub fn linear(steps: usize, kappa: usize, lo: f64, hi: f64, candidates: usize) -> Result<Self, DiffusionError> {
        let alphas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    lo
                } else {
                    lo + (hi - lo) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::new(alphas, kappa, candidates)
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }
    pub fn kappa(&self) -> usize {
        self.kappa
    }
    pub fn candidates(&self) -> usize {
        self.candidates
    }

    fn check(&self, k: usize, max: usize) -> Result<(), DiffusionError> {
        if k == 0 || k > max {
            return Err(DiffusionError::StepOutOfRange { step: k, max });
        }
        Ok(())
    }

    /// `α_k`, 1-based.
    pub fn alpha(&self, k: usize) -> Result<f64, DiffusionError> {
        self.check(k, self.steps())?;
        Ok(self.alphas[k - 1])
    }

    /// `ᾱ_k = Π_{j≤k} (1 − α_j)`, 1-based.
    pub fn alpha_bar(&self, k: usize) -> Result<f64, DiffusionError> {
        self.check(k, self.steps())?;
        Ok(self.alpha_bars[k - 1])
    }
}

/// Conditioning features for the noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector(Vec<f64>);

impl ConditionVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DiffusionError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Closed-form marginal `√ᾱ_k·u0 + √(1−ᾱ_k)·noise`.
pub fn forward_noise(u0: &[f64], k: usize, schedule: &DiffusionSchedule, noise: &[f64]) -> Result<Vec<f64>, DiffusionError> {
    if noise.len() != u0.len() {
        return Err(DiffusionError::Length {
            expected: u0.len(),
            got: noise.len(),
        });
    }
    let ab = schedule.alpha_bar(k)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(u0.iter().zip(noise).map(|(u, n)| a * u + b * n).collect())
}

/// One forward kernel `√(1−α_k)·u + √α_k·noise`.
pub fn forward_kernel(u: &[f64], k: usize, schedule: &DiffusionSchedule, noise: &[f64]) -> Result<Vec<f64>, DiffusionError> {
    if noise.len() != u.len() {
        return Err(DiffusionError::Length {
            expected: u.len(),
            got: noise.len(),
        });
    }
    let a = schedule.alpha(k)?;
    Ok(u.iter().zip(noise).map(|(u, n)| (1.0 - a).sqrt() * u + a.sqrt() * n).collect())
}

/// Coefficients `(1/√(1−α), α/√(1−ᾱ), √α)` of the reverse update at step
/// `omega`; `α` and `ᾱ` are the rate and cumulative product of the
/// `omega`-th schedule entry.
pub fn reverse_coefficients(omega: usize, schedule: &DiffusionSchedule) -> Result<(f64, f64, f64), DiffusionError> {
    schedule.check(omega, schedule.kappa())?;
    let a = schedule.alphas[omega - 1];
    let ab = schedule.alpha_bars[omega - 1];
    Ok((1.0 / (1.0 - a).sqrt(), a / (1.0 - ab).sqrt(), a.sqrt()))
}

/// Reverse update with a given noise prediction `eps`. `noise` is only
/// used for `omega > 1`.
pub fn denoise_update(
    u_hat: &[f64],
    omega: usize,
    eps: &[f64],
    schedule: &DiffusionSchedule,
    noise: &[f64],
) -> Result<Vec<f64>, DiffusionError> {
    for other in [eps.len(), noise.len()] {
        if other != u_hat.len() {
            return Err(DiffusionError::Length {
                expected: u_hat.len(),
                got: other,
            });
        }
    }
    let (c0, c1, c2) = reverse_coefficients(omega, schedule)?;
    let eta = if omega > 1 { c2 } else { 0.0 };
    Ok(u_hat
        .iter()
        .zip(eps)
        .zip(noise)
        .map(|((u, e), n)| c0 * (u - c1 * e) + eta * n)
        .collect())
}

#[derive(Debug)]
pub enum SampleMode<'r> {
    /// Uniform choice among candidates.
    Train(&'r mut ChaCha8Rng),
    /// Candidate mean.
    Eval,
}

/// Reduces denoised candidates to one action with `‖a‖ ≤ v_pref`.
pub fn sample_policy(candidates: &[[f64; ACTION_DIM]], mode: SampleMode<'_>, v_pref: f64) -> Result<[f64; ACTION_DIM], DiffusionError> {
    if candidates.is_empty() {
        return Err(DiffusionError::NoCandidates);
    }
    let a = match mode {
        SampleMode::Train(rng) => candidates[rng.gen_range(0..candidates.len())],
        SampleMode::Eval => {
            let n = candidates.len() as f64;
            let mut m = [0.0; ACTION_DIM];
            for c in candidates {
                for (mi, ci) in m.iter_mut().zip(c) {
                    *mi += ci / n;
                }
            }
            m
        }
    };
    Ok(clip_speed(a, v_pref))
}

pub fn clip_speed(a: [f64; ACTION_DIM], v_max: f64) -> [f64; ACTION_DIM] {
    let n = (a[0] * a[0] + a[1] * a[1]).sqrt();
    if n > v_max {
        [a[0] * v_max / n, a[1] * v_max / n]
    } else {
        a
    }
}

/// Standard-normal draws for one forward pass: the spread noise of the
/// initializer and the per-step reverse noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionNoise {
    /// `[𝒯 × 2]`
    pub spread: Tensor,
    /// `κ` tensors of `[𝒯 × 2]`, index `ω − 1`.
    pub reverse: Vec<Tensor>,
}

impl DiffusionNoise {
    pub fn draw<R: Rng>(schedule: &DiffusionSchedule, rng: &mut R) -> Self {
        let n = schedule.candidates() * ACTION_DIM;
        let gen = |rng: &mut R| {
            let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::from_raw(vec![schedule.candidates(), ACTION_DIM], v)
        };
        let spread = gen(rng);
        let reverse = (0..schedule.kappa()).map(|_| gen(rng)).collect();
        Self { spread, reverse }
    }

    /// Reproducible draw from a stored seed.
    pub fn from_seed(schedule: &DiffusionSchedule, seed: u64) -> Self {
        Self::draw(schedule, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Initializer output at step `κ`.
#[derive(Debug, Clone, Copy)]
pub struct LeapfrogInit<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
    /// `[𝒯 × 2]`
    pub candidates: Var<'t>,
}

#[derive(Debug, Clone, Copy)]
pub struct DiffusionOutput<'t> {
    pub init: LeapfrogInit<'t>,
    /// `[𝒯 × 2]` denoised candidates `û⁰`.
    pub denoised: Var<'t>,
    /// `[1 × 2]` candidate mean clipped to `v_pref`.
    pub action: Var<'t>,
}

/// Learned pieces: mean residual `f_μ`, spread `f_σ`, spread shaping `f_ℂ`
/// and the two-layer noise predictor `f_ε`.
#[derive(Debug, Clone)]
pub struct DiffusionHead {
    pub schedule: DiffusionSchedule,
    pub mu: Linear,
    pub sigma: Linear,
    pub shape: Linear,
    pub eps_hidden: Linear,
    pub eps_out: Linear,
    pub context_dim: usize,
    pub condition_dim: usize,
}

impl DiffusionHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        schedule: DiffusionSchedule,
        context_dim: usize,
        condition_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let d = ACTION_DIM;
        let head = Self {
            mu: Linear::new(store, &format!("{name}.mu"), d + context_dim, d, rng),
            sigma: Linear::new(store, &format!("{name}.sigma"), d + context_dim, d, rng),
            shape: Linear::new(store, &format!("{name}.shape"), 2 * d, d, rng),
            eps_hidden: Linear::new(store, &format!("{name}.eps_hidden"), d + 1 + condition_dim, hidden, rng),
            eps_out: Linear::new(store, &format!("{name}.eps_out"), hidden, d, rng),
            schedule,
            context_dim,
            condition_dim,
        };
        // start close to the PH action with a small spread
        for (lin, bias) in [(head.mu, 0.0), (head.sigma, -3.0)] {
            let w = store.value(lin.weight).clone();
            store
                .set_value(lin.weight, Tensor::from_raw(w.shape().to_vec(), w.data().iter().map(|v| v * 0.1).collect()))
                .expect("same shape");
            store.set_value(lin.bias, Tensor::filled(&[d], bias)).expect("same shape");
        }
        head
    }

    /// `μ = u_ph + f_μ([u_ph; ctx])`, `σ = softplus(f_σ([u_ph; ctx]))`,
    /// `ℂ_τ = noise_τ ⊙ exp(tanh(f_ℂ([u_ph; σ])))`, candidates `μ + σ ⊙ ℂ_τ`.
    pub fn leapfrog_init<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        u_ph: Var<'t>,
        context: Var<'t>,
        noise: &DiffusionNoise,
    ) -> LeapfrogInit<'t> {
        let input = tape.concat_cols(&[u_ph, context]);
        let mu = u_ph + self.mu.forward(tape, store, input);
        let sigma = self.sigma.forward(tape, store, input).softplus();
        let scale = self
            .shape
            .forward(tape, store, tape.concat_cols(&[u_ph, sigma]))
            .tanh()
            .exp();
        let spread = tape.constant(noise.spread.clone()).mul_row(scale);
        let candidates = spread.mul_row(sigma).add_row(mu);
        LeapfrogInit { mu, sigma, candidates }
    }

    /// `ε_θ(û, ω | I_C)` for every candidate row.
    pub fn predict_noise<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        u_hat: Var<'t>,
        omega: usize,
        condition: &ConditionVector,
    ) -> Var<'t> {
        let rows = u_hat.dims().0;
        let mut extra = Vec::with_capacity(rows * (1 + condition.len()));
        let step = omega as f64 / self.schedule.kappa() as f64;
        for _ in 0..rows {
            extra.push(step);
            extra.extend_from_slice(condition.values());
        }
        let extra = tape.constant(Tensor::from_raw(vec![rows, 1 + condition.len()], extra));
        let h = self
            .eps_hidden
            .forward(tape, store, tape.concat_cols(&[u_hat, extra]))
            .tanh();
        self.eps_out.forward(tape, store, h)
    }

    /// One reverse step from `ω` to `ω − 1` on all candidate rows.
    pub fn denoise_step<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        u_hat: Var<'t>,
        omega: usize,
        condition: &ConditionVector,
        noise: &Tensor,
    ) -> Result<Var<'t>, DiffusionError> {
        let (c0, c1, c2) = reverse_coefficients(omega, &self.schedule)?;
        let eps = self.predict_noise(tape, store, u_hat, omega, condition);
        let mut out = (u_hat - eps.scale(c1)).scale(c0);
        if omega > 1 {
            out = out + tape.constant(noise.clone()).scale(c2);
        }
        Ok(out)
    }

    /// Initializer, `κ` reverse steps and the clipped candidate mean.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        u_ph: Var<'t>,
        context: Var<'t>,
        condition: &ConditionVector,
        noise: &DiffusionNoise,
        v_pref: f64,
    ) -> Result<DiffusionOutput<'t>, DiffusionError> {
        if condition.len() != self.condition_dim {
            return Err(DiffusionError::Length {
                expected: self.condition_dim,
                got: condition.len(),
            });
        }
        let init = self.leapfrog_init(tape, store, u_ph, context, noise);
        let mut u = init.candidates;
        for omega in (1..=self.schedule.kappa()).rev() {
            u = self.denoise_step(tape, store, u, omega, condition, &noise.reverse[omega - 1])?;
        }
        let action = u.sum_rows().scale(1.0 / self.schedule.candidates() as f64).clip_norm_rows(v_pref);
        Ok(DiffusionOutput {
            init,
            denoised: u,
            action,
        })
    }
}
