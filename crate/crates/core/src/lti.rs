//! Ground-truth linear systems: random generation, steady-state Kalman gain,
//! trajectory simulation and the exact subspace matrices used to score
//! estimators.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, psd_sqrt, spectral_radius, symmetrize};

/// Attempts made by [`sample_system`] before giving up.
pub const MAX_SYSTEM_ATTEMPTS: usize = 100;

/// Maximum number of Riccati fixed-point iterations.
pub const DARE_MAX_ITER: usize = 10_000;

/// Relative convergence tolerance on successive Riccati iterates.
pub const DARE_RTOL: f64 = 1e-12;

/// Discrete-time state-space model with its noise description.
///
/// Both the standard form (`r_w`, `r_v`) and the equivalent innovation form
/// (`k`, `sigma`) are carried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub r_w: DMatrix<f64>,
    pub r_v: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_i(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_o(&self) -> usize {
        self.c.nrows()
    }

    /// Predictor-form state matrix `A - K C`.
    pub fn a_k(&self) -> DMatrix<f64> {
        &self.a - &self.k * &self.c
    }

    /// Builds a model from `(A, B, C, D, R_w, R_v)`, solving for the Kalman
    /// gain and innovations covariance.
    pub fn from_standard_form(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        r_w: DMatrix<f64>,
        r_v: DMatrix<f64>,
    ) -> Result<Self> {
        let gain = kalman_gain(&a, &c, &r_w, &r_v)?;
        Ok(Self {
            a,
            b,
            c,
            d,
            k: gain.k,
            sigma: gain.sigma,
            r_w,
            r_v,
        })
    }

    /// Noise-free model (`R_w = R_v = 0`, `Σ = 0`).
    ///
    /// Without noise any gain gives a valid predictor form. For a single
    /// observable output the deadbeat gain is used, which makes `A - K C`
    /// nilpotent so the state is an exact function of the last `n_x` inputs
    /// and outputs. Otherwise `K = 0`.
    pub fn noiseless(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Self {
        let (n_x, n_o) = (a.nrows(), c.nrows());
        let k = if n_o == 1 {
            deadbeat_gain(&a, &c).unwrap_or_else(|| DMatrix::zeros(n_x, 1))
        } else {
            DMatrix::zeros(n_x, n_o)
        };
        Self {
            a,
            b,
            c,
            d,
            k,
            sigma: DMatrix::zeros(n_o, n_o),
            r_w: DMatrix::zeros(n_x, n_x),
            r_v: DMatrix::zeros(n_o, n_o),
        }
    }

    /// Burn-in length giving the state time to forget `x_0 = 0`:
    /// `10 * ceil(1 / (1 - rho(A)))`, capped at 10⁴.
    pub fn default_burn_in(&self) -> usize {
        let rho = spectral_radius(&self.a);
        if rho >= 1.0 {
            return 10_000;
        }
        let steps = (1.0 / (1.0 - rho)).ceil();
        ((10.0 * steps) as usize).min(10_000)
    }
}

/// Ackermann's formula for the observer gain placing every eigenvalue of
/// `A - K C` at zero (single output). `None` if `(A, C)` is unobservable.
fn deadbeat_gain(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut obs = DMatrix::zeros(n, n);
    let mut row = c.clone();
    for r in 0..n {
        obs.row_mut(r).copy_from(&row.row(0));
        row = &row * a;
    }
    let mut e_n = DMatrix::zeros(n, 1);
    e_n[(n - 1, 0)] = 1.0;
    let col = obs.lu().solve(&e_n)?;
    let mut a_pow = DMatrix::identity(n, n);
    for _ in 0..n {
        a_pow = &a_pow * a;
    }
    Some(a_pow * col)
}

/// Sampling protocol for random test systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSpec {
    /// Inclusive range of state dimensions.
    pub nx_range: (usize, usize),
    pub n_i: usize,
    pub n_o: usize,
    /// Range of `log10(SNR)`, sampled uniformly.
    pub snr_log10_range: (f64, f64),
}

impl Default for SystemSpec {
    fn default() -> Self {
        Self {
            nx_range: (1, 10),
            n_i: 1,
            n_o: 1,
            snr_log10_range: (-1.0, 2.0),
        }
    }
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.nx_range;
        if lo == 0 || lo > hi || self.n_i == 0 || self.n_o == 0 {
            return Err(Error::InvalidConfig(format!(
                "invalid system spec {self:?}"
            )));
        }
        let (a, b) = self.snr_log10_range;
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return Err(Error::InvalidConfig("invalid SNR range".into()));
        }
        Ok(())
    }
}

/// A sampled system together with the experiment sizes derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSystem {
    pub model: StateSpaceModel,
    pub snr: f64,
    /// Sample size `floor(80 sqrt(n_x))`.
    pub n_samples: usize,
    /// Hankel row length `floor(n_samples / 10)`.
    pub horizon: usize,
}

/// Sample size used for a system of order `n_x`.
pub fn sample_size(n_x: usize) -> usize {
    (80.0 * (n_x as f64).sqrt()).floor() as usize
}

fn randn<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Draws a random stable system, its noise covariances and an SNR.
///
/// The state matrix is a Gaussian matrix rescaled to a uniformly drawn
/// spectral radius; `D = 0`; noise covariances are Gram matrices of Gaussian
/// square roots. Draws whose auxiliary matrix is numerically nilpotent or whose
/// Riccati iteration fails are redrawn.
pub fn sample_system<R: Rng + ?Sized>(spec: &SystemSpec, rng: &mut R) -> Result<SampledSystem> {
    spec.validate()?;
    for _ in 0..MAX_SYSTEM_ATTEMPTS {
        let n_x = rng.random_range(spec.nx_range.0..=spec.nx_range.1);
        let a_aux = randn(rng, n_x, n_x);
        let rho = spectral_radius(&a_aux);
        let lambda_a: f64 = rng.random();
        let b = randn(rng, n_x, spec.n_i);
        let c = randn(rng, spec.n_o, n_x);
        let rv_half = randn(rng, spec.n_o, spec.n_o);
        let rw_half = randn(rng, n_x, n_x);
        let log_snr = rng.random_range(spec.snr_log10_range.0..=spec.snr_log10_range.1);
        if rho < 1e-10 {
            continue;
        }
        let a = a_aux * (lambda_a / rho);
        let r_v = symmetrize(&(&rv_half * rv_half.transpose()));
        let r_w = symmetrize(&(&rw_half * rw_half.transpose()));
        let d = DMatrix::zeros(spec.n_o, spec.n_i);
        let model = match StateSpaceModel::from_standard_form(a, b, c, d, r_w, r_v) {
            Ok(m) => m,
            Err(_) => continue,
        };
        if spectral_radius(&model.a) >= 1.0 || spectral_radius(&model.a_k()) >= 1.0 {
            continue;
        }
        let n_samples = sample_size(n_x);
        return Ok(SampledSystem {
            model,
            snr: 10f64.powf(log_snr),
            n_samples,
            horizon: n_samples / 10,
        });
    }
    Err(Error::SystemSampling {
        attempts: MAX_SYSTEM_ATTEMPTS,
    })
}

/// Steady-state filter solution.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanGain {
    pub k: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// Stabilizing solution of the Riccati equation.
    pub p: DMatrix<f64>,
    pub iterations: usize,
}

/// Steady-state Kalman gain by fixed-point iteration of the discrete
/// algebraic Riccati equation
/// `P <- A P Aᵀ - A P Cᵀ (C P Cᵀ + R_v)⁻¹ C P Aᵀ + R_w`, started at `R_w`.
pub fn kalman_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
    r_v: &DMatrix<f64>,
) -> Result<KalmanGain> {
    let mut p = symmetrize(r_w);
    let mut residual = f64::INFINITY;
    for iter in 1..=DARE_MAX_ITER {
        let next = riccati_map(a, c, r_w, r_v, &p)?;
        residual = (&next - &p).norm();
        let done = residual <= DARE_RTOL * next.norm();
        p = next;
        if done {
            let sigma = symmetrize(&(c * &p * c.transpose() + r_v));
            let chol = sigma
                .clone()
                .cholesky()
                .ok_or(Error::Singular("innovations covariance"))?;
            // K = A P Cᵀ Σ⁻¹
            let k = chol.solve(&(c * &p * a.transpose())).transpose();
            return Ok(KalmanGain {
                k,
                sigma,
                p,
                iterations: iter,
            });
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::DareNotConverged {
        iterations: DARE_MAX_ITER,
        residual,
    })
}

fn riccati_map(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
    r_v: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let s = c * p * c.transpose() + r_v;
    let chol = symmetrize(&s)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            min_eigenvalue: s.symmetric_eigenvalues().min(),
        })?;
    let cpa = c * p * a.transpose();
    let apa = a * p * a.transpose();
    Ok(symmetrize(
        &(apa - cpa.transpose() * chol.solve(&cpa) + r_w),
    ))
}

/// Residual `‖A P Aᵀ - A P Cᵀ (C P Cᵀ + R_v)⁻¹ C P Aᵀ + R_w - P‖_F`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r_w: &DMatrix<f64>,
    r_v: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    riccati_map(a, c, r_w, r_v, p)
        .map(|m| (m - p).norm())
        .unwrap_or(f64::INFINITY)
}

/// Simulates the standard form
/// `x⁺ = A x + B u + w`, `y = C x + D u + v` from `x_0 = 0`.
///
/// `inputs` holds one column per step, burn-in included; the first
/// `burn_in` outputs are dropped so the result lines up with
/// `inputs.columns(burn_in, ..)`.
pub fn simulate<R: Rng + ?Sized>(
    model: &StateSpaceModel,
    inputs: &DMatrix<f64>,
    rng: &mut R,
    burn_in: usize,
) -> DMatrix<f64> {
    let w_half =
        psd_sqrt(&model.r_w, false).unwrap_or_else(|_| DMatrix::zeros(model.n_x(), model.n_x()));
    let v_half =
        psd_sqrt(&model.r_v, false).unwrap_or_else(|_| DMatrix::zeros(model.n_o(), model.n_o()));
    run_recursion(model, inputs, rng, burn_in, |rng, x, u| {
        let w = &w_half * randn(rng, model.n_x(), 1);
        let v = &v_half * randn(rng, model.n_o(), 1);
        let y = &model.c * x + &model.d * u + v;
        let x_next = &model.a * x + &model.b * u + w;
        (x_next, y)
    })
}

/// Simulates the innovation form `x⁺ = A x + B u + K e`, `y = C x + D u + e`
/// with `e ~ N(0, Σ)`.
pub fn simulate_innovation<R: Rng + ?Sized>(
    model: &StateSpaceModel,
    inputs: &DMatrix<f64>,
    rng: &mut R,
    burn_in: usize,
) -> DMatrix<f64> {
    let e_half =
        cholesky_lower(&model.sigma).unwrap_or_else(|| DMatrix::zeros(model.n_o(), model.n_o()));
    run_recursion(model, inputs, rng, burn_in, |rng, x, u| {
        let e = &e_half * randn(rng, model.n_o(), 1);
        let y = &model.c * x + &model.d * u + &e;
        let x_next = &model.a * x + &model.b * u + &model.k * e;
        (x_next, y)
    })
}

fn run_recursion<R, F>(
    model: &StateSpaceModel,
    inputs: &DMatrix<f64>,
    rng: &mut R,
    burn_in: usize,
    mut step: F,
) -> DMatrix<f64>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R, &DMatrix<f64>, &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>),
{
    let total = inputs.ncols();
    let kept = total.saturating_sub(burn_in);
    let mut out = DMatrix::zeros(model.n_o(), kept);
    let mut x = DMatrix::zeros(model.n_x(), 1);
    for t in 0..total {
        let u = inputs.column(t).into_owned();
        let (x_next, y) = step(
            rng,
            &x,
            &DMatrix::from_column_slice(u.len(), 1, u.as_slice()),
        );
        if t >= burn_in {
            out.column_mut(t - burn_in).copy_from(&y.column(0));
        }
        x = x_next;
    }
    out
}

/// Exact subspace matrices of a model for horizons `f` (future) and `p`
/// (past).
#[derive(Debug, Clone, PartialEq)]
pub struct TrueDecomposition {
    /// Extended observability `[C; CA; ...; CA^{f-1}]`.
    pub gamma_f: DMatrix<f64>,
    /// `[L_p^(1) L_p^(2)]`, input block first to match `Z_p = [U_p; Y_p]`.
    pub l_p: DMatrix<f64>,
    pub h_fp: DMatrix<f64>,
    /// Block lower-triangular Toeplitz map from `U_f` to `Y_f`.
    pub h_f: DMatrix<f64>,
    /// Block lower-triangular Toeplitz noise shaping, `Σ^{1/2}` on the diagonal.
    pub g_f: DMatrix<f64>,
    pub f: usize,
    pub p: usize,
    /// Set when `f` or `p` does not exceed the state dimension.
    pub short_horizon: bool,
}

pub fn true_decomposition(model: &StateSpaceModel, f: usize, p: usize) -> TrueDecomposition {
    let (n_x, n_i, n_o) = (model.n_x(), model.n_i(), model.n_o());
    let a_k = model.a_k();
    let b_k1 = &model.b - &model.k * &model.d;
    let b_k2 = model.k.clone();

    let mut gamma_f = DMatrix::zeros(f * n_o, n_x);
    let mut ca = model.c.clone();
    // C A^r for r = 0..f
    let mut ca_powers = Vec::with_capacity(f);
    for r in 0..f {
        gamma_f.view_mut((r * n_o, 0), (n_o, n_x)).copy_from(&ca);
        ca_powers.push(ca.clone());
        ca = &ca * &model.a;
    }

    let mut l1 = DMatrix::zeros(n_x, p * n_i);
    let mut l2 = DMatrix::zeros(n_x, p * n_o);
    let mut akb1 = b_k1;
    let mut akb2 = b_k2;
    for q in (0..p).rev() {
        l1.view_mut((0, q * n_i), (n_x, n_i)).copy_from(&akb1);
        l2.view_mut((0, q * n_o), (n_x, n_o)).copy_from(&akb2);
        akb1 = &a_k * &akb1;
        akb2 = &a_k * &akb2;
    }
    let mut l_p = DMatrix::zeros(n_x, p * (n_i + n_o));
    l_p.columns_mut(0, p * n_i).copy_from(&l1);
    l_p.columns_mut(p * n_i, p * n_o).copy_from(&l2);
    let h_fp = &gamma_f * &l_p;

    let sigma_half = psd_sqrt(&model.sigma, false).unwrap_or_else(|_| DMatrix::zeros(n_o, n_o));
    let mut h_f = DMatrix::zeros(f * n_o, f * n_i);
    let mut g_f = DMatrix::zeros(f * n_o, f * n_o);
    for r in 0..f {
        for c in 0..=r {
            let (hb, gb) = if r == c {
                (model.d.clone(), sigma_half.clone())
            } else {
                let cab = &ca_powers[r - c - 1];
                (cab * &model.b, cab * &model.k * &sigma_half)
            };
            h_f.view_mut((r * n_o, c * n_i), (n_o, n_i)).copy_from(&hb);
            g_f.view_mut((r * n_o, c * n_o), (n_o, n_o)).copy_from(&gb);
        }
    }

    TrueDecomposition {
        gamma_f,
        l_p,
        h_fp,
        h_f,
        g_f,
        f,
        p,
        short_horizon: f <= n_x || p <= n_x,
    }
}
