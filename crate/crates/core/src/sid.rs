//! Classical subspace estimation: Hankel data assembly, least-squares
//! estimation of `(H_fp, H_f)`, noise shaping, weight schemes, rank
//! selection and order heuristics.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    block_toeplitz_project, build_hankel, cholesky_lower, orthonormal_columns, psd_sqrt,
    singular_values_desc, svd_desc, sym_eigen, symmetrize, vstack, PINV_RTOL,
};
use crate::shrinkage::{threshold_values, ShrinkageContext};

/// Lower bound applied to every estimated noise level.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Log-domain slack used by the order heuristics' strict comparisons so that
/// points lying exactly on the reference line do not flip on round-off.
const LOG_SLACK: f64 = 1e-12;

/// Input/output data arranged in block Hankel matrices around a common time
/// origin: `U_p`/`Y_p` hold the `p` samples before it, `U_f`/`Y_f` the `f`
/// samples from it on.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelData {
    pub y_f: DMatrix<f64>,
    pub u_f: DMatrix<f64>,
    pub u_p: DMatrix<f64>,
    pub y_p: DMatrix<f64>,
    /// `[U_p; Y_p]`.
    pub z_p: DMatrix<f64>,
    pub f: usize,
    pub p: usize,
    /// Number of columns `N = T - f - p + 1`.
    pub n: usize,
    pub n_i: usize,
    pub n_o: usize,
}

impl HankelData {
    /// Rows of `Z_p`.
    pub fn past_dim(&self) -> usize {
        self.p * (self.n_i + self.n_o)
    }

    pub fn is_siso(&self) -> bool {
        self.n_i == 1 && self.n_o == 1
    }
}

/// Builds the Hankel blocks from `n_i × T` inputs and `n_o × T` outputs.
pub fn assemble(u: &DMatrix<f64>, y: &DMatrix<f64>, f: usize, p: usize) -> Result<HankelData> {
    if u.ncols() != y.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} samples, output has {}",
            u.ncols(),
            y.ncols()
        )));
    }
    let t = u.ncols();
    if f == 0 || p == 0 || t < f + p {
        return Err(Error::InsufficientSamples {
            needed: f + p,
            available: t,
        });
    }
    let n = t - f - p + 1;
    let u_p = build_hankel(u, p, n, 0)?;
    let y_p = build_hankel(y, p, n, 0)?;
    let u_f = build_hankel(u, f, n, p)?;
    let y_f = build_hankel(y, f, n, p)?;
    let z_p = vstack(&u_p, &y_p);
    Ok(HankelData {
        y_f,
        u_f,
        u_p,
        y_p,
        z_p,
        f,
        p,
        n,
        n_i: u.nrows(),
        n_o: y.nrows(),
    })
}

/// Unstructured least-squares estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct LsEstimate {
    pub h_fp_hat: DMatrix<f64>,
    pub h_f_hat: DMatrix<f64>,
    /// `Y_f - Ĥ_fp Z_p - Ĥ_f U_f`.
    pub residues: DMatrix<f64>,
}

/// `[Ĥ_fp Ĥ_f] = Y_f [Z_p; U_f]⁺`.
pub fn ls_estimate(data: &HankelData) -> Result<LsEstimate> {
    let regressor = vstack(&data.z_p, &data.u_f);
    if regressor.nrows() > regressor.ncols() {
        return Err(Error::RankDeficient {
            condition: f64::INFINITY,
        });
    }
    let (u, s, vt) = svd_desc(&regressor);
    let smax = s[0];
    let smin = s[s.len() - 1];
    if !(smin > PINV_RTOL * smax) {
        return Err(Error::RankDeficient {
            condition: smax / smin,
        });
    }
    let inv = s.map(|v| 1.0 / v);
    let theta = (&data.y_f * vt.transpose()) * DMatrix::from_diagonal(&inv) * u.transpose();
    let k = data.past_dim();
    let h_fp_hat = theta.columns(0, k).into_owned();
    let h_f_hat = theta.columns(k, theta.ncols() - k).into_owned();
    let residues = residues(data, &h_fp_hat, &h_f_hat);
    Ok(LsEstimate {
        h_fp_hat,
        h_f_hat,
        residues,
    })
}

pub fn residues(data: &HankelData, h_fp: &DMatrix<f64>, h_f: &DMatrix<f64>) -> DMatrix<f64> {
    &data.y_f - h_fp * &data.z_p - h_f * &data.u_f
}

/// `Z_p` with the row space of `U_f` projected out, and its Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PastProjection {
    /// `Z_p Π⊥`.
    pub z_perp: DMatrix<f64>,
    /// `Z_p Π⊥ Z_pᵀ`.
    pub gram: DMatrix<f64>,
}

/// Applies `Π⊥ = I - U_fᵀ(U_f U_fᵀ)⁻¹U_f` through a QR basis of `U_fᵀ`
/// without forming the `N × N` projector.
pub fn project_past(data: &HankelData) -> PastProjection {
    let q = orthonormal_columns(&data.u_f.transpose());
    let z_perp = &data.z_p - (&data.z_p * &q) * q.transpose();
    let gram = symmetrize(&(&z_perp * z_perp.transpose()));
    PastProjection { z_perp, gram }
}

/// `Ĥ_fp = Y_f Π⊥ Z_pᵀ (Z_p Π⊥ Z_pᵀ)⁻¹`, the projection form of the LS
/// estimate.
pub fn ls_projection_form(data: &HankelData) -> Result<DMatrix<f64>> {
    let proj = project_past(data);
    let chol = proj
        .gram
        .clone()
        .cholesky()
        .ok_or(Error::Singular("projected past Gram matrix"))?;
    Ok(chol
        .solve(&(&proj.z_perp * data.y_f.transpose()))
        .transpose())
}

/// Noise-shaping estimate from regression residues.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEstimate {
    /// Estimate of `G_f G_fᵀ`.
    pub g_hat_sq: DMatrix<f64>,
    /// Block lower-triangular Toeplitz estimate of `G_f`.
    pub g_f_hat: DMatrix<f64>,
    pub dof: i64,
}

/// Degrees of freedom of the regression; with `rank_used = Some(r)` the
/// count for a rank-`r` truncated `Ĥ_fp`.
pub fn regression_dof(f: usize, n_i: usize, n_o: usize, rank_used: Option<usize>) -> i64 {
    let (i, ni, no) = (f as i64, n_i as i64, n_o as i64);
    match rank_used {
        None => i * (no + 2 * ni),
        Some(r) => {
            let r = r as i64;
            i * ni + i * (ni + no) - (i * (ni + no) - (i + ni + no) * r + r * r)
        }
    }
}

/// `ĜĜᵀ = 𝓔𝓔ᵀ / (N - dof)` and its Toeplitz-averaged Cholesky factor.
pub fn estimate_noise(
    data: &HankelData,
    h_fp: &DMatrix<f64>,
    h_f: &DMatrix<f64>,
    rank_used: Option<usize>,
) -> Result<NoiseEstimate> {
    let dof = regression_dof(data.f, data.n_i, data.n_o, rank_used);
    let denom = data.n as i64 - dof;
    if denom <= 0 {
        return Err(Error::NonPositiveDof {
            columns: data.n,
            dof,
        });
    }
    let e = residues(data, h_fp, h_f);
    let g_hat_sq = symmetrize(&(&e * e.transpose() / denom as f64));
    let chol = robust_cholesky(&g_hat_sq);
    let g_f_hat = block_toeplitz_project(&chol, data.n_o);
    Ok(NoiseEstimate {
        g_hat_sq,
        g_f_hat,
        dof,
    })
}

/// Cholesky factor with escalating diagonal loading for matrices that are
/// PSD but numerically singular.
fn robust_cholesky(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(l) = cholesky_lower(m) {
        return l;
    }
    let n = m.nrows();
    let scale = m.diagonal().max().max(f64::MIN_POSITIVE);
    let mut jitter = scale * 1e-14;
    loop {
        let loaded = m + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(l) = cholesky_lower(&loaded) {
            return l;
        }
        jitter *= 10.0;
    }
}

/// Weighting applied before the SVD of `Ĥ_fp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// `W_1 = I`, `W_2 = I`.
    #[default]
    Identity,
    /// `W_1 = Ĝ_f⁻¹`, `W_2 = (Z_p Π⊥ Z_pᵀ)^{1/2}`.
    Cva,
    /// `W_1 = I`, `W_2 = Z_p`.
    N4sid,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 3] = [
        WeightScheme::Identity,
        WeightScheme::Cva,
        WeightScheme::N4sid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightScheme::Identity => "identity",
            WeightScheme::Cva => "cva",
            WeightScheme::N4sid => "n4sid",
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(WeightScheme::Identity),
            "cva" => Ok(WeightScheme::Cva),
            "n4sid" => Ok(WeightScheme::N4sid),
            other => Err(Error::InvalidConfig(format!(
                "unknown weight scheme '{other}'"
            ))),
        }
    }
}

/// Weight matrices together with the inverses used to map weighted
/// estimates back. `w2_inv` is a right inverse (`W_2 W_2_inv = I`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPair {
    pub scheme: WeightScheme,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub w1_inv: DMatrix<f64>,
    pub w2_inv: DMatrix<f64>,
    /// `Z_p Π⊥ Z_pᵀ` of the data the weights were built from.
    pub past_gram: DMatrix<f64>,
}

impl WeightPair {
    /// `W_1 M W_2`.
    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.w1 * m * &self.w2
    }

    /// `W_1⁻¹ M W_2⁺`.
    pub fn unapply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.w1_inv * m * &self.w2_inv
    }
}

pub fn build_weights(
    scheme: WeightScheme,
    data: &HankelData,
    g_f_hat: &DMatrix<f64>,
) -> Result<WeightPair> {
    let rows = data.f * data.n_o;
    let cols = data.past_dim();
    let past_gram = project_past(data).gram;
    let singular = || Error::SingularWeight {
        scheme: scheme.name(),
    };
    let (w1, w1_inv, w2, w2_inv) = match scheme {
        WeightScheme::Identity => (
            DMatrix::identity(rows, rows),
            DMatrix::identity(rows, rows),
            DMatrix::identity(cols, cols),
            DMatrix::identity(cols, cols),
        ),
        WeightScheme::Cva => {
            let min_diag = g_f_hat
                .diagonal()
                .iter()
                .fold(f64::INFINITY, |a, v| a.min(v.abs()));
            if !(min_diag > 0.0) {
                return Err(singular());
            }
            let w1 = g_f_hat
                .clone()
                .solve_lower_triangular(&DMatrix::identity(rows, rows))
                .ok_or_else(singular)?;
            if !crate::linalg::all_finite(&w1) {
                return Err(singular());
            }
            let w2 = psd_sqrt(&past_gram, false).map_err(|_| singular())?;
            let w2_inv = psd_sqrt(&past_gram, true).map_err(|_| singular())?;
            (w1, g_f_hat.clone(), w2, w2_inv)
        }
        WeightScheme::N4sid => {
            let gram = symmetrize(&(&data.z_p * data.z_p.transpose()));
            let chol = gram.cholesky().ok_or_else(singular)?;
            // right inverse Z_pᵀ (Z_p Z_pᵀ)⁻¹
            let w2_inv = chol.solve(&data.z_p).transpose();
            (
                DMatrix::identity(rows, rows),
                DMatrix::identity(rows, rows),
                data.z_p.clone(),
                w2_inv,
            )
        }
    };
    Ok(WeightPair {
        scheme,
        w1,
        w2,
        w1_inv,
        w2_inv,
        past_gram,
    })
}

fn lambda_max_sym(m: &DMatrix<f64>) -> Result<f64> {
    Ok(sym_eigen(m)?.0.max())
}

/// Worst-direction noise level of `W_1 Ĥ_fp W_2`:
/// `σ² = λmax(W_2ᵀ(Z_pΠ⊥Z_pᵀ)⁻¹W_2) · λmax(W_1 ĜĜᵀ W_1ᵀ)`,
/// floored at [`SIGMA_FLOOR`].
pub fn noise_level(weights: &WeightPair, g_hat_sq: &DMatrix<f64>) -> Result<f64> {
    let inv_half = psd_sqrt(&weights.past_gram, true)
        .map_err(|_| Error::Singular("projected past Gram matrix"))?;
    // λmax(AᵀA) = λmax(AAᵀ) with A = G^{-1/2} W_2
    let a = inv_half * &weights.w2;
    let right = lambda_max_sym(&symmetrize(&(&a * a.transpose())))?;
    let left = lambda_max_sym(&symmetrize(
        &(&weights.w1 * g_hat_sq * weights.w1.transpose()),
    ))?;
    let sigma = (right.max(0.0) * left.max(0.0)).sqrt();
    Ok(if sigma.is_finite() {
        sigma.max(SIGMA_FLOOR)
    } else {
        sigma
    })
}

/// Rank-`r` truncation of `Ĥ_fp` in the weighted domain:
/// `W_1⁻¹ U_r S_r V_rᵀ W_2⁺`.
pub fn truncate_estimate(
    h_fp_hat: &DMatrix<f64>,
    weights: &WeightPair,
    r: usize,
) -> Result<DMatrix<f64>> {
    let m = weights.apply(h_fp_hat);
    let max = m.nrows().min(m.ncols());
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    let (u, s, vt) = svd_desc(&m);
    let low = u.columns(0, r) * DMatrix::from_diagonal(&s.rows(0, r).into_owned()) * vt.rows(0, r);
    Ok(weights.unapply(&low))
}

/// Result of the rank-selection loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RankStar {
    pub r_star: usize,
    pub noise: NoiseEstimate,
    pub sigma: f64,
    /// Singular values of `W_1 Ĥ_fp W_2`, descending.
    pub singular_values: Vec<f64>,
    /// Number of singular values above `λ_soft(r)` for each `r` visited.
    pub counts: Vec<usize>,
    /// No `r` satisfied the stopping rule; the full rank was returned.
    pub exhausted: bool,
}

/// Smallest `r` for which fewer than `r` singular values of `W_1 Ĥ_fp W_2`
/// exceed `λ_soft(r)`, where the soft threshold uses the noise level
/// re-estimated from the rank-`r` truncation.
pub fn rank_star(ls: &LsEstimate, weights: &WeightPair, data: &HankelData) -> Result<RankStar> {
    let weighted = weights.apply(&ls.h_fp_hat);
    let (rows, cols) = weighted.shape();
    let s = singular_values_desc(&weighted);
    let max = rows.min(cols);
    let mut counts = Vec::new();
    let mut last = None;
    for r in 1..=max {
        let trunc = truncate_estimate(&ls.h_fp_hat, weights, r)?;
        let noise = estimate_noise(data, &trunc, &ls.h_f_hat, Some(r))?;
        let sigma = noise_level(weights, &noise.g_hat_sq)?;
        let ctx = ShrinkageContext::new(rows, cols, sigma);
        let (_, lambda_soft) = threshold_values(&ctx);
        let count = s.iter().filter(|&&v| v > lambda_soft).count();
        counts.push(count);
        if count < r {
            return Ok(RankStar {
                r_star: r,
                noise,
                sigma,
                singular_values: s,
                counts,
                exhausted: false,
            });
        }
        last = Some((noise, sigma));
    }
    let (noise, sigma) = last.expect("at least one rank visited");
    Ok(RankStar {
        r_star: max,
        noise,
        sigma,
        singular_values: s,
        counts,
        exhausted: true,
    })
}

/// Order estimate from the effective-sample-size heuristic: a line is fitted
/// to `ln S_l` over the tail `l > floor(n_eff)` and the order is the length
/// of the leading run of singular values that lie above that line. Tail
/// values scattered above the fit do not count, so the estimate marks the
/// first crossing rather than the last one.
///
/// Falls back to `floor(n_eff)` when the tail has fewer than two points.
pub fn order_heuristic_neff(singular_values: &[f64]) -> usize {
    let s = singular_values;
    let i = s.len();
    let sum: f64 = s.iter().sum();
    let sum_sq: f64 = s.iter().map(|v| v * v).sum();
    if sum_sq <= 0.0 {
        return 0;
    }
    let n_eff = ((sum * sum / sum_sq).floor() as usize).min(i);
    // 1-based indices n_eff+1..=i with positive values
    let pts: Vec<(f64, f64)> = (n_eff + 1..=i)
        .filter(|&l| s[l - 1] > 0.0)
        .map(|l| (l as f64, s[l - 1].ln()))
        .collect();
    if pts.len() < 2 {
        return n_eff;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let fit = |l: f64| my + slope * (l - mx);
    (1..=i)
        .take_while(|&l| s[l - 1] > 0.0 && s[l - 1].ln() - fit(l as f64) > LOG_SLACK)
        .last()
        .unwrap_or(0)
}

/// Order estimate with threshold at the geometric mean of the extreme
/// singular values. A zero trailing value is replaced by the smallest
/// positive value times `1e-3`.
pub fn order_midpoint(singular_values: &[f64]) -> usize {
    let s = singular_values;
    let Some(&first) = s.first() else { return 0 };
    if first <= 0.0 {
        return 0;
    }
    let mut last = s[s.len() - 1];
    if last <= 0.0 {
        let min_pos = s
            .iter()
            .copied()
            .filter(|&v| v > 0.0)
            .fold(f64::INFINITY, f64::min);
        last = min_pos * 1e-3;
    }
    let threshold = (first * last).sqrt();
    let threshold = if threshold.is_finite() && threshold > 0.0 {
        threshold
    } else {
        ((first.ln() + last.ln()) / 2.0).exp()
    };
    s.iter().rposition(|&v| v > threshold).map_or(0, |k| k + 1)
}
