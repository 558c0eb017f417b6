//! Singular-value shrinkage: hard and soft thresholding with asymptotically
//! optimal constants, the asymptotically optimal shrinker, and soft
//! thresholding tuned by Stein's unbiased risk estimate.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::svd_desc;
use crate::sid::WeightPair;

/// Relative spacing enforced between singular values before evaluating
/// SURE, whose divergence term is singular at repeated values.
const SURE_JITTER: f64 = 1e-9;

/// Shape and noise level of the (possibly transposed) matrix being shrunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageContext {
    /// Smaller dimension.
    pub i: usize,
    /// Larger dimension.
    pub j: usize,
    pub beta: f64,
    pub sigma: f64,
    /// The original matrix had more rows than columns.
    pub transposed: bool,
}

impl ShrinkageContext {
    pub fn new(rows: usize, cols: usize, sigma: f64) -> Self {
        let transposed = rows > cols;
        let (i, j) = if transposed {
            (cols, rows)
        } else {
            (rows, cols)
        };
        ShrinkageContext {
            i,
            j,
            beta: i as f64 / j as f64,
            sigma,
            transposed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShrinkageMethod {
    Hard,
    Soft,
    Optimal,
    Sure,
}

impl ShrinkageMethod {
    pub const ALL: [ShrinkageMethod; 4] = [
        ShrinkageMethod::Hard,
        ShrinkageMethod::Soft,
        ShrinkageMethod::Optimal,
        ShrinkageMethod::Sure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShrinkageMethod::Hard => "hard",
            ShrinkageMethod::Soft => "soft",
            ShrinkageMethod::Optimal => "optimal",
            ShrinkageMethod::Sure => "sure",
        }
    }
}

impl fmt::Display for ShrinkageMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShrinkageMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(ShrinkageMethod::Hard),
            "soft" => Ok(ShrinkageMethod::Soft),
            "optimal" => Ok(ShrinkageMethod::Optimal),
            "sure" => Ok(ShrinkageMethod::Sure),
            other => Err(Error::InvalidConfig(format!(
                "unknown shrinkage method '{other}'"
            ))),
        }
    }
}

/// `(λ_hard, λ_soft)` for the given context.
pub fn threshold_values(ctx: &ShrinkageContext) -> (f64, f64) {
    let b = ctx.beta;
    let scale = ctx.sigma * (ctx.j as f64).sqrt();
    let hard =
        (2.0 * (b + 1.0) + 8.0 * b / (b + 1.0 + (b * b + 14.0 * b + 1.0).sqrt())).sqrt() * scale;
    let soft = (1.0 + b.sqrt()) * scale;
    (hard, soft)
}

/// Asymptotically optimal shrinker for Frobenius loss; zero at and below
/// the bulk edge.
pub fn optimal_shrink(s: f64, ctx: &ShrinkageContext) -> f64 {
    let (_, edge) = threshold_values(ctx);
    if !(s > edge) {
        return 0.0;
    }
    let s2j = ctx.sigma * ctx.sigma * ctx.j as f64;
    let a = s * s - (1.0 + ctx.beta) * s2j;
    let radicand = a * a - 4.0 * ctx.beta * s2j * s2j;
    radicand.max(0.0).sqrt() / s
}

/// Applies the chosen shrinker element-wise to descending singular values.
pub fn shrink_values(s: &[f64], ctx: &ShrinkageContext, method: ShrinkageMethod) -> Vec<f64> {
    let (hard, soft) = threshold_values(ctx);
    match method {
        ShrinkageMethod::Hard => s.iter().map(|&v| if v > hard { v } else { 0.0 }).collect(),
        ShrinkageMethod::Soft => soft_threshold(s, soft),
        ShrinkageMethod::Optimal => s.iter().map(|&v| optimal_shrink(v, ctx)).collect(),
        ShrinkageMethod::Sure => {
            let lambda = sure_select(s, ctx.sigma, ctx.i, ctx.j);
            soft_threshold(s, lambda)
        }
    }
}

fn soft_threshold(s: &[f64], lambda: f64) -> Vec<f64> {
    s.iter().map(|&v| (v - lambda).max(0.0)).collect()
}

/// Pushes apart near-equal singular values so the divergence term stays
/// finite. Input must be descending.
fn separate(s: &[f64]) -> Vec<f64> {
    let mut out = s.to_vec();
    let scale = s
        .first()
        .copied()
        .unwrap_or(0.0)
        .abs()
        .max(f64::MIN_POSITIVE);
    for k in (0..out.len().saturating_sub(1)).rev() {
        let gap = SURE_JITTER * scale;
        if out[k] - out[k + 1] < gap {
            out[k] = out[k + 1] + gap;
        }
    }
    out
}

/// Stein's unbiased estimate of `E‖X̂_λ − X‖²_F` for soft thresholding at
/// `λ` of an `i × j` observation (`i ≤ j`) with singular values `s`.
///
/// The divergence cross-term runs over ordered pairs `k ≠ l` and carries
/// a factor two.
pub fn sure_risk(s: &[f64], lambda: f64, sigma: f64, i: usize, j: usize) -> f64 {
    sure_risk_separated(&separate(s), lambda, sigma, i, j)
}

fn sure_risk_separated(s: &[f64], lambda: f64, sigma: f64, i: usize, j: usize) -> f64 {
    let s2 = sigma * sigma;
    let mut fit = 0.0;
    let mut div_single = 0.0;
    let mut div_count = 0.0;
    let mut div_cross = 0.0;
    for (k, &sk) in s.iter().enumerate() {
        fit += lambda.min(sk).powi(2);
        if sk > lambda {
            div_single += 1.0 - lambda / sk;
            div_count += 1.0;
            let shrunk = sk - lambda;
            for (l, &sl) in s.iter().enumerate() {
                if l != k {
                    div_cross += sk * shrunk / (sk * sk - sl * sl);
                }
            }
        }
    }
    let extra = j as f64 - i as f64;
    -(i as f64) * j as f64 * s2
        + fit
        + 2.0 * s2 * (extra * div_single + div_count + 2.0 * div_cross)
}

/// Global minimizer of [`sure_risk`] over `λ ∈ [0, s_1]`. Candidates are the
/// breakpoints and the stationary point of each quadratic piece; ties go to
/// the larger `λ`.
pub fn sure_select(s: &[f64], sigma: f64, i: usize, j: usize) -> f64 {
    let s = separate(s);
    let Some(&top) = s.first() else { return 0.0 };
    if !(top > 0.0) {
        return 0.0;
    }
    let s2 = sigma * sigma;
    let extra = j as f64 - i as f64;
    let mut candidates = vec![0.0];
    candidates.extend(s.iter().copied().filter(|&v| v >= 0.0));
    // on the piece where exactly the top m values exceed λ the risk is
    // m λ² + b_m λ + const
    let mut inv_sum = 0.0;
    let mut cross_sum = 0.0;
    for m in 1..=s.len() {
        let sk = s[m - 1];
        if sk <= 0.0 {
            break;
        }
        inv_sum += 1.0 / sk;
        cross_sum += s
            .iter()
            .enumerate()
            .filter(|&(l, _)| l != m - 1)
            .map(|(_, &sl)| sk / (sk * sk - sl * sl))
            .sum::<f64>();
        let b = 2.0 * s2 * (-extra * inv_sum - 2.0 * cross_sum);
        let stationary = -b / (2.0 * m as f64);
        let lo = s.get(m).copied().unwrap_or(0.0).max(0.0);
        if stationary > lo && stationary < sk {
            candidates.push(stationary);
        }
    }
    let mut best_lambda = 0.0;
    let mut best = f64::INFINITY;
    for &lam in &candidates {
        let lam = lam.clamp(0.0, top);
        let v = sure_risk_separated(&s, lam, sigma, i, j);
        if v < best || (v == best && lam > best_lambda) {
            best = v;
            best_lambda = lam;
        }
    }
    best_lambda
}

/// Shrinks the singular values of `m` (unweighted).
pub fn shrink_matrix(m: &DMatrix<f64>, sigma: f64, method: ShrinkageMethod) -> DMatrix<f64> {
    let ctx = ShrinkageContext::new(m.nrows(), m.ncols(), sigma);
    let work = if ctx.transposed {
        m.transpose()
    } else {
        m.clone()
    };
    let (u, s, vt) = svd_desc(&work);
    let eta = shrink_values(s.as_slice(), &ctx, method);
    let k = eta.iter().take_while(|&&v| v > 0.0).count();
    let out = if k == 0 {
        DMatrix::zeros(work.nrows(), work.ncols())
    } else {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&eta[..k]));
        u.columns(0, k) * d * vt.rows(0, k)
    };
    if ctx.transposed {
        out.transpose()
    } else {
        out
    }
}

/// Shrinks `W_1 Ĥ_fp W_2` and maps the result back with the weight inverses.
pub fn shrink_estimate(
    h_fp_hat: &DMatrix<f64>,
    weights: &WeightPair,
    sigma: f64,
    method: ShrinkageMethod,
) -> Result<DMatrix<f64>> {
    let weighted = weights.apply(h_fp_hat);
    if !crate::linalg::all_finite(&weighted) {
        return Err(Error::SingularWeight {
            scheme: weights.scheme.name(),
        });
    }
    Ok(weights.unapply(&shrink_matrix(&weighted, sigma, method)))
}
