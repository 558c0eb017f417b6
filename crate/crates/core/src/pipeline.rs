//! End-to-end identification of one dataset: least squares, weighting,
//! rank selection and every regularized estimator.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{run_gibbs, GibbsConfig};
use crate::error::{Error, Result};
use crate::shrinkage::{shrink_estimate, ShrinkageMethod};
use crate::sid::{
    build_weights, estimate_noise, ls_estimate, noise_level, order_heuristic_neff, order_midpoint,
    rank_star, truncate_estimate, HankelData, LsEstimate, RankStar, WeightPair, WeightScheme,
};

/// Estimators of `H_fp` compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Truncation at the effective-sample-size order; the benchmark
    /// reference.
    #[serde(alias = "heuristic")]
    HeuristicNeff,
    /// Truncation at the geometric-midpoint order.
    #[serde(alias = "midpoint")]
    HeuristicMidpoint,
    Hard,
    Soft,
    Optimal,
    Sure,
    Bayes,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::HeuristicNeff,
        Method::HeuristicMidpoint,
        Method::Hard,
        Method::Soft,
        Method::Optimal,
        Method::Sure,
        Method::Bayes,
    ];

    pub const REFERENCE: Method = Method::HeuristicNeff;

    pub fn name(self) -> &'static str {
        match self {
            Method::HeuristicNeff => "heuristic_neff",
            Method::HeuristicMidpoint => "heuristic_midpoint",
            Method::Hard => "hard",
            Method::Soft => "soft",
            Method::Optimal => "optimal",
            Method::Sure => "sure",
            Method::Bayes => "bayes",
        }
    }

    fn shrinkage(self) -> Option<ShrinkageMethod> {
        match self {
            Method::Hard => Some(ShrinkageMethod::Hard),
            Method::Soft => Some(ShrinkageMethod::Soft),
            Method::Optimal => Some(ShrinkageMethod::Optimal),
            Method::Sure => Some(ShrinkageMethod::Sure),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" | "heuristic_neff" => Ok(Method::HeuristicNeff),
            "midpoint" | "heuristic_midpoint" => Ok(Method::HeuristicMidpoint),
            "hard" => Ok(Method::Hard),
            "soft" => Ok(Method::Soft),
            "optimal" => Ok(Method::Optimal),
            "sure" => Ok(Method::Sure),
            "bayes" => Ok(Method::Bayes),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

/// One regularized estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodEstimate {
    pub method: Method,
    pub h_fp: DMatrix<f64>,
    /// Order used by the truncation methods.
    pub order: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub ls: LsEstimate,
    /// Weights after refinement with the noise shaping at `r*`.
    pub weights: WeightPair,
    pub rank: RankStar,
    /// Noise level under the final weights.
    pub sigma: f64,
    /// Singular values of the weighted least-squares estimate.
    pub singular_values: Vec<f64>,
    pub estimates: Vec<MethodEstimate>,
}

impl Identification {
    pub fn estimate(&self, method: Method) -> Option<&MethodEstimate> {
        self.estimates.iter().find(|e| e.method == method)
    }
}

fn truncate_or_zero(h: &DMatrix<f64>, weights: &WeightPair, order: usize) -> Result<DMatrix<f64>> {
    if order == 0 {
        Ok(DMatrix::zeros(h.nrows(), h.ncols()))
    } else {
        truncate_estimate(h, weights, order)
    }
}

/// Runs the full pipeline on `data`.
///
/// The rank loop uses weights built from the unrestricted noise estimate;
/// afterwards the weights are rebuilt from the noise shaping at `r*` and
/// the noise level is recomputed under them. Those final weights are used
/// by every method. The Gibbs chain uses `config.rank` or `r*` and draws
/// from `gibbs_rng`.
pub fn identify<R: Rng + ?Sized>(
    data: &HankelData,
    scheme: WeightScheme,
    methods: &[Method],
    gibbs: &GibbsConfig,
    gibbs_rng: &mut R,
) -> Result<Identification> {
    let ls = ls_estimate(data)?;
    let noise = estimate_noise(data, &ls.h_fp_hat, &ls.h_f_hat, None)?;
    let initial = build_weights(scheme, data, &noise.g_f_hat)?;
    let rank = rank_star(&ls, &initial, data)?;
    let weights = build_weights(scheme, data, &rank.noise.g_f_hat)?;
    let sigma = noise_level(&weights, &rank.noise.g_hat_sq)?;
    let singular_values = crate::linalg::singular_values_desc(&weights.apply(&ls.h_fp_hat));

    let mut estimates = Vec::with_capacity(methods.len());
    for &method in methods {
        let (h_fp, order) = match method {
            Method::HeuristicNeff => {
                let order = order_heuristic_neff(&singular_values);
                (
                    truncate_or_zero(&ls.h_fp_hat, &weights, order)?,
                    Some(order),
                )
            }
            Method::HeuristicMidpoint => {
                let order = order_midpoint(&singular_values);
                (
                    truncate_or_zero(&ls.h_fp_hat, &weights, order)?,
                    Some(order),
                )
            }
            Method::Bayes => {
                let cfg = GibbsConfig {
                    rank: Some(gibbs.rank.unwrap_or(rank.r_star)),
                    ..gibbs.clone()
                };
                let est = run_gibbs(data, &ls.h_fp_hat, &ls.h_f_hat, &cfg, gibbs_rng)?;
                (est.h_fp_bayes, None)
            }
            shrink => {
                let kind = shrink.shrinkage().expect("shrinkage method");
                (shrink_estimate(&ls.h_fp_hat, &weights, sigma, kind)?, None)
            }
        };
        estimates.push(MethodEstimate {
            method,
            h_fp,
            order,
        });
    }
    Ok(Identification {
        ls,
        weights,
        rank,
        sigma,
        singular_values,
        estimates,
    })
}
