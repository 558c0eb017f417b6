//! Monte Carlo comparison of the estimators on random systems.
//!
//! Every run owns a ChaCha8 stream selected by `(seed, run id)`, so results
//! do not depend on scheduling and serial and parallel execution produce
//! identical reports.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bayes::GibbsConfig;
use crate::error::{Error, Result};
use crate::lti::{
    sample_system, simulate, true_decomposition, SampledSystem, SystemSpec, TrueDecomposition,
};
use crate::pipeline::{identify, Identification, Method};
use crate::sid::{assemble, HankelData, WeightPair, WeightScheme};

/// Realizations discarded in a row before a run is abandoned.
pub const MAX_RUN_ATTEMPTS: usize = 50;

/// Word offset of the Gibbs sampler inside a run's stream; far beyond what
/// the simulation consumes.
const GIBBS_WORD_OFFSET: u128 = 1 << 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub runs: usize,
    pub scheme: WeightScheme,
    pub methods: Vec<Method>,
    pub gibbs: GibbsConfig,
    pub seed: u64,
    /// Worker threads; `0` uses all cores and `1` runs serially.
    pub parallelism: usize,
    pub system: SystemSpec,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            runs: 300,
            scheme: WeightScheme::Identity,
            methods: Method::ALL.to_vec(),
            gibbs: GibbsConfig::default(),
            seed: 0,
            parallelism: 0,
            system: SystemSpec::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidConfig("runs must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods selected".into()));
        }
        self.gibbs.validate()?;
        self.system.validate()
    }

    /// Method list with the reference first and duplicates removed.
    pub fn resolved_methods(&self) -> Vec<Method> {
        let mut out = vec![Method::REFERENCE];
        for &m in &self.methods {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }
}

/// Random stream of one run.
pub fn run_rng(seed: u64, run_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run_id);
    rng
}

/// Random stream of the Gibbs sampler in one run, independent of how much
/// the simulation consumed.
pub fn gibbs_rng(seed: u64, run_id: u64) -> ChaCha8Rng {
    let mut rng = run_rng(seed, run_id);
    rng.set_word_pos(GIBBS_WORD_OFFSET);
    rng
}

/// Simulated dataset of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub system: SampledSystem,
    /// Inputs after burn-in, one column per sample.
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub f: usize,
    pub p: usize,
}

impl Realization {
    pub fn data(&self) -> Result<HankelData> {
        assemble(&self.u, &self.y, self.f, self.p)
    }

    pub fn truth(&self) -> TrueDecomposition {
        true_decomposition(&self.system.model, self.f, self.p)
    }
}

/// Draws a system and simulates `N + f + p - 1` samples after burn-in, so
/// the Hankel blocks have exactly `N` columns.
pub fn draw_realization<R: Rng + ?Sized>(spec: &SystemSpec, rng: &mut R) -> Result<Realization> {
    let system = sample_system(spec, rng)?;
    if system.horizon <= system.model.n_x() {
        return Err(Error::InvalidConfig(format!(
            "horizon {} does not exceed the state dimension {}",
            system.horizon,
            system.model.n_x()
        )));
    }
    Ok(realize_system(system, rng))
}

/// Simulates a given system with white inputs of variance `snr`, using
/// `f = p = horizon`.
pub fn realize_system<R: Rng + ?Sized>(system: SampledSystem, rng: &mut R) -> Realization {
    let model = &system.model;
    let (f, p) = (system.horizon, system.horizon);
    let t = system.n_samples + f + p - 1;
    let burn = model.default_burn_in();
    let scale = system.snr.sqrt();
    let inputs = DMatrix::from_fn(model.n_i(), t + burn, |_, _| {
        rng.sample::<f64, _>(StandardNormal) * scale
    });
    let y = simulate(model, &inputs, rng, burn);
    let u = inputs.columns(burn, t).into_owned();
    Realization { system, u, y, f, p }
}

/// `‖W_1 (H - Ĥ) W_2‖²_F`.
pub fn realization_risk(
    h_true: &DMatrix<f64>,
    h_est: &DMatrix<f64>,
    weights: &WeightPair,
) -> Result<f64> {
    if h_true.shape() != h_est.shape()
        || weights.w1.ncols() != h_true.nrows()
        || weights.w2.nrows() != h_true.ncols()
    {
        return Err(Error::ShapeMismatch(format!(
            "risk of {:?} vs {:?} under weights {:?} / {:?}",
            h_true.shape(),
            h_est.shape(),
            weights.w1.shape(),
            weights.w2.shape()
        )));
    }
    Ok(weights.apply(&(h_true - h_est)).norm_squared())
}

/// Geometric-mean summary of risk ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// `exp(mean(ln(risk / reference)))`.
    pub normalized_risk: f64,
    /// Multiplicative standard error `exp(sd(ln ratio) / sqrt(n))`.
    pub std_error: f64,
    pub used: usize,
    /// Pairs dropped because a risk was zero, negative or not finite.
    pub excluded: usize,
}

pub fn aggregate_risk(risks: &[f64], reference: &[f64]) -> Result<Aggregate> {
    if risks.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} risks against {} reference risks",
            risks.len(),
            reference.len()
        )));
    }
    let logs: Vec<f64> = risks
        .iter()
        .zip(reference)
        .filter(|(r, q)| **r > 0.0 && **q > 0.0 && r.is_finite() && q.is_finite())
        .map(|(r, q)| (r / q).ln())
        .collect();
    let n = logs.len();
    let excluded = risks.len() - n;
    if n == 0 {
        return Ok(Aggregate {
            normalized_risk: f64::NAN,
            std_error: f64::NAN,
            used: 0,
            excluded,
        });
    }
    let mean = logs.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Aggregate {
        normalized_risk: mean.exp(),
        std_error: (sd / (n as f64).sqrt()).exp(),
        used: n,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: u64,
    pub n_x: usize,
    pub snr: f64,
    pub scheme: WeightScheme,
    pub method: Method,
    pub risk: f64,
    pub risk_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    #[serde(flatten)]
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub per_run: Vec<RunRecord>,
    pub summary: Vec<MethodSummary>,
    /// Realizations discarded and redrawn.
    pub failures: usize,
    pub wall_time_s: f64,
}

impl RiskReport {
    pub fn summary_for(&self, method: Method) -> Option<&Aggregate> {
        self.summary
            .iter()
            .find(|s| s.method == method)
            .map(|s| &s.aggregate)
    }

    pub fn write_per_run_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "run_id,nx,snr,scheme,method,risk,risk_ref")?;
        for r in &self.per_run {
            writeln!(
                out,
                "{},{},{:?},{},{},{:?},{:?}",
                r.run_id, r.n_x, r.snr, r.scheme, r.method, r.risk, r.risk_ref
            )?;
        }
        Ok(())
    }

    /// Per-method summary and failure count; timing is left out so the text
    /// is reproducible.
    pub fn summary_json(&self) -> serde_json::Value {
        let methods: serde_json::Map<String, serde_json::Value> = self
            .summary
            .iter()
            .map(|s| {
                (
                    s.method.name().to_string(),
                    serde_json::json!({
                        "normalized_risk": s.aggregate.normalized_risk,
                        "std_error": s.aggregate.std_error,
                        "used": s.aggregate.used,
                        "excluded": s.aggregate.excluded,
                    }),
                )
            })
            .collect();
        serde_json::json!({
            "reference": Method::REFERENCE.name(),
            "runs": self.per_run.iter().map(|r| r.run_id).max().map_or(0, |m| m + 1),
            "failures": self.failures,
            "methods": methods,
        })
    }
}

/// Everything produced by one accepted run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub realization: Realization,
    pub identification: Identification,
    pub records: Vec<RunRecord>,
    pub failures: usize,
}

/// Draws realizations for `run_id` until one passes the whole pipeline.
pub fn execute_run(config: &BenchConfig, run_id: u64) -> Result<RunOutcome> {
    let methods = config.resolved_methods();
    let mut rng = run_rng(config.seed, run_id);
    let mut failures = 0;
    let mut last_error = None;
    while failures < MAX_RUN_ATTEMPTS {
        let attempt = draw_realization(&config.system, &mut rng).and_then(|real| {
            let data = real.data()?;
            let mut g_rng = gibbs_rng(config.seed, run_id);
            let id = identify(&data, config.scheme, &methods, &config.gibbs, &mut g_rng)?;
            Ok((real, id))
        });
        match attempt {
            Ok((realization, identification)) => {
                let truth = realization.truth();
                let risks = methods
                    .iter()
                    .map(|&m| {
                        let est = identification.estimate(m).expect("method was run");
                        realization_risk(&truth.h_fp, &est.h_fp, &identification.weights)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let risk_ref = risks[0];
                let records = methods
                    .iter()
                    .zip(&risks)
                    .map(|(&method, &risk)| RunRecord {
                        run_id,
                        n_x: realization.system.model.n_x(),
                        snr: realization.system.snr,
                        scheme: config.scheme,
                        method,
                        risk,
                        risk_ref,
                    })
                    .collect();
                return Ok(RunOutcome {
                    realization,
                    identification,
                    records,
                    failures,
                });
            }
            Err(e) => {
                failures += 1;
                last_error = Some(e);
            }
        }
    }
    Err(last_error.unwrap_or(Error::SystemSampling {
        attempts: MAX_RUN_ATTEMPTS,
    }))
}

fn run_all(config: &BenchConfig) -> Vec<Result<(Vec<RunRecord>, usize)>> {
    let one = |id: u64| execute_run(config, id).map(|o| (o.records, o.failures));
    #[cfg(feature = "parallel")]
    if config.parallelism != 1 {
        use rayon::prelude::*;
        let work = || (0..config.runs as u64).into_par_iter().map(one).collect();
        if config.parallelism == 0 {
            return work();
        }
        return match rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
        {
            Ok(pool) => pool.install(work),
            Err(_) => work(),
        };
    }
    (0..config.runs as u64).map(one).collect()
}

pub fn run_benchmark(config: &BenchConfig) -> Result<RiskReport> {
    config.validate()?;
    let start = Instant::now();
    let mut per_run = Vec::new();
    let mut failures = 0;
    for outcome in run_all(config) {
        let (records, fails) = outcome?;
        per_run.extend(records);
        failures += fails;
    }
    let methods = config.resolved_methods();
    let reference: Vec<f64> = per_run
        .iter()
        .filter(|r| r.method == Method::REFERENCE)
        .map(|r| r.risk)
        .collect();
    let summary = methods
        .iter()
        .map(|&method| {
            let risks: Vec<f64> = per_run
                .iter()
                .filter(|r| r.method == method)
                .map(|r| r.risk)
                .collect();
            aggregate_risk(&risks, &reference).map(|aggregate| MethodSummary { method, aggregate })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskReport {
        per_run,
        summary,
        failures,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
