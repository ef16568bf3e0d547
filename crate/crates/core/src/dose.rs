//! Dose-response harness: planted generators and the OLS / instrumental
//! variable estimators for the effect of the information budget on
//! hallucination.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::info::Nats;
use crate::rng;
use crate::stats::{mean, ols, robust_slope_se, spearman, Z95};

pub const CHUNKS_PER_ITEM: usize = 4;
pub const MAX_DOSE: usize = 3;
pub const MIN_ITEMS: usize = 40;

/// How the hallucination probability depends on the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    /// `p = base_rate + response_slope * delta`
    #[default]
    Linear,
    /// `p = logistic(logit(base_rate) + response_slope * delta)`
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoseParams {
    pub first_stage_slope: f64,
    pub intercept: Nats,
    pub noise_sd: f64,
    pub response_slope: f64,
    pub base_rate: f64,
    pub link: Link,
    /// Probability of answering when not hallucinating.
    pub answer_rate: f64,
    /// Budget shift per unit of a hidden confounder in `[-1, 1]`.
    pub confound_budget: Nats,
    /// Hallucination-probability shift per unit of the same confounder.
    pub confound_outcome: f64,
}

impl Default for DoseParams {
    fn default() -> Self {
        DoseParams {
            first_stage_slope: 0.375,
            intercept: 0.5,
            noise_sd: 0.3,
            response_slope: -0.13,
            base_rate: 0.45,
            link: Link::Linear,
            answer_rate: 0.7,
            confound_budget: 0.0,
            confound_outcome: 0.0,
        }
    }
}

impl DoseParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.first_stage_slope,
            self.intercept,
            self.noise_sd,
            self.response_slope,
            self.base_rate,
            self.confound_budget,
            self.confound_outcome,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(invalid("dose parameters must be finite"));
        }
        if self.noise_sd < 0.0 {
            return Err(invalid("noise_sd must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.base_rate) || !(0.0..=1.0).contains(&self.answer_rate) {
            return Err(invalid("rates must lie in [0, 1]"));
        }
        if self.link == Link::Logistic && !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return Err(invalid("logistic link needs base_rate in (0, 1)"));
        }
        Ok(())
    }

    /// Hallucination probability at budget `delta` plus confounder shift,
    /// clamped to `[0, 1]`.
    pub fn hallucination_prob(&self, delta: Nats, shift: f64) -> f64 {
        let p = match self.link {
            Link::Linear => self.base_rate + self.response_slope * delta + shift,
            Link::Logistic => {
                let b = (self.base_rate / (1.0 - self.base_rate)).ln();
                crate::synth::logistic(b + self.response_slope * delta) + shift
            }
        };
        p.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseItem {
    pub item_id: String,
    pub dose: usize,
    pub chunks: usize,
    pub delta_bar: Nats,
    pub answered: bool,
    pub correct: bool,
    pub hallucinated: bool,
}

/// Balanced doses (`i mod 4`), budget `intercept + slope d + noise`, and a
/// Bernoulli hallucination outcome. Deterministic in `seed`.
pub fn synth_generate(params: &DoseParams, count: usize, seed: u64) -> Result<Vec<DoseItem>> {
    params.validate()?;
    if count < MIN_ITEMS {
        return Err(invalid(format!("need at least {MIN_ITEMS} items, got {count}")));
    }
    let mut r = rng::seeded(seed, 0);
    let noise = Normal::new(0.0, params.noise_sd).map_err(|e| invalid(e.to_string()))?;
    let items = (0..count)
        .map(|i| {
            let dose = i % (MAX_DOSE + 1);
            let conf = 2.0 * rng::unit(&mut r) - 1.0;
            let eps = noise.sample(&mut r);
            let delta_bar = params.intercept
                + params.first_stage_slope * dose as f64
                + params.confound_budget * conf
                + eps;
            let p = params.hallucination_prob(delta_bar, params.confound_outcome * conf);
            let hallucinated = rng::unit(&mut r) < p;
            let answered = hallucinated || rng::unit(&mut r) < params.answer_rate;
            DoseItem {
                item_id: format!("dose-{i}"),
                dose,
                chunks: CHUNKS_PER_ITEM,
                delta_bar,
                answered,
                correct: answered && !hallucinated,
                hallucinated,
            }
        })
        .collect();
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ols,
    TwoStageLs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEstimate {
    pub method: Method,
    pub n: usize,
    pub intercept: f64,
    /// Change in hallucination probability per nat.
    pub slope: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub first_stage_slope: f64,
    pub first_stage_stderr: f64,
    /// Robust Wald statistic of the first-stage slope.
    pub first_stage_f: f64,
    pub weak_instrument: bool,
    pub spearman_rho: f64,
}

struct FirstStage {
    slope: f64,
    stderr: f64,
}

fn first_stage(dose: &[f64], delta: &[f64]) -> Result<FirstStage> {
    let fit = ols(dose, delta)
        .map_err(|_| Error::Degenerate("instrument does not vary".into()))?;
    let resid: Vec<f64> = dose
        .iter()
        .zip(delta)
        .map(|(z, x)| x - fit.intercept - fit.slope * z)
        .collect();
    Ok(FirstStage {
        slope: fit.slope,
        stderr: robust_slope_se(dose, dose, &resid),
    })
}

fn check_lengths(dose: &[f64], delta: &[f64], outcome: &[f64]) -> Result<()> {
    if dose.len() != delta.len() || delta.len() != outcome.len() {
        return Err(invalid("dose, budget and outcome differ in length"));
    }
    if delta.len() < 3 {
        return Err(Error::Degenerate("need at least three observations".into()));
    }
    Ok(())
}

fn finish(
    method: Method,
    dose: &[f64],
    delta: &[f64],
    intercept: f64,
    slope: f64,
    stderr: f64,
) -> Result<CausalEstimate> {
    let fs = first_stage(dose, delta)?;
    let fs_low = fs.slope - Z95 * fs.stderr;
    let fs_high = fs.slope + Z95 * fs.stderr;
    Ok(CausalEstimate {
        method,
        n: delta.len(),
        intercept,
        slope,
        stderr,
        ci_low: slope - Z95 * stderr,
        ci_high: slope + Z95 * stderr,
        first_stage_slope: fs.slope,
        first_stage_stderr: fs.stderr,
        first_stage_f: if fs.stderr > 0.0 {
            (fs.slope / fs.stderr).powi(2)
        } else {
            f64::INFINITY
        },
        weak_instrument: fs_low <= 0.0 && fs_high >= 0.0,
        spearman_rho: spearman(dose, delta),
    })
}

/// Linear-probability OLS of `outcome` on `delta` with HC1 errors.
pub fn ols_slices(dose: &[f64], delta: &[f64], outcome: &[f64]) -> Result<CausalEstimate> {
    check_lengths(dose, delta, outcome)?;
    let fit = ols(delta, outcome)
        .map_err(|_| Error::Degenerate("budget takes a single value".into()))?;
    let resid: Vec<f64> = delta
        .iter()
        .zip(outcome)
        .map(|(x, y)| y - fit.intercept - fit.slope * x)
        .collect();
    let se = robust_slope_se(delta, delta, &resid);
    finish(Method::Ols, dose, delta, fit.intercept, fit.slope, se)
}

/// Just-identified two-stage least squares with `dose` instrumenting
/// `delta`.
pub fn tsls_slices(dose: &[f64], delta: &[f64], outcome: &[f64]) -> Result<CausalEstimate> {
    check_lengths(dose, delta, outcome)?;
    let (mz, mx, my) = (mean(dose), mean(delta), mean(outcome));
    let szx: f64 = dose.iter().zip(delta).map(|(z, x)| (z - mz) * (x - mx)).sum();
    let szy: f64 = dose.iter().zip(outcome).map(|(z, y)| (z - mz) * (y - my)).sum();
    if dose.iter().all(|z| *z == dose[0]) {
        return Err(Error::Degenerate("instrument does not vary".into()));
    }
    if szx == 0.0 {
        return Err(Error::Degenerate("instrument is uncorrelated with the budget".into()));
    }
    let slope = szy / szx;
    let intercept = my - slope * mx;
    let resid: Vec<f64> = delta
        .iter()
        .zip(outcome)
        .map(|(x, y)| y - intercept - slope * x)
        .collect();
    let se = robust_slope_se(dose, delta, &resid);
    finish(Method::TwoStageLs, dose, delta, intercept, slope, se)
}

fn columns(items: &[DoseItem]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (
        items.iter().map(|i| i.dose as f64).collect(),
        items.iter().map(|i| i.delta_bar).collect(),
        items.iter().map(|i| f64::from(u8::from(i.hallucinated))).collect(),
    )
}

pub fn estimate_ols(items: &[DoseItem]) -> Result<CausalEstimate> {
    let (d, x, y) = columns(items);
    ols_slices(&d, &x, &y)
}

pub fn estimate_2sls(items: &[DoseItem]) -> Result<CausalEstimate> {
    let (d, x, y) = columns(items);
    tsls_slices(&d, &x, &y)
}

/// Per-dose outcome rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseArm {
    pub dose: usize,
    pub items: usize,
    pub mean_delta: Nats,
    pub answer_rate: f64,
    pub accuracy: f64,
    pub hallucination_rate: f64,
}

pub fn dose_arms(items: &[DoseItem]) -> Vec<DoseArm> {
    (0..=MAX_DOSE)
        .filter_map(|d| {
            let arm: Vec<&DoseItem> = items.iter().filter(|i| i.dose == d).collect();
            if arm.is_empty() {
                return None;
            }
            let n = arm.len() as f64;
            let rate = |f: fn(&DoseItem) -> bool| arm.iter().filter(|i| f(i)).count() as f64 / n;
            Some(DoseArm {
                dose: d,
                items: arm.len(),
                mean_delta: arm.iter().map(|i| i.delta_bar).sum::<f64>() / n,
                answer_rate: rate(|i| i.answered),
                accuracy: rate(|i| i.correct),
                hallucination_rate: rate(|i| i.hallucinated),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub ols: CausalEstimate,
    pub tsls: CausalEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub trials: usize,
    pub items_per_trial: usize,
    pub planted_slope: f64,
    pub ols_coverage: f64,
    pub tsls_coverage: f64,
    pub ols_mean_slope: f64,
    pub tsls_mean_slope: f64,
    pub rows: Vec<TrialRow>,
}

/// Repeat generation and estimation over `trials` seeds (`seed + t`) and
/// count how often each 95% interval covers the planted slope.
pub fn coverage_trials(params: &DoseParams, count: usize, trials: usize, seed: u64) -> Result<CoverageReport> {
    if trials == 0 {
        return Err(invalid("need at least one trial"));
    }
    let rows: Vec<TrialRow> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let s = seed.wrapping_add(t as u64);
            let items = synth_generate(params, count, s)?;
            Ok(TrialRow {
                trial: t,
                seed: s,
                ols: estimate_ols(&items)?,
                tsls: estimate_2sls(&items)?,
            })
        })
        .collect::<Result<_>>()?;
    let b = params.response_slope;
    let covers = |e: &CausalEstimate| e.ci_low <= b && b <= e.ci_high;
    let n = trials as f64;
    Ok(CoverageReport {
        trials,
        items_per_trial: count,
        planted_slope: b,
        ols_coverage: rows.iter().filter(|r| covers(&r.ols)).count() as f64 / n,
        tsls_coverage: rows.iter().filter(|r| covers(&r.tsls)).count() as f64 / n,
        ols_mean_slope: rows.iter().map(|r| r.ols.slope).sum::<f64>() / n,
        tsls_mean_slope: rows.iter().map(|r| r.tsls.slope).sum::<f64>() / n,
        rows,
    })
}
