//! Dispersion statistics, Jensen gaps, the log-n dispersion fit and
//! exponentiated-gradient optimization of permutation mixtures.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::info::Nats;
use crate::rng;
use crate::stats::{self, mean, quantile_sorted};
use crate::synth::{
    mc_dispersion, qmv_bound, qmv_bound_exact, single_chunk_dispersion, ModelFamily, PotentialSpec,
};

/// Spread of one item's predictions across permutations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionStats {
    pub q_bar: f64,
    pub mean_abs_residual: f64,
    /// Mean over all ordered pairs `(j, k)` including `j == k`.
    pub e_pair: f64,
}

pub fn dispersion_stats(q: &[f64]) -> Result<DispersionStats> {
    if q.len() < 2 {
        return Err(invalid(format!("dispersion needs at least 2 values, got {}", q.len())));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(invalid("dispersion inputs must be finite"));
    }
    let q_bar = mean(q);
    let mean_abs_residual = q.iter().map(|v| (v - q_bar).abs()).sum::<f64>() / q.len() as f64;
    let mut pair = 0.0;
    for a in q {
        for b in q {
            pair += (a - b).abs();
        }
    }
    Ok(DispersionStats {
        q_bar,
        mean_abs_residual,
        e_pair: pair / (q.len() * q.len()) as f64,
    })
}

/// Per-item dispersion record, the unit the log-n fit consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionRecord {
    pub item_id: String,
    pub n: usize,
    pub q: Vec<f64>,
    pub q_bar: f64,
    pub mean_abs_residual: f64,
    /// `NaN` (serialized as `null`) when the per-permutation values were
    /// not kept.
    #[serde(with = "crate::report::nan_as_null")]
    pub e_pair: f64,
}

impl DispersionRecord {
    pub fn from_scores(item_id: impl Into<String>, n: usize, q: Vec<f64>) -> Result<Self> {
        let s = dispersion_stats(&q)?;
        Ok(DispersionRecord {
            item_id: item_id.into(),
            n,
            q,
            q_bar: s.q_bar,
            mean_abs_residual: s.mean_abs_residual,
            e_pair: s.e_pair,
        })
    }
}

/// Mean single-permutation cross-entropy minus the uniform-mixture
/// cross-entropy of one continuation, per token.
pub fn jensen_gap(scores: &[f64], token_count: usize) -> Result<Nats> {
    check_scores(scores)?;
    if token_count == 0 {
        return Err(invalid("token count must be positive"));
    }
    let single = scores.iter().map(|s| -s.ln()).sum::<f64>() / scores.len() as f64;
    let mixture = -mean(scores).ln();
    Ok(((single - mixture) / token_count as f64).max(0.0))
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(invalid("no scores"));
    }
    for s in scores {
        if !s.is_finite() || *s > 1.0 {
            return Err(invalid(format!("score {s} outside (0, 1]")));
        }
        if *s <= 0.0 {
            return Err(invalid("zero score; smooth the distribution before computing cross-entropy"));
        }
    }
    Ok(())
}

/// Regression of dispersion on `ln n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub intercept: f64,
    pub slope: f64,
    pub r2: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_points: usize,
    pub bootstrap_seed: u64,
    pub resamples: usize,
}

pub const DEFAULT_RESAMPLES: usize = 1000;

/// OLS of `mean_abs_residual` on `ln n`, with a percentile bootstrap CI for
/// the slope from resampling items.
pub fn fit_log_dispersion(records: &[DispersionRecord], resamples: usize, seed: u64) -> Result<RegressionFit> {
    let x: Vec<f64> = records.iter().map(|r| (r.n as f64).ln()).collect();
    let y: Vec<f64> = records.iter().map(|r| r.mean_abs_residual).collect();
    let mut distinct: Vec<usize> = records.iter().map(|r| r.n).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Degenerate(format!(
            "log-n fit needs at least 3 distinct n, got {}",
            distinct.len()
        )));
    }
    let fit = stats::ols(&x, &y)?;
    let m = records.len();
    let mut slopes: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::seeded(seed, b as u64);
            let (mut bx, mut by) = (Vec::with_capacity(m), Vec::with_capacity(m));
            loop {
                bx.clear();
                by.clear();
                for _ in 0..m {
                    let i = rng::below(&mut r, m as u64) as usize;
                    bx.push(x[i]);
                    by.push(y[i]);
                }
                if let Ok(f) = stats::ols(&bx, &by) {
                    return f.slope;
                }
            }
        })
        .collect();
    let (ci_low, ci_high) = if slopes.is_empty() {
        (fit.slope, fit.slope)
    } else {
        slopes.sort_by(f64::total_cmp);
        (quantile_sorted(&slopes, 0.025), quantile_sorted(&slopes, 0.975))
    };
    Ok(RegressionFit {
        intercept: fit.intercept,
        slope: fit.slope,
        r2: fit.r2,
        ci_low: ci_low.min(fit.slope),
        ci_high: ci_high.max(fit.slope),
        n_points: m,
        bootstrap_seed: seed,
        resamples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgOptions {
    pub eta: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for EgOptions {
    fn default() -> Self {
        EgOptions {
            eta: 0.1,
            max_iters: 500,
            tol: 1e-8,
        }
    }
}

/// Simplex weights over permutation columns, one vector per chunk count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MixtureWeights {
    pub groups: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub weights: MixtureWeights,
    /// Objective after every accepted step, starting from uniform.
    pub traces: BTreeMap<usize, Vec<f64>>,
}

/// Rows of `scores` are items, columns permutations; entries are the
/// probability each permutation assigns to the item's fixed continuation.
/// `groups[i]` is item `i`'s chunk count.
fn grouped<'a>(scores: &'a [Vec<f64>], groups: &[usize]) -> Result<BTreeMap<usize, Vec<&'a [f64]>>> {
    if scores.is_empty() {
        return Err(invalid("empty score matrix"));
    }
    if scores.len() != groups.len() {
        return Err(invalid("one group label per item is required"));
    }
    let mut out: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (row, &g) in scores.iter().zip(groups) {
        check_scores(row)?;
        out.entry(g).or_default().push(row);
    }
    for (g, rows) in &out {
        let m = rows[0].len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(invalid(format!("group n={g} mixes rows of different width")));
        }
    }
    Ok(out)
}

fn mixture_ce(rows: &[&[f64]], w: &[f64]) -> f64 {
    rows.iter()
        .map(|r| -r.iter().zip(w).map(|(s, wk)| s * wk).sum::<f64>().ln())
        .sum::<f64>()
        / rows.len() as f64
}

fn eg_group(rows: &[&[f64]], opts: &EgOptions) -> (Vec<f64>, Vec<f64>) {
    let m = rows[0].len();
    let mut w = vec![1.0 / m as f64; m];
    let mut obj = mixture_ce(rows, &w);
    let mut trace = vec![obj];
    let mut eta = opts.eta;
    let count = rows.len() as f64;
    for _ in 0..opts.max_iters {
        let mut grad = vec![0.0; m];
        for r in rows {
            let mix: f64 = r.iter().zip(&w).map(|(s, wk)| s * wk).sum();
            for (g, s) in grad.iter_mut().zip(r.iter()) {
                *g -= s / mix / count;
            }
        }
        let gmin = grad.iter().copied().fold(f64::INFINITY, f64::min);
        let step = loop {
            let mut cand: Vec<f64> = w
                .iter()
                .zip(&grad)
                .map(|(wk, g)| wk * (-eta * (g - gmin)).exp())
                .collect();
            let z: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|c| *c /= z);
            let cand_obj = mixture_ce(rows, &cand);
            if cand_obj <= obj {
                break Some((cand, cand_obj));
            }
            eta *= 0.5;
            if eta < 1e-16 {
                break None;
            }
        };
        let Some((next, next_obj)) = step else { break };
        let change = w
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        w = next;
        obj = next_obj;
        trace.push(obj);
        if change < opts.tol {
            break;
        }
    }
    (w, trace)
}

/// Per-group convex mixture weights minimizing mean `-ln sum_k w_k S_k`.
///
/// Multiplicative updates `w <- w exp(-eta grad) / Z` from uniform; a step
/// that would raise the objective is retried with half the step size.
pub fn eg_optimize_mixture(scores: &[Vec<f64>], groups: &[usize], opts: &EgOptions) -> Result<MixtureFit> {
    let by_group = grouped(scores, groups)?;
    let mut weights = MixtureWeights::default();
    let mut traces = BTreeMap::new();
    for (g, rows) in by_group {
        let (w, t) = eg_group(&rows, opts);
        weights.groups.insert(g, w);
        traces.insert(g, t);
    }
    Ok(MixtureFit { weights, traces })
}

/// Cross-entropies (nats per token) of the fixed continuations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    pub items: usize,
    pub uniform_ce: f64,
    pub optimized_ce: f64,
    /// `uniform_ce - optimized_ce`
    pub improvement: f64,
    /// Best single permutation column per group; not deployable.
    pub oracle_single_ce: f64,
    pub mean_single_ce: f64,
    pub weights: MixtureWeights,
}

pub fn mixture_ce_report(scores: &[Vec<f64>], groups: &[usize], opts: &EgOptions) -> Result<MixtureReport> {
    let fit = eg_optimize_mixture(scores, groups, opts)?;
    let by_group = grouped(scores, groups)?;
    let total = scores.len() as f64;
    let (mut uniform, mut optimized, mut oracle, mut single) = (0.0, 0.0, 0.0, 0.0);
    for (g, rows) in &by_group {
        let m = rows[0].len();
        let share = rows.len() as f64 / total;
        uniform += share * mixture_ce(rows, &vec![1.0 / m as f64; m]);
        optimized += share * mixture_ce(rows, &fit.weights.groups[g]);
        let per_column: Vec<f64> = (0..m)
            .map(|k| rows.iter().map(|r| -r[k].ln()).sum::<f64>() / rows.len() as f64)
            .collect();
        oracle += share * per_column.iter().copied().fold(f64::INFINITY, f64::min);
        single += share * mean(&per_column);
    }
    Ok(MixtureReport {
        items: scores.len(),
        uniform_ce: uniform,
        optimized_ce: optimized,
        improvement: (uniform - optimized).max(0.0),
        oracle_single_ce: oracle,
        mean_single_ce: single,
        weights: fit.weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthClass {
    Power,
    Logarithmic,
    Saturating,
}

/// Competing growth laws fitted to a dispersion-vs-n curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    /// Slope of `ln value` on `ln n`.
    pub exponent: f64,
    /// R^2 of `c n^exponent` in level space.
    pub power_r2: f64,
    pub log_slope: f64,
    /// R^2 of `a + b ln n`.
    pub log_r2: f64,
    pub class: GrowthClass,
}

/// Exponents above this count as power-law growth.
pub const POWER_EXPONENT_FLOOR: f64 = 0.25;

/// Logarithmic if `a + b ln n` grows and fits at least as well as the power
/// law; power if the log-log exponent exceeds [`POWER_EXPONENT_FLOOR`];
/// saturating otherwise.
pub fn classify_growth(ns: &[usize], values: &[f64]) -> Result<GrowthFit> {
    if ns.len() != values.len() || ns.len() < 3 {
        return Err(invalid("growth fit needs at least 3 matched points"));
    }
    if values.iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(invalid("growth fit needs positive values"));
    }
    let ln_n: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ln_v: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let pw = stats::ols(&ln_n, &ln_v)?;
    let lg = stats::ols(&ln_n, values)?;
    let mv = mean(values);
    let sst: f64 = values.iter().map(|v| (v - mv).powi(2)).sum();
    let sse: f64 = ns
        .iter()
        .zip(values)
        .map(|(&n, v)| (v - pw.intercept.exp() * (n as f64).powf(pw.slope)).powi(2))
        .sum();
    let power_r2 = if sst > 0.0 { (1.0 - sse / sst).max(0.0) } else { 1.0 };
    let class = if lg.slope > 0.0 && lg.r2 >= power_r2 {
        GrowthClass::Logarithmic
    } else if pw.slope > POWER_EXPONENT_FLOOR {
        GrowthClass::Power
    } else {
        GrowthClass::Saturating
    };
    Ok(GrowthFit {
        exponent: pw.slope,
        power_r2,
        log_slope: lg.slope,
        log_r2: lg.r2,
        class,
    })
}

/// Exact dispersion of a single-support model across an n-grid, with its
/// growth classification.
pub fn regime_study(potential: &PotentialSpec, a0: f64, ns: &[usize]) -> Result<(Vec<f64>, GrowthFit)> {
    potential.validate()?;
    let values: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let mean_psi = potential.table(n).iter().sum::<f64>() / n as f64;
            single_chunk_dispersion(a0 - mean_psi, potential, n)
        })
        .collect();
    let fit = classify_growth(ns, &values)?;
    Ok((values, fit))
}

/// Settings for the Monte-Carlo dispersion study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmvStudyConfig {
    pub ns: Vec<usize>,
    pub models_per_n: usize,
    pub draws: usize,
    pub seed: u64,
    pub family: ModelFamily,
    pub resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmvRow {
    pub n: usize,
    pub model: usize,
    pub dispersion: f64,
    pub std_error: f64,
    /// Large-n closed form.
    pub bound: f64,
    /// Finite-n form, valid at every n.
    pub exact_bound: f64,
    /// `bound + 3 * std_error - dispersion`; negative means a violation.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmvStudy {
    pub rows: Vec<QmvRow>,
    pub records: Vec<DispersionRecord>,
    pub fit: RegressionFit,
    /// Rows whose dispersion exceeds `bound` by more than 3 standard errors.
    pub violations: usize,
    /// The same against `exact_bound`.
    pub exact_violations: usize,
}

/// Random first-order models at each n, Monte-Carlo dispersion against the
/// closed-form bound, and the log-n fit over all models.
pub fn qmv_study(cfg: &QmvStudyConfig) -> Result<QmvStudy> {
    let p = cfg.family.potential;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (gi, &n) in cfg.ns.iter().enumerate() {
        let bound = qmv_bound(p.c, n, p.alpha)?;
        let exact_bound = qmv_bound_exact(p.c, n, p.alpha)?;
        for k in 0..cfg.models_per_n {
            let stream = (gi * cfg.models_per_n + k) as u64;
            let model = cfg.family.sample(n, cfg.seed, stream)?;
            let est = mc_dispersion(&model, cfg.draws, cfg.seed ^ (stream + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
            rows.push(QmvRow {
                n,
                model: k,
                dispersion: est.mean_abs_residual,
                std_error: est.std_error,
                bound,
                exact_bound,
                margin: bound + 3.0 * est.std_error - est.mean_abs_residual,
            });
            records.push(DispersionRecord {
                item_id: format!("n{n}-m{k}"),
                n,
                q: Vec::new(),
                q_bar: est.q_bar,
                mean_abs_residual: est.mean_abs_residual,
                e_pair: f64::NAN,
            });
        }
    }
    let fit = fit_log_dispersion(&records, cfg.resamples, cfg.seed)?;
    let violations = rows.iter().filter(|r| r.margin < 0.0).count();
    let exact_violations = rows
        .iter()
        .filter(|r| r.exact_bound + 3.0 * r.std_error < r.dispersion)
        .count();
    Ok(QmvStudy {
        rows,
        records,
        fit,
        violations,
        exact_violations,
    })
}
