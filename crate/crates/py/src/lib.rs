use std::collections::HashMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ordergate::analysis::{dispersion_stats, jensen_gap as gap, mixture_ce_report, EgOptions};
use ordergate::dist::{jsd_certificate as certificate, FiniteDist};
use ordergate::dose::{estimate_2sls, estimate_ols, synth_generate, CausalEstimate, DoseParams};
use ordergate::info::{self, DecisionMode, Prob, Thresholds};
use ordergate::permute::{draw_unique, uniform_permutation as uniform, BandedSpec};
use ordergate::synth;
use ordergate::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Invariant(m) => PyRuntimeError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn prob(x: f64) -> PyResult<Prob> {
    Prob::new(x).map_err(err)
}

fn mode(name: &str) -> PyResult<DecisionMode> {
    match name {
        "binary" => Ok(DecisionMode::Binary),
        "graduated" => Ok(DecisionMode::Graduated),
        other => Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    }
}

/// `KL(Ber(p) || Ber(q))` in nats.
#[pyfunction]
fn kl_bernoulli(p: f64, q: f64) -> PyResult<f64> {
    info::kl_bernoulli(prob(p)?, prob(q)?).map_err(err)
}

/// Largest event mass reachable from prior `q` with budget `delta`.
#[pyfunction]
fn p_max(delta: f64, q: f64) -> PyResult<f64> {
    info::p_max(delta, prob(q)?).map(|p| p.get()).map_err(err)
}

#[pyfunction]
fn bits_to_trust(q_lo: f64, h_star: f64) -> PyResult<f64> {
    info::bits_to_trust(prob(q_lo)?, prob(h_star)?).map_err(err)
}

/// Planner numbers for one decision, as a dict.
#[pyfunction]
#[pyo3(signature = (q_lo, delta, q_bar=None, h_star=0.05, prior_floor=0.003, mode="binary"))]
fn plan<'py>(
    py: Python<'py>,
    q_lo: f64,
    delta: f64,
    q_bar: Option<f64>,
    h_star: f64,
    prior_floor: f64,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let p = info::plan(
        prob(q_bar.unwrap_or(q_lo))?,
        prob(q_lo)?,
        delta,
        prob(h_star)?,
        prior_floor,
        Thresholds::default(),
        self::mode(mode)?,
    )
    .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("q_bar", p.q_bar.get())?;
    d.set_item("q_lo", p.q_lo.get())?;
    d.set_item("delta_bar", p.delta_bar)?;
    d.set_item("b2t", p.b2t)?;
    d.set_item("roh", p.roh.get())?;
    d.set_item("isr", p.isr)?;
    d.set_item("decision", p.decision.to_string())?;
    Ok(d)
}

#[pyfunction]
fn qmv_bound(c: f64, n: usize, alpha: f64) -> PyResult<f64> {
    synth::qmv_bound(c, n, alpha).map_err(err)
}

/// `(exact, approx, gap)` for `E[H_D]`.
#[pyfunction]
fn expected_harmonic_distance(n: usize) -> PyResult<(f64, f64, f64)> {
    let h = synth::expected_harmonic_distance(n).map_err(err)?;
    Ok((h.exact, h.approx, h.gap))
}

/// Up to `m` distinct banded permutations as 1-based orders, plus the
/// shortfall flag.
#[pyfunction]
#[pyo3(signature = (m, n, seed, k_bands=6))]
fn banded_permutations(m: usize, n: usize, seed: u64, k_bands: usize) -> PyResult<(Vec<Vec<usize>>, bool)> {
    let spec = BandedSpec::new(n, k_bands, seed).map_err(err)?;
    let draw = draw_unique(m, &spec);
    Ok((draw.permutations.iter().map(|p| p.one_based()).collect(), draw.shortfall))
}

#[pyfunction]
fn uniform_permutation(n: usize, seed: u64) -> Vec<usize> {
    uniform(n, seed).one_based()
}

fn to_dist(d: HashMap<String, f64>) -> PyResult<FiniteDist> {
    let mut pairs: Vec<(String, f64)> = d.into_iter().collect();
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    let (labels, mass) = pairs.into_iter().unzip();
    FiniteDist::new(labels, mass).map_err(err)
}

/// `(dispersion, tv_mid, jsd_bound)` for an ensemble of label->mass dicts.
#[pyfunction]
fn jsd_certificate(ensemble: Vec<HashMap<String, f64>>, event: Vec<String>) -> PyResult<(f64, f64, f64)> {
    let members = ensemble.into_iter().map(to_dist).collect::<PyResult<Vec<_>>>()?;
    let c = certificate(&members, &event).map_err(err)?;
    Ok((c.dispersion, c.tv_mid, c.jsd_bound))
}

#[pyfunction]
#[pyo3(signature = (scores, token_count=1))]
fn jensen_gap(scores: Vec<f64>, token_count: usize) -> PyResult<f64> {
    gap(&scores, token_count).map_err(err)
}

/// `(q_bar, mean_abs_residual, e_pair)`.
#[pyfunction]
fn dispersion(q: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let s = dispersion_stats(&q).map_err(err)?;
    Ok((s.q_bar, s.mean_abs_residual, s.e_pair))
}

/// Optimized mixture weights per chunk count and the uniform and optimized
/// cross-entropies.
#[pyfunction]
#[pyo3(signature = (scores, groups, eta=0.1, max_iters=500))]
fn mixture_weights(
    scores: Vec<Vec<f64>>,
    groups: Vec<usize>,
    eta: f64,
    max_iters: usize,
) -> PyResult<(HashMap<usize, Vec<f64>>, f64, f64)> {
    let opts = EgOptions {
        eta,
        max_iters,
        ..EgOptions::default()
    };
    let r = mixture_ce_report(&scores, &groups, &opts).map_err(err)?;
    Ok((r.weights.groups.into_iter().collect(), r.uniform_ce, r.optimized_ce))
}

fn estimate_dict<'py>(py: Python<'py>, e: &CausalEstimate) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("slope", e.slope)?;
    d.set_item("intercept", e.intercept)?;
    d.set_item("stderr", e.stderr)?;
    d.set_item("ci", (e.ci_low, e.ci_high))?;
    d.set_item("first_stage_slope", e.first_stage_slope)?;
    d.set_item("first_stage_f", e.first_stage_f)?;
    d.set_item("weak_instrument", e.weak_instrument)?;
    Ok(d)
}

/// OLS and 2SLS estimates on planted dose-response data.
#[pyfunction]
#[pyo3(signature = (count=2000, seed=0, noise_sd=0.3, response_slope=-0.13))]
fn dose_estimates<'py>(
    py: Python<'py>,
    count: usize,
    seed: u64,
    noise_sd: f64,
    response_slope: f64,
) -> PyResult<(Bound<'py, PyDict>, Bound<'py, PyDict>)> {
    let params = DoseParams {
        noise_sd,
        response_slope,
        ..DoseParams::default()
    };
    let items = synth_generate(&params, count, seed).map_err(err)?;
    let ols = estimate_ols(&items).map_err(err)?;
    let iv = estimate_2sls(&items).map_err(err)?;
    Ok((estimate_dict(py, &ols)?, estimate_dict(py, &iv)?))
}

#[pymodule]
fn ordergate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kl_bernoulli, m)?)?;
    m.add_function(wrap_pyfunction!(p_max, m)?)?;
    m.add_function(wrap_pyfunction!(bits_to_trust, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(qmv_bound, m)?)?;
    m.add_function(wrap_pyfunction!(expected_harmonic_distance, m)?)?;
    m.add_function(wrap_pyfunction!(banded_permutations, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_permutation, m)?)?;
    m.add_function(wrap_pyfunction!(jsd_certificate, m)?)?;
    m.add_function(wrap_pyfunction!(jensen_gap, m)?)?;
    m.add_function(wrap_pyfunction!(dispersion, m)?)?;
    m.add_function(wrap_pyfunction!(mixture_weights, m)?)?;
    m.add_function(wrap_pyfunction!(dose_estimates, m)?)?;
    Ok(())
}
