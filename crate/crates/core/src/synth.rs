//! First-order positional-sensitivity model.
//!
//! A synthetic predictor whose logit is a content term plus a weighted sum of
//! a positional potential evaluated at each chunk's rank:
//! `logit q = a + sum_i w_i psi(pos(i))`. With `psi` built from partial sums
//! of `C t^-alpha`, adjacent-rank increments hit the regularity limit
//! `C r^-alpha` exactly, which makes this the worst case for dispersion
//! bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::FiniteDist;
use crate::error::{invalid, Result};
use crate::info::Prob;
use crate::permute::Permutation;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialFamily {
    #[default]
    PartialSum,
}

/// `(alpha, C)`-regular positional potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub alpha: f64,
    pub c: f64,
    #[serde(default)]
    pub family: PotentialFamily,
    /// `-1` (default) decays with rank, `+1` grows.
    #[serde(default = "default_sign")]
    pub sign: i8,
}

fn default_sign() -> i8 {
    -1
}

impl PotentialSpec {
    pub fn new(alpha: f64, c: f64, sign: i8) -> Result<Self> {
        let spec = PotentialSpec {
            alpha,
            c,
            family: PotentialFamily::PartialSum,
            sign,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(invalid(format!("C must be non-negative, got {}", self.c)));
        }
        if self.sign != 1 && self.sign != -1 {
            return Err(invalid(format!("sign must be +1 or -1, got {}", self.sign)));
        }
        Ok(())
    }

    /// `psi(r) = sign * C * sum_{t=1}^{r-1} t^-alpha`, with `psi(1) = 0`.
    pub fn psi(&self, rank: usize) -> f64 {
        assert!(rank >= 1, "ranks are 1-based");
        let s: f64 = (1..rank).map(|t| (t as f64).powf(-self.alpha)).sum();
        f64::from(self.sign) * self.c * s
    }

    /// `psi` at ranks `1..=n`, indexed from 0.
    pub fn table(&self, n: usize) -> Vec<f64> {
        let sign = f64::from(self.sign) * self.c;
        let mut out = Vec::with_capacity(n);
        let mut acc = 0.0;
        for r in 1..=n {
            out.push(sign * acc);
            acc += (r as f64).powf(-self.alpha);
        }
        out
    }
}

/// Synthetic first-order model over `n` chunks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirstOrderModel {
    pub a: f64,
    pub w: Vec<f64>,
    pub potential: PotentialSpec,
    #[serde(skip)]
    psi: Vec<f64>,
}

impl FirstOrderModel {
    pub fn new(a: f64, w: Vec<f64>, potential: PotentialSpec) -> Result<Self> {
        potential.validate()?;
        if w.is_empty() {
            return Err(invalid("model needs at least one chunk"));
        }
        if !a.is_finite() || w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid("base logit and weights must be finite, weights non-negative"));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("weights sum to {total}, expected 1")));
        }
        let psi = potential.table(w.len());
        Ok(FirstOrderModel { a, w, potential, psi })
    }

    /// Base logit chosen so the average over ranks of the positional term
    /// with uniform weight equals zero; keeps `a0` the mean logit as `n`
    /// grows instead of drifting with the potential's partial sums.
    pub fn centered(a0: f64, w: Vec<f64>, potential: PotentialSpec) -> Result<Self> {
        let n = w.len().max(1);
        let mean_psi = potential.table(n).iter().sum::<f64>() / n as f64;
        Self::new(a0 - mean_psi, w, potential)
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    fn psi_table(&self) -> std::borrow::Cow<'_, [f64]> {
        if self.psi.len() == self.w.len() {
            std::borrow::Cow::Borrowed(&self.psi)
        } else {
            std::borrow::Cow::Owned(self.potential.table(self.w.len()))
        }
    }

    pub fn logit(&self, perm: &Permutation) -> Result<f64> {
        if perm.len() != self.n() {
            return Err(invalid(format!(
                "model has {} chunks, permutation has {}",
                self.n(),
                perm.len()
            )));
        }
        let psi = self.psi_table();
        let positional: f64 = perm
            .order()
            .iter()
            .enumerate()
            .map(|(pos, &chunk)| self.w[chunk] * psi[pos])
            .sum();
        Ok(self.a + positional)
    }

    /// `q = logistic(logit)` and the two-outcome distribution `{1: q, 0: 1-q}`.
    pub fn predict(&self, perm: &Permutation) -> Result<(Prob, FiniteDist)> {
        let q = Prob::new(logistic(self.logit(perm)?))?;
        Ok((q, FiniteDist::bernoulli(q)))
    }
}

impl PartialEq for FirstOrderModel {
    fn eq(&self, other: &Self) -> bool {
        self.a == other.a && self.w == other.w && self.potential == other.potential
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Riemann zeta for `alpha > 1` by direct summation plus an
/// Euler-Maclaurin tail; absolute error well below 1e-10.
pub fn zeta(alpha: f64) -> f64 {
    assert!(alpha > 1.0);
    const N: usize = 2000;
    let head: f64 = (1..N).map(|t| (t as f64).powf(-alpha)).sum();
    let n = N as f64;
    let tail = n.powf(1.0 - alpha) / (alpha - 1.0) + 0.5 * n.powf(-alpha) + alpha / 12.0 * n.powf(-alpha - 1.0)
        - alpha * (alpha + 1.0) * (alpha + 2.0) / 720.0 * n.powf(-alpha - 3.0);
    head + tail
}

/// Closed-form dispersion bound for the first-order model.
///
/// `alpha = 1`: `(C/4)(ln n - 3/2)`; `alpha < 1`: `(C/4)(n^{1-alpha} - 1)/(1 - alpha)`;
/// `alpha > 1`: `(C/4) zeta(alpha)`.
pub fn qmv_bound(c: f64, n: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("alpha must be positive, got {alpha}")));
    }
    if n < 2 {
        return Err(invalid("bound needs n >= 2"));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(invalid(format!("C must be non-negative, got {c}")));
    }
    let n = n as f64;
    let core = if alpha == 1.0 {
        n.ln() - 1.5
    } else if alpha < 1.0 {
        (n.powf(1.0 - alpha) - 1.0) / (1.0 - alpha)
    } else {
        zeta(alpha)
    };
    Ok(0.25 * c * core)
}

/// Finite-n form of the bound: `(C/4) E[sum_{t=1}^{D} t^-alpha]` with
/// `D = |U - V|` for `U, V` i.i.d. uniform on `1..=n`. Holds at every `n`
/// and always dominates the dispersion of a first-order model.
pub fn qmv_bound_exact(c: f64, n: usize, alpha: f64) -> Result<f64> {
    qmv_bound(c, n, alpha)?;
    let nf = n as f64;
    let mut partial = 0.0;
    let mut expect = 0.0;
    for d in 1..n {
        partial += (d as f64).powf(-alpha);
        expect += 2.0 * (nf - d as f64) / (nf * nf) * partial;
    }
    Ok(0.25 * c * expect)
}

/// Harmonic number `H_m`.
pub fn harmonic(m: usize) -> f64 {
    (1..=m).map(|t| 1.0 / t as f64).sum()
}

/// `E[H_D]` for `D = |U - V|`, `U, V` i.i.d. uniform on `1..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicDistance {
    pub exact: f64,
    /// `H_n - 3/2`
    pub approx: f64,
    pub gap: f64,
}

pub fn expected_harmonic_distance(n: usize) -> Result<HarmonicDistance> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    let nf = n as f64;
    // P(D = d) = 2(n - d)/n^2 for d >= 1; d = 0 contributes H_0 = 0
    let mut exact = 0.0;
    let mut h = 0.0;
    for d in 1..n {
        h += 1.0 / d as f64;
        exact += 2.0 * (nf - d as f64) * h;
    }
    exact /= nf * nf;
    let approx = harmonic(n) - 1.5;
    Ok(HarmonicDistance {
        exact,
        approx,
        gap: (exact - approx).abs(),
    })
}

/// Monte-Carlo estimate of `E_pi |q_pi - q_bar|` under uniform permutations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionEstimate {
    pub mean_abs_residual: f64,
    pub std_error: f64,
    pub q_bar: f64,
    pub draws: usize,
}

/// Draw `t` uses stream `t` of `seed`; results do not depend on scheduling.
pub fn mc_dispersion(model: &FirstOrderModel, draws: usize, seed: u64) -> Result<DispersionEstimate> {
    if draws < 2 {
        return Err(invalid("need at least 2 Monte-Carlo draws"));
    }
    let n = model.n();
    let qs: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::seeded(seed, t as u64);
            let mut order: Vec<usize> = (0..n).collect();
            rng::shuffle(&mut r, &mut order);
            let perm = Permutation::from_order(order).expect("shuffle yields a bijection");
            model.logit(&perm).map(logistic)
        })
        .collect::<Result<_>>()?;
    let k = draws as f64;
    let q_bar = qs.iter().sum::<f64>() / k;
    let resid: Vec<f64> = qs.iter().map(|q| (q - q_bar).abs()).collect();
    let mean = resid.iter().sum::<f64>() / k;
    let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(DispersionEstimate {
        mean_abs_residual: mean,
        std_error: (var / k).sqrt(),
        q_bar,
        draws,
    })
}

/// Exact `E_pi |q_pi - q_bar|` for a model whose weight sits on one chunk:
/// under uniform permutations that chunk's rank is uniform on `1..=n`.
pub fn single_chunk_dispersion(a: f64, potential: &PotentialSpec, n: usize) -> f64 {
    let qs: Vec<f64> = potential.table(n).iter().map(|p| logistic(a + p)).collect();
    let q_bar = qs.iter().sum::<f64>() / n as f64;
    qs.iter().map(|q| (q - q_bar).abs()).sum::<f64>() / n as f64
}

/// Random model family: a few support chunks carry all content weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFamily {
    pub support_min: usize,
    pub support_max: usize,
    /// Mean logit is drawn uniformly from `[-a_range, a_range]`.
    pub a_range: f64,
    pub potential: PotentialSpec,
}

impl ModelFamily {
    /// Draw a centered model over `n` chunks. Support weights are flat
    /// Dirichlet on a uniformly chosen subset.
    pub fn sample(&self, n: usize, seed: u64, stream: u64) -> Result<FirstOrderModel> {
        if n == 0 || self.support_min == 0 || self.support_min > self.support_max {
            return Err(invalid("bad model family bounds"));
        }
        let mut r = rng::seeded(seed, stream);
        let a0 = self.a_range * (2.0 * rng::unit(&mut r) - 1.0);
        let lo = self.support_min.min(n);
        let hi = self.support_max.min(n);
        let s = lo + rng::below(&mut r, (hi - lo + 1) as u64) as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut r, &mut idx);
        let raw: Vec<f64> = (0..s).map(|_| -(1.0 - rng::unit(&mut r)).ln()).collect();
        let total: f64 = raw.iter().sum();
        let mut w = vec![0.0; n];
        for (k, &i) in idx[..s].iter().enumerate() {
            w[i] = raw[k] / total;
        }
        // absorb rounding so the simplex check is exact enough
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= sum);
        FirstOrderModel::centered(a0, w, self.potential)
    }
}

/// Declarative model description, as loaded from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n: usize,
    #[serde(default)]
    pub a: f64,
    /// Explicit weights; when absent they are drawn from `w_seed`.
    #[serde(default)]
    pub w: Option<Vec<f64>>,
    #[serde(default)]
    pub w_seed: u64,
    /// Support size used when drawing weights; defaults to all chunks.
    #[serde(default)]
    pub support: Option<usize>,
    pub alpha: f64,
    #[serde(rename = "C", alias = "c")]
    pub c: f64,
    #[serde(default = "default_sign")]
    pub sign: i8,
    /// Interpret `a` as the mean logit over positions.
    #[serde(default)]
    pub centered: bool,
}

impl ModelSpec {
    pub fn build(&self) -> Result<FirstOrderModel> {
        self.build_for(self.n, 0)
    }

    /// Build with `n` chunks, drawing weights from stream `stream` of `w_seed`
    /// when none are given.
    pub fn build_for(&self, n: usize, stream: u64) -> Result<FirstOrderModel> {
        let potential = PotentialSpec::new(self.alpha, self.c, self.sign)?;
        let w = match &self.w {
            Some(w) => {
                if w.len() != n {
                    return Err(invalid(format!("spec lists {} weights for {n} chunks", w.len())));
                }
                w.clone()
            }
            None => {
                let s = self.support.unwrap_or(n).clamp(1, n.max(1));
                let fam = ModelFamily {
                    support_min: s,
                    support_max: s,
                    a_range: 0.0,
                    potential,
                };
                fam.sample(n, self.w_seed, stream)?.w
            }
        };
        if self.centered {
            FirstOrderModel::centered(self.a, w, potential)
        } else {
            FirstOrderModel::new(self.a, w, potential)
        }
    }
}
