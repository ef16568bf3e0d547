//! Bernoulli information geometry.
//!
//! Everything here is measured in nats. The central quantity is the
//! Bernoulli relative entropy `KL(Ber(p) || Ber(q))`; the planners built on
//! it translate an information budget into an achievable success mass
//! (`p_max`), the budget needed to reach a target reliability (bits-to-trust),
//! and the ratio between the two (the information sufficiency ratio).

use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};

/// Information quantity in nats.
///
/// KL-derived budgets are never negative. Clipped per-sample increments
/// produced by [`crate::dist::clipped_budget`] may be.
pub type Nats = f64;

const P_MAX_CEILING: f64 = 1.0 - 1e-15;
const P_MAX_TOL: f64 = 1e-12;
const P_MAX_ITERS: usize = 200;

/// A probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Prob(f64);

impl Prob {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(domain(format!("probability must lie in [0, 1], got {value}")));
        }
        Ok(Prob(value))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    /// Strictly inside `(0, 1)`.
    #[inline]
    pub fn is_interior(self) -> bool {
        self.0 > 0.0 && self.0 < 1.0
    }
}

impl TryFrom<f64> for Prob {
    type Error = crate::Error;
    fn try_from(value: f64) -> Result<Self> {
        Prob::new(value)
    }
}

impl From<Prob> for f64 {
    fn from(p: Prob) -> f64 {
        p.0
    }
}

/// Gate verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Answer,
    Hedge,
    Refuse,
}

impl Decision {
    pub fn is_answer(self) -> bool {
        matches!(self, Decision::Answer)
    }
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Answer => "answer",
            Decision::Hedge => "hedge",
            Decision::Refuse => "refuse",
        })
    }
}

/// Binary mode never emits [`Decision::Hedge`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionMode {
    #[default]
    Binary,
    Graduated,
}

/// ISR cut points: below `hedge_lo` refuse, at or above `answer_at` answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub hedge_lo: f64,
    pub answer_at: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            hedge_lo: 0.5,
            answer_at: 1.0,
        }
    }
}

/// Planner bundle for one decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatePlan {
    pub q_bar: Prob,
    pub q_lo: Prob,
    pub delta_bar: Nats,
    pub b2t: Nats,
    pub roh: Prob,
    /// `+inf` when `b2t == 0`. Serialized as `null` in that case.
    #[serde(with = "crate::report::inf_as_null")]
    pub isr: f64,
    pub decision: Decision,
}

/// `KL(Ber(p) || Ber(q))` in nats, with `0 ln 0 := 0`.
///
/// `q` must be strictly inside `(0, 1)`; apply a prior floor before calling.
pub fn kl_bernoulli(p: Prob, q: Prob) -> Result<Nats> {
    if !q.is_interior() {
        return Err(domain(format!(
            "reference mass q = {} is degenerate; floor the prior into (0, 1) first",
            q.get()
        )));
    }
    Ok(kl_raw(p.get(), q.get()))
}

#[inline]
pub(crate) fn kl_raw(p: f64, q: f64) -> f64 {
    let mut kl = 0.0;
    if p > 0.0 {
        kl += p * (p / q).ln();
    }
    if p < 1.0 {
        kl += (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    }
    // rounding can leave a tiny negative residue near p == q
    kl.max(0.0)
}

/// Largest `p` in `[q, 1)` with `KL(Ber(p) || Ber(q)) <= delta`.
pub fn p_max(delta: Nats, q: Prob) -> Result<Prob> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(invalid(format!("budget must be finite and >= 0, got {delta}")));
    }
    if !q.is_interior() {
        return Err(domain(format!("prior mass q = {} must lie in (0, 1)", q.get())));
    }
    let q = q.get();
    if delta == 0.0 {
        return Prob::new(q);
    }
    if kl_raw(P_MAX_CEILING, q) <= delta {
        return Prob::new(P_MAX_CEILING);
    }
    let (mut lo, mut hi) = (q, P_MAX_CEILING);
    for _ in 0..P_MAX_ITERS {
        if hi - lo <= P_MAX_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if kl_raw(mid, q) <= delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Prob::new(lo)
}

/// Budget required to lift a conservative prior `q_lo` to reliability
/// `1 - h_star`: `KL(Ber(1 - h_star) || Ber(q_lo))`.
///
/// A prior already at or above the target needs no budget and returns 0.
pub fn bits_to_trust(q_lo: Prob, h_star: Prob) -> Result<Nats> {
    let h = h_star.get();
    if !(h > 0.0 && h <= 0.5) {
        return Err(domain(format!("h* must lie in (0, 0.5], got {h}")));
    }
    let target = 1.0 - h;
    if q_lo.get() >= target {
        return Ok(0.0);
    }
    kl_bernoulli(Prob(target), q_lo)
}

/// Residual error probability at budget `delta`: `1 - p_max(delta, q_bar)`.
pub fn risk_of_hallucination(delta: Nats, q_bar: Prob) -> Result<Prob> {
    let p = p_max(delta, q_bar)?;
    Prob::new((1.0 - p.get()).max(0.0))
}

/// Information sufficiency ratio `delta / b2t` and the resulting decision.
///
/// `b2t == 0` yields `+inf` and [`Decision::Answer`]. A ratio of exactly
/// `answer_at` answers.
pub fn isr_decide(
    delta: Nats,
    b2t: Nats,
    thresholds: Thresholds,
    mode: DecisionMode,
) -> Result<(f64, Decision)> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(invalid(format!("budget must be finite and >= 0, got {delta}")));
    }
    if !b2t.is_finite() || b2t < 0.0 {
        return Err(invalid(format!("bits-to-trust must be finite and >= 0, got {b2t}")));
    }
    let isr = if b2t == 0.0 { f64::INFINITY } else { delta / b2t };
    Ok((isr, classify(isr, thresholds, mode)))
}

pub(crate) fn classify(isr: f64, thresholds: Thresholds, mode: DecisionMode) -> Decision {
    if isr >= thresholds.answer_at {
        Decision::Answer
    } else if mode == DecisionMode::Graduated && isr >= thresholds.hedge_lo {
        Decision::Hedge
    } else {
        Decision::Refuse
    }
}

/// Assemble a [`GatePlan`] from summary statistics.
///
/// `q_lo` and `q_bar` are floored at `prior_floor` (and capped symmetrically
/// below 1) before any KL evaluation. A negative clipped budget carries no
/// usable evidence and is treated as zero for RoH and ISR; the raw value is
/// kept in `delta_bar`.
pub fn plan(
    q_bar: Prob,
    q_lo: Prob,
    delta_bar: Nats,
    h_star: Prob,
    prior_floor: f64,
    thresholds: Thresholds,
    mode: DecisionMode,
) -> Result<GatePlan> {
    if !(prior_floor > 0.0 && prior_floor < 0.5) {
        return Err(invalid(format!("prior floor must lie in (0, 0.5), got {prior_floor}")));
    }
    if !delta_bar.is_finite() {
        return Err(invalid("budget must be finite"));
    }
    let floor = |p: Prob| Prob(p.get().clamp(prior_floor, 1.0 - prior_floor));
    let usable = delta_bar.max(0.0);
    let b2t = bits_to_trust(floor(q_lo), h_star)?;
    let roh = risk_of_hallucination(usable, floor(q_bar))?;
    let (isr, decision) = isr_decide(usable, b2t, thresholds, mode)?;
    Ok(GatePlan {
        q_bar,
        q_lo,
        delta_bar,
        b2t,
        roh,
        isr,
        decision,
    })
}

/// Bounds on `KL(Ber(1 - eps) || Ber(q))` for rare events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RareEventBounds {
    /// `(1 - eps) ln(1/q)`; the leading term as `q -> 0`.
    pub asymptotic: Nats,
    /// `max(0, ln(1/q)/2 - ln 2)`; holds for every `eps` in `(0, 1/2]`.
    pub uniform: Nats,
}

pub fn rare_event_bounds(q: Prob, eps: Prob) -> Result<RareEventBounds> {
    let (q, eps) = (q.get(), eps.get());
    if !(q > 0.0 && q <= 0.25) {
        return Err(domain(format!("rare-event bounds need q in (0, 0.25], got {q}")));
    }
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(domain(format!("rare-event bounds need eps in (0, 0.5], got {eps}")));
    }
    let log_inv_q = -q.ln();
    Ok(RareEventBounds {
        asymptotic: (1.0 - eps) * log_inv_q,
        uniform: (0.5 * log_inv_q - std::f64::consts::LN_2).max(0.0),
    })
}

/// Natural parameter of the exponential tilt that moves `Ber(q)` to mass `p`.
pub fn tilt_lambda(q: Prob, p: Prob) -> Result<f64> {
    if !q.is_interior() || !p.is_interior() {
        return Err(domain(format!(
            "tilt needs p, q in (0, 1), got p = {}, q = {}",
            p.get(),
            q.get()
        )));
    }
    let (p, q) = (p.get(), q.get());
    Ok((p * (1.0 - q) / (q * (1.0 - p))).ln())
}

/// Two-point distribution proportional to `Ber(q)(y) * exp(lambda * y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltedBernoulli {
    pub base: f64,
    pub lambda: f64,
    /// `ln(q e^lambda + 1 - q)`
    pub log_partition: f64,
}

impl TiltedBernoulli {
    pub fn new(base: Prob, lambda: f64) -> Result<Self> {
        if !base.is_interior() || !lambda.is_finite() {
            return Err(domain("tilt needs an interior base mass and finite lambda"));
        }
        let q = base.get();
        // log-sum-exp of {ln q + lambda, ln(1-q)}
        let (x, y) = (q.ln() + lambda, (1.0 - q).ln());
        let m = x.max(y);
        let log_partition = m + ((x - m).exp() + (y - m).exp()).ln();
        Ok(TiltedBernoulli {
            base: q,
            lambda,
            log_partition,
        })
    }

    /// Mass of the tilted distribution on `y = 1`.
    pub fn mass(&self) -> f64 {
        (self.base.ln() + self.lambda - self.log_partition).exp()
    }

    /// `KL(tilted || Ber(base)) = lambda * mass - ln Z`.
    pub fn kl_to_base(&self) -> Nats {
        self.lambda * self.mass() - self.log_partition
    }
}
