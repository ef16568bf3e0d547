//! Finite predictive distributions and the divergences computed on them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::info::{Nats, Prob};

pub const DEFAULT_SMOOTHING: f64 = 1e-9;
pub const DEFAULT_CLIP: Nats = 6.0;

const NORM_TOL: f64 = 1e-9;

/// Normalized probability vector over labeled outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDist {
    labels: Vec<String>,
    mass: Vec<f64>,
}

impl FiniteDist {
    /// Build from already-normalized masses.
    pub fn new(labels: Vec<String>, mass: Vec<f64>) -> Result<Self> {
        check_support(&labels, mass.len())?;
        if mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(invalid("masses must be finite and non-negative"));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(invalid(format!("masses sum to {total}, expected 1")));
        }
        Ok(FiniteDist { labels, mass })
    }

    /// Two-outcome distribution `{"1": q, "0": 1 - q}`.
    pub fn bernoulli(q: Prob) -> Self {
        FiniteDist {
            labels: vec!["1".into(), "0".into()],
            mass: vec![q.get(), 1.0 - q.get()],
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn mass_of(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| l == label).map(|i| self.mass[i])
    }

    /// Total mass of the labels in `event`. Unknown labels contribute nothing.
    pub fn event_mass(&self, event: &[String]) -> f64 {
        self.labels
            .iter()
            .zip(&self.mass)
            .filter(|(l, _)| event.contains(l))
            .map(|(_, m)| m)
            .sum()
    }

    /// Label with the largest mass; the first one wins ties.
    pub fn argmax(&self) -> &str {
        let mut best = 0;
        for (i, m) in self.mass.iter().enumerate() {
            if *m > self.mass[best] {
                best = i;
            }
        }
        &self.labels[best]
    }

    /// Masses reordered to follow `labels`. Fails unless the label sets match.
    pub fn aligned(&self, labels: &[String]) -> Result<Vec<f64>> {
        if labels.len() != self.labels.len() {
            return Err(Error::SupportMismatch(format!(
                "{} labels vs {} labels",
                labels.len(),
                self.labels.len()
            )));
        }
        labels
            .iter()
            .map(|l| {
                self.mass_of(l)
                    .ok_or_else(|| Error::SupportMismatch(format!("label {l:?} missing")))
            })
            .collect()
    }

    /// Equal-weight average of distributions sharing one label set.
    /// The output follows the first member's label order.
    pub fn mixture(members: &[FiniteDist]) -> Result<FiniteDist> {
        let first = members.first().ok_or_else(|| invalid("empty ensemble"))?;
        let labels = first.labels.clone();
        let mut acc = vec![0.0; labels.len()];
        for m in members {
            for (a, v) in acc.iter_mut().zip(m.aligned(&labels)?) {
                *a += v;
            }
        }
        let k = members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok(FiniteDist { labels, mass: acc })
    }
}

fn check_support(labels: &[String], len: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(invalid("support must be non-empty"));
    }
    if labels.len() != len {
        return Err(invalid(format!("{} labels but {} masses", labels.len(), len)));
    }
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(invalid(format!("duplicate label {l:?}")));
        }
    }
    Ok(())
}

/// Normalize raw non-negative masses, add `epsilon` to every entry and
/// renormalize. Every output mass is at least `epsilon / (1 + k * epsilon)`
/// for a support of size `k`.
pub fn smooth_normalize(labels: Vec<String>, raw: &[f64], epsilon: f64) -> Result<FiniteDist> {
    check_support(&labels, raw.len())?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("smoothing epsilon must be positive, got {epsilon}")));
    }
    if raw.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(invalid("raw masses must be finite and non-negative"));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(invalid("all raw masses are zero; nothing to normalize"));
    }
    let denom = 1.0 + raw.len() as f64 * epsilon;
    let mass = raw.iter().map(|m| (m / total + epsilon) / denom).collect();
    Ok(FiniteDist { labels, mass })
}

/// KL divergence and total variation between two distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergences {
    pub kl: Nats,
    pub tv: f64,
}

/// `KL(p || q)` and `TV(p, q)`, matching outcomes by label.
pub fn divergences(p: &FiniteDist, q: &FiniteDist) -> Result<Divergences> {
    let qm = q.aligned(p.labels())?;
    let mut kl = 0.0;
    let mut tv = 0.0;
    for (&pi, &qi) in p.masses().iter().zip(&qm) {
        tv += (pi - qi).abs();
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(invalid("reference assigns zero mass where p does not; smooth it first"));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(Divergences {
        kl: kl.max(0.0),
        tv: 0.5 * tv,
    })
}

/// `KL(p || q)`.
pub fn kl(p: &FiniteDist, q: &FiniteDist) -> Result<Nats> {
    divergences(p, q).map(|d| d.kl)
}

/// The chain `mean |q_k - q_bar| <= mean TV(S_k, S_bar) <= sqrt(JSD / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JsdCertificate {
    pub dispersion: f64,
    pub tv_mid: f64,
    pub jsd_bound: f64,
    /// Generalized Jensen-Shannon divergence `mean KL(S_k || S_bar)`.
    pub jsd: Nats,
}

/// Certify dispersion of an event's mass across an ensemble.
///
/// Returns [`Error::Invariant`] if the computed chain is violated beyond
/// floating-point slack.
pub fn jsd_certificate(ensemble: &[FiniteDist], event: &[String]) -> Result<JsdCertificate> {
    if ensemble.len() < 2 {
        return Err(invalid(format!(
            "certificate needs at least 2 members, got {}",
            ensemble.len()
        )));
    }
    let center = FiniteDist::mixture(ensemble)?;
    let q_bar = center.event_mass(event);
    let k = ensemble.len() as f64;
    let mut dispersion = 0.0;
    let mut tv = 0.0;
    let mut jsd = 0.0;
    for member in ensemble {
        let d = divergences(member, &center)?;
        dispersion += (member.event_mass(event) - q_bar).abs();
        tv += d.tv;
        jsd += d.kl;
    }
    let cert = JsdCertificate {
        dispersion: dispersion / k,
        tv_mid: tv / k,
        jsd_bound: (0.5 * jsd / k).sqrt(),
        jsd: jsd / k,
    };
    const SLACK: f64 = 1e-12;
    if cert.dispersion > cert.tv_mid + SLACK || cert.tv_mid > cert.jsd_bound + SLACK {
        return Err(Error::Invariant(format!("certificate chain broken: {cert:?}")));
    }
    Ok(cert)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// `clamp(u, -B, B)`
    #[default]
    Symmetric,
    /// `min(u, B)`; its expectation never exceeds the KL it estimates.
    MinClip,
}

/// Per-permutation log-ratio increments after clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSample {
    pub increments: Vec<Nats>,
    pub clip_bound: Nats,
    pub mode: ClipMode,
}

impl BudgetSample {
    pub fn new(raw: &[Nats], clip_bound: Nats, mode: ClipMode) -> Result<Self> {
        if !(clip_bound > 0.0 && clip_bound.is_finite()) {
            return Err(invalid(format!("clip bound must be positive, got {clip_bound}")));
        }
        if raw.iter().any(|u| !u.is_finite()) {
            return Err(invalid("log-ratio increments must be finite"));
        }
        let increments = raw
            .iter()
            .map(|&u| match mode {
                ClipMode::Symmetric => u.clamp(-clip_bound, clip_bound),
                ClipMode::MinClip => u.min(clip_bound),
            })
            .collect();
        Ok(BudgetSample {
            increments,
            clip_bound,
            mode,
        })
    }

    pub fn mean(&self) -> Nats {
        if self.increments.is_empty() {
            return 0.0;
        }
        self.increments.iter().sum::<f64>() / self.increments.len() as f64
    }
}

/// Mean clipped log-ratio.
pub fn clipped_budget(raw: &[Nats], clip_bound: Nats, mode: ClipMode) -> Result<Nats> {
    if raw.is_empty() {
        return Err(invalid("no increments to average"));
    }
    Ok(BudgetSample::new(raw, clip_bound, mode)?.mean())
}

/// `E_{y~p} clip(ln p(y)/q(y))` over the full support.
pub fn expected_clipped_budget(p: &FiniteDist, q: &FiniteDist, clip_bound: Nats, mode: ClipMode) -> Result<Nats> {
    let qa = q.aligned(p.labels())?;
    let mut total = 0.0;
    for (&pm, &qm) in p.masses().iter().zip(&qa) {
        if pm == 0.0 {
            continue;
        }
        if qm <= 0.0 {
            return Err(invalid("reference mass outside the support of q; smooth q first"));
        }
        let u = BudgetSample::new(&[(pm / qm).ln()], clip_bound, mode)?.increments[0];
        total += pm * u;
    }
    Ok(total)
}

/// Renormalize two label probabilities: `p_yes / (p_yes + p_no)`.
pub fn label_renormalize(p_yes: f64, p_no: f64) -> Result<Prob> {
    if !(p_yes.is_finite() && p_no.is_finite()) || p_yes < 0.0 || p_no < 0.0 {
        return Err(invalid("label probabilities must be finite and non-negative"));
    }
    let total = p_yes + p_no;
    if total <= 0.0 {
        return Err(invalid("both label probabilities are zero; apply smoothing first"));
    }
    Prob::new(p_yes / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    fn ber(q: f64) -> FiniteDist {
        FiniteDist::bernoulli(Prob::new(q).unwrap())
    }

    #[test]
    fn smoothing_examples() {
        let d = smooth_normalize(labels(2), &[0.5, 0.5], 1e-9).unwrap();
        assert!((d.masses()[0] - 0.5).abs() < 1e-15);
        let d = smooth_normalize(labels(2), &[1.0, 0.0], 1e-9).unwrap();
        assert!((d.masses()[1] - 1e-9 / (1.0 + 2e-9)).abs() < 1e-24);
        // oracle: renormalize by hand
        let d = smooth_normalize(labels(3), &[2.0, 2.0, 0.0], 1e-9).unwrap();
        let norm = 1.0 + 3e-9;
        assert!((d.masses()[0] - (0.5 + 1e-9) / norm).abs() < 1e-16);
        assert!((d.masses()[2] - 1e-9 / norm).abs() < 1e-24);
        assert!((d.masses().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn expected_min_clip_below_kl() {
        let p = FiniteDist::new(labels(3), vec![0.7, 0.2, 0.1]).unwrap();
        let q = FiniteDist::new(labels(3), vec![0.001, 0.5, 0.499]).unwrap();
        let k = kl(&p, &q).unwrap();
        let m = expected_clipped_budget(&p, &q, 2.0, ClipMode::MinClip).unwrap();
        assert!(m < k);
        let big = expected_clipped_budget(&p, &q, 100.0, ClipMode::MinClip).unwrap();
        assert!((big - k).abs() < 1e-12);
    }

    #[test]
    fn smoothing_rejects_all_zero() {
        assert!(smooth_normalize(labels(2), &[0.0, 0.0], 1e-9).is_err());
        assert!(smooth_normalize(labels(2), &[-1.0, 2.0], 1e-9).is_err());
    }

    #[test]
    fn divergence_examples() {
        let d = divergences(&ber(0.3), &ber(0.3)).unwrap();
        assert_eq!((d.kl, d.tv), (0.0, 0.0));
        let d = divergences(&ber(0.95), &ber(0.10)).unwrap();
        assert!((d.kl - 1.994).abs() < 5e-4);
        assert!((d.tv - 0.85).abs() < 1e-12);
        let a = divergences(&ber(1.0 - 1e-2), &ber(1e-2)).unwrap().kl;
        let b = divergences(&ber(1.0 - 1e-4), &ber(1e-4)).unwrap().kl;
        // leading term (1 - 2d) ln((1-d)/d)
        assert!((a - 0.98 * (99f64).ln()).abs() < 1e-9);
        assert!((b - 0.9998 * (9999f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn divergences_match_by_label_not_index() {
        let p = FiniteDist::new(vec!["a".into(), "b".into()], vec![0.2, 0.8]).unwrap();
        let q = FiniteDist::new(vec!["b".into(), "a".into()], vec![0.8, 0.2]).unwrap();
        assert_eq!(divergences(&p, &q).unwrap().kl, 0.0);
        let r = FiniteDist::new(vec!["a".into(), "c".into()], vec![0.2, 0.8]).unwrap();
        assert!(matches!(divergences(&p, &r), Err(Error::SupportMismatch(_))));
    }

    #[test]
    fn certificate_examples() {
        let same = vec![ber(0.4), ber(0.4), ber(0.4)];
        let c = jsd_certificate(&same, &["1".into()]).unwrap();
        assert!(c.dispersion < 1e-15 && c.tv_mid < 1e-15 && c.jsd_bound < 1e-15);

        let c = jsd_certificate(&[ber(0.2), ber(0.8)], &["1".into()]).unwrap();
        assert!((c.dispersion - 0.3).abs() < 1e-15);
        assert!((c.tv_mid - 0.3).abs() < 1e-15);
        // two-point JSD: ln 2 minus mean binary entropy
        let h = -(0.2f64 * 0.2f64.ln() + 0.8 * 0.8f64.ln());
        let jsd = 2f64.ln() - h;
        assert!((c.jsd - jsd).abs() < 1e-15);
        assert!((c.jsd_bound - (0.5 * jsd).sqrt()).abs() < 1e-15);

        assert!(jsd_certificate(&[ber(0.2)], &["1".into()]).is_err());
        assert!(jsd_certificate(&[], &["1".into()]).is_err());
    }

    #[test]
    fn clipping_examples() {
        let s = ClipMode::Symmetric;
        assert_eq!(clipped_budget(&[0.5, 7.0], 6.0, s).unwrap(), 3.25);
        assert_eq!(clipped_budget(&[-8.0, 2.0], 6.0, s).unwrap(), -2.0);
        assert_eq!(clipped_budget(&[-8.0, 2.0], 6.0, ClipMode::MinClip).unwrap(), -3.0);
        assert!(clipped_budget(&[f64::NAN], 6.0, s).is_err());
        assert!(clipped_budget(&[1.0], 0.0, s).is_err());
        assert!(clipped_budget(&[], 6.0, s).is_err());
    }

    #[test]
    fn budget_sample_respects_bounds() {
        let raw = [-9.0, -3.0, 0.0, 4.0, 12.0];
        let sym = BudgetSample::new(&raw, 4.0, ClipMode::Symmetric).unwrap();
        assert!(sym.increments.iter().all(|u| (-4.0..=4.0).contains(u)));
        let min = BudgetSample::new(&raw, 4.0, ClipMode::MinClip).unwrap();
        assert!(min.increments.iter().all(|u| *u <= 4.0));
        assert_eq!(min.increments[0], -9.0);
    }

    #[test]
    fn renormalize_examples() {
        assert!((label_renormalize(0.3, 0.1).unwrap().get() - 0.75).abs() < 1e-15);
        assert_eq!(label_renormalize(0.2, 0.2).unwrap().get(), 0.5);
        for s in [1e-6, 0.3, 1.0, 17.0] {
            assert!((label_renormalize(0.9 * s, 0.1 * s).unwrap().get() - 0.9).abs() < 1e-15);
        }
        assert!(label_renormalize(0.0, 0.0).unwrap_err().to_string().contains("smoothing"));
    }
}
