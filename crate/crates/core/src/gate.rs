//! The permutation-mixture gate: score an item under several chunk orders,
//! estimate the information budget, and decide whether to answer.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{ScoreBackend, ScoreRequest};
use crate::dist::{clipped_budget, label_renormalize, ClipMode, FiniteDist, DEFAULT_CLIP};
use crate::error::{invalid, Error, Result};
use crate::info::{plan, Decision, DecisionMode, GatePlan, Nats, Prob, Thresholds};
use crate::permute::{draw_unique, BandedSpec, Permutation, DEFAULT_BANDS};
use crate::stats::{wilson, Rate};

/// Where the reference distribution `P` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// The prediction under the unpermuted prompt.
    #[default]
    IdentityOrder,
    /// The uniform mixture of the scored permutations.
    UniformMixture,
    /// Read from the item.
    Supplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub h_star: f64,
    pub m: usize,
    pub clip_bound: Nats,
    pub clip_mode: ClipMode,
    pub prior_floor: f64,
    pub thresholds: Thresholds,
    pub mode: DecisionMode,
    pub reference: ReferenceMode,
    pub seed: u64,
    pub k_bands: usize,
    /// Run at this many permutations first and escalate to `m` only when
    /// the item would not be answered.
    pub escalate_from: Option<usize>,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            h_star: 0.05,
            m: 6,
            clip_bound: DEFAULT_CLIP,
            clip_mode: ClipMode::Symmetric,
            prior_floor: 0.003,
            thresholds: Thresholds::default(),
            mode: DecisionMode::Binary,
            reference: ReferenceMode::IdentityOrder,
            seed: 0,
            k_bands: DEFAULT_BANDS,
            escalate_from: None,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_star > 0.0 && self.h_star <= 0.5) {
            return Err(invalid(format!("h_star must lie in (0, 0.5], got {}", self.h_star)));
        }
        if self.m == 0 {
            return Err(invalid("need at least one permutation"));
        }
        if !(self.clip_bound > 0.0 && self.clip_bound.is_finite()) {
            return Err(invalid(format!("clip bound must be positive, got {}", self.clip_bound)));
        }
        if !(self.prior_floor > 0.0 && self.prior_floor < 0.1) {
            return Err(invalid(format!("prior floor must lie in (0, 0.1), got {}", self.prior_floor)));
        }
        if self.k_bands == 0 {
            return Err(invalid("need at least one band"));
        }
        if let Some(lo) = self.escalate_from {
            if lo == 0 || lo >= self.m {
                return Err(invalid(format!("escalation needs 0 < m_low < m, got {lo} and {}", self.m)));
            }
        }
        Ok(())
    }

    fn h(&self) -> Result<Prob> {
        Prob::new(self.h_star)
    }
}

fn default_labels() -> Vec<String> {
    vec!["1".into(), "0".into()]
}

fn default_positive() -> Vec<String> {
    vec!["1".into()]
}

/// One line of an item file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateItem {
    pub item_id: String,
    #[serde(default)]
    pub question: String,
    pub chunks: Vec<String>,
    #[serde(default = "default_labels")]
    pub labels: Vec<String>,
    /// Labels that make up the gated event.
    #[serde(default = "default_positive")]
    pub positive: Vec<String>,
    #[serde(default)]
    pub gold: Option<String>,
    #[serde(default)]
    pub reference: Option<BTreeMap<String, f64>>,
}

impl GateItem {
    pub fn new(item_id: impl Into<String>, chunks: Vec<String>) -> Self {
        GateItem {
            item_id: item_id.into(),
            question: String::new(),
            chunks,
            labels: default_labels(),
            positive: default_positive(),
            gold: None,
            reference: None,
        }
    }

    fn validate(&self, cfg: &GateConfig) -> Result<()> {
        if self.chunks.is_empty() {
            return Err(invalid(format!("item {:?} has no chunks", self.item_id)));
        }
        if self.labels.len() < 2 {
            return Err(invalid(format!("item {:?} needs at least two labels", self.item_id)));
        }
        if self.positive.is_empty() || self.positive.iter().any(|p| !self.labels.contains(p)) {
            return Err(invalid(format!("item {:?}: positive labels must be a non-empty subset", self.item_id)));
        }
        if self.positive.len() == self.labels.len() {
            return Err(invalid(format!("item {:?}: the event covers every label", self.item_id)));
        }
        if cfg.reference == ReferenceMode::Supplied && self.reference.is_none() {
            return Err(invalid(format!("item {:?} has no supplied reference", self.item_id)));
        }
        Ok(())
    }

    fn supplied_reference(&self) -> Result<FiniteDist> {
        let r = self.reference.as_ref().ok_or_else(|| invalid("no supplied reference"))?;
        let mass: Vec<f64> = self
            .labels
            .iter()
            .map(|l| r.get(l).copied().ok_or_else(|| Error::SupportMismatch(format!("reference lacks label {l:?}"))))
            .collect::<Result<_>>()?;
        if r.len() != self.labels.len() {
            return Err(Error::SupportMismatch("reference has labels outside the item's set".into()));
        }
        FiniteDist::new(self.labels.clone(), mass)
    }
}

/// Everything the gate saw and decided for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub item_id: String,
    pub n_chunks: usize,
    pub canonical_label: String,
    /// `P(y)` under the reference distribution.
    pub reference_mass: f64,
    pub permutations: Vec<Permutation>,
    pub q: Vec<f64>,
    pub u: Vec<Nats>,
    pub plan: GatePlan,
    pub m_requested: usize,
    pub shortfall: bool,
    pub escalated: bool,
}

impl GateOutcome {
    /// Rebuild the plan from the recorded summary statistics.
    pub fn recompute(&self, cfg: &GateConfig) -> Result<GatePlan> {
        plan(
            self.plan.q_bar,
            self.plan.q_lo,
            self.plan.delta_bar,
            cfg.h()?,
            cfg.prior_floor,
            cfg.thresholds,
            cfg.mode,
        )
    }

    pub fn decision(&self) -> Decision {
        self.plan.decision
    }
}

/// Per-item memo of scored orders, so escalation never rescores.
struct Scorer<'a, B: ?Sized> {
    backend: &'a B,
    item: &'a GateItem,
    cache: HashMap<Permutation, FiniteDist>,
}

impl<'a, B: ScoreBackend + ?Sized> Scorer<'a, B> {
    fn new(backend: &'a B, item: &'a GateItem) -> Self {
        Scorer {
            backend,
            item,
            cache: HashMap::new(),
        }
    }

    fn score(&mut self, perm: &Permutation, perm_index: usize) -> Result<FiniteDist> {
        if let Some(d) = self.cache.get(perm) {
            return Ok(d.clone());
        }
        let req = ScoreRequest {
            item_id: self.item.item_id.clone(),
            perm_index,
            question: self.item.question.clone(),
            chunks: self.item.chunks.clone(),
            labels: self.item.labels.clone(),
            permutation: perm.clone(),
        };
        req.validate()?;
        let resp = self.backend.score(&req)?;
        let dist = FiniteDist::new(
            self.item.labels.clone(),
            resp.distribution()?.aligned(&self.item.labels)?,
        )?;
        self.cache.insert(perm.clone(), dist.clone());
        Ok(dist)
    }

    fn run(&mut self, cfg: &GateConfig, m: usize) -> Result<GateOutcome> {
        let item = self.item;
        let n = item.chunks.len();
        let identity = self.score(&Permutation::identity(n), 0)?;
        let y = identity.argmax().to_string();

        let spec = BandedSpec::new(n, cfg.k_bands, cfg.seed)?;
        let draw = draw_unique(m, &spec);
        let mut scored = Vec::with_capacity(draw.permutations.len());
        for (k, p) in draw.permutations.iter().enumerate() {
            scored.push(self.score(p, k + 1)?);
        }

        let reference = match cfg.reference {
            ReferenceMode::IdentityOrder => identity,
            ReferenceMode::UniformMixture => FiniteDist::mixture(&scored)?,
            ReferenceMode::Supplied => item.supplied_reference()?,
        };
        let p_y = reference.mass_of(&y).expect("canonical label is in the label set");
        if p_y <= 0.0 {
            return Err(invalid(format!("reference puts no mass on {y:?}; smooth it first")));
        }

        let mut q = Vec::with_capacity(scored.len());
        let mut u = Vec::with_capacity(scored.len());
        for s in &scored {
            let yes = s.event_mass(&item.positive);
            q.push(label_renormalize(yes, (1.0 - yes).max(0.0))?.get());
            u.push(p_y.ln() - s.mass_of(&y).expect("aligned").ln());
        }
        let q_bar = q.iter().sum::<f64>() / q.len() as f64;
        let q_lo = q.iter().copied().fold(f64::INFINITY, f64::min);
        let delta = clipped_budget(&u, cfg.clip_bound, cfg.clip_mode)?;
        let plan = plan(
            Prob::new(q_bar.clamp(0.0, 1.0))?,
            Prob::new(q_lo)?,
            delta,
            cfg.h()?,
            cfg.prior_floor,
            cfg.thresholds,
            cfg.mode,
        )?;
        Ok(GateOutcome {
            item_id: item.item_id.clone(),
            n_chunks: n,
            canonical_label: y,
            reference_mass: p_y,
            permutations: draw.permutations,
            q,
            u,
            plan,
            m_requested: m,
            shortfall: draw.shortfall,
            escalated: false,
        })
    }
}

/// Score `m` banded permutations of the item and decide.
///
/// The identity order is always scored (it fixes the canonical label), so a
/// run costs at most `m + 1` backend calls.
pub fn run_gate<B: ScoreBackend + ?Sized>(backend: &B, item: &GateItem, cfg: &GateConfig) -> Result<GateOutcome> {
    cfg.validate()?;
    item.validate(cfg)?;
    Scorer::new(backend, item).run(cfg, cfg.m)
}

/// Run at `m_low`; if the item is not answered, rerun at `m_high` reusing
/// every score already obtained.
pub fn escalate_gate<B: ScoreBackend + ?Sized>(
    backend: &B,
    item: &GateItem,
    cfg: &GateConfig,
    m_low: usize,
    m_high: usize,
) -> Result<GateOutcome> {
    if m_low == 0 || m_low >= m_high {
        return Err(invalid(format!("escalation needs 0 < m_low < m_high, got {m_low} and {m_high}")));
    }
    cfg.validate()?;
    item.validate(cfg)?;
    let mut scorer = Scorer::new(backend, item);
    let low = scorer.run(cfg, m_low)?;
    if low.plan.isr >= cfg.thresholds.answer_at {
        return Ok(low);
    }
    let mut high = scorer.run(cfg, m_high)?;
    high.escalated = true;
    Ok(high)
}

fn gate_one<B: ScoreBackend + ?Sized>(backend: &B, item: &GateItem, cfg: &GateConfig) -> Result<GateOutcome> {
    match cfg.escalate_from {
        Some(lo) => escalate_gate(backend, item, cfg, lo, cfg.m),
        None => run_gate(backend, item, cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub error: String,
    /// The failure came from the scoring backend.
    pub backend: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub items: usize,
    pub gated: usize,
    pub failed: usize,
    /// Gated items without a gold label; excluded from every rate.
    pub missing_labels: usize,
    pub shortfalls: usize,
    pub escalations: usize,
    pub abstention: Rate,
    pub hallucination: Rate,
    pub accuracy: Rate,
    pub alignment: Rate,
    pub mean_delta: Nats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub outcomes: Vec<GateOutcome>,
    pub failures: Vec<ItemFailure>,
    pub summary: AuditSummary,
}

/// Gate every item in parallel and aggregate.
///
/// Refusals count as abstentions; answers and hedges are attempts, and an
/// attempt is correct when the canonical label equals the gold label.
/// Alignment checks whether `ISR >= answer_at` agrees with the decision in
/// `trace`, or with the gate's own decision when no trace is given.
pub fn batch_audit<B: ScoreBackend + ?Sized>(
    backend: &B,
    items: &[GateItem],
    cfg: &GateConfig,
    trace: Option<&HashMap<String, Decision>>,
) -> Result<AuditReport> {
    cfg.validate()?;
    let results: Vec<Result<GateOutcome>> = items.par_iter().map(|it| gate_one(backend, it, cfg)).collect();
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (item, r) in items.iter().zip(results) {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push(ItemFailure {
                item_id: item.item_id.clone(),
                backend: matches!(e, Error::Backend(_)),
                error: e.to_string(),
            }),
        }
    }
    let gold: HashMap<&str, &str> = items
        .iter()
        .filter_map(|it| it.gold.as_deref().map(|g| (it.item_id.as_str(), g)))
        .collect();

    let (mut labeled, mut refused, mut attempts, mut wrong) = (0, 0, 0, 0);
    let (mut aligned, mut compared) = (0, 0);
    let mut delta_sum = 0.0;
    for o in &outcomes {
        let Some(g) = gold.get(o.item_id.as_str()) else { continue };
        labeled += 1;
        delta_sum += o.plan.delta_bar;
        if o.decision() == Decision::Refuse {
            refused += 1;
        } else {
            attempts += 1;
            if o.canonical_label != *g {
                wrong += 1;
            }
        }
        let reference = match trace {
            Some(t) => t.get(&o.item_id).copied(),
            None => Some(o.decision()),
        };
        if let Some(d) = reference {
            compared += 1;
            if (o.plan.isr >= cfg.thresholds.answer_at) == d.is_answer() {
                aligned += 1;
            }
        }
    }
    let summary = AuditSummary {
        items: items.len(),
        gated: outcomes.len(),
        failed: failures.len(),
        missing_labels: outcomes.len() - labeled,
        shortfalls: outcomes.iter().filter(|o| o.shortfall).count(),
        escalations: outcomes.iter().filter(|o| o.escalated).count(),
        abstention: wilson(refused, labeled),
        hallucination: wilson(wrong, attempts),
        accuracy: wilson(attempts - wrong, attempts),
        alignment: wilson(aligned, compared),
        mean_delta: if labeled > 0 { delta_sum / labeled as f64 } else { 0.0 },
    };
    Ok(AuditReport {
        outcomes,
        failures,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub clip_bound: Nats,
    pub summary: AuditSummary,
}

pub const SWEEP_M: [usize; 3] = [3, 6, 12];
pub const SWEEP_B: [f64; 3] = [4.0, 6.0, 8.0];

/// Audit the same items over a grid of permutation counts and clip bounds.
pub fn sweep<B: ScoreBackend + ?Sized>(
    backend: &B,
    items: &[GateItem],
    base: &GateConfig,
    ms: &[usize],
    clip_bounds: &[f64],
    trace: Option<&HashMap<String, Decision>>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &m in ms {
        for &b in clip_bounds {
            let cfg = GateConfig {
                m,
                clip_bound: b,
                escalate_from: base.escalate_from.filter(|&lo| lo < m),
                ..base.clone()
            };
            let report = batch_audit(backend, items, &cfg, trace)?;
            rows.push(SweepRow {
                m,
                clip_bound: b,
                summary: report.summary,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::SyntheticBackend;
    use crate::info::kl_bernoulli;
    use crate::synth::{FirstOrderModel, PotentialSpec};

    fn item(id: &str, n: usize) -> GateItem {
        GateItem::new(id, (0..n).map(|i| format!("chunk {i}")).collect())
    }

    fn backend_with(id: &str, a: f64, w: Vec<f64>, c: f64) -> SyntheticBackend {
        let mut b = SyntheticBackend::new();
        let p = PotentialSpec::new(1.0, c, -1).unwrap();
        b.insert(id, FirstOrderModel::new(a, w, p).unwrap());
        b
    }

    #[test]
    fn zero_positional_effect_refuses() {
        let b = backend_with("x", 0.2, vec![0.25; 4], 0.0);
        let o = run_gate(&b, &item("x", 4), &GateConfig { k_bands: 2, ..GateConfig::default() }).unwrap();
        assert!(o.u.iter().all(|&u| u == 0.0));
        assert_eq!(o.plan.delta_bar, 0.0);
        assert_eq!(o.decision(), Decision::Refuse);
    }

    #[test]
    fn self_reference_has_zero_budget() {
        let b = backend_with("s", 0.4, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0.7);
        let it = item("s", 8);
        let cfg = GateConfig {
            m: 1,
            k_bands: 2,
            reference: ReferenceMode::UniformMixture,
            ..GateConfig::default()
        };
        let o = run_gate(&b, &it, &cfg).unwrap();
        assert_eq!(o.permutations.len(), 1);
        assert_eq!(o.plan.delta_bar, 0.0);
        assert_eq!(o.plan.isr, 0.0);
    }

    #[test]
    fn outcome_invariants_and_recompute() {
        let b = backend_with("r", 0.3, vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1.0);
        let cfg = GateConfig::default();
        let o = run_gate(&b, &item("r", 12), &cfg).unwrap();
        assert_eq!(o.q.len(), 6);
        let q_lo = o.q.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(o.plan.q_lo.get(), q_lo);
        assert_eq!(o.plan.delta_bar, clipped_budget(&o.u, 6.0, ClipMode::Symmetric).unwrap());
        assert_eq!(o.recompute(&cfg).unwrap(), o.plan);
    }

    #[test]
    fn escalation_short_circuits_and_reuses_scores() {
        let b = backend_with("e", 0.3, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1.0);
        let it = item("e", 12);
        let cfg = GateConfig {
            h_star: 0.5,
            ..GateConfig::default()
        };
        let rec = crate::backend::RecordingBackend::new(&b);
        let o = escalate_gate(&rec, &it, &cfg, 3, 6).unwrap();
        let calls = rec.score_file("t", vec![0]).records.len();
        if o.escalated {
            assert!(calls <= 7);
        } else {
            assert!(o.plan.isr >= 1.0);
            assert!(calls <= 4);
        }
    }

    #[test]
    fn tiny_items_have_identity_only_space() {
        let b = backend_with("t", 0.1, vec![0.5, 0.5, 0.0], 1.0);
        let it = item("t", 3);
        let cfg = GateConfig::default();
        let o = escalate_gate(&b, &it, &cfg, 3, 6).unwrap();
        assert!(o.shortfall);
        assert_eq!(o.permutations, vec![Permutation::identity(3)]);
        let low = run_gate(&b, &it, &GateConfig { m: 3, ..cfg.clone() }).unwrap();
        assert_eq!(low.plan, o.plan);
    }

    #[test]
    fn default_floor_matches_zero_prior_row() {
        let f = Prob::new(0.003).unwrap();
        let k = kl_bernoulli(Prob::new(0.95).unwrap(), f).unwrap();
        assert!((k - 5.29).abs() < 0.05, "{k}");
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig { h_star: 0.0, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { m: 0, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { prior_floor: 0.2, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { escalate_from: Some(6), ..GateConfig::default() }.validate().is_err());
        let b = SyntheticBackend::new();
        let cfg = GateConfig {
            reference: ReferenceMode::Supplied,
            ..GateConfig::default()
        };
        assert!(run_gate(&b, &item("z", 3), &cfg).is_err());
    }

    #[test]
    fn audit_counts_missing_labels_and_failures() {
        let mut b = backend_with("a", 3.0, vec![1.0, 0.0, 0.0, 0.0], 0.0);
        b.insert("b", FirstOrderModel::new(-3.0, vec![0.0, 1.0, 0.0, 0.0], PotentialSpec::new(1.0, 0.0, -1).unwrap()).unwrap());
        let mut a = item("a", 4);
        a.gold = Some("1".into());
        let bb = item("b", 4);
        let c = item("c", 4);
        let cfg = GateConfig {
            h_star: 0.5,
            ..GateConfig::default()
        };
        let r = batch_audit(&b, &[a, bb, c], &cfg, None).unwrap();
        assert_eq!(r.summary.gated, 2);
        assert_eq!(r.summary.failed, 1);
        assert!(r.failures[0].backend);
        assert_eq!(r.summary.missing_labels, 1);
        assert_eq!(r.summary.alignment.rate, 1.0);
        // q_lo = 0.95 >= 1 - h*, so B2T is 0 and the gate answers
        assert_eq!(r.summary.abstention.successes, 0);
        assert_eq!(r.summary.accuracy.successes, 1);
    }
}
