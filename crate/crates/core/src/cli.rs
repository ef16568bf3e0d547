//! The `ordergate` command line.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{
    classify_growth, fit_log_dispersion, jensen_gap, mixture_ce_report, qmv_study, DispersionRecord,
    QmvStudyConfig,
};
use crate::backend::{
    RecordingBackend, RemoteBackend, ReplayBackend, ScoreBackend, ScoreFile, ScoreRecord, SyntheticBackend,
};
use crate::config::{BackendKind, RunConfig};
use crate::dist::{jsd_certificate, FiniteDist};
use crate::dose::{coverage_trials, dose_arms, estimate_2sls, estimate_ols, synth_generate};
use crate::error::{invalid, Error, Result};
use crate::gate::{batch_audit, sweep, AuditReport, GateItem, SWEEP_B, SWEEP_M};
use crate::info::{plan, Decision, DecisionMode, Prob};
use crate::report::{config_hash, read_jsonl, write_jsonl, write_table, RunHeader};
use crate::synth::{ModelFamily, ModelSpec, PotentialSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;
/// Finished, but some items had fewer distinct permutations than requested.
pub const EXIT_SHORTFALL: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "ordergate", version, about = "Information budgets and permutation-mixture gating")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed for permutations, model draws and bootstraps.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Planner numbers from literal summary statistics.
    Plan(PlanArgs),
    /// Gate every item against a backend.
    Gate(GateArgs),
    /// Gate a labeled batch and report rates with intervals.
    Audit(AuditArgs),
    /// Monte-Carlo dispersion of random first-order models versus the bound.
    Dispersion(DispersionArgs),
    /// Per-item Jensen gaps from a score file.
    Jensen(ScoreArgs),
    /// Optimized permutation mixtures from a score file.
    Mixture(ScoreArgs),
    /// Planted dose-response data and causal estimates.
    Dose(DoseArgs),
    /// Regress dispersion on ln n.
    Fit(FitArgs),
    /// JSD certificate chain per item of a score file.
    Certify(ScoreArgs),
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    q_lo: f64,
    /// Defaults to `q_lo`.
    #[arg(long)]
    q_bar: Option<f64>,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    h_star: Option<f64>,
    #[arg(long)]
    prior_floor: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<DecisionMode>,
}

#[derive(Args, Debug)]
struct BackendArgs {
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Synthetic model spec (TOML).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Score file to replay.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Remote scoring endpoint.
    #[arg(long)]
    url: Option<String>,
    /// Write every backend response to this score file.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GateFlags {
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long)]
    h_star: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    /// Clip bound in nats.
    #[arg(long = "clip", short = 'B')]
    clip: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<DecisionMode>,
    /// Start at this many permutations and escalate to `m` when needed.
    #[arg(long)]
    escalate_from: Option<usize>,
}

#[derive(Args, Debug)]
struct GateArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    gate: GateFlags,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    gate: GateFlags,
    /// JSONL of `{item_id, decision}` to align against.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also run the m x B sensitivity grid.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args, Debug)]
struct DispersionArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "C", alias = "c")]
    c: Option<f64>,
    /// `lo..hi` (doubling from lo, ending at hi) or a comma list.
    #[arg(long, value_parser = grid_arg)]
    n: Option<Grid>,
    #[arg(long)]
    models: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Item file supplying gold labels (otherwise the identity-order argmax).
    #[arg(long)]
    items: Option<PathBuf>,
    /// Labels forming the event, comma separated.
    #[arg(long, value_delimiter = ',')]
    positive: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct DoseArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    response_slope: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Dispersion records (JSONL).
    #[arg(long, conflicts_with = "scores")]
    records: Option<PathBuf>,
    /// Build records from a score file instead.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    resamples: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<DecisionMode, String> {
    match s {
        "binary" => Ok(DecisionMode::Binary),
        "graduated" => Ok(DecisionMode::Graduated),
        _ => Err(format!("expected binary or graduated, got {s:?}")),
    }
}

#[derive(Debug, Clone)]
struct Grid(Vec<usize>);

fn grid_arg(s: &str) -> std::result::Result<Grid, String> {
    parse_grid(s).map(Grid)
}

/// `"4..60"` gives 4, 8, 16, 32, 60; `"8,16,32"` is taken literally.
pub fn parse_grid(s: &str) -> std::result::Result<Vec<usize>, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let grid = if let Some((lo, hi)) = s.split_once("..") {
        let (lo, hi) = (num(lo)?, num(hi)?);
        if lo == 0 || lo > hi {
            return Err(format!("bad range {s:?}"));
        }
        let mut v = Vec::new();
        let mut n = lo;
        while n < hi {
            v.push(n);
            n *= 2;
        }
        v.push(hi);
        v
    } else {
        s.split(',').map(num).collect::<std::result::Result<_, _>>()?
    };
    if grid.is_empty() || grid.contains(&0) {
        return Err(format!("bad grid {s:?}"));
    }
    Ok(grid)
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn execute<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Backend(_) => EXIT_BACKEND,
        Error::Invariant(_) => EXIT_INVARIANT,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Plan(a) => cmd_plan(cfg, a, cli.config.is_some()),
        Command::Gate(a) => {
            apply_backend(&mut cfg, &a.backend);
            apply_gate(&mut cfg, &a.gate);
            cfg.sweep = false;
            cmd_gate(cfg, "gate", None)
        }
        Command::Audit(a) => {
            apply_backend(&mut cfg, &a.backend);
            apply_gate(&mut cfg, &a.gate);
            if a.trace.is_some() {
                cfg.inputs.trace = a.trace;
            }
            cfg.sweep |= a.sweep;
            let trace = cfg.inputs.trace.clone();
            cmd_gate(cfg, "audit", trace)
        }
        Command::Dispersion(a) => {
            let d = &mut cfg.dispersion;
            set(&mut d.alpha, a.alpha);
            set(&mut d.c, a.c);
            set(&mut d.ns, a.n.map(|g| g.0));
            set(&mut d.models_per_n, a.models);
            set(&mut d.draws, a.draws);
            cmd_dispersion(cfg)
        }
        Command::Jensen(a) => {
            apply_scores(&mut cfg, a);
            cmd_jensen(cfg)
        }
        Command::Mixture(a) => {
            apply_scores(&mut cfg, a);
            cmd_mixture(cfg)
        }
        Command::Certify(a) => {
            apply_scores(&mut cfg, a);
            cmd_certify(cfg)
        }
        Command::Dose(a) => {
            set(&mut cfg.dose.count, a.count);
            set(&mut cfg.dose.trials, a.trials);
            set(&mut cfg.dose.params.noise_sd, a.noise_sd);
            set(&mut cfg.dose.params.response_slope, a.response_slope);
            cmd_dose(cfg)
        }
        Command::Fit(a) => {
            if a.records.is_some() {
                cfg.inputs.records = a.records;
            }
            if a.scores.is_some() {
                cfg.inputs.scores = a.scores;
                cfg.inputs.records = None;
            }
            set(&mut cfg.dispersion.resamples, a.resamples);
            cmd_fit(cfg)
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_backend(cfg: &mut RunConfig, a: &BackendArgs) {
    let b = &mut cfg.backend;
    if let Some(k) = a.backend {
        b.kind = k;
    } else if a.replay.is_some() {
        b.kind = BackendKind::Replay;
    } else if a.url.is_some() {
        b.kind = BackendKind::Remote;
    }
    if a.model.is_some() {
        b.model = a.model.clone();
    }
    if a.replay.is_some() {
        b.scores = a.replay.clone();
    }
    if let Some(u) = &a.url {
        b.remote.url = u.clone();
    }
    if a.record.is_some() {
        b.record = a.record.clone();
    }
}

fn apply_gate(cfg: &mut RunConfig, a: &GateFlags) {
    if a.items.is_some() {
        cfg.inputs.items = a.items.clone();
    }
    let g = &mut cfg.gate;
    set(&mut g.h_star, a.h_star);
    set(&mut g.m, a.m);
    set(&mut g.clip_bound, a.clip);
    set(&mut g.mode, a.mode);
    if a.escalate_from.is_some() {
        g.escalate_from = a.escalate_from;
    }
}

fn apply_scores(cfg: &mut RunConfig, a: ScoreArgs) {
    if a.scores.is_some() {
        cfg.inputs.scores = a.scores;
    }
    if a.items.is_some() {
        cfg.inputs.items = a.items;
    }
    set(&mut cfg.positive, a.positive);
}

/// Run context: hashed effective configuration and output directory.
struct Ctx {
    cfg: RunConfig,
    hash: String,
    kind: &'static str,
}

impl Ctx {
    fn new(kind: &'static str, cfg: RunConfig) -> Result<Self> {
        #[derive(Serialize)]
        struct Stamp<'a> {
            command: &'a str,
            config: &'a RunConfig,
        }
        let mut stamped = cfg.clone();
        stamped.out = PathBuf::new();
        let hash = config_hash(&Stamp {
            command: kind,
            config: &stamped,
        })?;
        fs::create_dir_all(&cfg.out)?;
        fs::write(cfg.out.join("config.toml"), cfg.to_toml()?)?;
        Ok(Ctx { cfg, hash, kind })
    }

    fn header(&self) -> RunHeader {
        RunHeader::new(self.kind, &self.hash, vec![self.cfg.seed])
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn jsonl<T: Serialize>(&self, name: &str, records: &[T]) -> Result<()> {
        write_jsonl(&self.path(name), &self.header(), records)
    }

    fn table(&self, name: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
        write_table(&self.path(name), &self.header(), columns, rows)
    }

    /// Write `summary.txt` and echo it to stdout.
    fn summary(&self, body: &str) -> Result<()> {
        let h = self.header();
        let text = format!(
            "# schema={} kind={} config_hash={} seeds={:?}\n{body}",
            h.schema, h.kind, h.config_hash, h.seeds
        );
        fs::write(self.path("summary.txt"), &text)?;
        print!("{text}");
        Ok(())
    }
}

fn cmd_plan(mut cfg: RunConfig, a: PlanArgs, from_file: bool) -> Result<i32> {
    set(&mut cfg.gate.h_star, a.h_star);
    set(&mut cfg.gate.prior_floor, a.prior_floor);
    set(&mut cfg.gate.mode, a.mode);
    let g = &cfg.gate;
    let q_lo = Prob::new(a.q_lo)?;
    let q_bar = Prob::new(a.q_bar.unwrap_or(a.q_lo))?;
    let p = plan(q_bar, q_lo, a.delta, Prob::new(g.h_star)?, g.prior_floor, g.thresholds, g.mode)?;
    let isr = if p.isr.is_finite() { format!("{:.3}", p.isr) } else { "inf".into() };
    println!(
        "q_bar={:.3} q_lo={:.3} delta={:.3} B2T={:.3} RoH={:.3} ISR={isr} decision={}",
        q_bar.get(),
        q_lo.get(),
        p.delta_bar,
        p.b2t,
        p.roh.get(),
        p.decision
    );
    println!("{}", serde_json::to_string(&p)?);
    let explicit_out = from_file || cfg.out != RunConfig::default().out;
    if explicit_out {
        let ctx = Ctx::new("plan", cfg)?;
        ctx.jsonl("plan.jsonl", std::slice::from_ref(&p))?;
    }
    Ok(EXIT_OK)
}

fn make_backend(cfg: &RunConfig) -> Result<Box<dyn ScoreBackend>> {
    let b = &cfg.backend;
    Ok(match b.kind {
        BackendKind::Synthetic => {
            let spec = match (&b.model, &b.synthetic) {
                (Some(path), _) => {
                    let text = fs::read_to_string(path)?;
                    toml::from_str::<ModelSpec>(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
                }
                (None, Some(spec)) => spec.clone(),
                (None, None) => return Err(invalid("synthetic backend needs a model spec (--model)")),
            };
            PotentialSpec::new(spec.alpha, spec.c, spec.sign)?;
            Box::new(SyntheticBackend::with_fallback(spec))
        }
        BackendKind::Replay => {
            let path = b.scores.as_ref().ok_or_else(|| invalid("replay backend needs a score file (--replay)"))?;
            Box::new(ReplayBackend::open(path)?)
        }
        BackendKind::Remote => Box::new(RemoteBackend::new(b.remote.clone())?),
    })
}

fn load_items(cfg: &RunConfig) -> Result<Vec<GateItem>> {
    let path = cfg.inputs.items.as_ref().ok_or_else(|| invalid("no item file (--items)"))?;
    let (_, items): (_, Vec<GateItem>) = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for it in &items {
        if !seen.insert(it.item_id.as_str()) {
            return Err(invalid(format!("duplicate item id {:?}", it.item_id)));
        }
    }
    Ok(items)
}

fn load_trace(path: &Path) -> Result<HashMap<String, Decision>> {
    #[derive(serde::Deserialize)]
    struct Line {
        item_id: String,
        decision: Decision,
    }
    let (_, lines): (_, Vec<Line>) = read_jsonl(path)?;
    Ok(lines.into_iter().map(|l| (l.item_id, l.decision)).collect())
}

fn rate_line(name: &str, r: &crate::stats::Rate) -> String {
    format!(
        "{name:<14} {:>6.1}%  [{:.1}%, {:.1}%]  ({}/{})\n",
        100.0 * r.rate,
        100.0 * r.ci_low,
        100.0 * r.ci_high,
        r.successes,
        r.trials
    )
}

fn cmd_gate(mut cfg: RunConfig, kind: &'static str, trace: Option<PathBuf>) -> Result<i32> {
    cfg.gate.seed = cfg.seed;
    cfg.gate.validate()?;
    let items = load_items(&cfg)?;
    let trace = trace.as_deref().map(load_trace).transpose()?;
    let ctx = Ctx::new(kind, cfg)?;
    let cfg = &ctx.cfg;
    let inner = make_backend(cfg)?;
    let recorder = RecordingBackend::new(inner);
    let report: AuditReport = batch_audit(&recorder, &items, &cfg.gate, trace.as_ref())?;

    ctx.jsonl("outcomes.jsonl", &report.outcomes)?;
    ctx.jsonl("failures.jsonl", &report.failures)?;
    let rows: Vec<Vec<String>> = report
        .outcomes
        .iter()
        .map(|o| {
            vec![
                o.item_id.clone(),
                o.n_chunks.to_string(),
                o.permutations.len().to_string(),
                format!("{}", o.plan.q_bar.get()),
                format!("{}", o.plan.q_lo.get()),
                format!("{}", o.plan.delta_bar),
                format!("{}", o.plan.b2t),
                if o.plan.isr.is_finite() { format!("{}", o.plan.isr) } else { "inf".into() },
                o.decision().to_string(),
            ]
        })
        .collect();
    ctx.table(
        "isr.csv",
        &["item_id", "n", "m", "q_bar", "q_lo", "delta_bar", "b2t", "isr", "decision"],
        &rows,
    )?;

    let s = &report.summary;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "items {}  gated {}  failed {}  missing labels {}  shortfalls {}  escalations {}",
        s.items, s.gated, s.failed, s.missing_labels, s.shortfalls, s.escalations
    );
    let mut counts = [0usize; 3];
    for o in &report.outcomes {
        counts[o.decision() as usize] += 1;
    }
    let _ = writeln!(text, "answer {}  hedge {}  refuse {}", counts[0], counts[1], counts[2]);
    let _ = writeln!(text, "mean delta_bar {:.4} nats", s.mean_delta);
    text.push_str(&rate_line("abstention", &s.abstention));
    text.push_str(&rate_line("hallucination", &s.hallucination));
    text.push_str(&rate_line("accuracy", &s.accuracy));
    text.push_str(&rate_line("alignment", &s.alignment));

    if cfg.sweep {
        let rows = sweep(&recorder, &items, &cfg.gate, &SWEEP_M, &SWEEP_B, trace.as_ref())?;
        ctx.jsonl("sweep.jsonl", &rows)?;
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.m.to_string(),
                    r.clip_bound.to_string(),
                    r.summary.abstention.rate.to_string(),
                    r.summary.hallucination.rate.to_string(),
                    r.summary.alignment.rate.to_string(),
                    r.summary.mean_delta.to_string(),
                ]
            })
            .collect();
        ctx.table("sweep.csv", &["m", "B", "abstention", "hallucination", "alignment", "mean_delta"], &table)?;
        text.push_str("sweep written to sweep.csv\n");
    }
    for f in &report.failures {
        let _ = writeln!(text, "failed {}: {}", f.item_id, f.error);
    }
    ctx.summary(&text)?;
    if let Some(path) = &cfg.backend.record {
        recorder.score_file(&ctx.hash, vec![cfg.seed]).write(path)?;
    }

    Ok(if report.failures.iter().any(|f| f.backend) {
        EXIT_BACKEND
    } else if !report.failures.is_empty() {
        EXIT_DATA
    } else if s.shortfalls > 0 {
        EXIT_SHORTFALL
    } else {
        EXIT_OK
    })
}

fn cmd_dispersion(cfg: RunConfig) -> Result<i32> {
    let d = &cfg.dispersion;
    let study_cfg = QmvStudyConfig {
        ns: d.ns.clone(),
        models_per_n: d.models_per_n,
        draws: d.draws,
        seed: cfg.seed,
        family: ModelFamily {
            support_min: d.support_min,
            support_max: d.support_max,
            a_range: d.a_range,
            potential: PotentialSpec::new(d.alpha, d.c, d.sign)?,
        },
        resamples: d.resamples,
    };
    let ctx = Ctx::new("dispersion", cfg)?;
    let study = qmv_study(&study_cfg)?;
    ctx.jsonl("dispersion.jsonl", &study.rows)?;
    ctx.jsonl("records.jsonl", &study.records)?;
    let rows: Vec<Vec<String>> = study
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.model.to_string(),
                r.dispersion.to_string(),
                r.std_error.to_string(),
                r.bound.to_string(),
                r.exact_bound.to_string(),
            ]
        })
        .collect();
    ctx.table(
        "dispersion.csv",
        &["n", "model", "dispersion", "std_error", "bound", "exact_bound"],
        &rows,
    )?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:>6} {:>12} {:>10} {:>12} {:>12}",
        "n", "mean disp", "max disp", "bound", "exact bound"
    );
    let mut means = Vec::new();
    for &n in &study_cfg.ns {
        let at: Vec<_> = study.rows.iter().filter(|r| r.n == n).collect();
        let mean = at.iter().map(|r| r.dispersion).sum::<f64>() / at.len() as f64;
        let max = at.iter().map(|r| r.dispersion).fold(0.0, f64::max);
        means.push(mean);
        let _ = writeln!(
            text,
            "{n:>6} {mean:>12.5} {max:>10.5} {:>12.5} {:>12.5}",
            at[0].bound, at[0].exact_bound
        );
    }
    let f = &study.fit;
    let _ = writeln!(
        text,
        "fit: dispersion = {:.5} + {:.5} ln n  (R2 {:.3}, slope 95% CI [{:.5}, {:.5}])",
        f.intercept, f.slope, f.r2, f.ci_low, f.ci_high
    );
    if study_cfg.ns.len() >= 3 && means.iter().all(|m| *m > 0.0) {
        let g = classify_growth(&study_cfg.ns, &means)?;
        let _ = writeln!(text, "growth: exponent {:.3}, class {:?}", g.exponent, g.class);
    }
    let _ = writeln!(
        text,
        "violations: {} of the large-n bound, {} of the exact bound",
        study.violations, study.exact_violations
    );
    ctx.summary(&text)?;
    if study.exact_violations > 0 {
        return Err(Error::Invariant(format!(
            "{} models exceed the exact dispersion bound",
            study.exact_violations
        )));
    }
    Ok(EXIT_OK)
}

/// Score-file view of one item.
struct ItemScores<'a> {
    item_id: &'a str,
    n: usize,
    label: String,
    /// Permuted draws, or every record when the file has none.
    draws: Vec<(&'a ScoreRecord, FiniteDist)>,
}

fn item_scores<'a>(file: &'a ScoreFile, gold: &HashMap<String, String>) -> Result<Vec<ItemScores<'a>>> {
    let mut out = Vec::new();
    for (id, recs) in file.by_item() {
        let mut dists = Vec::with_capacity(recs.len());
        for r in &recs {
            dists.push((*r, r.response.distribution()?));
        }
        let label = match gold.get(id) {
            Some(g) => g.clone(),
            None => {
                let reference = dists
                    .iter()
                    .find(|(r, _)| r.perm_index == 0)
                    .unwrap_or(&dists[0]);
                reference.1.argmax().to_string()
            }
        };
        let permuted: Vec<_> = dists.iter().filter(|(r, _)| r.perm_index > 0).cloned().collect();
        let draws = if permuted.is_empty() { dists } else { permuted };
        out.push(ItemScores {
            item_id: id,
            n: recs[0].chunks.len(),
            label,
            draws,
        });
    }
    Ok(out)
}

fn load_scores(cfg: &RunConfig) -> Result<(ScoreFile, HashMap<String, String>)> {
    let path = cfg.inputs.scores.as_ref().ok_or_else(|| invalid("no score file (--scores)"))?;
    let file = ScoreFile::read(path)?;
    let gold = match &cfg.inputs.items {
        Some(_) => load_items(cfg)?
            .into_iter()
            .filter_map(|it| it.gold.map(|g| (it.item_id, g)))
            .collect(),
        None => HashMap::new(),
    };
    Ok((file, gold))
}

fn label_scores(it: &ItemScores<'_>) -> Result<Vec<f64>> {
    it.draws
        .iter()
        .map(|(_, d)| {
            d.mass_of(&it.label)
                .ok_or_else(|| invalid(format!("item {:?} has no label {:?}", it.item_id, it.label)))
        })
        .collect()
}

fn cmd_jensen(cfg: RunConfig) -> Result<i32> {
    let (file, gold) = load_scores(&cfg)?;
    let ctx = Ctx::new("jensen", cfg)?;
    #[derive(Serialize)]
    struct Row<'a> {
        item_id: &'a str,
        n: usize,
        label: &'a str,
        permutations: usize,
        gap: f64,
    }
    let items = item_scores(&file, &gold)?;
    let mut rows = Vec::new();
    for it in &items {
        rows.push(Row {
            item_id: it.item_id,
            n: it.n,
            label: &it.label,
            permutations: it.draws.len(),
            gap: jensen_gap(&label_scores(it)?, 1)?,
        });
    }
    ctx.jsonl("jensen.jsonl", &rows)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.item_id.to_string(), r.n.to_string(), r.gap.to_string()])
        .collect();
    ctx.table("jensen.csv", &["item_id", "n", "gap"], &table)?;
    let mean = rows.iter().map(|r| r.gap).sum::<f64>() / rows.len().max(1) as f64;
    let positive = rows.iter().filter(|r| r.gap > 0.0).count();
    ctx.summary(&format!(
        "items {}  mean Jensen gap {:.6} nats/token  strictly positive {}\n",
        rows.len(),
        mean,
        positive
    ))?;
    Ok(EXIT_OK)
}

fn cmd_mixture(cfg: RunConfig) -> Result<i32> {
    let (file, gold) = load_scores(&cfg)?;
    let opts = cfg.mixture;
    let ctx = Ctx::new("mixture", cfg)?;
    let items = item_scores(&file, &gold)?;
    let mut matrix = Vec::new();
    let mut groups = Vec::new();
    for it in &items {
        matrix.push(label_scores(it)?);
        groups.push(it.n);
    }
    let r = mixture_ce_report(&matrix, &groups, &opts)?;
    ctx.jsonl("mixture.jsonl", std::slice::from_ref(&r))?;
    let rows: Vec<Vec<String>> = r
        .weights
        .groups
        .iter()
        .flat_map(|(n, w)| {
            w.iter()
                .enumerate()
                .map(move |(k, v)| vec![n.to_string(), (k + 1).to_string(), v.to_string()])
        })
        .collect();
    ctx.table("weights.csv", &["n", "perm_index", "weight"], &rows)?;
    ctx.summary(&format!(
        "items {}\nuniform mixture CE   {:.6}\noptimized mixture CE {:.6}\nimprovement          {:.6}\nmean single CE       {:.6}\noracle single CE     {:.6}\n",
        r.items, r.uniform_ce, r.optimized_ce, r.improvement, r.mean_single_ce, r.oracle_single_ce
    ))?;
    Ok(EXIT_OK)
}

fn cmd_certify(cfg: RunConfig) -> Result<i32> {
    let (file, gold) = load_scores(&cfg)?;
    let event = cfg.positive.clone();
    let ctx = Ctx::new("certify", cfg)?;
    #[derive(Serialize)]
    struct Row<'a> {
        item_id: &'a str,
        n: usize,
        #[serde(flatten)]
        cert: crate::dist::JsdCertificate,
    }
    let items = item_scores(&file, &gold)?;
    let mut rows = Vec::new();
    let mut broken = Vec::new();
    for it in &items {
        let ens: Vec<FiniteDist> = it.draws.iter().map(|(_, d)| d.clone()).collect();
        if ens.len() < 2 {
            continue;
        }
        match jsd_certificate(&ens, &event) {
            Ok(cert) => rows.push(Row {
                item_id: it.item_id,
                n: it.n,
                cert,
            }),
            Err(Error::Invariant(m)) => broken.push(format!("{}: {m}", it.item_id)),
            Err(e) => return Err(e),
        }
    }
    ctx.jsonl("certificates.jsonl", &rows)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.item_id.to_string(),
                r.cert.dispersion.to_string(),
                r.cert.tv_mid.to_string(),
                r.cert.jsd_bound.to_string(),
            ]
        })
        .collect();
    ctx.table("certificates.csv", &["item_id", "dispersion", "tv_mid", "jsd_bound"], &table)?;
    let mut text = format!("items certified {}  violations {}\n", rows.len(), broken.len());
    for b in &broken {
        let _ = writeln!(text, "violation {b}");
    }
    ctx.summary(&text)?;
    Ok(if broken.is_empty() { EXIT_OK } else { EXIT_INVARIANT })
}

fn cmd_dose(cfg: RunConfig) -> Result<i32> {
    let d = cfg.dose.clone();
    let seed = cfg.seed;
    let ctx = Ctx::new("dose", cfg)?;
    let items = synth_generate(&d.params, d.count, seed)?;
    let ols = estimate_ols(&items)?;
    let iv = estimate_2sls(&items)?;
    ctx.jsonl("dose_items.jsonl", &items)?;
    ctx.jsonl("estimates.jsonl", &[&ols, &iv])?;
    let arms = dose_arms(&items);
    let rows: Vec<Vec<String>> = arms
        .iter()
        .map(|a| {
            vec![
                a.dose.to_string(),
                a.items.to_string(),
                a.mean_delta.to_string(),
                a.answer_rate.to_string(),
                a.accuracy.to_string(),
                a.hallucination_rate.to_string(),
            ]
        })
        .collect();
    ctx.table("arms.csv", &["dose", "items", "mean_delta", "answer_rate", "accuracy", "hallucination"], &rows)?;

    let mut text = String::new();
    for e in [&ols, &iv] {
        let _ = writeln!(
            text,
            "{:<12} slope {:+.4} per nat  se {:.4}  95% CI [{:+.4}, {:+.4}]",
            format!("{:?}", e.method),
            e.slope,
            e.stderr,
            e.ci_low,
            e.ci_high
        );
    }
    let _ = writeln!(
        text,
        "first stage {:.4} nats/dose (se {:.4}, F {:.1}{})  spearman {:.3}",
        ols.first_stage_slope,
        ols.first_stage_stderr,
        ols.first_stage_f,
        if ols.weak_instrument { ", weak" } else { "" },
        ols.spearman_rho
    );
    if d.trials > 1 {
        let cov = coverage_trials(&d.params, d.count, d.trials, seed)?;
        let trows: Vec<Vec<String>> = cov
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.trial.to_string(),
                    r.seed.to_string(),
                    r.ols.slope.to_string(),
                    r.ols.ci_low.to_string(),
                    r.ols.ci_high.to_string(),
                    r.tsls.slope.to_string(),
                    r.tsls.ci_low.to_string(),
                    r.tsls.ci_high.to_string(),
                ]
            })
            .collect();
        ctx.table(
            "trials.csv",
            &["trial", "seed", "ols_slope", "ols_low", "ols_high", "iv_slope", "iv_low", "iv_high"],
            &trows,
        )?;
        let _ = writeln!(
            text,
            "coverage over {} trials: OLS {:.1}%  2SLS {:.1}%  (planted {:+.3})",
            cov.trials,
            100.0 * cov.ols_coverage,
            100.0 * cov.tsls_coverage,
            cov.planted_slope
        );
    }
    ctx.summary(&text)?;
    Ok(EXIT_OK)
}

fn cmd_fit(cfg: RunConfig) -> Result<i32> {
    let records: Vec<DispersionRecord> = match (&cfg.inputs.records, &cfg.inputs.scores) {
        (Some(p), _) => read_jsonl(p)?.1,
        (None, Some(_)) => {
            let (file, gold) = load_scores(&cfg)?;
            item_scores(&file, &gold)?
                .iter()
                .filter(|it| it.draws.len() >= 2)
                .map(|it| {
                    let q: Vec<f64> = it.draws.iter().map(|(_, d)| d.event_mass(&cfg.positive)).collect();
                    DispersionRecord::from_scores(it.item_id, it.n, q)
                })
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(invalid("fit needs --records or --scores")),
    };
    let resamples = cfg.dispersion.resamples;
    let seed = cfg.seed;
    let ctx = Ctx::new("fit", cfg)?;
    let fit = fit_log_dispersion(&records, resamples, seed)?;
    ctx.jsonl("fit.jsonl", std::slice::from_ref(&fit))?;
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| vec![r.item_id.clone(), r.n.to_string(), (r.n as f64).ln().to_string(), r.mean_abs_residual.to_string()])
        .collect();
    ctx.table("fit_points.csv", &["item_id", "n", "ln_n", "mean_abs_residual"], &rows)?;
    ctx.summary(&format!(
        "points {}\ndispersion = {:.5} + {:.5} ln n\nR2 {:.4}\nslope 95% CI [{:.5}, {:.5}] ({} resamples, seed {})\n",
        fit.n_points, fit.intercept, fit.slope, fit.r2, fit.ci_low, fit.ci_high, fit.resamples, fit.bootstrap_seed
    ))?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("4..60").unwrap(), vec![4, 8, 16, 32, 60]);
        assert_eq!(parse_grid("8..8").unwrap(), vec![8]);
        assert_eq!(parse_grid("3, 5,9").unwrap(), vec![3, 5, 9]);
        assert!(parse_grid("0..4").is_err());
        assert!(parse_grid("9..4").is_err());
        assert!(parse_grid("a").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(execute(["ordergate", "frobnicate"]), EXIT_USAGE);
        assert_eq!(execute(["ordergate", "plan", "--q-lo", "0.1"]), EXIT_USAGE);
        assert_eq!(execute(["ordergate", "--help"]), EXIT_OK);
    }

    #[test]
    fn plan_runs_without_output_dir() {
        assert_eq!(
            execute(["ordergate", "plan", "--q-lo", "0.10", "--h-star", "0.05", "--delta", "2.0"]),
            EXIT_OK
        );
        assert_eq!(execute(["ordergate", "plan", "--q-lo", "1.5", "--delta", "2.0"]), EXIT_DATA);
    }
}
