//! The `tailsens` command line.
//!
//! Every subcommand resolves a [`RunConfig`] (config file, then flags), runs,
//! prints a short summary and writes `report.json` plus any CSV tables into
//! `--out`. Without `--out` the report goes to stdout after the summary.
//!
//! Exit codes: 0 success or pass, 2 failed verdict or premise (including
//! checks that do not apply to the model), 1 usage or data errors.

use std::ffi::OsString;
use std::io::Write as _;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::conditional::{lemma1_probe, verify_proposition1, verify_proposition2, BandMode, BuiltinFamily, VerifyConfig};
use crate::divided_diff::{ConvergenceRow, ConvergenceTable, DEFAULT_M_SCHEDULE};
use crate::error::{Error, Result};
use crate::loss_models::{Continuity, LossModel, ModelSpec};
use crate::numeric::parse_list;
use crate::oracles::{self, GaussianPortfolio};
use crate::risk_measures::{self, EsMode, DEFAULT_MONOTONICITY_THRESHOLD, DEFAULT_PROBE_MS, QUANTILE_STEP};
use crate::sampling::{self, DerivKey};

#[derive(Debug, Parser)]
#[command(name = "tailsens", version, about = "Monte Carlo VaR/ES sensitivities and level-set derivative checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw samples (and derivative columns) and write them as CSV.
    Simulate(Flags),
    /// Empirical value-at-risk.
    Var(Flags),
    /// Expected shortfall, both implementations side by side.
    Es(Flags),
    /// n-th derivative of ES along one axis, with the tail monotonicity premise.
    EsDeriv(Flags),
    /// Banded estimate of the VaR gradient component.
    VarDeriv(Flags),
    /// Level-set derivative conclusions for a model used as H.
    VerifyProp1(Flags),
    /// Euler identity, symmetry and vanishing conditional gradient for degree-1 models.
    VerifyProp2(Flags),
    /// Vanishing of E[H_m 1_{A_m}] along a schedule of m.
    Lemma1Probe(Flags),
    /// Tail-average ES derivative against finite differences when the premise fails.
    DivergeCheck(Flags),
    /// Euler allocation of ES.
    Euler(Flags),
    /// Divided-difference convergence table of the quantile or of ES.
    Convergence(Flags),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Var(_) => "var",
            Command::Es(_) => "es",
            Command::EsDeriv(_) => "es-deriv",
            Command::VarDeriv(_) => "var-deriv",
            Command::VerifyProp1(_) => "verify-prop1",
            Command::VerifyProp2(_) => "verify-prop2",
            Command::Lemma1Probe(_) => "lemma1-probe",
            Command::DivergeCheck(_) => "diverge-check",
            Command::Euler(_) => "euler",
            Command::Convergence(_) => "convergence",
        }
    }

    fn flags(&self) -> &Flags {
        match self {
            Command::Simulate(f)
            | Command::Var(f)
            | Command::Es(f)
            | Command::EsDeriv(f)
            | Command::VarDeriv(f)
            | Command::VerifyProp1(f)
            | Command::VerifyProp2(f)
            | Command::Lemma1Probe(f)
            | Command::DivergeCheck(f)
            | Command::Euler(f)
            | Command::Convergence(f) => f,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct Flags {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON model document.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Weight vector, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    x: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "n-samples")]
    n_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// One-based axis.
    #[arg(long)]
    axis: Option<usize>,
    #[arg(long)]
    order: Option<u32>,
    /// Band half-widths, comma separated and strictly decreasing.
    #[arg(long)]
    bands: Option<String>,
    /// Step denominators, comma separated and strictly increasing.
    #[arg(long = "m-schedule")]
    m_schedule: Option<String>,
    /// Output directory for report.json and CSV tables.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave the generation time out of the report.
    #[arg(long = "no-timestamp")]
    no_timestamp: bool,
    /// Worker threads for sampling (results do not depend on it).
    #[arg(long)]
    workers: Option<usize>,
    /// Finite-difference step of the oracle.
    #[arg(long)]
    h: Option<f64>,
    /// lemma1-probe family: constant, unbounded, empty, fixed or fixed:<p>.
    #[arg(long)]
    family: Option<String>,
    /// Use H = L − q_alpha(x) instead of H = L.
    #[arg(long)]
    centered: bool,
    /// Symmetric bands |H| ≤ ε instead of one-sided 0 ≤ H ≤ 2ε.
    #[arg(long = "symmetric-bands")]
    symmetric_bands: bool,
    /// convergence target: quantile or es.
    #[arg(long)]
    target: Option<String>,
}

/// Either a path to a model document or the document itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Path(String),
    Inline(ModelSpec),
}

/// Run configuration as read from `--config`; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelRef>,
    pub x: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
    pub axis: Option<usize>,
    pub order: Option<u32>,
    pub bands: Option<Vec<f64>>,
    pub m_schedule: Option<Vec<u64>>,
    pub h: Option<f64>,
    pub family: Option<String>,
    pub centered: Option<bool>,
    pub symmetric_bands: Option<bool>,
    pub premise_threshold: Option<f64>,
    pub target: Option<String>,
    pub out: Option<String>,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: Some(e.line() as u64),
            message: format!("config: {e}"),
        })
    }
}

/// Fully resolved settings; this is what reports embed under `config`.
#[derive(Debug, Clone, Serialize)]
struct Resolved {
    command: String,
    model: Option<ModelSpec>,
    x: Vec<f64>,
    alpha: f64,
    n_samples: usize,
    seed: u64,
    axis: usize,
    order: u32,
    bands: Option<Vec<f64>>,
    m_schedule: Option<Vec<u64>>,
    h: Option<f64>,
    family: Option<String>,
    centered: bool,
    symmetric_bands: bool,
    premise_threshold: f64,
    target: Option<String>,
    #[serde(skip)]
    built: Option<LossModel>,
    #[serde(skip)]
    out: Option<PathBuf>,
    #[serde(skip)]
    workers: Option<usize>,
    #[serde(skip)]
    timestamp: bool,
}

fn list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| Error::arg(format!("--{flag}: cannot parse '{}'", t.trim())))
        })
        .collect()
}

fn load_model(r: &ModelRef) -> Result<(ModelSpec, LossModel)> {
    let spec = match r {
        ModelRef::Inline(s) => s.clone(),
        ModelRef::Path(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::arg(format!("--model {p}: {e}")))?;
            ModelSpec::from_json(&text).map_err(|e| match e {
                Error::Parse { line, message } => Error::Parse {
                    line,
                    message: format!("{p}: {message}"),
                },
                other => other,
            })?
        }
    };
    let model = spec.build()?;
    Ok((model.to_spec(), model))
}

fn resolve(command: &Command) -> Result<Resolved> {
    let f = command.flags();
    let mut c = match &f.config {
        Some(p) => RunConfig::from_json(
            &std::fs::read_to_string(p).map_err(|e| Error::arg(format!("--config {}: {e}", p.display())))?,
        )?,
        None => RunConfig::default(),
    };
    if let Some(p) = &f.model {
        c.model = Some(ModelRef::Path(p.display().to_string()));
    }
    if let Some(x) = &f.x {
        c.x = Some(parse_list(x).map_err(|e| Error::arg(format!("--x: {e}")))?);
    }
    macro_rules! take {
        ($($field:ident),*) => { $( if f.$field.is_some() { c.$field = f.$field.clone(); } )* };
    }
    take!(alpha, n_samples, seed, axis, order, h, family, target, workers);
    if let Some(b) = &f.bands {
        c.bands = Some(list("bands", b)?);
    }
    if let Some(m) = &f.m_schedule {
        c.m_schedule = Some(list("m-schedule", m)?);
    }
    if let Some(o) = &f.out {
        c.out = Some(o.display().to_string());
    }
    if f.centered {
        c.centered = Some(true);
    }
    if f.symmetric_bands {
        c.symmetric_bands = Some(true);
    }

    let needs_model = !matches!(command, Command::Lemma1Probe(_));
    let (spec, built) = match &c.model {
        Some(r) => {
            let (s, m) = load_model(r)?;
            (Some(s), Some(m))
        }
        None if needs_model => return Err(Error::arg("--model is required")),
        None => (None, None),
    };
    let x = match (c.x, &built) {
        (Some(x), Some(m)) if x.len() != m.dim => {
            return Err(Error::arg(format!("--x has {} entries but the model has dimension {}", x.len(), m.dim)))
        }
        (Some(x), _) => x,
        (None, Some(_)) => return Err(Error::arg("--x is required")),
        (None, None) => Vec::new(),
    };
    let alpha = c.alpha.unwrap_or(0.95);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::arg(format!("--alpha must lie in (0, 1), got {alpha}")));
    }
    let n_samples = c.n_samples.unwrap_or(100_000);
    if n_samples == 0 {
        return Err(Error::arg("--n-samples must be at least 1"));
    }
    let axis = c.axis.unwrap_or(1);
    if axis == 0 || built.as_ref().is_some_and(|m| axis > m.dim) {
        return Err(Error::arg(format!("--axis {axis} is out of range (axes are one-based)")));
    }
    let order = c.order.unwrap_or(1);
    if order == 0 {
        return Err(Error::arg("--order must be at least 1"));
    }
    if let Some(b) = &c.bands {
        if b.is_empty() || b.iter().any(|&e| !(e > 0.0 && e.is_finite())) || b.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::arg("--bands must be positive and strictly decreasing"));
        }
    }
    if let Some(h) = c.h {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::arg(format!("--h must be positive, got {h}")));
        }
    }
    Ok(Resolved {
        command: command.name().to_string(),
        model: spec,
        x,
        alpha,
        n_samples,
        seed: c.seed.unwrap_or(0),
        axis,
        order,
        bands: c.bands,
        m_schedule: c.m_schedule,
        h: c.h,
        family: c.family,
        centered: c.centered.unwrap_or(false),
        symmetric_bands: c.symmetric_bands.unwrap_or(false),
        premise_threshold: c.premise_threshold.unwrap_or(DEFAULT_MONOTONICITY_THRESHOLD),
        target: c.target,
        built,
        out: c.out.map(PathBuf::from),
        workers: c.workers,
        timestamp: !f.no_timestamp,
    })
}

/// Outcome of one subcommand before it is written out.
struct Report {
    results: Map<String, Value>,
    verdicts: Map<String, Value>,
    oracle: Option<Map<String, Value>>,
    summary: String,
    tables: Vec<(String, String)>,
    pass: bool,
}

impl Report {
    fn new() -> Self {
        Self {
            results: Map::new(),
            verdicts: Map::new(),
            oracle: None,
            summary: String::new(),
            tables: Vec::new(),
            pass: true,
        }
    }

    fn result(&mut self, key: &str, v: impl Serialize) -> Result<()> {
        self.results.insert(key.into(), serde_json::to_value(v)?);
        Ok(())
    }

    fn verdict(&mut self, key: &str, pass: bool, label: &str) {
        self.verdicts.insert(key.into(), json!(label));
        self.pass &= pass;
    }

    fn oracle(&mut self, key: &str, v: impl Serialize) -> Result<()> {
        self.oracle
            .get_or_insert_with(Map::new)
            .insert(key.into(), serde_json::to_value(v)?);
        Ok(())
    }

    fn line(&mut self, text: impl AsRef<str>) {
        self.summary.push_str(text.as_ref());
        self.summary.push('\n');
    }
}

fn model(r: &Resolved) -> &LossModel {
    r.built.as_ref().expect("model resolved")
}

fn key(r: &Resolved) -> DerivKey {
    DerivKey::new(r.axis - 1, r.order)
}

fn gaussian(r: &Resolved) -> Option<GaussianPortfolio> {
    GaussianPortfolio::from_model(model(r)).ok()
}

fn has_atoms(m: &LossModel) -> bool {
    m.continuity == Continuity::Discrete && m.law.atoms().is_some()
}

fn simulate(r: &Resolved, rep: &mut Report) -> Result<()> {
    let m = model(r);
    let keys = if m.max_order().is_some_and(|k| r.order > k) {
        Vec::new()
    } else {
        vec![key(r)]
    };
    let set = sampling::draw_with_derivs(m, &r.x, r.n_samples, r.seed, &keys)?;
    let s = set.summary();
    rep.result("count", set.len())?;
    rep.result("mean", s.mean)?;
    rep.result("variance", s.variance)?;
    rep.result("min", set.order_statistic(1))?;
    rep.result("max", set.order_statistic(set.len()))?;
    rep.result("derivative_columns", keys.iter().map(DerivKey::column_name).collect::<Vec<_>>())?;
    rep.line(format!("simulated {} samples: mean {:.6}, variance {:.6}", set.len(), s.mean, s.variance));
    if let Some(dir) = &r.out {
        set.save(dir.join("samples.csv"))?;
        rep.line(format!("samples written to {}", dir.join("samples.csv").display()));
    }
    Ok(())
}

fn var(r: &Resolved, rep: &mut Report) -> Result<()> {
    let set = sampling::draw(model(r), &r.x, r.n_samples, r.seed)?;
    let q = risk_measures::var(&set, r.alpha)?;
    rep.result("var", q)?;
    rep.line(format!("VaR_{} = {q:.6}", r.alpha));
    if let Some(p) = gaussian(r) {
        let t = oracles::gaussian_var_es(&p, &r.x, r.alpha)?;
        rep.oracle("var", t.q)?;
        rep.line(format!("oracle (closed form) = {:.6}", t.q));
    } else if has_atoms(model(r)) {
        let e = oracles::enumerate_discrete(model(r), &r.x, r.alpha, None)?;
        rep.oracle("var", e.q)?;
        rep.line(format!("oracle (enumeration) = {:.6}", e.q));
    }
    Ok(())
}

fn es(r: &Resolved, rep: &mut Report) -> Result<()> {
    let set = sampling::draw(model(r), &r.x, r.n_samples, r.seed)?;
    let t = risk_measures::es(&set, r.alpha)?;
    let integral = risk_measures::es_quantile_integral(&set, r.alpha)?;
    let agree = (t.es - integral).abs() <= 1e-12 * (1.0 + integral.abs());
    rep.line(format!(
        "ES_{} = {:.6} (se {:.2e}); VaR = {:.6}; atom = {:.3e}",
        r.alpha, t.es, t.standard_error, t.var, t.atom
    ));
    rep.line(format!("quantile-integral ES = {integral:.6}"));
    rep.result("tail_estimate", &t)?;
    rep.result("es_quantile_integral", integral)?;
    rep.verdict("es_forms_agree", agree, if agree { "pass" } else { "fail" });
    if let Some(p) = gaussian(r) {
        let o = oracles::gaussian_var_es(&p, &r.x, r.alpha)?;
        rep.oracle("var", o.q)?;
        rep.oracle("es", o.es)?;
        rep.line(format!("oracle (closed form): VaR {:.6}, ES {:.6}", o.q, o.es));
    } else if has_atoms(model(r)) {
        let e = oracles::enumerate_discrete(model(r), &r.x, r.alpha, None)?;
        rep.oracle("var", e.q)?;
        rep.oracle("es", e.es)?;
        rep.line(format!("oracle (enumeration): VaR {:.6}, ES {:.6}", e.q, e.es));
    }
    Ok(())
}

fn derivative_oracle(r: &Resolved, rep: &mut Report) -> Result<Option<f64>> {
    let i = r.axis - 1;
    let value = if let Some(p) = gaussian(r) {
        match r.order {
            1 => Some(oracles::gaussian_es_gradient(&p, &r.x, r.alpha, i)?),
            2 => Some(oracles::gaussian_es_hessian_diag(&p, &r.x, r.alpha, i)?),
            _ => None,
        }
    } else if has_atoms(model(r)) {
        oracles::enumerate_discrete(model(r), &r.x, r.alpha, Some(key(r)))?.es_derivative
    } else {
        None
    };
    if let Some(v) = value {
        rep.oracle("es_derivative", v)?;
    }
    Ok(value)
}

fn monotonicity(r: &Resolved, set: &sampling::SampleSet, rep: &mut Report) -> Result<bool> {
    let d = risk_measures::tail_monotonicity_diagnostic(
        model(r),
        r.alpha,
        r.axis - 1,
        set,
        &DEFAULT_PROBE_MS,
        r.premise_threshold,
    )?;
    rep.line(format!(
        "tail monotonicity: {} of {} samples near VaR violate ({:.4}, threshold {})",
        d.violations, d.band_count, d.violation_fraction, d.threshold
    ));
    rep.result("tail_monotonicity", &d)?;
    rep.verdict("tail_monotonicity", d.pass, if d.pass { "pass" } else { "premise_failed" });
    Ok(d.pass)
}

fn es_deriv(r: &Resolved, rep: &mut Report) -> Result<()> {
    let m = model(r);
    let set = sampling::draw_with_derivs(m, &r.x, r.n_samples, r.seed, &[key(r)])?;
    let t = risk_measures::es_derivative(m, r.alpha, key(r), &set)?;
    let d = t.derivative.clone().expect("derivative present");
    rep.line(format!(
        "d^{n}ES/dx_{i}^{n} = {:.6} (se {:.2e}, {} mode)",
        d.value,
        d.stderr,
        if t.mode == EsMode::Continuous { "continuous" } else { "general" },
        n = d.n,
        i = d.i
    ));
    for flag in &t.flags {
        rep.line(format!("flag: {flag}"));
    }
    rep.result("tail_estimate", &t)?;
    monotonicity(r, &set, rep)?;
    if let Some(o) = derivative_oracle(r, rep)? {
        rep.line(format!("oracle = {o:.6}"));
    }
    Ok(())
}

fn var_deriv(r: &Resolved, rep: &mut Report) -> Result<()> {
    let m = model(r);
    let i = r.axis - 1;
    let set = sampling::draw_with_derivs(m, &r.x, r.n_samples, r.seed, &[DerivKey::new(i, 1)])?;
    let v = risk_measures::var_derivative(m, r.alpha, i, &set, r.bands.as_deref())?;
    let dd = risk_measures::quantile_divided_difference(m, &r.x, r.alpha, i, 1, QUANTILE_STEP, r.n_samples, r.seed)?;
    rep.line(format!("dVaR/dx_{} = {:.6} (se {:.2e})", v.i, v.value, v.standard_error));
    rep.line(format!("quantile divided difference (m = {QUANTILE_STEP}) = {dd:.6}"));
    rep.tables.push(("bands.csv".into(), bands_csv(&v.bands)));
    rep.result("var_derivative", &v)?;
    rep.result("quantile_divided_difference", json!({"m": QUANTILE_STEP, "value": dd}))?;
    if let Some(p) = gaussian(r) {
        let o = p.var_gradient(&r.x, r.alpha, i)?;
        rep.oracle("var_derivative", o)?;
        rep.line(format!("oracle (closed form) = {o:.6}"));
    }
    Ok(())
}

fn bands_csv(bands: &[crate::conditional::BandStat]) -> String {
    let mut s = String::from("epsilon,count,mean\n");
    for b in bands {
        let _ = writeln!(s, "{:.16e},{},{:.16e}", b.epsilon, b.count, b.mean);
    }
    s
}

fn verify_config(r: &Resolved) -> VerifyConfig {
    VerifyConfig {
        count: r.n_samples,
        seed: r.seed,
        centered_alpha: r.centered.then_some(r.alpha),
        bands: r.bands.clone().unwrap_or_default(),
        band_mode: if r.symmetric_bands { BandMode::Symmetric } else { BandMode::OneSided },
        premise_threshold: r.premise_threshold,
        ..VerifyConfig::default()
    }
}

fn verify_prop1(r: &Resolved, rep: &mut Report) -> Result<()> {
    let m = model(r);
    let report = verify_proposition1(m, &r.x, r.axis - 1, r.order, &verify_config(r))?;
    rep.line(format!(
        "E[d^nH ; H=0] residual {:.3e}, E|d^nH| residual {:.3e}, P[d^nH = 0 | H=0] = {:.6}, mass {:.6}",
        report.estimate, report.abs_estimate, report.prob_zero_deriv, report.conditioning_mass
    ));
    if let Some(f) = report.premise_violation_fraction {
        rep.line(format!("monotonicity premise violation fraction {f:.4}"));
    }
    let label = serde_json::to_value(report.verdict)?;
    rep.line(format!("verdict: {}", label.as_str().unwrap_or_default()));
    if !report.bands.is_empty() {
        rep.tables.push(("bands.csv".into(), bands_csv(&report.bands)));
    }
    rep.result("level_set", &report)?;
    rep.verdicts.insert("proposition1".into(), label);
    rep.pass &= report.verdict.is_pass();
    if has_atoms(m) && !r.centered {
        if let Some(ls) = oracles::enumerate_discrete(m, &r.x, r.alpha, Some(key(r)))?.level_set {
            rep.oracle("level_set", ls)?;
        }
    }
    Ok(())
}

fn verify_prop2(r: &Resolved, rep: &mut Report) -> Result<()> {
    let p = verify_proposition2(model(r), &r.x, &verify_config(r))?;
    rep.line(format!("Euler residual {:.3e} ({})", p.euler_residual, pass_word(p.euler_pass)));
    rep.line(format!(
        "conditional gradient {:?} ({})",
        p.conditional_gradient,
        pass_word(p.conclusion_pass)
    ));
    rep.line(format!(
        "symmetry residual {:.3e} against {:.3e} ({})",
        p.symmetry_residual,
        p.symmetry_tolerance,
        pass_word(p.symmetry_pass)
    ));
    rep.verdict("euler", p.euler_pass, pass_word(p.euler_pass));
    rep.verdict("symmetry", p.symmetry_pass, pass_word(p.symmetry_pass));
    rep.verdict("conclusion", p.conclusion_pass, pass_word(p.conclusion_pass));
    rep.result("proposition2", &p)?;
    Ok(())
}

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn lemma1(r: &Resolved, rep: &mut Report) -> Result<()> {
    let family: BuiltinFamily = r.family.as_deref().unwrap_or("constant").parse()?;
    let schedule = r.m_schedule.clone().unwrap_or_else(|| vec![10, 100, 1000]);
    let report = lemma1_probe(&family, &schedule, r.n_samples, r.seed)?;
    let mut csv = String::from("m,estimate,standard_error,abs_estimate,abs_standard_error,event_probability\n");
    for row in &report.rows {
        rep.line(format!(
            "m = {:>6}: E[H 1_A] = {:.6} (se {:.2e}), P[A] = {:.6}",
            row.m, row.estimate, row.standard_error, row.event_probability
        ));
        let _ = writeln!(
            csv,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            row.m, row.estimate, row.standard_error, row.abs_estimate, row.abs_standard_error, row.event_probability
        );
    }
    rep.tables.push(("lemma1.csv".into(), csv));
    rep.result("family", family.to_string())?;
    rep.result("lemma1", &report)?;
    let ok = report.verdict.is_pass();
    rep.verdict("lemma1", ok, pass_word(ok));
    rep.line(format!("verdict: {}", pass_word(ok)));
    Ok(())
}

fn diverge_check(r: &Resolved, rep: &mut Report) -> Result<()> {
    let m = model(r);
    let set = sampling::draw_with_derivs(m, &r.x, r.n_samples, r.seed, &[key(r)])?;
    let naive = risk_measures::es_derivative_with_mode(m, r.alpha, key(r), &set, EsMode::Continuous)?;
    let d = naive.derivative.clone().expect("derivative present");
    let premise = monotonicity(r, &set, rep)?;
    let h = r.h.unwrap_or(if r.order == 1 { 1e-3 } else { 0.05 });
    let fd = oracles::fd_of_mc_es(m, &r.x, r.alpha, r.axis - 1, r.order, h, r.n_samples, r.seed)?;
    let discrepancy = d.value - fd.value;
    let se = (d.stderr * d.stderr + fd.standard_error * fd.standard_error).sqrt();
    let agree = discrepancy.abs() <= (3.0 * se).max(0.01 * fd.value.abs());
    rep.line(format!("tail-average estimate  = {:.6} (se {:.2e})", d.value, d.stderr));
    rep.line(format!("finite difference (h = {h}) = {:.6} (se {:.2e})", fd.value, fd.standard_error));
    rep.line(format!("discrepancy = {discrepancy:.6} (combined se {se:.2e})"));
    if fd.degenerate_step {
        rep.line("warning: finite-difference numerator is exactly zero; step too small");
    }
    rep.result("tail_estimate", &naive)?;
    rep.result("finite_difference", &fd)?;
    rep.result("discrepancy", json!({"value": discrepancy, "standard_error": se}))?;
    rep.verdict("agreement", agree, pass_word(agree));
    if let Some(o) = derivative_oracle(r, rep)? {
        rep.line(format!("oracle (closed form) = {o:.6}"));
    }
    if !premise {
        rep.line("premise failed: the tail-average formula is not guaranteed here");
    }
    Ok(())
}

fn euler(r: &Resolved, rep: &mut Report) -> Result<()> {
    let m = model(r);
    let keys: Vec<DerivKey> = (0..m.dim).map(|i| DerivKey::new(i, 1)).collect();
    let set = sampling::draw_with_derivs(m, &r.x, r.n_samples, r.seed, &keys)?;
    let e = risk_measures::euler_allocation(m, r.alpha, &set)?;
    let ok = e.residual <= 0.01;
    rep.line(format!("allocations {:?}", e.allocations));
    rep.line(format!("sum {:.6} vs ES {:.6}: relative residual {:.3e}", e.total, e.es, e.residual));
    rep.result("euler", &e)?;
    rep.verdict("euler_residual", ok, pass_word(ok));
    if let Some(p) = gaussian(r) {
        let a = (0..m.dim)
            .map(|i| Ok(r.x[i] * oracles::gaussian_es_gradient(&p, &r.x, r.alpha, i)?))
            .collect::<Result<Vec<f64>>>()?;
        rep.oracle("allocations", a)?;
    }
    Ok(())
}

fn convergence(r: &Resolved, rep: &mut Report) -> Result<()> {
    let m = model(r);
    let i = r.axis - 1;
    let schedule = r.m_schedule.clone().unwrap_or_else(|| DEFAULT_M_SCHEDULE.to_vec());
    let table = match r.target.as_deref().unwrap_or("quantile") {
        "quantile" => risk_measures::quantile_convergence(m, &r.x, r.alpha, i, r.order, &schedule, r.n_samples, r.seed)?,
        "es" => {
            let es_at = |y: &[f64]| -> Result<f64> {
                Ok(risk_measures::es(&sampling::draw(m, y, r.n_samples, r.seed)?, r.alpha)?.es)
            };
            let mut rows = Vec::new();
            for &step in &schedule {
                let st = crate::divided_diff::Stencil::new(r.order).along(i, step);
                let values = st
                    .offsets()
                    .map(|d| {
                        let mut y = r.x.clone();
                        y[i] += d;
                        es_at(&y)
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(ConvergenceRow { m: step, estimate: st.apply(&values) });
            }
            ConvergenceTable::from_rows(r.order, rows)?
        }
        other => return Err(Error::arg(format!("--target must be quantile or es, got '{other}'"))),
    };
    for row in &table.rows {
        rep.line(format!("m = {:>6}: {:.8}", row.m, row.estimate));
    }
    rep.line(format!("Richardson limit {:.8}; stable: {}", table.extrapolated, table.stable));
    rep.tables.push(("convergence.csv".into(), table.to_csv()));
    rep.result("convergence", &table)?;
    rep.verdict("stable", table.stable, pass_word(table.stable));
    Ok(())
}

fn execute(r: &Resolved) -> Result<Report> {
    let mut rep = Report::new();
    let outcome = match r.command.as_str() {
        "simulate" => simulate(r, &mut rep),
        "var" => var(r, &mut rep),
        "es" => es(r, &mut rep),
        "es-deriv" => es_deriv(r, &mut rep),
        "var-deriv" => var_deriv(r, &mut rep),
        "verify-prop1" => verify_prop1(r, &mut rep),
        "verify-prop2" => verify_prop2(r, &mut rep),
        "lemma1-probe" => lemma1(r, &mut rep),
        "diverge-check" => diverge_check(r, &mut rep),
        "euler" => euler(r, &mut rep),
        "convergence" => convergence(r, &mut rep),
        other => unreachable!("unknown command {other}"),
    };
    match outcome {
        Ok(()) => Ok(rep),
        Err(Error::NotApplicable(reason)) => {
            let mut rep = Report::new();
            rep.line(format!("not applicable: {reason}"));
            rep.result("not_applicable", reason)?;
            rep.verdict("applicable", false, "not_applicable");
            Ok(rep)
        }
        Err(e) => Err(e),
    }
}

fn write_outputs(r: &Resolved, rep: &Report) -> Result<String> {
    let mut doc = Map::new();
    doc.insert("config".into(), serde_json::to_value(r)?);
    doc.insert("results".into(), Value::Object(rep.results.clone()));
    doc.insert("verdicts".into(), Value::Object(rep.verdicts.clone()));
    if let Some(o) = &rep.oracle {
        doc.insert("oracle".into(), Value::Object(o.clone()));
    }
    if r.timestamp {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        doc.insert("generated_at_unix".into(), json!(now));
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(doc))?;
    text.push('\n');
    if let Some(dir) = &r.out {
        std::fs::write(dir.join("report.json"), &text)?;
        for (name, body) in &rep.tables {
            std::fs::write(dir.join(name), body)?;
        }
    }
    Ok(text)
}

/// Runs one invocation and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: &Command) -> Result<i32> {
    let r = resolve(command)?;
    if let Some(dir) = &r.out {
        std::fs::create_dir_all(dir)?;
    }
    let rep = sampling::with_workers(r.workers, || execute(&r))??;
    let text = write_outputs(&r, &rep)?;
    let mut out = rep.summary.clone();
    match &r.out {
        Some(dir) => out.push_str(&format!("report written to {}\n", dir.join("report.json").display())),
        None => out.push_str(&text),
    }
    // A closed pipe (`| head`) is not an error worth reporting.
    match std::io::stdout().lock().write_all(out.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
        _ => {}
    }
    Ok(if rep.pass { 0 } else { 2 })
}
