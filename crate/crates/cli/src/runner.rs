//! Executes an [`ExperimentConfig`]: builds models and couplings, scores
//! costs and evaluates checks.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use pathcouple::cost::{self, ClosedForm, CostEstimate, CostReport, CostSpec};
use pathcouple::coupling::{
    self, ConstantCorrelation, ConstantRotation, CoupledEnsemble, RotationProcess, StateAngleRotation,
};
use pathcouple::verify::{self, TestReport};
use pathcouple::{presets, rng, sde, Error, Matrix, SdeModel, TimeGrid};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{typed, Check, ConfigError, CouplingSection, ExperimentConfig, Num, NumOrMatrix};

const PROBE_SALT: u64 = 0x0c1f_0b3e;

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Numerical(String),
    Io(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e}"),
            RunError::Numerical(e) => write!(f, "numerical error: {e}"),
            RunError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

/// Tags a library error with where it happened.
pub fn lib_err(context: &str, line: Option<usize>, e: Error) -> RunError {
    match e {
        e if e.is_numerical() => RunError::Numerical(format!("{context}: {e}")),
        e @ (Error::Io(_) | Error::Csv(_) | Error::Format(_)) => RunError::Io(format!("{context}: {e}")),
        e => RunError::Config(ConfigError { line, message: format!("{context}: {e}") }),
    }
}

fn cfg_err(line: usize, msg: impl Into<String>) -> RunError {
    RunError::Config(ConfigError { line: Some(line), message: msg.into() })
}

/// How far to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Couple,
    Cost,
    Full,
}

#[derive(Debug, Serialize)]
pub struct CheckOutcome {
    pub kind: String,
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling: Option<String>,
    pub statistic: f64,
    pub threshold: f64,
    pub comparison: &'static str,
    /// Whether the underlying test passed.
    pub pass: bool,
    /// The outcome the experiment expects.
    pub expect: bool,
    pub ok: bool,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

#[derive(Debug, Serialize)]
pub struct CouplingSummary {
    pub name: String,
    pub provenance: coupling::Provenance,
    pub n_steps: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub diagnostics: BTreeMap<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostReport>,
}

#[derive(Debug, Serialize)]
pub struct ClosedFormSummary {
    pub value: CostEstimate,
    /// `Q*` when it is constant.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub name: String,
    pub schema: u32,
    pub d: usize,
    pub n_steps: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub vars: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_spec: Option<CostSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closed_form: Option<ClosedFormSummary>,
    pub couplings: Vec<CouplingSummary>,
    pub checks: Vec<CheckOutcome>,
    pub ok: bool,
}

#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    pub tests: Vec<TestReport>,
}

#[derive(Clone, Copy)]
enum Aggregate {
    ClosedFormValue,
    MatchesClosedForm,
    NotBelow,
    Gap,
    CostBelow,
    Feasibility,
    Refinement,
}

fn classify(kind: &str) -> Option<Option<Aggregate>> {
    Some(match kind {
        "wiener-marginal" | "certificate" | "adaptedness" | "covariation" | "cross-covariance"
        | "kernel-residual" | "distance" => None,
        "closed-form" => Some(Aggregate::ClosedFormValue),
        "matches-closed-form" => Some(Aggregate::MatchesClosedForm),
        "not-below-closed-form" => Some(Aggregate::NotBelow),
        "gap" => Some(Aggregate::Gap),
        "cost-below" => Some(Aggregate::CostBelow),
        "feasibility" => Some(Aggregate::Feasibility),
        "covariation-refinement" => Some(Aggregate::Refinement),
        _ => return None,
    })
}

pub const CHECK_KINDS: &[&str] = &[
    "closed-form",
    "matches-closed-form",
    "not-below-closed-form",
    "gap",
    "cost-below",
    "wiener-marginal",
    "certificate",
    "adaptedness",
    "covariation",
    "covariation-refinement",
    "cross-covariance",
    "kernel-residual",
    "distance",
    "feasibility",
];

pub struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    models: BTreeMap<String, SdeModel>,
    closed: Option<ClosedForm>,
}

fn default_k() -> f64 {
    3.0
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrelatedParams {
    rho: Option<NumOrMatrix>,
    angle: Option<Num>,
    scale: Option<Num>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RotationParams {
    #[serde(default = "identity_name")]
    rotation: String,
    rate: Option<Num>,
    angle: Option<Num>,
    q: Option<Vec<Vec<Num>>>,
}

fn identity_name() -> String {
    "identity".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChopParams {
    c: Num,
    block: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Result<Self, RunError> {
        let mut models = BTreeMap::new();
        let names = ["src".to_string(), "dst".to_string()].into_iter().chain(cfg.models.keys().cloned());
        for name in names {
            let m = cfg.model(&name).map_err(ConfigError::new)?;
            let line = cfg.line(m.preset.span().start);
            let params = cfg.preset_params(m)?;
            let model = presets::build_model(m.preset.get_ref(), cfg.d, &params)
                .map_err(|e| lib_err(&format!("model '{name}'"), Some(line), e))?;
            models.insert(name, model);
        }
        Ok(Self { cfg, models, closed: None })
    }

    fn model(&self, name: Option<&str>, default: &str) -> &SdeModel {
        // Names were validated with the config.
        &self.models[name.unwrap_or(default)]
    }

    fn grid(n_steps: usize, line: usize) -> Result<TimeGrid, RunError> {
        TimeGrid::new(n_steps).map_err(|e| lib_err("grid", Some(line), e))
    }

    fn closed_form(&mut self) -> Result<(), RunError> {
        let cfg = self.cfg;
        let Some((spec, section)) = &cfg.cost else { return Ok(()) };
        if !section.closed_form {
            return Ok(());
        }
        let (src, dst) = (&self.models["src"], &self.models["dst"]);
        let grid = Self::grid(cfg.n_steps, 1)?;
        let probe_n = section.probe_n.unwrap_or(cfg.n);
        let probe = sde::simulate(src, grid, probe_n, rng::derive_seed(cfg.seed, PROBE_SALT))
            .map_err(|e| lib_err("closed form probes", None, e))?;
        let closed = cost::closed_form_optimal(src, dst, spec, &probe).map_err(|e| lib_err("closed form", None, e))?;
        self.closed = Some(closed);
        Ok(())
    }

    fn rotation(&self, p: &RotationParams, line: usize) -> Result<Arc<dyn RotationProcess>, RunError> {
        let d = self.cfg.d;
        let num = |n: &Option<Num>, what: &str| -> Result<f64, RunError> {
            let n = n.as_ref().ok_or_else(|| cfg_err(line, format!("rotation '{}' needs '{what}'", p.rotation)))?;
            self.cfg.eval(n).map_err(|e| cfg_err(line, e))
        };
        Ok(match p.rotation.as_str() {
            "identity" => Arc::new(ConstantRotation::identity(d)),
            "reflection" => Arc::new(ConstantRotation::reflection(d)),
            "constant" => Arc::new(ConstantRotation(Matrix::embedded_rotation(d, num(&p.angle, "angle")?))),
            "state-angle" => Arc::new(StateAngleRotation { dim: d, rate: num(&p.rate, "rate")? }),
            "matrix" => {
                let rows = p.q.as_ref().ok_or_else(|| cfg_err(line, "rotation 'matrix' needs 'q'"))?;
                let rows = self.cfg.eval_matrix(&NumOrMatrix::Matrix(rows.clone())).map_err(|e| cfg_err(line, e))?;
                Arc::new(ConstantRotation(Matrix::from_rows(&rows).map_err(|e| lib_err("rotation q", Some(line), e))?))
            }
            other => {
                return Err(cfg_err(
                    line,
                    format!("unknown rotation '{other}' (identity, reflection, constant, state-angle, matrix)"),
                ))
            }
        })
    }

    /// Builds coupling `c`, with its seed shifted by `offset`.
    pub fn build(&self, c: &CouplingSection, offset: u64) -> Result<CoupledEnsemble, RunError> {
        let cfg = self.cfg;
        let line = cfg.line(c.constructor.span().start);
        let name = c.name.get_ref();
        let ctx = format!("coupling '{name}' ({})", c.constructor.get_ref());
        let src = self.model(c.src.as_deref(), "src");
        let dst = self.model(c.dst.as_deref(), "dst");
        let grid = Self::grid(c.n_steps.unwrap_or(cfg.n_steps), line)?;
        let n = c.n.unwrap_or(cfg.n);
        let seed = c.seed.unwrap_or(cfg.seed).wrapping_add(offset);
        let d = cfg.d;
        let wrap = |e: Error| lib_err(&ctx, Some(line), e);
        let params = |what: &str| format!("{ctx} params ({what})");
        let out = match c.constructor.get_ref().as_str() {
            kind @ ("synchronous" | "antithetic" | "independent") => {
                typed::<NoParams>(&c.params, &params(kind), line)?;
                let f = match kind {
                    "synchronous" => coupling::synchronous,
                    "antithetic" => coupling::antithetic,
                    _ => coupling::independent,
                };
                f(src, dst, grid, n, seed).map_err(wrap)?
            }
            "correlated" => {
                let p: CorrelatedParams = typed(&c.params, &params("correlated"), line)?;
                let rho = match (&p.rho, &p.angle) {
                    (Some(r), None) => {
                        let rows = cfg.eval_matrix(r).map_err(|e| cfg_err(line, e))?;
                        Matrix::from_rows(&rows).map_err(wrap)?
                    }
                    (None, Some(a)) => {
                        let a = cfg.eval(a).map_err(|e| cfg_err(line, e))?;
                        let s = match &p.scale {
                            Some(s) => cfg.eval(s).map_err(|e| cfg_err(line, e))?,
                            None => 1.0,
                        };
                        Matrix::embedded_rotation(d, a).scale(s)
                    }
                    _ => return Err(cfg_err(line, format!("{ctx}: give either 'rho' or 'angle'"))),
                };
                let w = coupling::couple_brownians(&ConstantCorrelation(rho), grid, d, n, seed).map_err(wrap)?;
                lift(src, dst, w).map_err(wrap)?
            }
            kind @ ("rotation-monge" | "composed-monge" | "monge-sde") => {
                let p: RotationParams = typed(&c.params, &params(kind), line)?;
                let q = self.rotation(&p, line)?;
                match kind {
                    "rotation-monge" => {
                        let drivers = sde::sample_brownian(grid, d, n, seed).map_err(wrap)?;
                        let w = coupling::rotation_monge(q.as_ref(), &drivers).map_err(wrap)?;
                        lift(src, dst, w).map_err(wrap)?
                    }
                    "composed-monge" => coupling::composed_monge(src, dst, q.as_ref(), grid, n, seed).map_err(wrap)?,
                    _ => coupling::monge_sde(dst, q.as_ref(), src, grid, n, seed).map_err(wrap)?,
                }
            }
            "optimal" => {
                typed::<NoParams>(&c.params, &params("optimal"), line)?;
                let closed = self.closed.as_ref().expect("closed form computed before couplings");
                cost::optimal_monge_coupling(src, closed, grid, n, seed).map_err(wrap)?
            }
            "tanaka" => {
                typed::<NoParams>(&c.params, &params("tanaka"), line)?;
                let w = coupling::tanaka_coupling(grid, n, seed).map_err(wrap)?;
                lift(src, dst, w).map_err(wrap)?
            }
            "rotation-chop" => {
                let p: ChopParams = typed(&c.params, &params("rotation-chop"), line)?;
                let cv = cfg.eval(&p.c).map_err(|e| cfg_err(line, e))?;
                let w = coupling::rotation_chop(cv, grid, n, seed, p.block).map_err(wrap)?;
                lift(src, dst, w).map_err(wrap)?
            }
            other => unreachable!("constructor '{other}' passed validation"),
        };
        Ok(out)
    }

    /// Runs the config up to `stage`, handing each coupled ensemble to `sink`
    /// as soon as it is built.
    pub fn run(
        &mut self,
        stage: Stage,
        mut sink: impl FnMut(&str, &CoupledEnsemble) -> Result<(), RunError>,
    ) -> Result<Outcome, RunError> {
        let cfg = self.cfg;
        if stage == Stage::Cost && cfg.cost.is_none() {
            return Err(RunError::Config(ConfigError::new("the cost subcommand needs a [cost] section")));
        }
        let mut kinds = Vec::with_capacity(cfg.checks.len());
        for c in &cfg.checks {
            match classify(&c.kind) {
                Some(k) => kinds.push(k),
                None => {
                    return Err(cfg_err(
                        c.line,
                        format!("unknown check kind '{}' (known: {})", c.kind, CHECK_KINDS.join(", ")),
                    ))
                }
            }
        }
        if stage != Stage::Couple || cfg.couplings.iter().any(|c| c.constructor.get_ref() == "optimal") {
            self.closed_form()?;
        }
        let mut outcomes: Vec<Option<CheckOutcome>> = (0..cfg.checks.len()).map(|_| None).collect();
        let mut tests = Vec::new();
        let mut estimates: BTreeMap<String, CostEstimate> = BTreeMap::new();
        let mut refinement: BTreeMap<(usize, String), f64> = BTreeMap::new();
        let mut summaries = Vec::with_capacity(cfg.couplings.len());

        for c in &cfg.couplings {
            let name = c.name.get_ref().clone();
            let ens = self.build(c, 0)?;
            sink(&name, &ens)?;
            let mut report = None;
            if stage != Stage::Couple {
                if let Some((spec, _)) = &cfg.cost {
                    let src = self.model(c.src.as_deref(), "src");
                    let dst = self.model(c.dst.as_deref(), "dst");
                    let est = cost::estimate(&ens, spec, src, dst)
                        .map_err(|e| lib_err(&format!("cost of coupling '{name}'"), None, e))?;
                    let cf = self.closed.as_ref().map(|cf| cf.value.mean);
                    report = Some(CostReport::new(spec, &ens, &est, cf));
                    estimates.insert(name.clone(), est);
                }
            }
            if stage == Stage::Full {
                for (i, check) in cfg.checks.iter().enumerate() {
                    match kinds[i] {
                        None if check.table.get("coupling").and_then(|v| v.as_str()) == Some(name.as_str()) => {
                            outcomes[i] = Some(self.ensemble_check(check, c, &ens, &mut tests)?);
                        }
                        Some(Aggregate::Refinement) if lists(check, "couplings", &name) => {
                            let p: RefinementParams = typed(&check.table, "covariation-refinement", check.line)?;
                            let target = cfg.eval(&p.expected).map_err(|e| cfg_err(check.line, e))?;
                            refinement.insert((i, name.clone()), pathwise_covariation_rms(&ens, target));
                        }
                        _ => {}
                    }
                }
            }
            summaries.push(CouplingSummary {
                name,
                provenance: ens.provenance().clone(),
                n_steps: ens.grid().n_steps(),
                n: ens.n_pairs(),
                seed: ens.seed(),
                diagnostics: ens.diagnostics().clone(),
                cost: report,
            });
        }

        if stage == Stage::Full {
            for (i, check) in cfg.checks.iter().enumerate() {
                if let Some(kind) = kinds[i] {
                    outcomes[i] = Some(self.aggregate_check(kind, i, check, &estimates, &refinement)?);
                }
            }
        }
        let checks: Vec<CheckOutcome> = match stage {
            Stage::Full => outcomes
                .into_iter()
                .zip(&cfg.checks)
                .map(|(o, c)| {
                    o.ok_or_else(|| {
                        cfg_err(c.line, format!("check '{}' does not name a coupling it can run on", c.kind))
                    })
                })
                .collect::<Result<_, _>>()?,
            _ => Vec::new(),
        };
        let ok = checks.iter().all(|c| c.ok);
        let closed_form = self.closed.as_ref().map(|cf| ClosedFormSummary {
            value: cf.value.clone(),
            rotation: cf.rotation.constant().map(|q| q.to_rows()),
        });
        Ok(Outcome {
            report: Report {
                name: cfg.name.clone(),
                schema: crate::config::SCHEMA_VERSION,
                d: cfg.d,
                n_steps: cfg.n_steps,
                n: cfg.n,
                seed: cfg.seed,
                vars: cfg.vars.clone(),
                cost_spec: cfg.cost.as_ref().map(|(s, _)| s.clone()),
                closed_form,
                couplings: summaries,
                checks,
                ok,
            },
            tests,
        })
    }

    fn ensemble_check(
        &self,
        check: &Check,
        section: &CouplingSection,
        ens: &CoupledEnsemble,
        tests: &mut Vec<TestReport>,
    ) -> Result<CheckOutcome, RunError> {
        let cfg = self.cfg;
        let line = check.line;
        let name = section.name.get_ref().clone();
        let ctx = format!("check '{}' on '{name}'", check.kind);
        let wrap = |e: Error| lib_err(&ctx, Some(line), e);
        let ev = |n: &Num| cfg.eval(n).map_err(|e| cfg_err(line, e));
        let mut out = CheckOutcome {
            kind: check.kind.clone(),
            line,
            coupling: Some(name.clone()),
            statistic: 0.0,
            threshold: 0.0,
            comparison: "<=",
            pass: false,
            expect: true,
            ok: false,
            details: Value::Null,
        };
        match check.kind.as_str() {
            "wiener-marginal" => {
                let p: MarginalParams = typed(&check.table, &ctx, line)?;
                out.expect = p.expect;
                let marginals: &[bool] = match p.marginal.as_str() {
                    "x" => &[true],
                    "y" => &[false],
                    "both" => &[true, false],
                    m => return Err(cfg_err(line, format!("{ctx}: marginal must be x, y or both, got '{m}'"))),
                };
                let seeds = p.seeds.max(1);
                let mut passes = 0usize;
                let mut worst = 0.0_f64;
                let mut threshold = 0.0;
                for j in 0..seeds {
                    let rebuilt;
                    let e = if j == 0 {
                        ens
                    } else {
                        rebuilt = self.build(section, j as u64)?;
                        &rebuilt
                    };
                    let mut all = true;
                    for &use_x in marginals {
                        let m = if use_x { e.x_ensemble() } else { e.y_ensemble() };
                        let mut r = verify::wiener_marginal_test(&m, p.alpha).map_err(wrap)?;
                        r.test = format!("{}:{name}.{}", r.test, if use_x { "x" } else { "y" });
                        all &= r.pass;
                        worst = worst.max(r.statistic);
                        threshold = r.threshold;
                        tests.push(r);
                    }
                    passes += all as usize;
                }
                let rate = passes as f64 / seeds as f64;
                if seeds == 1 {
                    out.statistic = worst;
                    out.threshold = threshold;
                    out.pass = passes == 1;
                } else {
                    let min_rate = p.min_pass_rate.unwrap_or(0.95);
                    out.statistic = rate;
                    out.threshold = min_rate;
                    out.comparison = ">=";
                    out.pass = rate >= min_rate;
                    out.details = json!({ "seeds": seeds, "passes": passes, "max_abs_z": worst, "alpha": p.alpha });
                }
            }
            "certificate" => {
                let p: CertificateParams = typed(&check.table, &ctx, line)?;
                out.expect = p.expect;
                let tol = p.tol.as_ref().map(ev).transpose()?;
                let mut r = verify::monge_certificate(ens, p.window, tol).map_err(wrap)?;
                r.test = format!("{}:{name}", r.test);
                (out.statistic, out.threshold, out.pass) = (r.statistic, r.threshold, r.pass);
                tests.push(r);
            }
            "adaptedness" => {
                let p: AdaptednessParams = typed(&check.table, &ctx, line)?;
                out.expect = p.expect;
                let mut r = verify::adaptedness_probe(ens, p.k_neighbors).map_err(wrap)?;
                r.test = format!("{}:{name}", r.test);
                (out.statistic, out.threshold, out.pass) = (r.statistic, r.threshold, r.pass);
                out.comparison = ">=";
                if let Some([lo, hi]) = &p.accuracy {
                    let (lo, hi) = (ev(lo)?, ev(hi)?);
                    let inside = (lo..=hi).contains(&r.statistic);
                    out.details = json!({ "accuracy_range": [lo, hi], "inside": inside });
                    out.ok = out.pass == out.expect && inside;
                    tests.push(r);
                    return Ok(out);
                }
                tests.push(r);
            }
            "covariation" => {
                let p: CovariationParams = typed(&check.table, &ctx, line)?;
                let expected = cfg.eval_matrix(&p.expected).map_err(|e| cfg_err(line, e))?;
                let cov = verify::realized_covariation(ens, p.window.unwrap_or(verify::DEFAULT_WINDOW)).map_err(wrap)?;
                let slack = 2.0 * ens.grid().dt().sqrt();
                let d = ens.dim();
                if expected.len() != d || expected.iter().any(|r| r.len() != d) {
                    return Err(cfg_err(line, format!("{ctx}: expected must be {d}x{d}")));
                }
                let mut worst = 0.0_f64;
                for (i, row) in expected.iter().enumerate() {
                    for (j, e) in row.iter().enumerate() {
                        let allow = p.k * cov.terminal_stderr[(i, j)] + slack;
                        worst = worst.max((cov.terminal[(i, j)] - e).abs() / allow);
                    }
                }
                out.statistic = worst;
                out.threshold = 1.0;
                out.pass = worst <= 1.0;
                out.details = json!({
                    "terminal": cov.terminal.to_rows(),
                    "terminal_stderr": cov.terminal_stderr.to_rows(),
                    "expected": expected,
                    "slack": slack,
                });
            }
            "cross-covariance" => {
                let p: CrossCovParams = typed(&check.table, &ctx, line)?;
                let d = ens.dim();
                if p.component >= d {
                    return Err(cfg_err(line, format!("{ctx}: component must be below {d}")));
                }
                let expected = ev(&p.expected)?;
                let (cov, se) = terminal_cross_covariance(ens, p.component);
                out.statistic = (cov - expected).abs();
                out.threshold = p.k * se;
                out.pass = out.statistic <= out.threshold;
                out.details = json!({ "covariance": cov, "stderr": se, "expected": expected });
            }
            "kernel-residual" => {
                let p: BoundParams = typed(&check.table, &ctx, line)?;
                let r = ens
                    .diagnostic("kernel_residual_max")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| cfg_err(line, format!("{ctx}: coupling has no kernel residual diagnostic")))?;
                self.bound(&mut out, r, &p, line)?;
                out.details = json!({ "kernel_condition": ens.diagnostic("kernel_condition") });
            }
            "distance" => {
                let p: BoundParams = typed(&check.table, &ctx, line)?;
                self.bound(&mut out, ens.max_pair_distance(), &p, line)?;
            }
            other => unreachable!("ensemble check '{other}'"),
        }
        out.ok = out.pass == out.expect;
        Ok(out)
    }

    fn bound(&self, out: &mut CheckOutcome, value: f64, p: &BoundParams, line: usize) -> Result<(), RunError> {
        let ev = |n: &Num| self.cfg.eval(n).map_err(|e| cfg_err(line, e));
        out.statistic = value;
        match (&p.max, &p.min) {
            (Some(m), None) => {
                out.threshold = ev(m)?;
                out.pass = value <= out.threshold;
            }
            (None, Some(m)) => {
                out.threshold = ev(m)?;
                out.comparison = ">=";
                out.pass = value >= out.threshold;
            }
            _ => return Err(cfg_err(line, format!("check '{}' needs exactly one of 'max' or 'min'", out.kind))),
        }
        Ok(())
    }

    fn aggregate_check(
        &self,
        kind: Aggregate,
        index: usize,
        check: &Check,
        estimates: &BTreeMap<String, CostEstimate>,
        refinement: &BTreeMap<(usize, String), f64>,
    ) -> Result<CheckOutcome, RunError> {
        let cfg = self.cfg;
        let line = check.line;
        let ctx = format!("check '{}'", check.kind);
        let ev = |n: &Num| cfg.eval(n).map_err(|e| cfg_err(line, e));
        let mut out = CheckOutcome {
            kind: check.kind.clone(),
            line,
            coupling: check.table.get("coupling").and_then(|v| v.as_str()).map(String::from),
            statistic: 0.0,
            threshold: 0.0,
            comparison: "<=",
            pass: false,
            expect: true,
            ok: false,
            details: Value::Null,
        };
        let closed = || {
            self.closed
                .as_ref()
                .map(|c| &c.value)
                .ok_or_else(|| cfg_err(line, format!("{ctx} needs [cost] closed_form = true")))
        };
        let est = |name: &str| {
            estimates
                .get(name)
                .ok_or_else(|| cfg_err(line, format!("{ctx}: no cost estimate for '{name}' (is [cost] set?)")))
        };
        match kind {
            Aggregate::ClosedFormValue => {
                let p: ExpectedTol = typed(&check.table, &ctx, line)?;
                let cf = closed()?;
                let expected = ev(&p.expected)?;
                out.statistic = (cf.mean - expected).abs();
                out.threshold = ev(&p.tol)?;
                out.pass = out.statistic <= out.threshold;
                out.details = json!({ "value": cf.mean, "expected": expected });
                if p.rotation.is_some() || p.rotation_tol.is_some() {
                    let want = p
                        .rotation
                        .as_ref()
                        .ok_or_else(|| cfg_err(line, format!("{ctx}: rotation_tol without rotation")))?;
                    let want = cfg.eval_matrix(want).map_err(|e| cfg_err(line, e))?;
                    let want = Matrix::from_rows(&want).map_err(|e| lib_err(&ctx, Some(line), e))?;
                    let got = self
                        .closed
                        .as_ref()
                        .and_then(|c| c.rotation.constant())
                        .ok_or_else(|| cfg_err(line, format!("{ctx}: the optimal rotation is not constant")))?;
                    let tol = p.rotation_tol.as_ref().map(ev).transpose()?.unwrap_or(1e-9);
                    let err = (&got - &want).max_abs();
                    out.pass &= err <= tol;
                    out.details["rotation"] = json!(got.to_rows());
                    out.details["rotation_error"] = json!(err);
                }
            }
            Aggregate::MatchesClosedForm | Aggregate::Gap => {
                let p: CompareParams = typed(&check.table, &ctx, line)?;
                let name = p.coupling.as_deref().ok_or_else(|| cfg_err(line, format!("{ctx} needs 'coupling'")))?;
                let (cf, e) = (closed()?, est(name)?);
                let combined = e.combined_stderr(cf);
                let expected = match (kind, &p.expected) {
                    (Aggregate::Gap, Some(x)) => ev(x)?,
                    (Aggregate::Gap, None) => return Err(cfg_err(line, format!("{ctx} needs 'expected'"))),
                    _ => 0.0,
                };
                let gap = e.mean - cf.mean;
                out.statistic = (gap - expected).abs();
                out.threshold = p.k * combined;
                out.pass = out.statistic <= out.threshold;
                out.details = json!({ "estimate": e.mean, "closed_form": cf.mean, "gap": gap, "combined_stderr": combined });
            }
            Aggregate::NotBelow => {
                let p: ListParams = typed(&check.table, &ctx, line)?;
                let cf = closed()?;
                let names: Vec<String> = p.couplings.unwrap_or_else(|| estimates.keys().cloned().collect());
                let mut worst = f64::NEG_INFINITY;
                let mut rows = Vec::new();
                for n in cfg.couplings.iter().map(|c| c.name.get_ref()).filter(|n| names.contains(n)) {
                    let e = est(n)?;
                    let combined = e.combined_stderr(cf);
                    // Stderr units by which the candidate sits below the closed form.
                    let z = match combined > 0.0 {
                        true => (cf.mean - e.mean) / combined,
                        false if e.mean < cf.mean => f64::INFINITY,
                        false => f64::NEG_INFINITY,
                    };
                    worst = worst.max(z);
                    rows.push(json!({ "coupling": n, "estimate": e.mean, "gap": e.mean - cf.mean, "combined_stderr": combined }));
                }
                out.statistic = worst;
                out.threshold = p.k;
                out.pass = worst <= p.k;
                out.details = json!({ "closed_form": cf.mean, "candidates": rows });
            }
            Aggregate::CostBelow => {
                let p: CostBelowParams = typed(&check.table, &ctx, line)?;
                let base = est(&p.coupling)?;
                let mut worst = f64::NEG_INFINITY;
                let mut rows = Vec::new();
                for n in &p.others {
                    let o = est(n)?;
                    let combined = base.combined_stderr(o);
                    // Margin in stderr units by which `base` sits below `o`.
                    let margin = (o.mean - base.mean) / combined;
                    worst = worst.max(-margin);
                    rows.push(json!({ "coupling": n, "estimate": o.mean, "combined_stderr": combined, "margin": margin }));
                }
                out.statistic = -worst;
                out.threshold = p.k;
                out.comparison = ">=";
                out.pass = out.statistic >= p.k;
                out.details = json!({ "estimate": base.mean, "stderr": base.stderr, "others": rows });
            }
            Aggregate::Feasibility => {
                let p: FeasibilityParams = typed(&check.table, &ctx, line)?;
                let src = self.model(p.src.as_deref(), "src");
                let dst = self.model(p.dst.as_deref(), "dst");
                let grid = Self::grid(cfg.n_steps, line)?;
                let every = p.every.unwrap_or((cfg.n_steps / 16).max(1));
                let wrap = |e: Error| lib_err(&ctx, Some(line), e);
                let xs = sde::simulate(src, grid, p.probe_n, rng::derive_seed(cfg.seed, PROBE_SALT)).map_err(wrap)?;
                let ys = sde::simulate(dst, grid, p.probe_n, rng::derive_seed(cfg.seed, PROBE_SALT + 1)).map_err(wrap)?;
                let f = coupling::feasibility_check(
                    &coupling::diffusion_probes(src, &xs, every).map_err(wrap)?,
                    &coupling::diffusion_probes(dst, &ys, every).map_err(wrap)?,
                    p.rank_tol.unwrap_or(pathcouple::linalg::DEFAULT_RANK_TOL),
                )
                .map_err(wrap)?;
                let verdict = serde_json::to_value(f.verdict).expect("verdict serializes");
                out.pass = verdict.as_str() == Some(p.expected.as_str());
                out.statistic = f.min_kernel_dim_src as f64;
                out.threshold = f.max_kernel_dim_dst as f64;
                out.comparison = "vs";
                out.details = serde_json::to_value(&f).expect("feasibility serializes");
                out.details["expected"] = json!(p.expected);
            }
            Aggregate::Refinement => {
                let p: RefinementParams = typed(&check.table, &ctx, line)?;
                let errors: Vec<f64> = p.couplings.iter().map(|n| refinement[&(index, n.clone())]).collect();
                let monotone = errors.windows(2).all(|w| w[1] < w[0]);
                let last = *errors.last().ok_or_else(|| cfg_err(line, format!("{ctx} needs couplings")))?;
                out.statistic = last;
                out.threshold = ev(&p.tol)?;
                out.pass = monotone && last <= out.threshold;
                out.details = json!({ "errors": errors, "monotone": monotone });
            }
        }
        out.ok = out.pass == out.expect;
        Ok(out)
    }
}

/// Standard Brownian motion from 0, for which the strong solution map is
/// the identity (bit for bit, as increments are re-accumulated exactly).
fn is_standard_wiener(m: &SdeModel) -> bool {
    m.label() == coupling::WIENER_LABEL && m.z0().iter().all(|&v| v == 0.0)
}

fn lift(src: &SdeModel, dst: &SdeModel, w: CoupledEnsemble) -> pathcouple::Result<CoupledEnsemble> {
    if is_standard_wiener(src) && is_standard_wiener(dst) {
        return Ok(w);
    }
    coupling::push_forward(src, dst, &w)
}

fn lists(check: &Check, key: &str, name: &str) -> bool {
    check
        .table
        .get(key)
        .and_then(|v| v.as_array())
        .is_some_and(|a| a.iter().any(|v| v.as_str() == Some(name)))
}

/// RMS over pairs of `[X¹, Y¹]_1 − target`, with the realized
/// covariation of each pair.
pub fn pathwise_covariation_rms(ens: &CoupledEnsemble, target: f64) -> f64 {
    let ss: f64 = verify::pathwise_covariation(ens).iter().map(|m| (m[(0, 0)] - target).powi(2)).sum();
    (ss / ens.n_pairs() as f64).sqrt()
}

/// Sample `Cov(X^i_1, Y^i_1)` and its standard error.
pub fn terminal_cross_covariance(ens: &CoupledEnsemble, i: usize) -> (f64, f64) {
    let n = ens.grid().n_steps();
    let xs: Vec<f64> = ens.pairs().map(|(x, _)| x.point(n)[i]).collect();
    let ys: Vec<f64> = ens.pairs().map(|(_, y)| y.point(n)[i]).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let prods: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let mean = prods.iter().sum::<f64>() / m;
    let var = prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean * m / (m - 1.0), (var / m).sqrt())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MarginalParams {
    #[allow(dead_code)]
    coupling: String,
    #[serde(default = "both")]
    marginal: String,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default = "one")]
    seeds: usize,
    min_pass_rate: Option<f64>,
    #[serde(default = "default_true")]
    expect: bool,
}

fn both() -> String {
    "both".into()
}

fn default_alpha() -> f64 {
    0.01
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateParams {
    #[allow(dead_code)]
    coupling: String,
    #[serde(default = "default_window")]
    window: usize,
    tol: Option<Num>,
    #[serde(default = "default_true")]
    expect: bool,
}

fn default_window() -> usize {
    verify::DEFAULT_WINDOW
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdaptednessParams {
    #[allow(dead_code)]
    coupling: String,
    #[serde(default = "default_k_neighbors")]
    k_neighbors: usize,
    accuracy: Option<[Num; 2]>,
    #[serde(default = "default_true")]
    expect: bool,
}

fn default_k_neighbors() -> usize {
    15
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CovariationParams {
    #[allow(dead_code)]
    coupling: String,
    expected: NumOrMatrix,
    #[serde(default = "default_k")]
    k: f64,
    window: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CrossCovParams {
    #[allow(dead_code)]
    coupling: String,
    expected: Num,
    #[serde(default)]
    component: usize,
    #[serde(default = "default_k")]
    k: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundParams {
    #[allow(dead_code)]
    coupling: String,
    max: Option<Num>,
    min: Option<Num>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpectedTol {
    expected: Num,
    tol: Num,
    rotation: Option<NumOrMatrix>,
    rotation_tol: Option<Num>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareParams {
    coupling: Option<String>,
    expected: Option<Num>,
    #[serde(default = "default_k")]
    k: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ListParams {
    couplings: Option<Vec<String>>,
    #[serde(default = "default_k")]
    k: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CostBelowParams {
    coupling: String,
    others: Vec<String>,
    #[serde(default = "default_k")]
    k: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeasibilityParams {
    expected: String,
    src: Option<String>,
    dst: Option<String>,
    #[serde(default = "default_probe_n", rename = "probe_N")]
    probe_n: usize,
    every: Option<usize>,
    rank_tol: Option<f64>,
}

fn default_probe_n() -> usize {
    16
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RefinementParams {
    couplings: Vec<String>,
    expected: Num,
    tol: Num,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Overrides;

    #[test]
    fn wiener_lift_is_exact() {
        let g = TimeGrid::new(64).unwrap();
        let bm = presets::brownian(2);
        let w = coupling::rotation_monge(&StateAngleRotation { dim: 2, rate: 2.0 }, &sde::sample_brownian(g, 2, 50, 4).unwrap())
            .unwrap();
        let p = coupling::push_forward(&bm, &bm, &w).unwrap();
        assert_eq!((p.x_values(), p.y_values()), (w.x_values(), w.y_values()));
        assert!(is_standard_wiener(&bm));
        let mut z = serde_json::Map::new();
        z.insert("z0".into(), json!(1.0));
        assert!(!is_standard_wiener(&presets::build_model("bm", 2, &z).unwrap()));
    }

    #[test]
    fn pathwise_statistics_match_oracles() {
        let g = TimeGrid::new(4).unwrap();
        // x increments (1, 1, 1, 1)/2, y increments (1, -1, 1, 1)/2.
        let x = vec![0.0, 0.5, 1.0, 1.5, 2.0, 0.0, 0.5, 1.0, 1.5, 2.0];
        let y = vec![0.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.5, 0.0, 0.5, 1.0];
        let e = CoupledEnsemble::from_values(g, 1, 2, 0, x, y, coupling::Provenance::new("t", Value::Null)).unwrap();
        // Realized covariation 0.25 + (-0.25) + 0.25 + 0.25 = 0.5 on each pair.
        assert!((pathwise_covariation_rms(&e, 0.5)).abs() < 1e-15);
        assert!((pathwise_covariation_rms(&e, 0.0) - 0.5).abs() < 1e-15);
        let (c, se) = terminal_cross_covariance(&e, 0);
        assert_eq!((c, se), (0.0, 0.0));
    }

    #[test]
    fn runtime_constructor_errors_name_the_coupling() {
        let text = r#"
schema = 1
d = 1
n_steps = 10
N = 4
seed = 0
[src]
preset = "bm"
[[coupling]]
name = "bad-block"
constructor = "rotation-chop"
params = { c = 0.5, block = 4 }
"#;
        let cfg = ExperimentConfig::parse(text, &Overrides::default()).unwrap();
        let err = Runner::new(&cfg).unwrap().run(Stage::Couple, |_, _| Ok(())).unwrap_err();
        let RunError::Config(e) = err else { panic!("{err}") };
        assert_eq!(e.line, Some(11));
        assert!(e.message.contains("bad-block") && e.message.contains("rotation-chop"), "{e}");

        let singular = text
            .replace("preset = \"bm\"", "preset = \"const-matrix\"\nparams = { sigma = 0.0 }\n[dst]\npreset = \"bm\"")
            .replace("rotation-chop", "composed-monge")
            .replace("params = { c = 0.5, block = 4 }", "");
        let cfg = ExperimentConfig::parse(&singular, &Overrides::default()).unwrap();
        let err = Runner::new(&cfg).unwrap().run(Stage::Couple, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, RunError::Numerical(ref m) if m.contains("composed-monge")), "{err}");
    }
}
