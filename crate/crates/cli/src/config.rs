//! TOML experiment configs.
//!
//! Schema version 1:
//!
//! ```toml
//! schema = 1
//! name = "closed-form-d1"
//! d = 1
//! n_steps = 1024
//! N = 10000
//! seed = 1
//!
//! [vars]            # numbers referenced as "$a" in params, or in expressions
//! a = 2.0
//!
//! [src]
//! preset = "const-matrix"
//! params = { sigma = "$a" }
//!
//! [dst]             # defaults to [src]
//! preset = "bm"
//!
//! [cost]            # any CostSpec, plus closed-form options
//! kind = "separable"
//! h = "zero"
//! g = "identity"
//! closed_form = true
//!
//! [[coupling]]
//! name = "optimal"
//! constructor = "optimal"
//!
//! [[check]]
//! kind = "closed-form"
//! expected = "(a - b)^2"
//! tol = 0.02
//! ```

use std::collections::BTreeMap;
use std::fmt;

use evalexpr::{ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Value as ExprValue};
use pathcouple::cost::CostSpec;
use pathcouple::presets;
use serde::Deserialize;
use serde_json::{Map, Value};
use toml::Spanned;

pub const SCHEMA_VERSION: u32 = 1;

/// A config problem, with the 1-based source line when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        Self { line: None, message: message.into() }
    }

    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line: Some(line), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// A number, or an expression over `[vars]` and `pi`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Num {
    Value(f64),
    Expr(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum NumOrMatrix {
    Scalar(Num),
    Matrix(Vec<Vec<Num>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Spanned<String>,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CostSection {
    #[serde(default)]
    pub closed_form: bool,
    /// Paths from `src` used to tabulate the closed form.
    #[serde(default, rename = "probe_N")]
    pub probe_n: Option<usize>,
    #[serde(flatten)]
    pub spec: toml::Table,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    pub name: Spanned<String>,
    pub constructor: Spanned<String>,
    #[serde(default)]
    pub params: toml::Table,
    pub n_steps: Option<usize>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub seed: Option<u64>,
    /// Model names; `"src"`, `"dst"` or a key of `[models]`.
    pub src: Option<String>,
    pub dst: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
    /// Also write every coupled ensemble.
    #[serde(default)]
    pub ensembles: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: Spanned<u32>,
    name: Option<String>,
    description: Option<String>,
    d: usize,
    n_steps: usize,
    #[serde(rename = "N")]
    n: usize,
    seed: u64,
    #[serde(default)]
    vars: BTreeMap<String, f64>,
    src: ModelSection,
    dst: Option<ModelSection>,
    #[serde(default)]
    models: BTreeMap<String, ModelSection>,
    cost: Option<Spanned<CostSection>>,
    #[serde(default, rename = "coupling")]
    couplings: Vec<CouplingSection>,
    #[serde(default, rename = "check")]
    checks: Vec<Spanned<toml::Table>>,
    output: Option<OutputSection>,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub line: usize,
    pub kind: String,
    pub table: toml::Table,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub description: Option<String>,
    pub d: usize,
    pub n_steps: usize,
    pub n: usize,
    pub seed: u64,
    pub vars: BTreeMap<String, f64>,
    pub src: ModelSection,
    pub dst: ModelSection,
    /// Extra named models, usable by couplings and checks.
    pub models: BTreeMap<String, ModelSection>,
    pub cost: Option<(CostSpec, CostSection)>,
    pub couplings: Vec<CouplingSection>,
    pub checks: Vec<Check>,
    pub output: OutputSection,
    text: String,
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub d: Option<usize>,
    pub n_steps: Option<usize>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub vars: Vec<(String, f64)>,
}

pub const CONSTRUCTORS: &[&str] = &[
    "synchronous",
    "antithetic",
    "independent",
    "correlated",
    "rotation-monge",
    "composed-monge",
    "monge-sde",
    "optimal",
    "tanaka",
    "rotation-chop",
];

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl ExperimentConfig {
    pub fn parse(text: &str, ov: &Overrides) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start));
            ConfigError { line, message: e.message().trim().to_string() }
        })?;
        if *raw.schema.get_ref() != SCHEMA_VERSION {
            return Err(ConfigError::at(
                line_of(text, raw.schema.span().start),
                format!("unsupported schema version {}, expected {SCHEMA_VERSION}", raw.schema.get_ref()),
            ));
        }
        let mut vars = raw.vars;
        for (k, v) in &ov.vars {
            vars.insert(k.clone(), *v);
        }
        let cost = match raw.cost {
            None => None,
            Some(sp) => {
                let line = line_of(text, sp.span().start);
                let section = sp.into_inner();
                let spec: CostSpec = section
                    .spec
                    .clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| ConfigError::at(line, format!("[cost]: {}", e.message().trim())))?;
                spec.validate().map_err(|e| ConfigError::at(line, format!("[cost]: {e}")))?;
                Some((spec, section))
            }
        };
        let mut checks = Vec::with_capacity(raw.checks.len());
        for c in raw.checks {
            let line = line_of(text, c.span().start);
            let table = c.into_inner();
            let kind = match table.get("kind") {
                Some(toml::Value::String(k)) => k.clone(),
                _ => return Err(ConfigError::at(line, "[[check]] needs a string 'kind'")),
            };
            checks.push(Check { line, kind, table });
        }
        let cfg = Self {
            name: raw.name.unwrap_or_else(|| "experiment".into()),
            description: raw.description,
            d: ov.d.unwrap_or(raw.d),
            n_steps: ov.n_steps.unwrap_or(raw.n_steps),
            n: ov.n.unwrap_or(raw.n),
            seed: ov.seed.unwrap_or(raw.seed),
            vars,
            dst: raw.dst.unwrap_or_else(|| raw.src.clone()),
            src: raw.src,
            models: raw.models,
            cost,
            couplings: raw.couplings,
            checks,
            output: raw.output.unwrap_or(OutputSection { dir: None, ensembles: false }),
            text: text.to_string(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn line(&self, offset: usize) -> usize {
        line_of(&self.text, offset)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.d == 0 || self.n_steps == 0 || self.n == 0 {
            return Err(ConfigError::new("d, n_steps and N must be positive"));
        }
        for m in [&self.src, &self.dst].into_iter().chain(self.models.values()) {
            let name = m.preset.get_ref();
            let line = self.line(m.preset.span().start);
            if !presets::preset_exists(name) {
                let known: Vec<_> = presets::list_presets().iter().map(|p| p.name).collect();
                return Err(ConfigError::at(
                    line,
                    format!("unknown preset '{name}' (known: {})", known.join(", ")),
                ));
            }
            let params = self.preset_params(m)?;
            presets::build_model(name, self.d, &params)
                .map_err(|e| ConfigError::at(line, format!("preset '{name}': {e}")))?;
        }
        let mut names = Vec::new();
        for c in &self.couplings {
            let line = self.line(c.constructor.span().start);
            if !CONSTRUCTORS.contains(&c.constructor.get_ref().as_str()) {
                return Err(ConfigError::at(
                    line,
                    format!(
                        "unknown constructor '{}' (known: {})",
                        c.constructor.get_ref(),
                        CONSTRUCTORS.join(", ")
                    ),
                ));
            }
            if names.contains(c.name.get_ref()) {
                return Err(ConfigError::at(
                    self.line(c.name.span().start),
                    format!("duplicate coupling name '{}'", c.name.get_ref()),
                ));
            }
            if c.constructor.get_ref() == "optimal"
                && !self.cost.as_ref().is_some_and(|(_, s)| s.closed_form)
            {
                return Err(ConfigError::at(line, "constructor 'optimal' needs [cost] closed_form = true"));
            }
            for m in c.src.iter().chain(&c.dst) {
                self.model(m).map_err(|e| ConfigError::at(line, e))?;
            }
            names.push(c.name.get_ref().clone());
        }
        for c in &self.checks {
            for key in ["src", "dst"] {
                if let Some(v) = c.table.get(key) {
                    self.model(v.as_str().unwrap_or(""))
                        .map_err(|e| ConfigError::at(c.line, format!("check '{}': {e}", c.kind)))?;
                }
            }
            for key in ["coupling"] {
                if let Some(v) = c.table.get(key) {
                    let Some(s) = v.as_str() else {
                        return Err(ConfigError::at(c.line, format!("check '{}': '{key}' must be a string", c.kind)));
                    };
                    if !names.iter().any(|n| n == s) {
                        return Err(ConfigError::at(c.line, format!("check '{}': no coupling named '{s}'", c.kind)));
                    }
                }
            }
            for key in ["couplings", "others"] {
                if let Some(v) = c.table.get(key) {
                    let list = v.as_array().ok_or_else(|| {
                        ConfigError::at(c.line, format!("check '{}': '{key}' must be a list", c.kind))
                    })?;
                    for s in list {
                        let s = s.as_str().unwrap_or("");
                        if !names.iter().any(|n| n == s) {
                            return Err(ConfigError::at(c.line, format!("check '{}': no coupling named '{s}'", c.kind)));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn model(&self, name: &str) -> Result<&ModelSection, String> {
        match name {
            "src" => Ok(&self.src),
            "dst" => Ok(&self.dst),
            _ => self.models.get(name).ok_or_else(|| format!("no model named '{name}'")),
        }
    }

    /// Preset parameters as JSON, with `"$name"` strings replaced by vars.
    pub fn preset_params(&self, m: &ModelSection) -> Result<Map<String, Value>, ConfigError> {
        let line = self.line(m.preset.span().start);
        let mut out = Map::new();
        for (k, v) in &m.params {
            out.insert(k.clone(), self.to_json(v).map_err(|e| ConfigError::at(line, e))?);
        }
        Ok(out)
    }

    fn to_json(&self, v: &toml::Value) -> Result<Value, String> {
        Ok(match v {
            toml::Value::String(s) => match s.strip_prefix('$') {
                Some(var) => Value::from(self.var(var)?),
                None => Value::String(s.clone()),
            },
            toml::Value::Integer(i) => Value::from(*i),
            toml::Value::Float(f) => Value::from(*f),
            toml::Value::Boolean(b) => Value::Bool(*b),
            toml::Value::Datetime(d) => Value::String(d.to_string()),
            toml::Value::Array(a) => Value::Array(a.iter().map(|x| self.to_json(x)).collect::<Result<_, _>>()?),
            toml::Value::Table(t) => {
                let mut m = Map::new();
                for (k, x) in t {
                    m.insert(k.clone(), self.to_json(x)?);
                }
                Value::Object(m)
            }
        })
    }

    fn var(&self, name: &str) -> Result<f64, String> {
        self.vars.get(name).copied().ok_or_else(|| format!("undefined variable '${name}'"))
    }

    pub fn eval(&self, n: &Num) -> Result<f64, String> {
        match n {
            Num::Value(v) => Ok(*v),
            Num::Expr(s) => {
                let src = s.replace('$', "");
                let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
                let _ = ctx.set_value("pi".into(), ExprValue::from_float(std::f64::consts::PI));
                for (k, v) in &self.vars {
                    let _ = ctx.set_value(k.clone(), ExprValue::from_float(*v));
                }
                evalexpr::eval_number_with_context(&src, &ctx).map_err(|e| format!("cannot evaluate '{s}': {e}"))
            }
        }
    }

    pub fn eval_matrix(&self, v: &NumOrMatrix) -> Result<Vec<Vec<f64>>, String> {
        match v {
            NumOrMatrix::Scalar(s) => {
                let s = self.eval(s)?;
                Ok((0..self.d).map(|i| (0..self.d).map(|j| if i == j { s } else { 0.0 }).collect()).collect())
            }
            NumOrMatrix::Matrix(rows) => rows.iter().map(|r| r.iter().map(|x| self.eval(x)).collect()).collect(),
        }
    }
}

/// Deserializes `table` minus `kind` into `T`, reporting errors at `line`.
pub fn typed<T: for<'de> Deserialize<'de>>(table: &toml::Table, what: &str, line: usize) -> Result<T, ConfigError> {
    let mut t = table.clone();
    t.remove("kind");
    t.try_into()
        .map_err(|e: toml::de::Error| ConfigError::at(line, format!("{what}: {}", e.message().trim())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
schema = 1
d = 1
n_steps = 8
N = 4
seed = 3

[vars]
a = 2.0

[src]
preset = "const-matrix"
params = { sigma = "$a" }
"#;

    #[test]
    fn parses_and_overrides() {
        let ov = Overrides { n: Some(9), vars: vec![("a".into(), 5.0)], ..Default::default() };
        let c = ExperimentConfig::parse(BASE, &ov).unwrap();
        assert_eq!((c.n, c.n_steps, c.seed), (9, 8, 3));
        assert_eq!(c.dst.preset.get_ref(), "const-matrix");
        assert_eq!(c.preset_params(&c.src).unwrap()["sigma"], Value::from(5.0));
        assert_eq!(c.eval(&Num::Expr("(a - 1)^2".into())).unwrap(), 16.0);
        assert!((c.eval(&Num::Expr("pi / 6".into())).unwrap() - std::f64::consts::FRAC_PI_6).abs() < 1e-15);
    }

    #[test]
    fn every_listed_preset_validates() {
        for p in presets::list_presets() {
            let d = if p.name == "rotation-by-state" { 2 } else { 1 };
            let text = format!("schema = 1\nd = {d}\nn_steps = 4\nN = 2\nseed = 0\n[src]\npreset = \"{}\"\n", p.name);
            ExperimentConfig::parse(&text, &Overrides::default()).unwrap();
        }
    }

    #[test]
    fn diagnostics_carry_lines() {
        let bad = BASE.replace("\"const-matrix\"", "\"no-such\"");
        let e = ExperimentConfig::parse(&bad, &Overrides::default()).unwrap_err();
        assert_eq!(e.line, Some(12));
        assert!(e.message.contains("no-such"), "{e}");

        let e = ExperimentConfig::parse(&BASE.replace("seed = 3", "seed = \"x\""), &Overrides::default()).unwrap_err();
        assert_eq!(e.line, Some(6), "{e}");

        let e = ExperimentConfig::parse(&BASE.replace("schema = 1", "schema = 7"), &Overrides::default()).unwrap_err();
        assert_eq!(e.line, Some(2));

        let text = format!("{BASE}\n[[coupling]]\nname = \"s\"\nconstructor = \"magic\"\n");
        let e = ExperimentConfig::parse(&text, &Overrides::default()).unwrap_err();
        assert_eq!(e.line, Some(17), "{e}");

        let text = format!("{BASE}\n[[check]]\nkind = \"distance\"\ncoupling = \"missing\"\n");
        let e = ExperimentConfig::parse(&text, &Overrides::default()).unwrap_err();
        assert_eq!(e.line, Some(15), "{e}");
        assert!(e.message.contains("missing"));

        let e = ExperimentConfig::parse(&BASE.replace("\"$a\"", "\"$zz\""), &Overrides::default()).unwrap_err();
        assert!(e.message.contains("$zz"), "{e}");
    }
}
