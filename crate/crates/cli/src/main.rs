//! `pathcouple` command-line runner.
//!
//! Exit codes: 0 ok, 1 i/o failure, 2 config error, 3 numerical or domain
//! error, 4 a check failed under `--check`.

mod config;
mod experiments;
mod output;
mod runner;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pathcouple::{io, presets, sde, verify, CoupledEnsemble, TimeGrid};
use serde_json::{json, Map, Value};

use config::{ConfigError, ExperimentConfig, Overrides};
use runner::{lib_err, RunError, Runner, Stage};

#[derive(Parser)]
#[command(name = "pathcouple", version, about = "Bicausal couplings of SDE laws on path space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Bin,
    Json,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Number of time steps.
    #[arg(long = "n")]
    n_steps: Option<usize>,
    /// Number of paths or pairs.
    #[arg(long = "N")]
    n: Option<usize>,
    /// Sets config variable `a`.
    #[arg(long)]
    a: Option<f64>,
    /// Sets config variable `b`.
    #[arg(long)]
    b: Option<f64>,
    /// Sets a config variable, `NAME=VALUE`.
    #[arg(long = "set", value_parser = parse_var)]
    set: Vec<(String, f64)>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an ensemble from a preset.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        /// Preset parameter, `KEY=VALUE` with VALUE in TOML syntax.
        #[arg(long = "param")]
        params: Vec<String>,
    },
    /// Build the couplings of a config and write the ensembles.
    Couple {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the cost of every coupling in a config.
    Cost {
        #[command(flatten)]
        common: Common,
    },
    /// Run the checks of a config, or one test on a stored ensemble.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Binary ensemble written by `simulate` or `couple`.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "wiener-marginal")]
        test: TestKind,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = verify::DEFAULT_WINDOW)]
        window: usize,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 15)]
        k_neighbors: usize,
        /// Exit with 4 when a check fails.
        #[arg(long)]
        check: bool,
    },
    /// Run a named experiment or a config.
    Experiment {
        name: Option<String>,
        #[command(flatten)]
        common: Common,
        /// Exit with 4 when a check fails.
        #[arg(long)]
        check: bool,
        /// List the named experiments.
        #[arg(long)]
        list: bool,
    },
    /// Print the model presets and their parameters.
    ListPresets {
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TestKind {
    WienerMarginal,
    Certificate,
    Adaptedness,
}

fn parse_var(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected NAME=VALUE")?;
    let v: f64 = v.trim().parse().map_err(|e| format!("'{v}': {e}"))?;
    Ok((k.trim().to_string(), v))
}

enum Failure {
    Run(RunError),
    Check,
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure::Run(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Run(RunError::Config(e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(4),
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                RunError::Io(_) => 1,
                RunError::Config(_) => 2,
                RunError::Numerical(_) => 3,
            })
        }
    }
}

fn init_threads(n: Option<usize>) -> Result<(), RunError> {
    if let Some(n) = n {
        if n == 0 {
            return Err(RunError::Config(ConfigError::new("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunError::Config(ConfigError::new(format!("thread pool: {e}"))))?;
    }
    Ok(())
}

impl Common {
    fn overrides(&self) -> Overrides {
        let mut vars = Vec::new();
        vars.extend(self.a.map(|v| ("a".to_string(), v)));
        vars.extend(self.b.map(|v| ("b".to_string(), v)));
        vars.extend(self.set.iter().cloned());
        Overrides { d: self.d, n_steps: self.n_steps, n: self.n, seed: self.seed, vars }
    }

    fn load(&self, named: Option<&str>) -> Result<ExperimentConfig, RunError> {
        let text = match (named, &self.config) {
            (Some(name), None) => experiments::get(name)
                .ok_or_else(|| {
                    ConfigError::new(format!(
                        "unknown experiment '{name}' (known: {})",
                        experiments::names().collect::<Vec<_>>().join(", ")
                    ))
                })?
                .to_string(),
            (None, Some(path)) => fs::read_to_string(path)
                .map_err(|e| ConfigError::new(format!("cannot read {}: {e}", path.display())))?,
            (Some(_), Some(_)) => return Err(ConfigError::new("give an experiment name or --config, not both").into()),
            (None, None) => return Err(ConfigError::new("--config is required").into()),
        };
        let cfg = ExperimentConfig::parse(&text, &self.overrides()).map_err(|mut e| {
            if let (Some(path), true) = (&self.config, e.line.is_some()) {
                e.message = format!("{}: {}", path.display(), e.message);
            }
            e
        })?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        match cfg {
            Some(c) => c.output.dir.clone().map(PathBuf::from).unwrap_or_else(|| Path::new("out").join(&c.name)),
            None => PathBuf::from("out"),
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::ListPresets { format } => {
            let list = presets::list_presets();
            if format == Some(Format::Json) {
                println!("{}", serde_json::to_string_pretty(&list).expect("presets serialize"));
            } else {
                for p in list {
                    println!("{} - {}", p.name, p.summary);
                    for q in p.params {
                        println!("    {} : {} = {}  ({})", q.name, q.kind, q.default, q.help);
                    }
                }
            }
            Ok(())
        }
        Command::Simulate { common, preset, params } => simulate(&common, preset, &params),
        Command::Couple { common } => {
            init_threads(common.threads)?;
            let cfg = common.load(None)?;
            let dir = output::prepare(&common.out_dir(Some(&cfg)))?;
            let format = common.format.unwrap_or(Format::Bin);
            let outcome = Runner::new(&cfg)?.run(Stage::Couple, |name, e| output::write_coupled(&dir, name, e, format))?;
            output::write_json(&dir.join("couplings.json"), &outcome.report.couplings)?;
            Ok(())
        }
        Command::Cost { common } => {
            init_threads(common.threads)?;
            let cfg = common.load(None)?;
            let dir = output::prepare(&common.out_dir(Some(&cfg)))?;
            let outcome = Runner::new(&cfg)?.run(Stage::Cost, |_, _| Ok(()))?;
            let r = &outcome.report;
            let costs: Vec<Value> = r.couplings.iter().map(|c| json!({ "name": c.name, "cost": c.cost })).collect();
            let doc = json!({ "cost_spec": r.cost_spec, "closed_form": r.closed_form, "couplings": costs });
            output::write_json(&dir.join("cost.json"), &doc)?;
            for c in &r.couplings {
                if let Some(cost) = &c.cost {
                    println!("{:<24} mean {:.6}  stderr {:.6}", c.name, cost.mean, cost.stderr);
                }
            }
            if let Some(cf) = &r.closed_form {
                println!("{:<24} {:.6}", "closed form", cf.value.mean);
            }
            Ok(())
        }
        Command::Verify { common, input, test, alpha, window, tol, k_neighbors, check } => {
            init_threads(common.threads)?;
            match input {
                Some(path) => verify_file(&common, &path, test, alpha, window, tol, k_neighbors),
                None => {
                    let cfg = common.load(None)?;
                    let dir = output::prepare(&common.out_dir(Some(&cfg)))?;
                    let outcome = Runner::new(&cfg)?.run(Stage::Full, |_, _| Ok(()))?;
                    output::write_tests(&dir.join("tests.jsonl"), &outcome.tests)?;
                    output::write_json(&dir.join("checks.json"), &outcome.report.checks)?;
                    output::print_checks(&outcome.report);
                    finish(outcome.report.ok, check)
                }
            }
        }
        Command::Experiment { name, common, check, list } => {
            if list {
                for n in experiments::names() {
                    let text = experiments::get(n).expect("listed");
                    let cfg = ExperimentConfig::parse(text, &Overrides::default())?;
                    println!("{n:<28} {}", cfg.description.as_deref().unwrap_or(""));
                }
                return Ok(());
            }
            init_threads(common.threads)?;
            let cfg = common.load(name.as_deref())?;
            let dir = output::prepare(&common.out_dir(Some(&cfg)))?;
            let format = common.format.unwrap_or(Format::Bin);
            let keep = cfg.output.ensembles;
            let outcome = Runner::new(&cfg)?.run(Stage::Full, |name, e| {
                if keep {
                    output::write_coupled(&dir, name, e, format)?;
                }
                Ok(())
            })?;
            output::write_json(&dir.join("report.json"), &outcome.report)?;
            output::write_tests(&dir.join("tests.jsonl"), &outcome.tests)?;
            output::print_checks(&outcome.report);
            finish(outcome.report.ok, check)
        }
    }
}

fn finish(ok: bool, check: bool) -> Result<(), Failure> {
    if check && !ok {
        return Err(Failure::Check);
    }
    Ok(())
}

fn param_value(s: &str) -> Value {
    // Bare words are strings; everything else is read as a TOML value.
    match toml::from_str::<toml::Table>(&format!("v = {s}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key v")).unwrap_or(Value::String(s.into())),
        Err(_) => Value::String(s.to_string()),
    }
}

fn simulate(common: &Common, preset: Option<String>, params: &[String]) -> Result<(), Failure> {
    init_threads(common.threads)?;
    let (model, n_steps, n, seed, dir) = match (&preset, &common.config) {
        (Some(name), None) => {
            let mut map = Map::new();
            for p in params {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| ConfigError::new(format!("--param '{p}' is not KEY=VALUE")))?;
                map.insert(k.trim().to_string(), param_value(v.trim()));
            }
            if !presets::preset_exists(name) {
                return Err(ConfigError::new(format!("unknown preset '{name}'")).into());
            }
            let model = presets::build_model(name, common.d.unwrap_or(1), &map)
                .map_err(|e| lib_err(&format!("preset '{name}'"), None, e))?;
            (model, common.n_steps.unwrap_or(1024), common.n.unwrap_or(1000), common.seed.unwrap_or(0), common.out_dir(None))
        }
        (None, Some(_)) => {
            let cfg = common.load(None)?;
            let model = presets::build_model(cfg.src.preset.get_ref(), cfg.d, &cfg.preset_params(&cfg.src)?)
                .map_err(|e| lib_err("model 'src'", None, e))?;
            let dir = common.out_dir(Some(&cfg));
            (model, cfg.n_steps, cfg.n, cfg.seed, dir)
        }
        _ => return Err(ConfigError::new("simulate needs exactly one of --preset or --config").into()),
    };
    let grid = TimeGrid::new(n_steps).map_err(|e| lib_err("grid", None, e))?;
    let ens = sde::simulate(&model, grid, n, seed).map_err(|e| lib_err(&format!("simulate '{}'", model.label()), None, e))?;
    let dir = output::prepare(&dir)?;
    let formats: &[Format] = match common.format {
        None => &[Format::Bin, Format::Csv],
        Some(Format::Bin) => &[Format::Bin],
        Some(Format::Csv) => &[Format::Csv],
        Some(Format::Json) => &[Format::Json],
    };
    for f in formats {
        output::write_paths(&dir, "ensemble", &ens, *f)?;
    }
    println!("wrote {} paths of '{}' to {}", n, model.label(), dir.display());
    Ok(())
}

fn verify_file(
    common: &Common,
    path: &Path,
    test: TestKind,
    alpha: f64,
    window: usize,
    tol: Option<f64>,
    k_neighbors: usize,
) -> Result<(), Failure> {
    let bytes = fs::read(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    let ctx = format!("verify {}", path.display());
    let wrap = |e| lib_err(&ctx, None, e);
    let coupled: Option<CoupledEnsemble> = io::read_coupled_bin(&bytes[..]).ok();
    let mut reports = Vec::new();
    match (test, &coupled) {
        (TestKind::WienerMarginal, Some(c)) => {
            for (tag, m) in [("x", c.x_ensemble()), ("y", c.y_ensemble())] {
                let mut r = verify::wiener_marginal_test(&m, alpha).map_err(wrap)?;
                r.test = format!("{}:{tag}", r.test);
                reports.push(r);
            }
        }
        (TestKind::WienerMarginal, None) => {
            let e = io::read_ensemble_bin(&bytes[..]).map_err(wrap)?;
            reports.push(verify::wiener_marginal_test(&e, alpha).map_err(wrap)?);
        }
        (TestKind::Certificate, Some(c)) => reports.push(verify::monge_certificate(c, window, tol).map_err(wrap)?),
        (TestKind::Adaptedness, Some(c)) => reports.push(verify::adaptedness_probe(c, k_neighbors).map_err(wrap)?),
        (_, None) => return Err(ConfigError::new(format!("{ctx}: this test needs a coupled ensemble")).into()),
    }
    let mut buf = Vec::new();
    verify::write_jsonl(&reports, &mut buf).map_err(wrap)?;
    match &common.out {
        Some(dir) => {
            let dir = output::prepare(dir)?;
            fs::write(dir.join("tests.jsonl"), &buf).map_err(RunError::from)?;
        }
        None => print!("{}", String::from_utf8_lossy(&buf)),
    }
    Ok(())
}
