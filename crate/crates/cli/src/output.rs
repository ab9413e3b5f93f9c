use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pathcouple::verify::{self, TestReport};
use pathcouple::{io, CoupledEnsemble, PathEnsemble};
use serde::Serialize;
use serde_json::json;

use crate::runner::{lib_err, Report, RunError};
use crate::Format;

pub fn prepare(dir: &Path) -> Result<PathBuf, RunError> {
    fs::create_dir_all(dir).map_err(|e| RunError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| RunError::Io(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| RunError::Io(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_tests(path: &Path, tests: &[TestReport]) -> Result<(), RunError> {
    let mut w = create(path)?;
    verify::write_jsonl(tests, &mut w).map_err(|e| lib_err("tests.jsonl", None, e))?;
    w.flush()?;
    Ok(())
}

fn nested(values: &[f64], d: usize, points: usize) -> Vec<Vec<&[f64]>> {
    values.chunks(points * d).map(|p| p.chunks(d).collect()).collect()
}

pub fn write_paths(dir: &Path, stem: &str, e: &PathEnsemble, format: Format) -> Result<(), RunError> {
    let ctx = format!("writing {stem}");
    match format {
        Format::Bin => {
            let mut w = create(&dir.join(format!("{stem}.bin")))?;
            io::write_ensemble_bin(e, &mut w).map_err(|x| lib_err(&ctx, None, x))?;
            w.flush()?;
        }
        Format::Csv => {
            let w = create(&dir.join(format!("{stem}.csv")))?;
            io::write_ensemble_csv(e, w).map_err(|x| lib_err(&ctx, None, x))?;
        }
        Format::Json => {
            let g = e.grid();
            let doc = json!({
                "d": e.dim(), "n_steps": g.n_steps(), "N": e.n_paths(), "seed": e.seed(),
                "paths": nested(e.values(), e.dim(), g.n_points()),
            });
            write_json(&dir.join(format!("{stem}.json")), &doc)?;
        }
    }
    Ok(())
}

pub fn write_coupled(dir: &Path, stem: &str, e: &CoupledEnsemble, format: Format) -> Result<(), RunError> {
    let ctx = format!("writing {stem}");
    match format {
        Format::Bin => {
            let mut w = create(&dir.join(format!("{stem}.bin")))?;
            io::write_coupled_bin(e, &mut w).map_err(|x| lib_err(&ctx, None, x))?;
            w.flush()?;
        }
        Format::Csv => {
            let w = create(&dir.join(format!("{stem}.csv")))?;
            io::write_coupled_csv(e, w).map_err(|x| lib_err(&ctx, None, x))?;
        }
        Format::Json => {
            let g = e.grid();
            let (d, p) = (e.dim(), g.n_points());
            let doc = json!({
                "d": d, "n_steps": g.n_steps(), "N": e.n_pairs(), "seed": e.seed(),
                "provenance": e.provenance(),
                "x": nested(e.x_values(), d, p),
                "y": nested(e.y_values(), d, p),
            });
            write_json(&dir.join(format!("{stem}.json")), &doc)?;
        }
    }
    Ok(())
}

pub fn print_checks(report: &Report) {
    for c in &report.checks {
        let target = c.coupling.as_deref().map(|n| format!(" [{n}]")).unwrap_or_default();
        println!(
            "{} {}{}: statistic {:.6} {} {:.6} (pass={}, expect={})",
            if c.ok { "ok  " } else { "FAIL" },
            c.kind,
            target,
            c.statistic,
            c.comparison,
            c.threshold,
            c.pass,
            c.expect
        );
    }
    println!("{}: {}", report.name, if report.ok { "all checks ok" } else { "checks failed" });
}
