use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::experiment::{RunReport, SweepRow};

/// Write `report.toml` and `report.csv` into `dir` and return both paths.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let toml_path = dir.join("report.toml");
    let text = toml::to_string(report).map_err(|e| Error::Parse(format!("report: {e}")))?;
    fs::write(&toml_path, text).map_err(|e| Error::io(&toml_path, e))?;
    let csv_path = dir.join("report.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(report, file)?;
    Ok((toml_path, csv_path))
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// One row per (method, seed, metric) carrying the method's mean and std for that metric.
pub fn write_csv<W: std::io::Write>(report: &RunReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Parse(format!("csv: {e}"));
    out.write_record(["method", "seed", "metric", "value", "mean", "std"]).map_err(csv_err)?;
    for cell in &report.cells {
        for (metric, value) in cell.metrics() {
            let (mean, std) = report.aggregate(&cell.method, &metric).map_or((f64::NAN, f64::NAN), |a| (a.mean, a.std));
            out.write_record([cell.method.clone(), cell.seed.to_string(), metric, format!("{value:?}"), format!("{mean:?}"), format!("{std:?}")])
                .map_err(csv_err)?;
        }
    }
    out.flush().map_err(|e| Error::Parse(format!("csv: {e}")))?;
    Ok(())
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Parse(format!("csv: {e}")))?;
    }
    out.flush().map_err(|e| Error::Parse(format!("csv: {e}")))?;
    Ok(())
}
