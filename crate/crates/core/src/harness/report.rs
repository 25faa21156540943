use std::fs;
use std::path::{Path, PathBuf};

use super::experiments::{Comparison, SweepTable};
use super::run::RunReport;
use crate::energy::Phase;
use crate::error::{Error, Result};

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `series,x,y` rows: training loss per epoch, S and P per task, cumulative
/// energy per task.
pub fn series_csv(report: &RunReport) -> String {
    let mut out = String::from("series,x,y\n");
    let mut epoch = 0usize;
    for s in &report.metrics.steps {
        for l in &s.train_loss {
            out.push_str(&format!("train_loss,{epoch},{l}\n"));
            epoch += 1;
        }
    }
    for s in &report.metrics.steps {
        out.push_str(&format!("eval_loss,{},{}\n", s.t, s.loss));
        if let Some(v) = s.stability {
            out.push_str(&format!("stability,{},{v}\n", s.t));
        }
        if let Some(v) = s.plasticity {
            out.push_str(&format!("plasticity,{},{v}\n", s.t));
        }
        out.push_str(&format!("energy_total,{},{}\n", s.t, s.energy_total));
    }
    out
}

/// Writes `<method>-<hash>-{metrics,ledger,series}.csv` and
/// `<method>-<hash>-summary.json`.
pub fn emit_report(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let method = report.config.method.name();
    let stem = format!("{method}-{}", report.config.hash());
    let empty = report.metrics.steps.is_empty();
    let ledger = if empty {
        "phase,counter,value\n".to_string()
    } else {
        report.ledger.to_csv()
    };
    Ok(vec![
        write(out_dir.join(format!("{stem}-metrics.csv")), &report.metrics.to_csv(&stem, method))?,
        write(out_dir.join(format!("{stem}-ledger.csv")), &ledger)?,
        write(out_dir.join(format!("{stem}-series.csv")), &series_csv(report))?,
        write(
            out_dir.join(format!("{stem}-summary.json")),
            &serde_json::to_string_pretty(report)?,
        )?,
    ])
}

pub fn read_summary(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn emit_sweep(table: &SweepTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let stem = format!("sweep-{}-{}", table.base.method.name(), table.base.hash());
    Ok(vec![
        write(out_dir.join(format!("{stem}.csv")), &table.to_csv())?,
        write(out_dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(table)?)?,
    ])
}

pub fn emit_comparison(cmp: &Comparison, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let joined: Vec<&str> = cmp.runs.iter().map(|r| r.config_hash.as_str()).collect();
    let stem = format!("compare-{}", super::short_hash(&joined.join(",")));
    Ok(vec![
        write(out_dir.join(format!("{stem}.csv")), &cmp.to_csv())?,
        write(out_dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(cmp)?)?,
    ])
}

/// Reads every `*-summary.json` under `dir` and writes `index.csv` with one
/// row per run, sorted by file name.
pub fn index_dir(dir: &Path) -> Result<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with("-summary.json")))
        .collect();
    files.sort();
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(
        "file,method,k,n_tasks,final_stability,mean_plasticity,final_forgetting,final_mean_loss,energy_train,energy_inference,energy_routing,energy_total\n",
    );
    for p in &files {
        let r = read_summary(p)?;
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        out.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.config.method.name(),
            r.config.k,
            r.metrics.steps.len(),
            f(r.metrics.final_stability()),
            f(r.metrics.mean_plasticity()),
            f(r.metrics.final_forgetting()),
            f(r.metrics.final_mean_loss()),
            r.energy(&[Phase::Train]),
            r.energy(&[Phase::Inference]),
            r.energy(&[Phase::Routing]),
            r.energy_total(),
        ));
    }
    write(dir.join("index.csv"), &out)
}
