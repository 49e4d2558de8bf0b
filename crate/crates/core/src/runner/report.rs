use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::RunReport;
use crate::dp::PrivacyRecord;
use crate::Result;

pub const METRICS_HEADER: &str = "run,iteration,loss,val_acc,rounds,bytes";

fn pretty<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report values serialize") + "\n"
}

#[derive(Serialize)]
struct PrivacyEntry<'a> {
    run: usize,
    algorithm: &'a str,
    seed: u64,
    records: &'a [PrivacyRecord],
}

/// Metrics of every run, one row per search iteration.
pub fn metrics_csv(reports: &[RunReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (run, r) in reports.iter().enumerate() {
        for m in &r.metrics {
            let acc = m.val_acc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{run},{},{},{acc},{},{}", m.iteration, m.loss, m.rounds, m.bytes).expect("string write");
        }
    }
    out
}

/// Writes `run.json`, `metrics.csv`, `arch_party{k}.json` and
/// `privacy.json` into `dir`. The output depends only on the reports.
pub fn emit_report(reports: &[RunReport], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.json"), pretty(reports))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(reports))?;
    let parties = reports.iter().map(|r| r.architectures.len()).max().unwrap_or(0);
    for k in 0..parties {
        let archs: Vec<Option<&serde_json::Value>> = reports.iter().map(|r| r.architectures.get(k)).collect();
        fs::write(dir.join(format!("arch_party{}.json", k + 1)), pretty(&archs))?;
    }
    let privacy: Vec<PrivacyEntry> = reports
        .iter()
        .enumerate()
        .map(|(run, r)| PrivacyEntry {
            run,
            algorithm: r.algorithm.name(),
            seed: r.seed,
            records: &r.privacy,
        })
        .collect();
    fs::write(dir.join("privacy.json"), pretty(&privacy))?;
    Ok(())
}

/// Wall-clock seconds per run, kept apart from the reproducible files.
pub fn write_timing(dir: &Path, seconds: &[f64]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("timing.json"), pretty(seconds))?;
    Ok(())
}
