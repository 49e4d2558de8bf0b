use serde::{Deserialize, Serialize};

use super::{run_experiment, ExperimentConfig, RunReport};
use crate::dp::DpConfig;
use crate::exec::Exec;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Noise scale of both directions with unit clipping bounds, applied in
    /// evaluation passes as well.
    DpSigma,
    Parties,
    Overlap,
}

impl SweepAxis {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::DpSigma => vec![0.0, 1.0, 3.0, 10.0],
            SweepAxis::Parties => (2..=6).map(f64::from).collect(),
            SweepAxis::Overlap => vec![0.1, 1.0],
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::DpSigma => {
                cfg.dp = DpConfig {
                    in_evaluation: true,
                    ..DpConfig::with_sigma(value)
                };
            }
            SweepAxis::Parties => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("party count {value}")));
                }
                cfg.parties = value as usize;
            }
            SweepAxis::Overlap => cfg.overlap = value,
        }
        cfg.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub seeds: Vec<u64>,
    pub accuracy_mean: f64,
    /// Sample standard deviation (zero for a single seed).
    pub accuracy_std: f64,
    pub rounds_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    /// Value-major, seed-minor.
    pub reports: Vec<RunReport>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `template` for every axis value and seed. Runs are independent, so
/// `exec` may spread them over threads; each run itself is sequential.
pub fn sweep(template: &ExperimentConfig, axis: SweepAxis, values: &[f64], seeds: &[u64], exec: Exec) -> Result<SweepSummary> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let mut jobs = Vec::new();
    for &v in values {
        for &s in seeds {
            let mut cfg = template.clone();
            cfg.seed = s;
            cfg.exec = Exec::Sequential;
            axis.apply(&mut cfg, v)?;
            jobs.push(cfg);
        }
    }
    let reports = exec
        .map(&jobs, |cfg| run_experiment(cfg).map(|o| o.report))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let points = values
        .iter()
        .zip(reports.chunks(seeds.len()))
        .map(|(&value, runs)| {
            let acc: Vec<f64> = runs.iter().map(|r| r.test_accuracy.unwrap_or(f64::NAN)).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let rounds: Vec<f64> = runs.iter().map(|r| r.search_rounds as f64).collect();
            SweepPoint {
                value,
                seeds: seeds.to_vec(),
                accuracy_mean,
                accuracy_std,
                rounds_mean: mean_std(&rounds).0,
            }
        })
        .collect();
    Ok(SweepSummary { axis, points, reports })
}
