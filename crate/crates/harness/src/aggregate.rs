//! Cross-seed statistics: per-iteration means with 95% normal-approximation
//! confidence half-widths.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::runner::{read_run_csv, RunRecord};
use crate::HarnessError;

/// z-value of the two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub n: usize,
    pub mean: f64,
    /// `1.96 * sd / sqrt(n)` with the sample standard deviation; `None` below two values.
    pub half_width: Option<f64>,
}

pub fn mean_band(values: &[f64]) -> Option<Band> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let half_width = (n >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        Z_95 * (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    });
    Some(Band { n, mean, half_width })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub iteration: usize,
    pub epoch: usize,
    /// Runs that reached this iteration.
    pub runs: usize,
    pub train_loss_mean: f64,
    pub train_loss_ci: Option<f64>,
    pub val_runs: usize,
    pub val_loss_mean: Option<f64>,
    pub val_loss_ci: Option<f64>,
}

/// Aggregates runs row by row; runs that stopped early drop out of later rows.
pub fn aggregate_records(runs: &[&[RunRecord]]) -> Vec<AggregateRow> {
    let longest = runs.iter().map(|r| r.len()).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let rows: Vec<&RunRecord> = runs.iter().filter_map(|r| r.get(i)).collect();
            let train: Vec<f64> = rows.iter().map(|r| r.train_loss).collect();
            let val: Vec<f64> = rows.iter().filter_map(|r| r.val_loss).collect();
            let tb = mean_band(&train).expect("at least one run reaches row i");
            let vb = mean_band(&val);
            AggregateRow {
                iteration: rows[0].iteration,
                epoch: rows[0].epoch,
                runs: tb.n,
                train_loss_mean: tb.mean,
                train_loss_ci: tb.half_width,
                val_runs: val.len(),
                val_loss_mean: vb.map(|b| b.mean),
                val_loss_ci: vb.and_then(|b| b.half_width),
            }
        })
        .collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<(), HarnessError> {
    let csv_err = |source| HarnessError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

/// Splits `<method>_seed<k>.csv` into its parts.
pub fn parse_run_file_name(name: &str) -> Option<(Method, u64)> {
    let stem = name.strip_suffix(".csv")?;
    let (method, seed) = stem.rsplit_once("_seed")?;
    Some((Method::parse(method)?, seed.parse().ok()?))
}

/// Reads every run CSV in `dir`, writes `<method>_aggregate.csv` next to
/// them and returns the aggregates keyed by method.
pub fn aggregate_dir(dir: &Path) -> Result<BTreeMap<Method, Vec<AggregateRow>>, HarnessError> {
    let entries = fs::read_dir(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
    let mut by_method: BTreeMap<Method, Vec<(u64, Vec<RunRecord>)>> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
        let name = entry.file_name();
        let Some((method, seed)) = name.to_str().and_then(parse_run_file_name) else { continue };
        by_method.entry(method).or_default().push((seed, read_run_csv(&entry.path())?));
    }
    if by_method.is_empty() {
        return Err(HarnessError::NoRuns(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for (method, mut runs) in by_method {
        runs.sort_by_key(|(seed, _)| *seed);
        let slices: Vec<&[RunRecord]> = runs.iter().map(|(_, r)| r.as_slice()).collect();
        let rows = aggregate_records(&slices);
        write_aggregate_csv(&dir.join(format!("{}_aggregate.csv", method.as_str())), &rows)?;
        out.insert(method, rows);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use aadl_core::StepKind;

    fn run(losses: &[f64]) -> Vec<RunRecord> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &l)| RunRecord {
                iteration: i,
                epoch: 0,
                train_loss: l,
                val_loss: Some(2.0 * l),
                residual_l2: l,
                candidate_residual_l2: None,
                step_kind: StepKind::Plain,
                ma_applied: false,
                ma_active: false,
                wall_ms: 0.0,
            })
            .collect()
    }

    #[test]
    fn identical_runs_have_zero_width() {
        let a = run(&[3.0, 2.0, 1.0]);
        let rows = aggregate_records(&[&a, &a, &a]);
        assert!(rows.iter().all(|r| r.train_loss_ci == Some(0.0)));
        assert_eq!(rows[1].train_loss_mean, 2.0);
    }

    #[test]
    fn two_constant_runs() {
        let (a, b) = (run(&[1.0; 4]), run(&[3.0; 4]));
        for r in aggregate_records(&[&a, &b]) {
            assert_eq!(r.train_loss_mean, 2.0);
            assert!((r.train_loss_ci.unwrap() - 1.96).abs() < 1e-15);
            assert_eq!(r.val_loss_mean, Some(4.0));
        }
    }

    #[test]
    fn short_runs_drop_out() {
        let (a, b) = (run(&[1.0, 1.0, 1.0]), run(&[3.0]));
        let rows = aggregate_records(&[&a, &b]);
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].runs, rows[2].runs), (2, 1));
        assert_eq!(rows[2].train_loss_ci, None);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn file_names_round_trip() {
        assert_eq!(parse_run_file_name("aadl_ma_seed12.csv"), Some((Method::AadlMa, 12)));
        assert_eq!(parse_run_file_name("plain_seed0.csv"), Some((Method::Plain, 0)));
        assert_eq!(parse_run_file_name("plain_aggregate.csv"), None);
        assert_eq!(parse_run_file_name("summary.json"), None);
    }
}
