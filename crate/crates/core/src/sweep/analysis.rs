use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SweepRecord;
use crate::error::{Error, Result};
use crate::geometry::{powerlaw_fit, PowerLawFit};
use crate::io::{csv_bytes, fmt_f64, write_atomic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Optimizer,
    LearningRate,
    BatchNorm,
    Hidden,
    Activation,
    Dataset,
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        match self {
            GroupKey::Optimizer => "optimizer",
            GroupKey::LearningRate => "learning_rate",
            GroupKey::BatchNorm => "batch_norm",
            GroupKey::Hidden => "hidden",
            GroupKey::Activation => "activation",
            GroupKey::Dataset => "dataset",
        }
    }

    fn value(self, r: &SweepRecord) -> String {
        match self {
            GroupKey::Optimizer => {
                let mut o = r.optimizer.clone();
                o.learning_rate = 0.0;
                o.label().replace("(0)", "")
            }
            GroupKey::LearningRate => r.optimizer.learning_rate.to_string(),
            GroupKey::BatchNorm => if r.spec.batch_norm { "bn" } else { "no_bn" }.to_string(),
            GroupKey::Hidden => {
                let s = &r.spec.layer_sizes;
                s[1..s.len() - 1].iter().map(|w| w.to_string()).collect::<Vec<_>>().join("x")
            }
            GroupKey::Activation => format!("{:?}", r.spec.activation).to_lowercase(),
            GroupKey::Dataset => r.dataset.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub key: Vec<String>,
    pub total: usize,
    /// Records that pass the loss threshold.
    pub included: usize,
    pub nonmonotone: usize,
    /// `None` when no record in the group is included.
    pub rate: Option<f64>,
    /// Mean min-Δ over included records with min-Δ > 0.
    pub mean_min_delta: Option<f64>,
}

impl TableRow {
    /// `0.50 (4)`, or `-` for an empty group.
    pub fn cell(&self) -> String {
        match self.rate {
            Some(r) => format!("{r:.2} ({})", self.included),
            None => "-".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub keys: Vec<GroupKey>,
    pub threshold: f64,
    pub tolerance: f64,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn row(&self, key: &[&str]) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.key.iter().map(String::as_str).eq(key.iter().copied()))
    }

    pub fn csv(&self) -> Result<Vec<u8>> {
        let mut header: Vec<&str> = self.keys.iter().map(|k| k.name()).collect();
        header.extend(["nonmonotone_rate", "included", "total", "mean_positive_min_delta", "threshold", "tolerance"]);
        csv_bytes(
            &header,
            self.rows.iter().map(|r| {
                let mut v = r.key.clone();
                v.push(r.rate.map_or("-".to_string(), fmt_f64));
                v.push(r.included.to_string());
                v.push(r.total.to_string());
                v.push(r.mean_min_delta.map_or("-".to_string(), fmt_f64));
                v.push(fmt_f64(self.threshold));
                v.push(fmt_f64(self.tolerance));
                v
            }),
        )
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.keys.iter().map(|k| k.name()).collect();
        writeln!(f, "{} | non-monotone (n) | mean positive min-delta", names.join(" | "))?;
        for r in &self.rows {
            let m = r.mean_min_delta.map_or("-".to_string(), |m| format!("{m:.4}"));
            writeln!(f, "{} | {} | {}", r.key.join(" | "), r.cell(), m)?;
        }
        Ok(())
    }
}

/// Proportion of included runs whose min-Δ exceeds `tolerance`, per group.
pub fn table_nonmonotone_rate(records: &[SweepRecord], keys: &[GroupKey], threshold: f64, tolerance: f64) -> Result<Table> {
    if records.is_empty() {
        return Err(Error::config("no records to tabulate"));
    }
    let mut groups: BTreeMap<Vec<String>, Vec<&SweepRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(keys.iter().map(|k| k.value(r)).collect()).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|(key, rs)| {
            let inc: Vec<&SweepRecord> = rs.iter().copied().filter(|r| r.included(threshold)).collect();
            let nonmonotone = inc.iter().filter(|r| r.is_nonmonotone(tolerance)).count();
            let positive: Vec<f64> = inc.iter().filter_map(|r| r.min_delta).filter(|&d| d > 0.0).collect();
            TableRow {
                key,
                total: rs.len(),
                included: inc.len(),
                nonmonotone,
                rate: (!inc.is_empty()).then(|| nonmonotone as f64 / inc.len() as f64),
                mean_min_delta: (!positive.is_empty()).then(|| positive.iter().sum::<f64>() / positive.len() as f64),
            }
        })
        .collect();
    Ok(Table { keys: keys.to_vec(), threshold, tolerance, rows })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let rx = ranks(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let ry = ranks(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub used: usize,
    pub distance_min_delta: Vec<(f64, f64)>,
    pub gauss_min_delta: Vec<(f64, f64)>,
    pub distance_gauss: Vec<(f64, f64)>,
    pub test_accuracy_min_delta: Vec<(f64, f64)>,
    pub spearman_distance: Option<f64>,
    pub spearman_gauss: Option<f64>,
    pub spearman_test_accuracy: Option<f64>,
    /// Log-log fit of Gauss length against distance.
    pub powerlaw: Option<PowerLawFit>,
    pub median_distance: f64,
    /// Smallest distance among runs with min-Δ above the tolerance.
    pub min_nonmonotone_distance: Option<f64>,
}

/// Scatter pairs and rank correlations over included records.
///
/// Distances are normalized by the initial norm where available.
pub fn correlation_report(records: &[SweepRecord], threshold: f64, tolerance: f64) -> Result<CorrelationReport> {
    let usable: Vec<&SweepRecord> = records.iter().filter(|r| r.included(threshold)).collect();
    if usable.len() < 3 {
        return Err(Error::config(format!("need at least 3 usable records, have {}", usable.len())));
    }
    let dist = |r: &SweepRecord| r.distance_norm.or(r.distance_abs).unwrap_or(f64::NAN);
    let md = |r: &SweepRecord| r.min_delta.unwrap_or(f64::NAN);
    let distance_min_delta: Vec<(f64, f64)> = usable.iter().map(|r| (dist(r), md(r))).collect();
    let gauss_min_delta: Vec<(f64, f64)> =
        usable.iter().filter_map(|r| r.avg_gauss_length.map(|g| (g, md(r)))).collect();
    let distance_gauss: Vec<(f64, f64)> =
        usable.iter().filter_map(|r| r.avg_gauss_length.map(|g| (dist(r), g))).collect();
    let test_accuracy_min_delta: Vec<(f64, f64)> =
        usable.iter().filter_map(|r| r.final_test_accuracy.map(|a| (a, md(r)))).collect();
    let mut ds: Vec<f64> = distance_min_delta.iter().map(|p| p.0).collect();
    ds.sort_by(f64::total_cmp);
    let n = ds.len();
    let median_distance = if n % 2 == 1 { ds[n / 2] } else { 0.5 * (ds[n / 2 - 1] + ds[n / 2]) };
    let min_nonmonotone_distance = usable
        .iter()
        .filter(|r| r.is_nonmonotone(tolerance))
        .map(|r| dist(r))
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))));
    Ok(CorrelationReport {
        used: usable.len(),
        spearman_distance: spearman(&distance_min_delta),
        spearman_gauss: spearman(&gauss_min_delta),
        spearman_test_accuracy: spearman(&test_accuracy_min_delta),
        powerlaw: powerlaw_fit(&distance_gauss).ok(),
        median_distance,
        min_nonmonotone_distance,
        distance_min_delta,
        gauss_min_delta,
        distance_gauss,
        test_accuracy_min_delta,
    })
}

fn pairs_csv(x: &str, y: &str, pairs: &[(f64, f64)]) -> Result<Vec<u8>> {
    csv_bytes(&[x, y], pairs.iter().map(|p| vec![fmt_f64(p.0), fmt_f64(p.1)]))
}

pub fn write_correlation_report(dir: impl AsRef<Path>, report: &CorrelationReport) -> Result<()> {
    let dir = dir.as_ref();
    write_atomic(&dir.join("distance_min_delta.csv"), &pairs_csv("distance", "min_delta", &report.distance_min_delta)?)?;
    write_atomic(&dir.join("gauss_min_delta.csv"), &pairs_csv("gauss_length", "min_delta", &report.gauss_min_delta)?)?;
    write_atomic(&dir.join("distance_gauss.csv"), &pairs_csv("distance", "gauss_length", &report.distance_gauss)?)?;
    write_atomic(
        &dir.join("test_accuracy_min_delta.csv"),
        &pairs_csv("test_accuracy", "min_delta", &report.test_accuracy_min_delta)?,
    )?;
    let summary = serde_json::json!({
        "used": report.used,
        "spearman_distance": report.spearman_distance,
        "spearman_gauss": report.spearman_gauss,
        "spearman_test_accuracy": report.spearman_test_accuracy,
        "powerlaw": report.powerlaw,
        "median_distance": report.median_distance,
        "min_nonmonotone_distance": report.min_nonmonotone_distance,
    });
    write_atomic(&dir.join("correlation.json"), serde_json::to_string_pretty(&summary)?.as_bytes())
}
