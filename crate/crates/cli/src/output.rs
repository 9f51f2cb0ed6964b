//! Long-format CSV bundles and metric reports.
//!
//! Generation runs write three files keyed by `(instance, feature, time)`:
//! `predictions.csv` with the truth and the sample quantiles, `masks.csv`
//! with the availability and model-visible masks, and optionally
//! `samples.csv` with every draw at the evaluation cells. Values are written
//! in shortest round-trip form, so reading a bundle back reproduces the
//! in-memory numbers bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use tsdiff_core::metrics::{crps, crps_sum, point_metrics};
use tsdiff_core::Matrix;

pub const PREDICTIONS: &str = "predictions.csv";
pub const MASKS: &str = "masks.csv";
pub const SAMPLES: &str = "samples.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";

/// Generated output for one `[K, L]` window, in data units.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub truth: Matrix,
    pub median: Matrix,
    pub q05: Matrix,
    pub q95: Matrix,
    pub m_gt: Matrix,
    pub m: Matrix,
    /// Draws, kept only at evaluation cells (zero elsewhere).
    pub samples: Vec<Matrix>,
}

impl Generated {
    pub fn eval(&self) -> Matrix {
        self.m_gt.zip_map(&self.m, |a, b| a - b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub cells: usize,
}

/// Ordered metric name to value map.
pub type Report = BTreeMap<String, Metric>;

/// CRPS and CRPS-sum (when samples are present) plus MAE, MSE and RMSE of
/// the median, all over the evaluation cells.
pub fn generation_metrics(records: &[Generated], gamma: f64, with_samples: bool) -> Result<Report> {
    let truth: Vec<Matrix> = records.iter().map(|g| g.truth.clone()).collect();
    let median: Vec<Matrix> = records.iter().map(|g| g.median.clone()).collect();
    let eval: Vec<Matrix> = records.iter().map(Generated::eval).collect();
    let cells = eval.iter().map(|e| e.sum()).sum::<f64>() as usize;
    ensure!(cells > 0, "no evaluation cells");
    let mut report = Report::new();
    if with_samples {
        let samples: Vec<Vec<Matrix>> = records.iter().map(|g| g.samples.clone()).collect();
        report.insert("crps".into(), Metric { value: crps(&samples, &truth, &eval, gamma)?, cells });
        report.insert("crps_sum".into(), Metric { value: crps_sum(&samples, &truth, &eval, gamma)?, cells });
    }
    let p = point_metrics(&median, &truth, &eval)?;
    report.insert("mae".into(), Metric { value: p.mae, cells: p.cells });
    report.insert("mse".into(), Metric { value: p.mse, cells: p.cells });
    report.insert("rmse".into(), Metric { value: p.rmse, cells: p.cells });
    Ok(report)
}

/// Writes `metrics.json` and `metrics.txt` and prints the text form.
pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    let text = format_report(report);
    print!("{text}");
    std::fs::write(dir.join(METRICS_JSON), serde_json::to_string_pretty(report)? + "\n")?;
    std::fs::write(dir.join(METRICS_TXT), text)?;
    Ok(())
}

pub fn format_report(report: &Report) -> String {
    report
        .iter()
        .map(|(k, m)| format!("{k} = {} ({} cells)\n", m.value, m.cells))
        .collect()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_generated(dir: &Path, records: &[Generated], with_samples: bool) -> Result<()> {
    let mut pred = writer(&dir.join(PREDICTIONS))?;
    pred.write_record(["instance", "feature", "time", "truth", "median", "q05", "q95"])?;
    let mut masks = writer(&dir.join(MASKS))?;
    masks.write_record(["instance", "feature", "time", "m_gt", "m"])?;
    let mut samples = if with_samples {
        let mut w = writer(&dir.join(SAMPLES))?;
        w.write_record(["instance", "feature", "time", "sample", "value"])?;
        Some(w)
    } else {
        None
    };
    for (i, g) in records.iter().enumerate() {
        let (k, l) = g.truth.shape();
        for r in 0..k {
            for c in 0..l {
                let key = [i.to_string(), r.to_string(), c.to_string()];
                pred.write_record(key.iter().cloned().chain(
                    [&g.truth, &g.median, &g.q05, &g.q95].iter().map(|m| m.get(r, c).to_string()),
                ))?;
                masks.write_record(key.iter().cloned().chain(
                    [&g.m_gt, &g.m].iter().map(|m| m.get(r, c).to_string()),
                ))?;
                if let Some(w) = samples.as_mut() {
                    if g.m_gt.get(r, c) - g.m.get(r, c) != 0.0 {
                        for (s, draw) in g.samples.iter().enumerate() {
                            w.write_record(key.iter().cloned().chain([s.to_string(), draw.get(r, c).to_string()]))?;
                        }
                    }
                }
            }
        }
    }
    pred.flush()?;
    masks.flush()?;
    if let Some(mut w) = samples {
        w.flush()?;
    }
    Ok(())
}

type Key = (usize, usize, usize);

fn read_long(path: &Path, n_values: usize) -> Result<Vec<(Key, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), row + 1))?;
        ensure!(
            rec.len() == 3 + n_values,
            "{}: row {} has {} fields, expected {}",
            path.display(),
            row + 1,
            rec.len(),
            3 + n_values
        );
        let idx = |j: usize| -> Result<usize> {
            rec[j].parse().with_context(|| format!("{}: row {}: bad index {:?}", path.display(), row + 1, &rec[j]))
        };
        let vals = (3..3 + n_values)
            .map(|j| {
                rec[j]
                    .parse::<f64>()
                    .with_context(|| format!("{}: row {}: bad number {:?}", path.display(), row + 1, &rec[j]))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(((idx(0)?, idx(1)?, idx(2)?), vals));
    }
    Ok(out)
}

/// Reads a bundle written by [`write_generated`]. Returns the records and
/// whether samples were present.
pub fn read_generated(dir: &Path) -> Result<(Vec<Generated>, bool)> {
    let pred = read_long(&dir.join(PREDICTIONS), 4)?;
    let masks = read_long(&dir.join(MASKS), 2)?;
    ensure!(!pred.is_empty(), "{} is empty", PREDICTIONS);
    let n = pred.iter().map(|(k, _)| k.0).max().unwrap_or(0) + 1;
    let k = pred.iter().map(|(k, _)| k.1).max().unwrap_or(0) + 1;
    let l = pred.iter().map(|(k, _)| k.2).max().unwrap_or(0) + 1;
    ensure!(pred.len() == n * k * l, "{} does not cover a full [{n}, {k}, {l}] grid", PREDICTIONS);
    ensure!(masks.len() == pred.len(), "{} and {} differ in length", MASKS, PREDICTIONS);
    let blank = || Matrix::zeros(k, l);
    let mut records: Vec<Generated> = (0..n)
        .map(|_| Generated {
            truth: blank(),
            median: blank(),
            q05: blank(),
            q95: blank(),
            m_gt: blank(),
            m: blank(),
            samples: Vec::new(),
        })
        .collect();
    for ((i, r, c), v) in pred {
        let g = &mut records[i];
        g.truth.set(r, c, v[0]);
        g.median.set(r, c, v[1]);
        g.q05.set(r, c, v[2]);
        g.q95.set(r, c, v[3]);
    }
    for ((i, r, c), v) in masks {
        ensure!(i < n && r < k && c < l, "{}: index ({i}, {r}, {c}) outside the prediction grid", MASKS);
        records[i].m_gt.set(r, c, v[0]);
        records[i].m.set(r, c, v[1]);
    }
    let path = dir.join(SAMPLES);
    if !path.exists() {
        return Ok((records, false));
    }
    for ((i, r, c), v) in read_long(&path, 2)? {
        ensure!(i < n && r < k && c < l, "{}: index ({i}, {r}, {c}) outside the prediction grid", SAMPLES);
        let s = v[0] as usize;
        if v[0] < 0.0 || v[0].fract() != 0.0 {
            bail!("{}: bad sample index {}", SAMPLES, v[0]);
        }
        let g = &mut records[i];
        while g.samples.len() <= s {
            g.samples.push(blank());
        }
        g.samples[s].set(r, c, v[1]);
    }
    let draws = records.iter().map(|g| g.samples.len()).max().unwrap_or(0);
    ensure!(draws > 0, "{} holds no draws", SAMPLES);
    for g in &mut records {
        g.samples.resize_with(draws, blank);
    }
    Ok((records, true))
}

/// Writes a CSV with the given header and rows.
pub fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}
