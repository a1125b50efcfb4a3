use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::SampleBatch;
use crate::{Error, Result};

/// Column order of every summary file.
pub const SUMMARY_COLUMNS: [&str; 17] = [
    "run_id",
    "method",
    "seed",
    "w",
    "lambda",
    "tau_s",
    "tau_c",
    "sampler",
    "steps",
    "n_gen",
    "frechet",
    "mmd2",
    "precision",
    "recall",
    "support_frac",
    "fwd_passes",
    "wall_ms",
];

/// One evaluated generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub w: f64,
    pub lambda: f64,
    pub tau_s: usize,
    pub tau_c: f64,
    pub sampler: String,
    pub steps: usize,
    pub n_gen: usize,
    pub frechet: f64,
    pub mmd2: f64,
    pub precision: f64,
    pub recall: f64,
    pub support_frac: f64,
    pub fwd_passes: u64,
    pub wall_ms: u64,
}

impl MetricsRow {
    /// Metric columns in schema order.
    pub fn metric_values(&self) -> [f64; 5] {
        [self.frechet, self.mmd2, self.precision, self.recall, self.support_frac]
    }

    /// Rows describing the same setting across seeds share this key.
    pub fn setting_key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}",
            self.method, self.w, self.lambda, self.tau_s, self.tau_c, self.sampler, self.steps
        )
    }
}

/// Serialized writer for the summary CSV; the only path rows reach disk by.
pub struct SummaryAppender {
    writer: csv::Writer<File>,
}

impl SummaryAppender {
    /// Create (truncating) `path` and write the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        writer.write_record(SUMMARY_COLUMNS)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    /// Append to an existing summary, writing the header only if it is empty.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(SUMMARY_COLUMNS)?;
        }
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_summary(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().ne(SUMMARY_COLUMNS.iter().copied()) {
        return Err(Error::Config(format!("{}: unexpected summary header", path.display())));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Mean and sample standard deviation of each metric over seeds sharing a
/// setting, in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub template: MetricsRow,
    pub seeds: usize,
    pub mean: [f64; 5],
    pub sd: [f64; 5],
}

pub fn aggregate(rows: &[MetricsRow]) -> Vec<AggregateRow> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        let key = r.setting_key();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .iter()
        .map(|key| {
            let g = &groups[key];
            let n = g.len() as f64;
            let mut mean = [0.0; 5];
            let mut sd = [0.0; 5];
            for j in 0..5 {
                let vals: Vec<f64> = g.iter().map(|r| r.metric_values()[j]).collect();
                mean[j] = vals.iter().sum::<f64>() / n;
                if g.len() > 1 {
                    let ss: f64 = vals.iter().map(|v| (v - mean[j]).powi(2)).sum();
                    sd[j] = (ss / (n - 1.0)).sqrt();
                }
            }
            AggregateRow {
                template: g[0].clone(),
                seeds: g.len(),
                mean,
                sd,
            }
        })
        .collect()
}

/// Aggregates in the summary schema: `run_id` is `mean:<method>` or
/// `sd:<method>` and `seed` holds the number of seeds pooled.
pub fn write_aggregate(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for a in aggregate(rows) {
        let t = &a.template;
        for (tag, vals) in [("mean", a.mean), ("sd", a.sd)] {
            let mut rec = vec![
                format!("{tag}:{}", t.method),
                t.method.clone(),
                a.seeds.to_string(),
                t.w.to_string(),
                t.lambda.to_string(),
                t.tau_s.to_string(),
                t.tau_c.to_string(),
                t.sampler.clone(),
                t.steps.to_string(),
                t.n_gen.to_string(),
            ];
            rec.extend(vals.iter().map(|v| v.to_string()));
            rec.push(t.fwd_passes.to_string());
            rec.push(String::new());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    x: f64,
    y: f64,
    label: Option<usize>,
}

/// Points as `x,y,label` with an empty label for null.
pub fn write_samples(path: &Path, batch: &SampleBatch) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for i in 0..batch.len() {
        w.serialize(SampleRecord {
            x: batch.points[[i, 0]],
            y: batch.points[[i, 1]],
            label: batch.labels[i],
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<SampleBatch> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.deserialize::<SampleRecord>() {
        let rec = rec?;
        coords.extend([rec.x, rec.y]);
        labels.push(rec.label);
    }
    let points = Array2::from_shape_vec((labels.len(), crate::DATA_DIM), coords)
        .map_err(|e| Error::Shape(e.to_string()))?;
    SampleBatch::new(points, labels, 0)
}
