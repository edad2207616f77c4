//! AUC, the metrics CSV and seed-level summaries.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("AUC needs at least one positive and one negative label")]
    DegenerateLabels,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no rows to summarize")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Mann–Whitney statistic: P(score_pos > score_neg) with ties counted ½.
/// Labels are read as positive when > 0.5.
pub fn compute_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie groups.
    let mut pos_rank_sum = 0.0;
    let mut n_pos = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] > 0.5 {
                pos_rank_sum += rank;
                n_pos += 1;
            }
        }
        i = j + 1;
    }
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::DegenerateLabels);
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

pub const CSV_HEADER: &str = "iteration,wall_clock_s,train_elbo,test_elbo,train_auc,test_auc,method,step_size,seed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Left empty unless wall-clock recording is enabled, so that reruns
    /// produce identical files.
    pub wall_clock_s: Option<f64>,
    pub train_elbo: f64,
    pub test_elbo: f64,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub method: String,
    pub step_size: f64,
    pub seed: u64,
}

pub fn write_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(MetricsError::from)).collect()
}

/// Mean ± sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, sd, n }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Diverged runs can leave astronomically large values behind.
        if self.mean.abs() >= 1e6 || !self.mean.is_finite() {
            write!(f, "{:.3e} ± {:.3e}", self.mean, self.sd)
        } else {
            write!(f, "{:.3} ± {:.3}", self.mean, self.sd)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: String,
    pub step_size: f64,
    /// "auc" when AUC columns are present, else "elbo".
    pub metric: &'static str,
    pub train: MeanSd,
    pub test: MeanSd,
    /// Per seed: (train, test) averages over the last evaluations.
    pub per_seed: Vec<(u64, f64, f64)>,
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} step={} seeds={} train_{}={} test_{}={}",
            self.method, self.step_size, self.train.n, self.metric, self.train, self.metric, self.test
        )
    }
}

/// Number of trailing evaluations averaged per seed.
pub const LAST_K: usize = 5;

/// Groups rows by (method, step size), averages each seed's last `LAST_K`
/// evaluations, then takes mean ± sd across seeds.
pub fn summarize(rows: &[MetricsRow]) -> Result<Vec<Summary>> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut groups: BTreeMap<(String, u64), BTreeMap<u64, Vec<&MetricsRow>>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.clone(), r.step_size.to_bits())).or_default().entry(r.seed).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((method, step_bits), seeds) in groups {
        let use_auc = seeds.values().flatten().all(|r| r.train_auc.is_some() && r.test_auc.is_some());
        let mut per_seed = Vec::with_capacity(seeds.len());
        for (seed, mut rs) in seeds {
            rs.sort_by_key(|r| r.iteration);
            let tail = &rs[rs.len().saturating_sub(LAST_K)..];
            let pick = |r: &MetricsRow| if use_auc { (r.train_auc.unwrap(), r.test_auc.unwrap()) } else { (r.train_elbo, r.test_elbo) };
            let k = tail.len() as f64;
            let train = tail.iter().map(|r| pick(r).0).sum::<f64>() / k;
            let test = tail.iter().map(|r| pick(r).1).sum::<f64>() / k;
            per_seed.push((seed, train, test));
        }
        let train: Vec<f64> = per_seed.iter().map(|s| s.1).collect();
        let test: Vec<f64> = per_seed.iter().map(|s| s.2).collect();
        out.push(Summary {
            method,
            step_size: f64::from_bits(step_bits),
            metric: if use_auc { "auc" } else { "elbo" },
            train: MeanSd::of(&train),
            test: MeanSd::of(&test),
            per_seed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iteration: usize, seed: u64, train: f64) -> MetricsRow {
        MetricsRow {
            iteration,
            wall_clock_s: None,
            train_elbo: train,
            test_elbo: train - 1.0,
            train_auc: None,
            test_auc: None,
            method: "vpng".into(),
            step_size: 0.1,
            seed,
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(compute_auc(&[0.1, 0.2, 0.9], &[0.0, 0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.3; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(compute_auc(&[0.1, 0.2], &[1.0, 1.0]), Err(MetricsError::DegenerateLabels)));
    }

    #[test]
    fn header_is_exact_and_empty_fields_stay_empty() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[row(0, 1, -2.5)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "0,,-2.5,-3.5,,,vpng,0.1,1");
    }

    #[test]
    fn summary_averages_the_last_five() {
        let rows: Vec<MetricsRow> = (0..8).map(|i| row(i * 10, 0, i as f64)).chain((0..8).map(|i| row(i * 10, 1, 2.0 * i as f64))).collect();
        let s = &summarize(&rows).unwrap()[0];
        // seed 0: mean of 3..=7 = 5; seed 1: 10.
        assert_eq!(s.per_seed, vec![(0, 5.0, 4.0), (1, 10.0, 9.0)]);
        assert_eq!(s.train.mean, 7.5);
        assert!((s.train.sd - (12.5f64).sqrt()).abs() < 1e-12);
    }
}
