//! Metric CSVs, curve smoothing and the cross-seed summary.

use atd_core::learners::MetricRecord;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

pub const CSV_HEADER: &str = "env_step,eval_return,success_rate,td_loss,ratio_loss,mean_lambda,epsilon";

/// Carry-over weight of the exponential smoother.
pub const SMOOTHING: f64 = 0.6;

fn csv_err(e: impl std::fmt::Display) -> LabError {
    LabError::Format {
        what: "metrics CSV",
        message: e.to_string(),
    }
}

pub fn records_to_csv(records: &[MetricRecord]) -> LabResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)
}

pub fn parse_csv(text: &str) -> LabResult<Vec<MetricRecord>> {
    let header = text.lines().next().unwrap_or("");
    if header != CSV_HEADER {
        return Err(csv_err(format!("unexpected header `{header}`")));
    }
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<MetricRecord>, _>>()
        .map_err(csv_err)
}

/// `s₀ = x₀`, `s_t = w·s_{t−1} + (1 − w)·x_t`.
pub fn smooth(xs: &[f64], w: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let s = if i == 0 { x } else { w * out[i - 1] + (1.0 - w) * x };
        out.push(s);
    }
    out
}

/// Mean and unbiased sample variance (0 for fewer than two values).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n < 2 {
        0.0
    } else {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    };
    (mean, var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub env_step: Vec<u64>,
    pub eval_return: Vec<f64>,
    pub eval_return_smoothed: Vec<f64>,
    pub success_rate: Vec<f64>,
    pub success_rate_smoothed: Vec<f64>,
    pub mean_lambda: Vec<f64>,
    pub mean_lambda_smoothed: Vec<f64>,
}

impl Curves {
    pub fn from_records(records: &[MetricRecord]) -> Self {
        let col = |f: fn(&MetricRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let ret = col(|r| r.eval_return);
        let succ = col(|r| r.success_rate);
        let lam = col(|r| r.mean_lambda);
        Curves {
            env_step: records.iter().map(|r| r.env_step).collect(),
            eval_return_smoothed: smooth(&ret, SMOOTHING),
            success_rate_smoothed: smooth(&succ, SMOOTHING),
            mean_lambda_smoothed: smooth(&lam, SMOOTHING),
            eval_return: ret,
            success_rate: succ,
            mean_lambda: lam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Metrics CSV file name, relative to the run directory.
    pub csv: String,
    /// `None` when the run failed.
    pub final_record: Option<MetricRecord>,
    pub error: Option<String>,
    pub curves: Option<Curves>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSeed {
    pub n_seeds: usize,
    pub final_return_mean: f64,
    pub final_return_variance: f64,
    pub final_success_mean: f64,
    pub final_success_variance: f64,
    pub final_mean_lambda_mean: f64,
    pub final_mean_lambda_variance: f64,
}

impl CrossSeed {
    pub fn final_return_std(&self) -> f64 {
        self.final_return_variance.sqrt()
    }

    pub fn from_finals(finals: &[MetricRecord]) -> Option<Self> {
        if finals.is_empty() {
            return None;
        }
        let col = |f: fn(&MetricRecord) -> f64| mean_var(&finals.iter().map(f).collect::<Vec<_>>());
        let (rm, rv) = col(|r| r.eval_return);
        let (sm, sv) = col(|r| r.success_rate);
        let (lm, lv) = col(|r| r.mean_lambda);
        Some(CrossSeed {
            n_seeds: finals.len(),
            final_return_mean: rm,
            final_return_variance: rv,
            final_success_mean: sm,
            final_success_variance: sv,
            final_mean_lambda_mean: lm,
            final_mean_lambda_variance: lv,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub lambda_mode: String,
    pub smoothing: f64,
    pub seeds: Vec<SeedSummary>,
    /// Over the seeds that finished; `None` if none did.
    pub cross_seed: Option<CrossSeed>,
}

pub fn csv_name(seed: u64) -> String {
    format!("seed_{seed}.csv")
}

impl Summary {
    pub fn build(label: &str, lambda_mode: &str, runs: &[(u64, Result<Vec<MetricRecord>, String>)]) -> Self {
        let seeds: Vec<SeedSummary> = runs
            .iter()
            .map(|(seed, res)| match res {
                Ok(records) => SeedSummary {
                    seed: *seed,
                    csv: csv_name(*seed),
                    final_record: records.last().copied(),
                    error: records.is_empty().then(|| "run produced no records".to_string()),
                    curves: Some(Curves::from_records(records)),
                },
                Err(e) => SeedSummary {
                    seed: *seed,
                    csv: csv_name(*seed),
                    final_record: None,
                    error: Some(e.clone()),
                    curves: None,
                },
            })
            .collect();
        let finals: Vec<MetricRecord> = seeds.iter().filter_map(|s| s.final_record).collect();
        Summary {
            label: label.to_string(),
            lambda_mode: lambda_mode.to_string(),
            smoothing: SMOOTHING,
            cross_seed: CrossSeed::from_finals(&finals),
            seeds,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &SeedSummary> {
        self.seeds.iter().filter(|s| s.error.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, ret: f64) -> MetricRecord {
        MetricRecord {
            env_step: step,
            eval_return: ret,
            success_rate: 0.25,
            td_loss: 0.1,
            ratio_loss: 0.0,
            mean_lambda: 1.0 / 3.0,
            epsilon: 0.05,
        }
    }

    #[test]
    fn smoothing_recurrence() {
        assert_eq!(smooth(&[0.0, 1.0], 0.6), vec![0.0, 0.4]);
        let s = smooth(&[2.0, 2.0, 5.0], 0.6);
        assert!((s[2] - (0.6 * 2.0 + 0.4 * 5.0)).abs() < 1e-15);
        assert!(smooth(&[], 0.6).is_empty());
    }

    #[test]
    fn csv_header_and_round_trip() {
        let recs = vec![rec(0, -1.5), rec(100, 0.1 + 0.2)];
        let text = records_to_csv(&recs).unwrap();
        assert_eq!(records_to_csv(&[]).unwrap(), format!("{CSV_HEADER}\n"));
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(parse_csv(&text).unwrap(), recs);
        assert!(parse_csv("a,b\n").is_err());
    }

    #[test]
    fn sample_variance() {
        let (m, v) = mean_var(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_var(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn summary_attributes_failures() {
        let runs = vec![(3, Ok(vec![rec(0, 1.0), rec(10, 2.0)])), (4, Err("boom".to_string()))];
        let s = Summary::build("x", "adaptive", &runs);
        assert_eq!(s.failures().map(|f| f.seed).collect::<Vec<_>>(), vec![4]);
        let cs = s.cross_seed.unwrap();
        assert_eq!((cs.n_seeds, cs.final_return_mean, cs.final_return_variance), (1, 2.0, 0.0));
        let sm = &s.seeds[0].curves.as_ref().unwrap().eval_return_smoothed;
        assert!(sm[0] == 1.0 && (sm[1] - 1.4).abs() < 1e-15);
    }
}
