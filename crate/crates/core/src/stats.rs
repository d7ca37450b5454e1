//! Replicate-level summary statistics.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Standard error of the sample variance from the fourth central moment,
/// `√((m₄ − s⁴ (n−3)/(n−1)) / n)`.
pub fn variance_std_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if n < 4.0 {
        return f64::NAN;
    }
    let m = mean(xs);
    let s2 = variance(xs);
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    ((m4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
}

/// Frequency of `pred` and its binomial standard error.
pub fn frequency(xs: &[f64], pred: impl Fn(f64) -> bool) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let p = xs.iter().filter(|x| pred(**x)).count() as f64 / n;
    (p, (p * (1.0 - p) / n).sqrt())
}

/// Hex SHA-256 of a serializable value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex(&Sha256::digest(&json))
}

/// Hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tail frequencies `P̂(|statistic| > ε)` at every time for one `ε`.
#[derive(Debug, Clone, Serialize)]
pub struct TailRow {
    pub epsilon: f64,
    pub freq: Vec<f64>,
    pub std_error: Vec<f64>,
}

/// Per-time statistics of a scalar observable over replicates.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub std_error: Vec<f64>,
    pub variance_std_error: Vec<f64>,
    pub tails: Vec<TailRow>,
    pub replicates: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl EnsembleSummary {
    /// `samples[r][k]` is replicate `r` at `times[k]`.
    pub fn from_samples(times: &[f64], samples: &[Vec<f64>], epsilons: &[f64], config_hash: String, seed: u64) -> EnsembleSummary {
        let columns: Vec<Vec<f64>> = (0..times.len()).map(|k| samples.iter().map(|s| s[k]).collect()).collect();
        let tails = epsilons
            .iter()
            .map(|&eps| {
                let (freq, se) = columns.iter().map(|c| frequency(c, |v| v.abs() > eps)).unzip();
                TailRow { epsilon: eps, freq, std_error: se }
            })
            .collect();
        EnsembleSummary {
            times: times.to_vec(),
            mean: columns.iter().map(|c| mean(c)).collect(),
            variance: columns.iter().map(|c| variance(c)).collect(),
            std_error: columns.iter().map(|c| std_error(c)).collect(),
            variance_std_error: columns.iter().map(|c| variance_std_error(c)).collect(),
            tails,
            replicates: samples.len(),
            config_hash,
            seed,
        }
    }
}
