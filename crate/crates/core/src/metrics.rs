//! Line-delimited metric records and curve smoothing.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ComixError;

/// One training episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode: usize,
    pub env_steps: usize,
    pub seed: u64,
    pub returns: Vec<f64>,
    pub team_return: f64,
    /// Headline mapped to `[0, 1]`.
    pub normalized: f64,
    /// Prey captured, completion percentage, or normalized team reward.
    pub headline: f64,
    pub epsilon: f64,
    pub loss_q: Option<f64>,
    pub loss_c: Option<f64>,
    /// Mean accepted messages per agent divided by the number of real agents.
    pub accepted_fraction: Option<f64>,
}

/// Wall-clock companion of a metrics record, kept in its own file so the
/// metrics stream itself is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub episode: usize,
    pub seed: u64,
    pub wall_clock_s: f64,
}

/// Appends one JSON object per line and flushes after each.
pub struct JsonlWriter {
    file: File,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self, ComixError> {
        Ok(Self { file: File::create(path)? })
    }

    pub fn append(path: &Path) -> Result<Self, ComixError> {
        Ok(Self { file: OpenOptions::new().create(true).append(true).open(path)? })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), ComixError> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Reads every complete line; a trailing partial line (abrupt termination)
/// is ignored, any other malformed line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ComixError> {
    let text = std::fs::read_to_string(path)?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (k, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if k + 1 == lines.len() && !complete => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Trailing rolling mean; early points average what is available.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (k, &v) in values.iter().enumerate() {
        sum += v;
        if k >= window {
            sum -= values[k - window];
        }
        out.push(sum / (k + 1).min(window) as f64);
    }
    out
}

/// `s_t = smoothing * s_{t-1} + (1 - smoothing) * x_t`, seeded with the first value.
pub fn ema(values: &[f64], smoothing: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let next = match out.last() {
            Some(&prev) => smoothing * prev + (1.0 - smoothing) * v,
            None => v,
        };
        out.push(next);
    }
    out
}

pub const SWITCH_WINDOW: usize = 200;
pub const EMA_SMOOTHING: f64 = 0.95;

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rolling_mean_warms_up() {
        assert_eq!(rolling_mean(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn ema_starts_at_first_value() {
        let s = ema(&[2.0, 4.0], 0.95);
        assert_eq!(s[0], 2.0);
        assert!((s[1] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn truncated_tail_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{\"episode\":0,\"seed\":1,\"wall_clock_s\":0.5}\n{\"episode\":1,\"se").unwrap();
        let recs: Vec<TimingRecord> = read_jsonl(&path).unwrap();
        assert_eq!(recs.len(), 1);
        std::fs::write(&path, "{\"episode\":0,\"se\n{\"episode\":0,\"seed\":1,\"wall_clock_s\":0.5}\n").unwrap();
        assert!(read_jsonl::<TimingRecord>(&path).is_err());
    }

    #[test]
    fn summary_statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(median(&[5.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
