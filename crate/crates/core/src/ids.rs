//! Volumetric anomaly-IDS simulation over 1-second packet-rate series.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IdsError {
    #[error("not enough rate buckets: need {needed}, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("detection target {0} outside (0, 1]")]
    InvalidTarget(f64),
}

/// Packets per epoch second, in file order. Interior silent seconds appear
/// as zero buckets; seconds are never bridged between files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RateSeries {
    pub label: String,
    pub buckets: Vec<(u64, u64)>,
}

impl RateSeries {
    pub fn new(label: impl Into<String>) -> Self {
        RateSeries {
            label: label.into(),
            buckets: Vec::new(),
        }
    }

    pub fn extend_file(&mut self, file_buckets: Vec<(u64, u64)>) {
        self.buckets.extend(file_buckets);
    }

    pub fn counts(&self, include_zero: bool) -> Vec<u64> {
        self.buckets
            .iter()
            .map(|&(_, c)| c)
            .filter(|&c| include_zero || c > 0)
            .collect()
    }
}

/// Per-file 1-second bucketizer.
#[derive(Debug, Clone, Default)]
pub struct RateBucketizer {
    buckets: Vec<(u64, u64)>,
}

impl RateBucketizer {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, ts_us: u64) {
        let sec = ts_us / 1_000_000;
        match self.buckets.last_mut() {
            None => self.buckets.push((sec, 1)),
            Some(last) if last.0 == sec => last.1 += 1,
            Some(last) if last.0 < sec => {
                let from = last.0 + 1;
                self.buckets.extend((from..sec).map(|s| (s, 0)));
                self.buckets.push((sec, 1));
            }
            Some(_) => {
                let i = self.buckets.partition_point(|b| b.0 < sec);
                match self.buckets.get_mut(i) {
                    Some(b) if b.0 == sec => b.1 += 1,
                    _ => {
                        let first = self.buckets[0].0;
                        let fill = (sec + 1..first).map(|s| (s, 0));
                        let mut front: Vec<(u64, u64)> =
                            std::iter::once((sec, 1)).chain(fill).collect();
                        front.append(&mut self.buckets);
                        self.buckets = front;
                    }
                }
            }
        }
    }

    pub fn finish(self) -> Vec<(u64, u64)> {
        self.buckets
    }
}

pub fn bucketize(ts_us: impl IntoIterator<Item = u64>) -> Vec<(u64, u64)> {
    let mut b = RateBucketizer::new();
    ts_us.into_iter().for_each(|t| b.push(t));
    b.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdsBaseline {
    pub mu: f64,
    /// Population standard deviation (divisor N).
    pub sigma: f64,
    pub threshold: f64,
}

impl IdsBaseline {
    pub const SIGMAS: f64 = 3.0;

    pub fn from_moments(mu: f64, sigma: f64) -> Self {
        IdsBaseline {
            mu,
            sigma,
            threshold: mu + Self::SIGMAS * sigma,
        }
    }
}

pub fn fit_baseline(counts: &[u64]) -> Result<IdsBaseline, IdsError> {
    if counts.len() < 2 {
        return Err(IdsError::InsufficientData {
            needed: 2,
            have: counts.len(),
        });
    }
    let n = counts.len() as u128;
    let sum: u128 = counts.iter().map(|&c| u128::from(c)).sum();
    let sum_sq: u128 = counts.iter().map(|&c| u128::from(c) * u128::from(c)).sum();
    // N * sum(x^2) - sum(x)^2 is exact and non-negative in integers.
    let spread = n * sum_sq - sum * sum;
    let mu = sum as f64 / n as f64;
    let sigma = (spread as f64).sqrt() / n as f64;
    Ok(IdsBaseline::from_moments(mu, sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub buckets: usize,
    pub detected: usize,
    pub detection_rate_pct: f64,
    pub evasion_rate_pct: f64,
}

/// Buckets strictly above `threshold` are detections.
pub fn evaluate(counts: &[u64], threshold: f64) -> Result<Evaluation, IdsError> {
    if counts.is_empty() {
        return Err(IdsError::InsufficientData { needed: 1, have: 0 });
    }
    let detected = counts.iter().filter(|&&c| c as f64 > threshold).count();
    let detection_rate_pct = detected as f64 / counts.len() as f64 * 100.0;
    Ok(Evaluation {
        buckets: counts.len(),
        detected,
        detection_rate_pct,
        evasion_rate_pct: 100.0 - detection_rate_pct,
    })
}

fn rate_above(counts: &[u64], threshold: f64) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().filter(|&&c| c as f64 > threshold).count() as f64 / counts.len() as f64 * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TunedThreshold {
    /// Largest integer threshold whose detection rate meets the target.
    pub threshold: i64,
    pub detection_rate_pct: f64,
    pub false_positive_rate_pct: f64,
}

/// Picks the largest integer `T'` such that the share of test buckets with
/// count > `T'` is at least `target`, then measures the share of baseline
/// buckets above it.
pub fn tune_threshold(
    test: &[u64],
    target: f64,
    baseline: &[u64],
) -> Result<TunedThreshold, IdsError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(IdsError::InvalidTarget(target));
    }
    if test.is_empty() {
        return Err(IdsError::InsufficientData { needed: 1, have: 0 });
    }
    if baseline.is_empty() {
        return Err(IdsError::InsufficientData { needed: 1, have: 0 });
    }
    let mut sorted = test.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let k = (1..=n)
        .find(|&k| k as f64 / n as f64 >= target)
        .expect("k = n always meets a target <= 1");
    let threshold = sorted[n - k] as i64 - 1;
    let t = threshold as f64;
    Ok(TunedThreshold {
        threshold,
        detection_rate_pct: rate_above(test, t),
        false_positive_rate_pct: rate_above(baseline, t),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdsReport {
    pub baseline_label: String,
    pub test_label: String,
    pub include_zero_buckets: bool,
    pub baseline_buckets: usize,
    pub test_buckets: usize,
    pub baseline_mu: f64,
    pub baseline_sigma: f64,
    pub standard_threshold_pps: f64,
    pub detection_rate_pct: f64,
    pub evasion_rate_pct: f64,
    pub standard_false_positive_rate_pct: f64,
    pub target_detection_pct: f64,
    pub tuned_threshold_pps: i64,
    pub tuned_detection_pct: f64,
    pub false_positive_rate_pct: f64,
    pub tuning_rule: &'static str,
}

pub const TUNING_RULE: &str = "maximal integer threshold meeting target";

pub fn ids_report(
    baseline: &RateSeries,
    test: &RateSeries,
    target: f64,
    include_zero_buckets: bool,
) -> Result<IdsReport, IdsError> {
    let base_counts = baseline.counts(include_zero_buckets);
    let test_counts = test.counts(include_zero_buckets);
    let fit = fit_baseline(&base_counts)?;
    let eval = evaluate(&test_counts, fit.threshold)?;
    let tuned = tune_threshold(&test_counts, target, &base_counts)?;
    Ok(IdsReport {
        baseline_label: baseline.label.clone(),
        test_label: test.label.clone(),
        include_zero_buckets,
        baseline_buckets: base_counts.len(),
        test_buckets: test_counts.len(),
        baseline_mu: fit.mu,
        baseline_sigma: fit.sigma,
        standard_threshold_pps: fit.threshold,
        detection_rate_pct: eval.detection_rate_pct,
        evasion_rate_pct: eval.evasion_rate_pct,
        standard_false_positive_rate_pct: rate_above(&base_counts, fit.threshold),
        target_detection_pct: target * 100.0,
        tuned_threshold_pps: tuned.threshold,
        tuned_detection_pct: tuned.detection_rate_pct,
        false_positive_rate_pct: tuned.false_positive_rate_pct,
        tuning_rule: TUNING_RULE,
    })
}
