//! Allan deviation of frequency records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Readings taken at a fixed cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySeries {
    samples: Vec<f64>,
    sample_period: f64,
    /// Nominal frequency the readings scatter around, MHz.
    pub reference: f64,
}

impl FrequencySeries {
    pub fn new(samples: Vec<f64>, sample_period: f64) -> Result<Self> {
        if samples.len() < 3 {
            return Err(Error::InsufficientData { available: samples.len(), required: 3 });
        }
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(Error::InvalidInput(format!("sample period {sample_period} must be positive")));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("sample {bad} is not finite")));
        }
        Ok(FrequencySeries { samples, sample_period, reference: 0.0 })
    }

    pub fn with_reference(mut self, reference: f64) -> Self {
        self.reference = reference;
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Averaging factors `1, 2, 4, ...` up to a quarter of the record.
    pub fn default_multiples(&self) -> Vec<usize> {
        let limit = (self.len() / 4).max(1);
        std::iter::successors(Some(1usize), |m| m.checked_mul(2)).take_while(|&m| m <= limit).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllanEstimator {
    #[default]
    Overlapping,
    NonOverlapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllanPoint {
    /// Averaging factor.
    pub multiple: usize,
    /// s
    pub tau: f64,
    /// Same units as the samples.
    pub deviation: f64,
    /// Number of averaged-pair differences entering the estimate.
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllanCurve {
    pub estimator: AllanEstimator,
    pub points: Vec<AllanPoint>,
}

impl AllanCurve {
    /// Least-squares slope of `log(deviation)` against `log(tau)`.
    pub fn log_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> =
            self.points.iter().filter(|p| p.deviation > 0.0).map(|p| (p.tau.ln(), p.deviation.ln())).collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
        Some(sxy / sxx)
    }
}

/// Allan deviation at each averaging factor `m` (tau = m * sample period).
///
/// Window means are differenced at lag `m`; the overlapping estimator uses
/// every start index, the non-overlapping one steps by `m`. Factors are
/// evaluated in increasing order.
pub fn allan_deviation(series: &FrequencySeries, multiples: &[usize], estimator: AllanEstimator) -> Result<AllanCurve> {
    let y = series.samples();
    let n = y.len();
    let mut sorted = multiples.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return Err(Error::InvalidInput("no averaging factors requested".into()));
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push((0.0, 0.0));
    // compensated running sums; differencing window sums before dividing
    // lets a common offset cancel exactly
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in y {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
        prefix.push((sum, carry));
    }
    let window = |start: usize, m: usize| -> f64 {
        let (s1, c1) = prefix[start + m];
        let (s0, c0) = prefix[start];
        (s1 - s0) + (c1 - c0)
    };

    let mut points = Vec::with_capacity(sorted.len());
    for m in sorted {
        if m == 0 || 2 * m > n {
            return Err(Error::InsufficientSpan { multiple: m, required: 2 * m.max(1), available: n });
        }
        let stride = match estimator {
            AllanEstimator::Overlapping => 1,
            AllanEstimator::NonOverlapping => m,
        };
        let mut total = 0.0;
        let mut pairs = 0;
        let mut k = 0;
        while k + 2 * m <= n {
            let d = (window(k + m, m) - window(k, m)) / m as f64;
            total += d * d;
            pairs += 1;
            k += stride;
        }
        points.push(AllanPoint {
            multiple: m,
            tau: m as f64 * series.sample_period(),
            deviation: (total / (2.0 * pairs as f64)).sqrt(),
            pairs,
        });
    }
    Ok(AllanCurve { estimator, points })
}
