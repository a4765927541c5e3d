//! Single-Lorentzian line model and scan-trace fitting.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{minimize_least_squares, FitOptions, FitProblem};

/// Fewest points a line fit accepts.
pub const MIN_FIT_POINTS: usize = 8;

/// Default floor for the noise estimate, counts/s (detector dark rate).
pub const DEFAULT_DARK_FLOOR: f64 = 0.3;

/// Frequency-ordered count-rate samples from one laser scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTrace {
    frequencies: Vec<f64>,
    rates: Vec<f64>,
    sigmas: Option<Vec<f64>>,
    /// Free-form `key: value` annotations carried through files.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl ScanTrace {
    /// Frequencies must increase strictly; rates must be finite and
    /// non-negative; uncertainties, if given, positive.
    pub fn new(frequencies: Vec<f64>, rates: Vec<f64>, sigmas: Option<Vec<f64>>) -> Result<Self> {
        if frequencies.len() != rates.len() {
            return Err(Error::InvalidInput(format!("{} frequencies but {} rates", frequencies.len(), rates.len())));
        }
        if frequencies.len() < 2 {
            return Err(Error::InsufficientData { available: frequencies.len(), required: 2 });
        }
        if let Some(s) = &sigmas {
            if s.len() != rates.len() {
                return Err(Error::InvalidInput(format!("{} uncertainties for {} rates", s.len(), rates.len())));
            }
            if let Some(bad) = s.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                return Err(Error::InvalidInput(format!("rate uncertainty {bad} must be positive")));
            }
        }
        if let Some(bad) = frequencies.iter().find(|f| !f.is_finite()) {
            return Err(Error::InvalidInput(format!("frequency {bad} is not finite")));
        }
        if let Some(bad) = rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(Error::InvalidInput(format!("rate {bad} must be finite and non-negative")));
        }
        if let Some(i) = frequencies.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::NonMonotoneFrequency { path: None, line: i + 2, frequency: frequencies[i + 1] });
        }
        Ok(ScanTrace { frequencies, rates, sigmas, metadata: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn sigmas(&self) -> Option<&[f64]> {
        self.sigmas.as_deref()
    }

    pub fn span(&self) -> (f64, f64) {
        (self.frequencies[0], self.frequencies[self.len() - 1])
    }

    pub fn mean_spacing(&self) -> f64 {
        let (lo, hi) = self.span();
        (hi - lo) / (self.len() - 1) as f64
    }
}

/// Lorentzian with peak height `amplitude` above a flat `baseline`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianParams {
    /// MHz
    pub center: f64,
    /// Full width at half maximum, MHz.
    pub fwhm: f64,
    /// counts/s
    pub amplitude: f64,
    /// counts/s
    pub baseline: f64,
}

impl LorentzianParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.center.is_finite()
            && self.fwhm.is_finite()
            && self.fwhm > 0.0
            && self.amplitude.is_finite()
            && self.amplitude >= 0.0
            && self.baseline.is_finite()
            && self.baseline >= 0.0;
        if !ok {
            return Err(Error::InvalidInput(format!("invalid line parameters {self:?}")));
        }
        Ok(())
    }

    fn to_vec(self) -> [f64; 4] {
        [self.center, self.fwhm, self.amplitude, self.baseline]
    }

    fn from_slice(p: &[f64]) -> Self {
        LorentzianParams { center: p[0], fwhm: p[1], amplitude: p[2], baseline: p[3] }
    }
}

/// `baseline + amplitude * (fwhm/2)^2 / ((f - center)^2 + (fwhm/2)^2)`.
pub fn lorentzian_model(params: &LorentzianParams, f: f64) -> f64 {
    let hw2 = 0.25 * params.fwhm * params.fwhm;
    let x = f - params.center;
    params.baseline + params.amplitude * hw2 / (x * x + hw2)
}

/// Line height above baseline at the scan point closest to the center, and
/// its 1-sigma error from the covariance (order center, fwhm, amplitude,
/// baseline). Equals the amplitude when the center lies inside the scan.
fn height_in_window(p: &LorentzianParams, covariance: &DMatrix<f64>, lo: f64, hi: f64) -> (f64, f64) {
    let d = p.center.clamp(lo, hi) - p.center;
    let w = 0.5 * p.fwhm;
    let q = d * d + w * w;
    let g = w * w / q;
    // derivatives of amplitude * g with respect to center, fwhm, amplitude
    let grad = [p.amplitude * w * w * 2.0 * d / (q * q), p.amplitude * w * d * d / (q * q), g, 0.0];
    let var: f64 =
        (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| grad[i] * covariance[(i, j)] * grad[j]).sum();
    (p.amplitude * g, var.max(0.0).sqrt())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Heuristic start for a line fit.
///
/// Baseline from the median of the lowest quarter of rates, amplitude and
/// center from the highest sample, width from the outermost half-maximum
/// crossings (interpolated linearly), floored at two sample spacings.
pub fn initial_guess(trace: &ScanTrace) -> Result<LorentzianParams> {
    let f = trace.frequencies();
    let r = trace.rates();
    let mut sorted = r.to_vec();
    sorted.sort_by(f64::total_cmp);
    let baseline = median(&sorted[..(sorted.len() / 4).max(1)]);
    let (peak, &max) = r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty trace");
    let amplitude = max - baseline;
    if !(amplitude > 0.0) {
        return Err(Error::NoLineFound);
    }
    let half = baseline + 0.5 * amplitude;
    let crossing = |i: usize, j: usize| {
        // sample j is at or above half maximum, sample i below
        let t = (half - r[i]) / (r[j] - r[i]);
        f[i] + t * (f[j] - f[i])
    };
    let first = r.iter().position(|&v| v >= half).expect("peak is above half");
    let last = r.iter().rposition(|&v| v >= half).expect("peak is above half");
    let left = if first == 0 { f[0] } else { crossing(first - 1, first) };
    let right = if last + 1 == r.len() { f[last] } else { crossing(last + 1, last) };
    let fwhm = (right - left).max(2.0 * trace.mean_spacing());
    Ok(LorentzianParams { center: f[peak], fwhm, amplitude, baseline })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineFitSettings {
    pub fit: FitOptions,
    /// Lower limit of the noise used in the signal-to-noise figure, counts/s.
    pub dark_floor: f64,
    /// Weight points by their rate uncertainties when the trace has them.
    pub weighted: bool,
    /// A fit whose amplitude is below this many standard errors (or this
    /// many times the residual noise), or whose width is below two sample
    /// spacings, is reported as no line. Zero disables the check.
    pub min_significance: f64,
}

impl Default for LineFitSettings {
    fn default() -> Self {
        LineFitSettings {
            fit: FitOptions::default(),
            dark_floor: DEFAULT_DARK_FLOOR,
            weighted: false,
            min_significance: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineFitResult {
    pub params: LorentzianParams,
    /// 1-sigma errors of the matching parameters.
    pub errors: LorentzianParams,
    /// Order: center, fwhm, amplitude, baseline.
    pub covariance: DMatrix<f64>,
    /// Euclidean norm of the (weighted) residuals.
    pub residual_norm: f64,
    /// RMS deviation of the data from the fitted line, counts/s.
    pub noise: f64,
    pub signal_to_noise: f64,
    pub converged: bool,
    pub iterations: usize,
    /// The center lies within one FWHM of a scan end.
    pub edge_of_scan: bool,
}

/// Least-squares Lorentzian fit seeded by [`initial_guess`].
pub fn fit_line(trace: &ScanTrace, settings: &LineFitSettings) -> Result<LineFitResult> {
    if trace.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData { available: trace.len(), required: MIN_FIT_POINTS });
    }
    let guess = initial_guess(trace)?;
    // work relative to the guessed center so the step sizes suit MHz offsets
    let origin = guess.center;
    let x: Vec<f64> = trace.frequencies().iter().map(|f| f - origin).collect();
    let y = trace.rates();
    let residuals = |p: &[f64]| -> Vec<f64> {
        let line = LorentzianParams::from_slice(p);
        x.iter().zip(y).map(|(x, y)| lorentzian_model(&line, *x) - y).collect()
    };
    let mut problem = FitProblem::new(4, x.len(), residuals)?
        .with_bounds(Some(vec![f64::NEG_INFINITY, f64::MIN_POSITIVE, 0.0, 0.0]), None)?;
    if settings.weighted {
        if let Some(s) = trace.sigmas() {
            problem = problem.with_weights(s.iter().map(|s| 1.0 / s).collect())?;
        }
    }
    let start = LorentzianParams { center: 0.0, ..guess }.to_vec();
    let fit = match minimize_least_squares(&problem, &start, &settings.fit) {
        Err(Error::Degenerate { .. }) => return Err(Error::NoLineFound),
        other => other?,
    };

    let mut params = LorentzianParams::from_slice(&fit.parameters);
    params.center += origin;
    let errors = LorentzianParams::from_slice(&fit.parameter_errors);
    let rss: f64 = trace.frequencies().iter().zip(y).map(|(f, y)| (lorentzian_model(&params, *f) - y).powi(2)).sum();
    let noise = (rss / (x.len() - 4) as f64).sqrt();

    let (lo, hi) = trace.span();
    let (height, height_error) = height_in_window(&params, &fit.covariance, lo, hi);
    if settings.min_significance > 0.0
        && (height < settings.min_significance * height_error
            || params.amplitude < settings.min_significance * noise
            || params.fwhm < 2.0 * trace.mean_spacing())
    {
        return Err(Error::NoLineFound);
    }

    Ok(LineFitResult {
        params,
        errors,
        covariance: fit.covariance,
        residual_norm: fit.residual_norm,
        noise,
        signal_to_noise: params.amplitude / noise.max(settings.dark_floor),
        converged: fit.converged,
        iterations: fit.iterations,
        edge_of_scan: params.center - lo < params.fwhm || hi - params.center < params.fwhm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn line() -> LorentzianParams {
        LorentzianParams { center: 0.0, fwhm: 10.0, amplitude: 300.0, baseline: 1.0 }
    }

    fn exact_trace(p: &LorentzianParams, lo: f64, hi: f64, step: f64) -> ScanTrace {
        let n = ((hi - lo) / step).round() as usize + 1;
        let f: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
        let r = f.iter().map(|f| lorentzian_model(p, *f)).collect();
        ScanTrace::new(f, r, None).unwrap()
    }

    #[test]
    fn model_values() {
        let p = LorentzianParams { center: 3.0, ..line() };
        assert_eq!(lorentzian_model(&p, 3.0), 301.0);
        assert_eq!(lorentzian_model(&p, 8.0), 151.0);
        assert_eq!(lorentzian_model(&p, -2.0), 151.0);
        assert_eq!(lorentzian_model(&line(), 15.0), 31.0);
    }

    #[test]
    fn trace_validation() {
        assert!(ScanTrace::new(vec![1.0, 2.0], vec![0.0, 1.0], None).is_ok());
        assert!(matches!(
            ScanTrace::new(vec![1.0, 2.0, 2.0], vec![0.0; 3], None),
            Err(Error::NonMonotoneFrequency { line: 3, .. })
        ));
        assert!(ScanTrace::new(vec![1.0, 2.0], vec![0.0, -1.0], None).is_err());
        assert!(ScanTrace::new(vec![1.0], vec![0.0], None).is_err());
        assert!(ScanTrace::new(vec![1.0, 2.0], vec![0.0, 1.0], Some(vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn guess_on_exact_trace() {
        let g = initial_guess(&exact_trace(&line(), -50.0, 50.0, 1.0)).unwrap();
        assert!(g.center.abs() <= 1.0);
        assert!((g.fwhm - 10.0).abs() <= 3.0, "{}", g.fwhm);
    }

    #[test]
    fn guess_rejects_flat_trace() {
        let t = ScanTrace::new((0..20).map(f64::from).collect(), vec![5.0; 20], None).unwrap();
        assert!(matches!(initial_guess(&t), Err(Error::NoLineFound)));
        assert!(matches!(fit_line(&t, &LineFitSettings::default()), Err(Error::NoLineFound)));
    }

    #[test]
    fn narrow_spike_width_is_floored() {
        let mut r = vec![1.0; 20];
        r[9] = 50.0;
        r[10] = 50.0;
        let t = ScanTrace::new((0..20).map(|i| i as f64 * 0.5).collect(), r, None).unwrap();
        assert_eq!(initial_guess(&t).unwrap().fwhm, 1.0);
        r = vec![1.0; 20];
        r[9] = 50.0;
        let t = ScanTrace::new((0..20).map(|i| i as f64 * 0.5).collect(), r, None).unwrap();
        assert_eq!(initial_guess(&t).unwrap().fwhm, 1.0);
    }

    #[test]
    fn fit_recovers_exact_parameters() {
        let truth = LorentzianParams { center: 236_496_706.0, ..line() };
        let t = exact_trace(&truth, truth.center - 50.0, truth.center + 50.0, 1.0);
        let fit = fit_line(&t, &LineFitSettings::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.params.center - truth.center).abs() < 1e-8 * truth.fwhm);
        assert_relative_eq!(fit.params.fwhm, truth.fwhm, max_relative = 1e-8);
        assert_relative_eq!(fit.params.amplitude, truth.amplitude, max_relative = 1e-8);
        assert_relative_eq!(fit.params.baseline, truth.baseline, max_relative = 1e-8);
        assert!(fit.residual_norm < 1e-9 * truth.amplitude);
        assert!(!fit.edge_of_scan);
    }

    #[test]
    fn fit_from_a_displaced_start() {
        // peak sample two widths away from the true center: the scan holds
        // a spurious bright point that the heuristic picks up
        let truth = line();
        let mut t = exact_trace(&truth, -50.0, 50.0, 0.5);
        let f = t.frequencies().to_vec();
        let mut r = t.rates().to_vec();
        let i = f.iter().position(|&f| f == 20.0).unwrap();
        r[i] = 302.0;
        t = ScanTrace::new(f, r, None).unwrap();
        let fit = fit_line(&t, &LineFitSettings::default()).unwrap();
        assert!(fit.params.center.abs() < 0.1, "{}", fit.params.center);
    }

    #[test]
    fn too_short_traces_are_rejected() {
        let t = exact_trace(&line(), -3.0, 3.0, 1.0);
        assert!(matches!(
            fit_line(&t, &LineFitSettings::default()),
            Err(Error::InsufficientData { available: 7, required: 8 })
        ));
    }

    #[test]
    fn edge_flag_on_truncated_line() {
        let t = exact_trace(&line(), 0.0, 50.0, 0.5);
        let fit = fit_line(&t, &LineFitSettings::default()).unwrap();
        assert!(fit.edge_of_scan);
        assert!(fit.params.center.abs() < 1e-6);
    }

    #[test]
    fn height_in_window_follows_the_edge() {
        let p = line();
        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.04, 0.09, 4.0, 1.0]));
        let (h, e) = height_in_window(&p, &cov, p.center - 30.0, p.center + 30.0);
        assert_eq!((h, e), (p.amplitude, 2.0));
        let (lo, hi) = (p.center - 30.0, p.center - p.fwhm / 2.0);
        let (h, _) = height_in_window(&p, &cov, lo, hi);
        assert!((h - (lorentzian_model(&p, hi) - p.baseline)).abs() < 1e-12);
        assert!((h - p.amplitude / 2.0).abs() < 1e-12);
    }

    #[test]
    fn signal_to_noise_uses_floor() {
        let fit = fit_line(&exact_trace(&line(), -50.0, 50.0, 1.0), &LineFitSettings::default()).unwrap();
        assert_relative_eq!(fit.signal_to_noise, 1000.0, max_relative = 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn model_is_symmetric(c in -1000i32..1000, w in 0.1f64..50.0, a in 0.0f64..1e3, q in 0u32..400) {
            // offsets representable exactly on both sides of the center
            let (c, x) = (f64::from(c), f64::from(q) * 0.25);
            let p = LorentzianParams { center: c, fwhm: w, amplitude: a, baseline: 0.3 };
            prop_assert_eq!(lorentzian_model(&p, c + x), lorentzian_model(&p, c - x));
        }

        #[test]
        fn shift_moves_only_the_center(shift in -1e8f64..1e8) {
            let base = exact_trace(&line(), -40.0, 40.0, 0.5);
            let f: Vec<f64> = base.frequencies().iter().map(|f| f + shift).collect();
            let moved = ScanTrace::new(f, base.rates().to_vec(), None).unwrap();
            let a = fit_line(&base, &LineFitSettings::default()).unwrap();
            let b = fit_line(&moved, &LineFitSettings::default()).unwrap();
            prop_assert!((b.params.center - a.params.center - shift).abs() < 1e-6);
            prop_assert!((b.params.fwhm - a.params.fwhm).abs() < 1e-6);
            prop_assert!((b.params.amplitude - a.params.amplitude).abs() < 1e-6);
        }

        #[test]
        fn rate_scaling_scales_heights(s in 0.01f64..100.0) {
            let base = exact_trace(&line(), -40.0, 40.0, 0.5);
            let r: Vec<f64> = base.rates().iter().map(|r| r * s).collect();
            let scaled = ScanTrace::new(base.frequencies().to_vec(), r, None).unwrap();
            let fit = fit_line(&scaled, &LineFitSettings::default()).unwrap();
            prop_assert!((fit.params.amplitude / s - 300.0).abs() < 1e-6);
            prop_assert!((fit.params.baseline / s - 1.0).abs() < 1e-6);
            prop_assert!(fit.params.center.abs() < 1e-7);
            prop_assert!((fit.params.fwhm - 10.0).abs() < 1e-7);
        }
    }
}
