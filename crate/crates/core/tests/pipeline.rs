//! Batch runs over the shipped data and synthetic inputs.

use std::path::{Path, PathBuf};

use rydfit::pipeline::formats::write_levels;
use rydfit::pipeline::{parse_levels, run_analysis, Constants};
use rydfit::ritz::{fit_series, RitzCoefficients, SeriesConvention, SeriesMethod, SeriesOptions};
use rydfit::synth::{synth_series, SeriesSynthSpec};
use rydfit::Error;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn table_levels_with_method_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        &format!("levels = {:?}\nmethods = [3]\noutput_dir = \"out\"\n", data("rb_np32_levels.csv")),
    );
    let report = run_analysis(&config, None, None).unwrap();
    assert!(report.is_success(), "{:?}", report.failures);
    assert_eq!(report.series.len(), 1);
    let s = &report.series[0];
    assert_eq!(s.method, SeriesMethod::Modified);
    assert_eq!(s.values.len(), 5);
    assert!(s.errors.iter().all(|e| e.is_finite() && *e > 0.0));
    assert!((s.ionization_energy() - 1_010_024_700.0).abs() < 200.0);
    assert_eq!(report.defects.len(), 28);
    assert_eq!(report.provenance.inputs.len(), 1);
    assert_eq!(report.provenance.inputs[0].sha256.len(), 64);

    let out = dir.path().join("out");
    for f in ["report.txt", "report.json", "defects.dat", "residuals_method3.dat"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["series"][0]["method"], 3);
}

#[test]
fn missing_input_aborts_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        &format!("levels = {:?}\nbudget = \"absent.csv\"\noutput_dir = \"out\"\n", data("rb_np32_levels.csv")),
    );
    assert!(matches!(run_analysis(&config, None, None), Err(Error::Io { .. })));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn every_method_recovers_a_noiseless_limit() {
    let dir = tempfile::tempdir().unwrap();
    let constants = Constants::default();
    let spec = SeriesSynthSpec {
        ionization_energy: 1_010_024_700.0,
        coefficients: RitzCoefficients::new(&[2.64, 0.3, 0.2, -0.1]).unwrap(),
        convention: SeriesConvention::Explicit,
        n_min: 20,
        n_max: 63,
        noise: 0.0,
        sigma: None,
        repeats: 1,
        seed: 0,
    };
    let levels = synth_series(&spec, constants.rydberg_frequency()).unwrap();
    std::fs::write(dir.path().join("levels.csv"), write_levels(&levels)).unwrap();
    let config = write_config(dir.path(), "levels = \"levels.csv\"\n");
    let report = run_analysis(&config, None, None).unwrap();
    assert!(report.is_success(), "{:?}", report.failures);
    assert_eq!(report.series.len(), 3);
    for s in &report.series {
        let err = (s.ionization_energy() - spec.ionization_energy).abs();
        assert!(err < 1e-3, "{}: {err}", s.method);
        for t in &report.series {
            assert!((s.ionization_energy() - t.ionization_energy()).abs() < 1e-3);
        }
    }
}

#[test]
fn modified_fit_on_implicit_data_agrees_with_extended_on_explicit() {
    let rydberg = Constants::default().rydberg_frequency();
    let coefficients = RitzCoefficients::new(&[2.64, 0.3, 0.2, -0.1]).unwrap();
    let fit = |convention, method| {
        let spec = SeriesSynthSpec {
            ionization_energy: 1_010_024_700.0,
            coefficients,
            convention,
            n_min: 20,
            n_max: 63,
            noise: 0.0,
            sigma: None,
            repeats: 1,
            seed: 0,
        };
        let levels = synth_series(&spec, rydberg).unwrap();
        fit_series(&levels, method, rydberg, &SeriesOptions::default()).unwrap()
    };
    let explicit = fit(SeriesConvention::Explicit, SeriesMethod::Extended);
    let implicit = fit(SeriesConvention::Implicit, SeriesMethod::Modified);
    assert!((explicit.ionization_energy - implicit.ionization_energy).abs() < 1e-3);
}

#[test]
fn shipped_table_parses_and_assembles() {
    let constants = Constants::default();
    let levels = parse_levels(&data("rb_np32_levels.csv"), &constants).unwrap();
    assert_eq!(levels.len(), 28);
    assert_eq!(levels[0].n, 36);
    assert_eq!(levels[0].energy, 1_007_068_254.0);
    assert!(levels.iter().all(|l| l.sigma == constants.default_level_sigma));
}

/// The measured levels are quoted at 4 MHz precision, so a good series
/// model would leave residuals below that. The four-term fit reaches
/// 4.64 MHz at its least-squares minimum; kept as a record of the gap.
#[test]
#[ignore = "not attainable on the bundled levels: best RMS is 4.64 MHz"]
fn table_residuals_below_measurement_precision() {
    let constants = Constants::default();
    let levels = parse_levels(&data("rb_np32_levels.csv"), &constants).unwrap();
    let fit =
        fit_series(&levels, SeriesMethod::Modified, constants.rydberg_frequency(), &SeriesOptions::default()).unwrap();
    assert!(fit.rms_residual() < 4.0, "{}", fit.rms_residual());
}
