//! Plain-text file formats.
//!
//! Every format is UTF-8, comma separated, with `#` comment lines. Numbers
//! are written in Rust's shortest round-trip form so `parse(write(x)) == x`.
//!
//! * scan: `# key: value` metadata, then `frequency_mhz,rate_hz[,sigma_hz]`
//!   rows with strictly increasing frequencies;
//! * levels: optional `n,...` header, then `n,third_step_mhz[,energy_mhz][,sigma_mhz]`
//!   rows where empty fields mean "not given";
//! * budget: optional `label,...` header, then `label,sigma_mhz` rows;
//! * frequency record: one reading per line, optional `# sample_period_s: x`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Constants, EnergyAssembly, ErrorBudget};
use crate::error::{Error, Result};
use crate::lineshape::ScanTrace;
use crate::ritz::LevelRecord;
use crate::stability::FrequencySeries;

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn malformed(line: usize, message: impl Into<String>) -> Error {
    Error::Malformed { path: None, line, message: message.into() }
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn number(line: usize, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| malformed(line, format!("{what} {field:?} is not a number")))?;
    if !v.is_finite() {
        return Err(malformed(line, format!("{what} {field:?} is not finite")));
    }
    Ok(v)
}

fn optional_number(line: usize, field: Option<&str>, what: &str) -> Result<Option<f64>> {
    match field.map(str::trim) {
        None | Some("") => Ok(None),
        Some(f) => number(line, f, what).map(Some),
    }
}

fn metadata_entry(line: &str) -> Option<(String, String)> {
    let body = line.strip_prefix('#')?.trim();
    let (key, value) = body.split_once(':')?;
    let key = key.trim();
    let simple = !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    simple.then(|| (key.to_string(), value.trim().to_string()))
}

pub fn parse_scan_str(text: &str) -> Result<ScanTrace> {
    let mut metadata = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = metadata_entry(line.trim()) {
            metadata.insert(k, v);
        }
    }
    let (mut f, mut r, mut s) = (Vec::new(), Vec::new(), Vec::new());
    let mut columns = None;
    for (line, content) in data_lines(text) {
        let fields: Vec<&str> = content.split(',').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(malformed(line, format!("expected 2 or 3 fields, found {}", fields.len())));
        }
        match columns {
            None => columns = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(malformed(line, format!("expected {c} fields like the first row, found {}", fields.len())))
            }
            _ => {}
        }
        let freq = number(line, fields[0], "frequency")?;
        let rate = number(line, fields[1], "rate")?;
        if rate < 0.0 {
            return Err(malformed(line, format!("rate {rate} is negative")));
        }
        if let Some(&prev) = f.last() {
            if !(freq > prev) {
                return Err(Error::NonMonotoneFrequency { path: None, line, frequency: freq });
            }
        }
        if let Some(field) = fields.get(2) {
            let sigma = number(line, field, "rate uncertainty")?;
            if !(sigma > 0.0) {
                return Err(malformed(line, format!("rate uncertainty {sigma} must be positive")));
            }
            s.push(sigma);
        }
        f.push(freq);
        r.push(rate);
    }
    if f.is_empty() {
        return Err(Error::EmptyFile { path: None });
    }
    let sigmas = (!s.is_empty()).then_some(s);
    let mut trace = ScanTrace::new(f, r, sigmas)?;
    trace.metadata = metadata;
    Ok(trace)
}

pub fn write_scan(trace: &ScanTrace) -> String {
    let mut out = String::new();
    for (k, v) in &trace.metadata {
        writeln!(out, "# {k}: {v}").unwrap();
    }
    for (i, (f, r)) in trace.frequencies().iter().zip(trace.rates()).enumerate() {
        match trace.sigmas() {
            Some(s) => writeln!(out, "{f},{r},{}", s[i]).unwrap(),
            None => writeln!(out, "{f},{r}").unwrap(),
        }
    }
    out
}

pub fn parse_scan(path: &Path) -> Result<ScanTrace> {
    parse_scan_str(&read_text(path)?).map_err(|e| e.with_path(path))
}

/// One row of a level table, before energies are assembled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub n: u32,
    pub third_step: Option<f64>,
    pub energy: Option<f64>,
    pub sigma: Option<f64>,
}

impl LevelRow {
    /// Fills a missing energy from the third step and a missing sigma from
    /// the constants.
    pub fn resolve(&self, constants: &Constants) -> Result<LevelRecord> {
        let energy = match (self.energy, self.third_step) {
            (Some(e), _) => e,
            (None, Some(third_step)) => EnergyAssembly::new(third_step, constants).assemble(),
            (None, None) => {
                return Err(Error::InvalidInput(format!("level n = {} has neither energy nor third step", self.n)))
            }
        };
        let mut record = LevelRecord::new(self.n, energy, self.sigma.unwrap_or(constants.default_level_sigma))?;
        record.third_step = self.third_step;
        Ok(record)
    }
}

pub fn parse_levels_str(text: &str) -> Result<Vec<LevelRow>> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (index, (line, content)) in data_lines(text).enumerate() {
        let fields: Vec<&str> = content.split(',').map(str::trim).collect();
        if index == 0 && fields[0] == "n" {
            continue;
        }
        if !(2..=4).contains(&fields.len()) {
            return Err(malformed(line, format!("expected 2 to 4 fields, found {}", fields.len())));
        }
        let n: u32 = fields[0].parse().map_err(|_| {
            malformed(line, format!("principal quantum number {:?} is not a positive integer", fields[0]))
        })?;
        if n == 0 {
            return Err(malformed(line, "principal quantum number must be at least 1"));
        }
        let third_step = optional_number(line, fields.get(1).copied(), "third-step frequency")?;
        let energy = optional_number(line, fields.get(2).copied(), "energy")?;
        let sigma = optional_number(line, fields.get(3).copied(), "uncertainty")?;
        if third_step.is_none() && energy.is_none() {
            return Err(malformed(line, "row needs a third-step frequency or an energy"));
        }
        if let Some(s) = sigma {
            if !(s > 0.0) {
                return Err(malformed(line, format!("uncertainty {s} must be positive")));
            }
        }
        if !seen.insert(n) {
            return Err(Error::DuplicateLevel { path: None, line, n });
        }
        rows.push(LevelRow { n, third_step, energy, sigma });
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile { path: None });
    }
    Ok(rows)
}

pub fn parse_level_rows(path: &Path) -> Result<Vec<LevelRow>> {
    parse_levels_str(&read_text(path)?).map_err(|e| e.with_path(path))
}

/// Level table with energies assembled where absent.
pub fn parse_levels(path: &Path, constants: &Constants) -> Result<Vec<LevelRecord>> {
    parse_level_rows(path)?.iter().map(|r| r.resolve(constants)).collect()
}

pub fn write_levels(levels: &[LevelRecord]) -> String {
    let mut out = String::from("n,third_step_mhz,energy_mhz,sigma_mhz\n");
    for l in levels {
        let third = l.third_step.map(|t| t.to_string()).unwrap_or_default();
        writeln!(out, "{},{third},{},{}", l.n, l.energy, l.sigma).unwrap();
    }
    out
}

pub fn parse_budget_str(text: &str) -> Result<ErrorBudget> {
    let mut entries = Vec::new();
    for (index, (line, content)) in data_lines(text).enumerate() {
        let fields: Vec<&str> = content.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(malformed(line, format!("expected label,sigma, found {} fields", fields.len())));
        }
        if index == 0 && fields[0] == "label" {
            continue;
        }
        let sigma = number(line, fields[1], "uncertainty")?;
        entries.push((fields[0].to_string(), sigma));
    }
    if entries.is_empty() {
        return Err(Error::EmptyFile { path: None });
    }
    ErrorBudget::new(entries)
}

pub fn parse_budget(path: &Path) -> Result<ErrorBudget> {
    parse_budget_str(&read_text(path)?).map_err(|e| e.with_path(path))
}

pub fn write_budget(budget: &ErrorBudget) -> String {
    let mut out = String::from("label,sigma_mhz\n");
    for (label, sigma) in budget.contributions() {
        writeln!(out, "{label},{sigma}").unwrap();
    }
    out
}

/// Frequency record; `sample_period` overrides any `sample_period_s` metadata.
pub fn parse_frequency_series_str(text: &str, sample_period: Option<f64>) -> Result<FrequencySeries> {
    let mut period_meta = None;
    for line in text.lines() {
        if let Some((k, v)) = metadata_entry(line.trim()) {
            if k == "sample_period_s" {
                period_meta = Some(v.parse::<f64>().map_err(|_| malformed(0, format!("sample period {v:?}")))?);
            }
        }
    }
    let mut samples = Vec::new();
    for (line, content) in data_lines(text) {
        if content.contains(',') {
            return Err(malformed(line, "expected one reading per line"));
        }
        samples.push(number(line, content, "reading")?);
    }
    if samples.is_empty() {
        return Err(Error::EmptyFile { path: None });
    }
    let period = sample_period.or(period_meta).ok_or_else(|| Error::InvalidInput("sample period not given".into()))?;
    FrequencySeries::new(samples, period)
}

pub fn parse_frequency_series(path: &Path, sample_period: Option<f64>) -> Result<FrequencySeries> {
    parse_frequency_series_str(&read_text(path)?, sample_period).map_err(|e| e.with_path(path))
}

pub fn write_frequency_series(series: &FrequencySeries) -> String {
    let mut out = format!("# sample_period_s: {}\n", series.sample_period());
    for s in series.samples() {
        writeln!(out, "{s}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_scan() {
        let t = parse_scan_str("236496700.0,12.5\n236496701.0,14.0").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.rates(), &[12.5, 14.0]);
    }

    #[test]
    fn scan_errors_name_the_line() {
        let err = parse_scan_str("# run: 4\n1.0,2.0\n2.0,3.0\n2.0,4.0\n").unwrap_err();
        assert!(matches!(err, Error::NonMonotoneFrequency { line: 4, frequency, .. } if frequency == 2.0));
        assert!(matches!(parse_scan_str("1.0,2.0\n2.0,x\n"), Err(Error::Malformed { line: 2, .. })));
        assert!(matches!(parse_scan_str("1.0,2.0\n2.0,-1\n"), Err(Error::Malformed { line: 2, .. })));
        assert!(matches!(parse_scan_str("1.0,2.0\n2.0,1,1\n"), Err(Error::Malformed { line: 2, .. })));
        assert!(matches!(parse_scan_str("# only: comments\n\n"), Err(Error::EmptyFile { .. })));
        let err = parse_scan_str("1.0,2.0\n1.5,2.0\n1.2,2.0").unwrap_err().with_path(Path::new("a.csv"));
        assert_eq!(err.to_string(), "a.csv: line 3: frequency 1.2 is not above the previous row");
    }

    #[test]
    fn scan_metadata_round_trip() {
        let mut t = ScanTrace::new(vec![1.0, 1.5, 2.25], vec![0.0, 3.0, 1e-3], Some(vec![1.0, 2.0, 0.1])).unwrap();
        t.metadata.insert("level".into(), "36".into());
        t.metadata.insert("dwell_s".into(), "1".into());
        assert_eq!(parse_scan_str(&write_scan(&t)).unwrap(), t);
    }

    #[test]
    fn level_rows() {
        let rows =
            parse_levels_str("n,third_step_mhz,energy_mhz,sigma_mhz\n36,236496706,,\n37,,1007237858,2.5\n").unwrap();
        let c = Constants::default();
        let a = rows[0].resolve(&c).unwrap();
        assert_eq!((a.energy, a.sigma, a.third_step), (1_007_068_254.0, 4.0, Some(236_496_706.0)));
        let b = rows[1].resolve(&c).unwrap();
        assert_eq!((b.energy, b.sigma, b.third_step), (1_007_237_858.0, 2.5, None));
        assert_eq!(parse_levels_str("40,1.0").unwrap().len(), 1);
    }

    #[test]
    fn level_errors() {
        assert!(matches!(
            parse_levels_str("36,1,2\n37,1,2\n36,1,2\n"),
            Err(Error::DuplicateLevel { line: 3, n: 36, .. })
        ));
        assert!(matches!(parse_levels_str("36.5,1,2\n"), Err(Error::Malformed { line: 1, .. })));
        assert!(matches!(parse_levels_str("0,1,2\n"), Err(Error::Malformed { .. })));
        assert!(matches!(parse_levels_str("36,,\n"), Err(Error::Malformed { .. })));
        assert!(matches!(parse_levels_str("36,1,2,0\n"), Err(Error::Malformed { .. })));
        assert!(matches!(parse_levels_str("36,1,2,3,4\n"), Err(Error::Malformed { .. })));
        assert!(matches!(parse_levels_str("n,third\n"), Err(Error::EmptyFile { .. })));
    }

    #[test]
    fn shipped_table() {
        let rows = parse_levels_str(include_str!("../../data/rb_np32_levels.csv")).unwrap();
        assert_eq!(rows.len(), 28);
        assert_eq!(rows.first().unwrap().n, 36);
        assert_eq!(rows.last().unwrap().n, 63);
    }

    #[test]
    fn budget_files() {
        let b = parse_budget_str(include_str!("../../data/error_budget.csv")).unwrap();
        assert_eq!(b.contributions().len(), 4);
        assert_eq!(parse_budget_str(&write_budget(&b)).unwrap(), b);
        assert!(parse_budget_str("a,1\na,2\n").is_err());
        assert!(parse_budget_str("a,-1\n").is_err());
        assert!(matches!(parse_budget_str("a\n"), Err(Error::Malformed { line: 1, .. })));
    }

    #[test]
    fn frequency_records() {
        let s = parse_frequency_series_str("# sample_period_s: 2\n1\n2\n3\n", None).unwrap();
        assert_eq!(s.sample_period(), 2.0);
        assert_eq!(parse_frequency_series_str("1\n2\n3\n", Some(0.5)).unwrap().sample_period(), 0.5);
        assert!(parse_frequency_series_str("1\n2\n3\n", None).is_err());
        assert!(matches!(parse_frequency_series_str("1\n2,3\n3\n", Some(1.0)), Err(Error::Malformed { line: 2, .. })));
    }

    #[test]
    fn file_errors_carry_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("levels.csv");
        write_text(&p, "36,1,2\n36,1,2\n").unwrap();
        let msg = parse_level_rows(&p).unwrap_err().to_string();
        assert!(msg.starts_with(&p.display().to_string()), "{msg}");
        assert!(matches!(parse_scan(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scan_round_trip(start in -1e9f64..1e9, steps in prop::collection::vec(1e-6f64..10.0, 1..50), rate in 0.0f64..1e6) {
            let mut f = vec![start];
            for s in &steps {
                let next = f.last().unwrap() + s;
                prop_assume!(next > *f.last().unwrap());
                f.push(next);
            }
            let r: Vec<f64> = f.iter().enumerate().map(|(i, _)| rate / (i + 1) as f64).collect();
            let t = ScanTrace::new(f, r, None).unwrap();
            prop_assert_eq!(parse_scan_str(&write_scan(&t)).unwrap(), t);
        }

        #[test]
        fn level_round_trip(energies in prop::collection::vec(1e8f64..2e9, 1..40), third in prop::option::of(1e8f64..3e8)) {
            let levels: Vec<LevelRecord> = energies
                .iter()
                .enumerate()
                .map(|(i, &e)| LevelRecord { n: 10 + i as u32, third_step: third, energy: e, sigma: 0.5 + i as f64 })
                .collect();
            let rows = parse_levels_str(&write_levels(&levels)).unwrap();
            let back: Vec<LevelRecord> = rows.iter().map(|r| r.resolve(&Constants::default()).unwrap()).collect();
            prop_assert_eq!(back, levels);
        }

        #[test]
        fn frequency_round_trip(v in prop::collection::vec(-1e10f64..1e10, 3..100), period in 1e-3f64..1e3) {
            let s = FrequencySeries::new(v, period).unwrap();
            prop_assert_eq!(parse_frequency_series_str(&write_frequency_series(&s), None).unwrap(), s);
        }
    }
}
