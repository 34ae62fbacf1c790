//! Report files: a JSON summary plus CSV detail.
//!
//! Numbers are written with the shortest round-trip representation and rows
//! keep their input order, so identical inputs give identical bytes.
//! Runtimes are kept in memory only for the same reason.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adjustments::AdjustmentReport;
use crate::linear::PricePath;
use crate::market::{Account, Lattice};
use crate::wealth::WealthPath;
use crate::{Error, Result};

/// One check of a validation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub name: String,
    /// Where the expected value comes from.
    pub oracle: String,
    pub expected: f64,
    pub computed: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip)]
    pub runtime_s: f64,
}

impl TestResult {
    /// Pass when `|computed - expected| <= tolerance`.
    pub fn close(name: &str, oracle: &str, expected: f64, computed: f64, tolerance: f64) -> Self {
        let passed = (computed - expected).abs() <= tolerance;
        TestResult {
            name: name.into(),
            oracle: oracle.into(),
            expected,
            computed,
            tolerance,
            passed,
            runtime_s: 0.0,
        }
    }

    /// Pass when a nonnegative residual is at most `tolerance`.
    pub fn bounded(name: &str, oracle: &str, residual: f64, tolerance: f64) -> Self {
        let mut t = TestResult::close(name, oracle, 0.0, residual, tolerance);
        t.passed = residual.is_finite() && residual <= tolerance;
        t
    }

    /// A check that failed before producing a number.
    pub fn errored(name: &str, oracle: &str, tolerance: f64, err: &Error) -> Self {
        let mut t = TestResult::close(
            name,
            &format!("{oracle} (error: {err})"),
            0.0,
            f64::NAN,
            tolerance,
        );
        t.passed = false;
        t
    }

    pub fn abs_error(&self) -> f64 {
        (self.computed - self.expected).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub name: String,
    pub abs_error: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub passed: usize,
    pub failed: usize,
    pub tests: Vec<TestResult>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub tests: Vec<TestResult>,
}

impl Report {
    pub fn new() -> Self {
        Report::default()
    }

    pub fn push(&mut self, t: TestResult) {
        self.tests.push(t);
    }

    pub fn all_passed(&self) -> bool {
        self.tests.iter().all(|t| t.passed)
    }

    pub fn failed_names(&self) -> Vec<&str> {
        self.tests
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn summary(&self) -> Summary {
        let failures = self
            .tests
            .iter()
            .filter(|t| !t.passed)
            .map(|t| Failure {
                name: t.name.clone(),
                abs_error: t.abs_error(),
                tolerance: t.tolerance,
            })
            .collect::<Vec<_>>();
        Summary {
            passed: self.tests.len() - failures.len(),
            failed: failures.len(),
            tests: self.tests.clone(),
            failures,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,oracle,expected,computed,abs_error,tolerance,passed\n");
        for t in &self.tests {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                t.name,
                csv_field(&t.oracle),
                t.expected,
                t.computed,
                t.abs_error(),
                t.tolerance,
                t.passed
            );
        }
        out
    }

    /// Write `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        Ok(vec![
            write_file(dir, "report.json", &self.to_json())?,
            write_file(dir, "report.csv", &self.to_csv())?,
        ])
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Create `dir` if needed and write `name` into it.
pub fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

/// Wealth records, one block of rows per path, with the lending account
/// alongside for reference.
pub fn wealth_csv(paths: &[WealthPath], lend: &Account) -> String {
    let mut out = String::from("path,t,V,V^p,G,F,C,psi_l,psi_b,B_l,residual\n");
    for (p, w) in paths.iter().enumerate() {
        let (pl, pb) = (w.psi_l(), w.psi_b());
        for k in 0..w.v.len() {
            let _ = writeln!(
                out,
                "{p},{},{},{},{},{},{},{},{},{},{}",
                w.times[k],
                w.v[k],
                w.vp[k],
                w.g[k],
                w.f[k],
                w.c[k],
                pl[k],
                pb[k],
                lend.value(k),
                w.residual
            );
        }
    }
    out
}

/// Node-wise price dump. The BSDE layout adds Picard data and names the
/// columns `Y`, `Z_i`.
pub fn price_csv(price: &PricePath, lattice: &Lattice, bsde: bool) -> String {
    let d = price.xi.len();
    let mut out = String::from("t,node");
    let (y, z) = if bsde { ("Y", "Z") } else { ("S", "xi") };
    let _ = write!(out, ",{y}");
    for i in 1..=d {
        let _ = write!(out, ",{z}_{i}");
    }
    if bsde {
        out.push_str(",picard_iters,residual");
    }
    out.push('\n');
    let diag = &price.diagnostics;
    for k in 0..=lattice.n_steps() {
        let t = lattice.grid().time(k);
        for idx in 0..lattice.n_nodes(k) {
            let _ = write!(out, "{t},{idx},{}", price.s.get(k, idx));
            for x in &price.xi {
                let _ = write!(out, ",{}", x.get(k, idx));
            }
            if bsde {
                let it = diag
                    .iterations
                    .get(k)
                    .and_then(|l| l.get(idx))
                    .copied()
                    .unwrap_or(0);
                let r = diag
                    .residuals
                    .get(k)
                    .and_then(|l| l.get(idx))
                    .copied()
                    .unwrap_or(0.0);
                let _ = write!(out, ",{it},{r}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn adjustment_csv(rep: &AdjustmentReport) -> String {
    let name = rep.kind.name();
    let mut out = format!("t,{name}");
    if rep.single_account.is_some() {
        out.push_str(",single_account");
    }
    out.push('\n');
    for (k, t) in rep.times.iter().enumerate() {
        let _ = write!(out, "{t},{}", rep.values[k]);
        if let Some(s) = &rep.single_account {
            let _ = write!(out, ",{}", s[k]);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_valid_json() {
        let r = Report::new();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["passed"], 0);
        assert_eq!(v["failed"], 0);
        assert_eq!(v["tests"].as_array().unwrap().len(), 0);
    }

    #[test]
    fn one_pass() {
        let mut r = Report::new();
        r.push(TestResult::close("a", "closed form", 1.0, 1.0 + 1e-9, 1e-8));
        let s = r.summary();
        assert_eq!((s.passed, s.failed), (1, 0));
        assert!(r.all_passed());
    }

    #[test]
    fn mixed_results_list_failures_and_round_trip() {
        let mut r = Report::new();
        r.push(TestResult::close("good", "x", 2.0, 2.0, 0.0));
        r.push(TestResult::close("bad", "y, with comma", 1.0, 1.5, 0.1));
        r.push(TestResult::bounded("nan", "z", f64::NAN, 1.0));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["passed"], 1);
        assert_eq!(v["failed"], 2);
        assert_eq!(v["failures"][0]["name"], "bad");
        assert_eq!(v["failures"][0]["abs_error"], 0.5);
        assert_eq!(v["failures"][0]["tolerance"], 0.1);
        assert!(v["tests"][0].get("runtime_s").is_none());
        assert_eq!(r.failed_names(), vec!["bad", "nan"]);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("\"y, with comma\""));
        assert_eq!(r.to_json(), r.clone().to_json());
    }
}
