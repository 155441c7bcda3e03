//! Named invariant suites with machine-readable PASS/FAIL output.

mod suites;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use suites::{CostSuite, EquivalenceSuite, ErfSuite, GradSuite, PartitionSuite};

/// Name that expands to every registered suite.
pub const ALL: &str = "all";

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub suite: &'static str,
    pub case: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(suite: &'static str, case: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            suite,
            case: case.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// Folds an evaluation error into a failing outcome.
    pub fn from_result(suite: &'static str, case: impl Into<String>, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Outcome::new(suite, case, passed, detail),
            Err(e) => Outcome::new(suite, case, false, format!("error: {e}")),
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}/{}: {}", self.suite, self.case, self.detail)
    }
}

pub trait CheckSuite: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    fn run(&self, seed: u64) -> Vec<Outcome>;
}

pub struct SuiteRegistry {
    suites: BTreeMap<&'static str, Arc<dyn CheckSuite>>,
    order: Vec<&'static str>,
}

impl SuiteRegistry {
    pub fn empty() -> Self {
        SuiteRegistry {
            suites: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(GradSuite));
        r.register(Arc::new(PartitionSuite::default()));
        r.register(Arc::new(EquivalenceSuite::default()));
        r.register(Arc::new(CostSuite));
        r.register(Arc::new(ErfSuite));
        r
    }

    pub fn register(&mut self, suite: Arc<dyn CheckSuite>) {
        let name = suite.name();
        if self.suites.insert(name, suite).is_none() {
            self.order.push(name);
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn CheckSuite>> {
        self.suites.get(name).cloned().ok_or_else(|| Error::Unknown {
            kind: "check suite",
            name: name.to_string(),
        })
    }

    /// Registration order.
    pub fn names(&self) -> Vec<&'static str> {
        self.order.clone()
    }

    /// `all` expands to every suite in registration order.
    pub fn resolve(&self, name: &str) -> Result<Vec<Arc<dyn CheckSuite>>> {
        if name == ALL {
            Ok(self.order.iter().map(|n| self.suites[n].clone()).collect())
        } else {
            Ok(vec![self.get(name)?])
        }
    }
}

pub fn suites() -> &'static SuiteRegistry {
    static REGISTRY: OnceLock<SuiteRegistry> = OnceLock::new();
    REGISTRY.get_or_init(SuiteRegistry::with_defaults)
}

/// Seeded uniform tensor in [-scale, scale).
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(data, shape).expect("shape matches data")
}

/// max |a−b| / max(1, |b|)
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Always(bool);

    impl CheckSuite for Always {
        fn name(&self) -> &'static str {
            "always"
        }
        fn description(&self) -> &'static str {
            "fixed verdict"
        }
        fn run(&self, seed: u64) -> Vec<Outcome> {
            vec![Outcome::new("always", "case", self.0, format!("seed {seed}"))]
        }
    }

    #[test]
    fn registry_resolution() {
        let r = suites();
        assert_eq!(r.names(), vec!["grads", "partition", "equivalence", "cost", "erf"]);
        assert_eq!(r.resolve(ALL).unwrap().len(), 5);
        assert_eq!(r.resolve("erf").unwrap()[0].name(), "erf");
        assert!(matches!(r.resolve("nope"), Err(Error::Unknown { .. })));
    }

    #[test]
    fn custom_suite_and_lines() {
        let mut r = SuiteRegistry::empty();
        r.register(Arc::new(Always(false)));
        let out = r.get("always").unwrap().run(9);
        assert_eq!(out[0].to_string(), "FAIL always/case: seed 9");
        let ok = Outcome::from_result("s", "c", Ok((true, "fine".into())));
        assert_eq!(ok.to_string(), "PASS s/c: fine");
        let err = Outcome::from_result("s", "c", Err(Error::geometry("bad")));
        assert!(!err.passed && err.detail.contains("bad"));
    }
}
