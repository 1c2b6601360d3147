//! Gradient-check suites grouped by scope.

mod model;
mod primitives;

pub use model::{check_cgrl, check_decoder, check_full, toy_configs};
pub use primitives::check_primitives;
pub(crate) use primitives::{probe, random_tensor};

use crate::error::{Error, Result};

pub const SCOPES: [&str; 4] = ["primitives", "cgrl", "decoder", "full"];

/// Runs the suite named `scope`, one entry per checked operation.
pub fn check_scope(scope: &str, seed: u64) -> Result<Vec<CheckResult>> {
    match scope {
        "primitives" => check_primitives(3, seed),
        "cgrl" => check_cgrl(100, seed),
        "decoder" => check_decoder(seed),
        "full" => check_full(seed),
        other => Err(Error::Config(format!(
            "unknown gradcheck scope {other:?} (expected one of {})",
            SCOPES.join(", ")
        ))),
    }
}

/// Worst relative error observed for one checked operation.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, max_rel_err: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_rel_err,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}
