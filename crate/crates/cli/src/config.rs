//! Application configuration: one JSON document with a race section plus
//! training, controller and enumeration settings.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pitwall_core::f1::RaceConfig;
use pitwall_core::nlp::SolverOptions;
use pitwall_core::oracle::EnumerationConfig;
use pitwall_core::sac::SacConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSection {
    pub tol: f64,
    pub violation_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverOptions::default();
        SolverSection {
            tol: d.tol,
            violation_tol: d.violation_tol,
            max_outer: d.max_outer,
            max_inner: d.max_inner,
            initial_penalty: d.initial_penalty,
            penalty_growth: d.penalty_growth,
        }
    }
}

impl SolverSection {
    pub fn to_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            violation_tol: self.violation_tol,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            initial_penalty: self.initial_penalty,
            penalty_growth: self.penalty_growth,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerSection {
    /// Prediction horizon in laps.
    pub horizon: usize,
    pub use_warm_start: bool,
    /// "critic" or "none".
    pub terminal_cost: String,
    /// Smoothing of the deployed critic activation.
    pub smooth_epsilon: f64,
    pub solver: SolverSection,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            horizon: 8,
            use_warm_start: true,
            terminal_cost: "critic".into(),
            smooth_epsilon: 1e-6,
            solver: SolverSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppConfig {
    pub race: RaceConfig,
    #[serde(default = "default_training")]
    pub training: SacConfig,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub enumeration: EnumerationConfig,
}

fn default_training() -> SacConfig {
    SacConfig::default()
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let cfg: AppConfig = serde_json::from_str(&text)
            .with_context(|| format!("config file {} is not valid JSON", path.display()))?;
        Ok(cfg)
    }

    /// Validate every section; collects race-model violations with their
    /// exact field paths.
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut errs = self.race.validate();
        if self.controller.horizon == 0 {
            errs.push(("controller.horizon".into(), "must be at least 1".into()));
        }
        if !matches!(self.controller.terminal_cost.as_str(), "critic" | "none") {
            errs.push((
                "controller.terminal_cost".into(),
                format!("unknown kind `{}`", self.controller.terminal_cost),
            ));
        }
        if self.controller.smooth_epsilon <= 0.0 {
            errs.push(("controller.smooth_epsilon".into(), "must be positive".into()));
        }
        if self.enumeration.max_stops < self.enumeration.min_stops
            || self.enumeration.min_stops == 0
        {
            errs.push((
                "enumeration.min_stops".into(),
                "need max_stops >= min_stops >= 1".into(),
            ));
        }
        if self.training.batch_size == 0 || self.training.buffer_capacity == 0 {
            errs.push(("training.batch_size".into(), "must be positive".into()));
        }
        errs
    }

    pub fn validated(self) -> Result<AppConfig> {
        let errs = self.validate();
        if !errs.is_empty() {
            let mut msg = String::from("configuration invalid:");
            for (path, m) in errs {
                msg.push_str(&format!("\n  {path}: {m}"));
            }
            bail!(msg);
        }
        Ok(self)
    }
}
