//! CSV and JSON emission. Every file starts with (or embeds) the manifest
//! hash; CSV schemas are versioned and pinned by a self-test, so changing
//! columns without bumping the version fails the build's test run.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::manifest::RunManifest;
use pitwall_core::control::ClosedLoopLog;
use pitwall_core::f1::{self, RaceConfig};
use pitwall_core::oracle::OracleResult;
use pitwall_core::sac::TrainLogRow;

pub const SCHEMA_TRAINING_LOG: (&str, &str) =
    ("training_log_v1", "episode,closed_loop_cost,critic_loss,actor_loss,alpha_c,alpha_d");
pub const SCHEMA_CLOSED_LOOP: (&str, &str) = (
    "closed_loop_v1",
    "lap,battery_mj,fuel_mj,mass_kg,tire_wear,compound,race_time_s,gap_s,batt_alloc_mj,fuel_alloc_mj,pit,stage_cost_s,plan_objective_s,warm_objective_s,solver_status,inner_iterations,horizon,terminal_used,fallback",
);
pub const SCHEMA_ORACLE_RANKING: (&str, &str) =
    ("oracle_ranking_v1", "rank,strategy,race_time_s,status,inner_iterations");
pub const SCHEMA_BENCHMARK: (&str, &str) = (
    "benchmark_v1",
    "method,horizon,seed,race_time_s,gap_s,iters_min,iters_mean,iters_max,fallback_count,unrecovered_failures",
);
pub const SCHEMA_CRITIC_TRACE: (&str, &str) = (
    "critic_trace_v1",
    "lap,realized_cost_to_go_s,critic_relu_s,critic_smooth_s",
);

pub fn all_schemas() -> [(&'static str, &'static str); 5] {
    [
        SCHEMA_TRAINING_LOG,
        SCHEMA_CLOSED_LOOP,
        SCHEMA_ORACLE_RANKING,
        SCHEMA_BENCHMARK,
        SCHEMA_CRITIC_TRACE,
    ]
}

pub struct CsvDoc {
    buf: String,
}

impl CsvDoc {
    pub fn new(schema: (&str, &str), manifest: &RunManifest) -> CsvDoc {
        let mut buf = String::new();
        let _ = writeln!(buf, "# schema={} manifest={}", schema.0, manifest.config_hash);
        let _ = writeln!(buf, "{}", schema.1);
        CsvDoc { buf }
    }

    pub fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.buf, "{}", fields.join(","));
    }

    pub fn write(self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.buf)
            .with_context(|| format!("cannot write {}", path.display()))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

pub fn training_log_csv(log: &[TrainLogRow], manifest: &RunManifest) -> CsvDoc {
    let mut doc = CsvDoc::new(SCHEMA_TRAINING_LOG, manifest);
    for r in log {
        doc.row(&[
            r.episode.to_string(),
            fmt(r.closed_loop_cost),
            fmt(r.critic_loss),
            fmt(r.actor_loss),
            fmt(r.alpha_c),
            fmt(r.alpha_d),
        ]);
    }
    doc
}

/// One row per lap of a closed-loop race record.
pub fn closed_loop_csv(log: &ClosedLoopLog, manifest: &RunManifest) -> CsvDoc {
    let mut doc = CsvDoc::new(SCHEMA_CLOSED_LOOP, manifest);
    for s in &log.steps {
        let state = f1::RaceState::from_slice(&s.state);
        doc.row(&[
            s.lap.to_string(),
            fmt(state.battery_mj),
            fmt(state.fuel_mj),
            fmt(state.mass_kg),
            fmt(state.tire_wear),
            format!("{:?}", state.compound),
            fmt(state.race_time_s),
            state.gap_s.map(fmt).unwrap_or_default(),
            fmt(s.action.continuous[0]),
            fmt(s.action.continuous[1]),
            s.action.discrete.to_string(),
            fmt(s.stage_cost),
            fmt(s.plan_objective),
            fmt(s.warm_objective),
            format!("{:?}", s.status),
            s.inner_iterations.to_string(),
            s.horizon.to_string(),
            (s.terminal_used as u8).to_string(),
            (s.fallback as u8).to_string(),
        ]);
    }
    doc
}

#[derive(Debug, Serialize)]
pub struct ClosedLoopSummary {
    pub manifest: RunManifest,
    pub schema: String,
    pub total_race_time_s: f64,
    pub laps: usize,
    pub stops: Vec<(usize, String)>,
    pub fallback_count: usize,
    pub unrecovered_failures: usize,
    pub iters_min: usize,
    pub iters_mean: f64,
    pub iters_max: usize,
    pub max_constraint_violation: f64,
}

pub fn closed_loop_summary(
    log: &ClosedLoopLog,
    race: &RaceConfig,
    manifest: &RunManifest,
) -> ClosedLoopSummary {
    let (imin, imean, imax) = log.iteration_stats();
    let spec = f1::mdp_spec(std::sync::Arc::new(race.clone()), log.steps[0].state.len() > f1::STATE_DIM);
    let max_violation = log
        .steps
        .iter()
        .flat_map(|s| (spec.state_constraints)(&s.state))
        .fold(0.0_f64, |m, r| m.max(r));
    ClosedLoopSummary {
        manifest: manifest.clone(),
        schema: "closed_loop_summary_v1".into(),
        total_race_time_s: log.total_cost,
        laps: log.steps.len(),
        stops: log
            .steps
            .iter()
            .filter(|s| s.action.discrete != 0)
            .map(|s| {
                (
                    s.lap + 1,
                    format!("{:?}", f1::Compound::from_pit(s.action.discrete)),
                )
            })
            .collect(),
        fallback_count: log.fallback_count(),
        unrecovered_failures: log.unrecovered_failures(),
        iters_min: imin,
        iters_mean: imean,
        iters_max: imax,
        max_constraint_violation: max_violation,
    }
}

pub fn oracle_ranking_csv(result: &OracleResult, manifest: &RunManifest) -> CsvDoc {
    let mut doc = CsvDoc::new(SCHEMA_ORACLE_RANKING, manifest);
    for (i, o) in result.ranking.iter().enumerate() {
        doc.row(&[
            (i + 1).to_string(),
            o.strategy.label(),
            fmt(o.race_time),
            format!("{:?}", o.status),
            o.inner_iterations.to_string(),
        ]);
    }
    doc
}

#[derive(Debug, Serialize)]
pub struct OracleSummary {
    pub manifest: RunManifest,
    pub schema: String,
    pub best_strategy: String,
    pub best_race_time_s: f64,
    pub nlp_count: usize,
    pub failures: usize,
}

pub fn oracle_summary(result: &OracleResult, manifest: &RunManifest) -> OracleSummary {
    OracleSummary {
        manifest: manifest.clone(),
        schema: "oracle_summary_v1".into(),
        best_strategy: result.best.strategy.label(),
        best_race_time_s: result.best.race_time,
        nlp_count: result.nlp_count,
        failures: result.failures,
    }
}
