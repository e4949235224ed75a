//! Implementations of the CLI verbs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use pitwall_core::control::{
    actor_closed_loop, ClosedLoopLog, Controller, ControllerConfig, TerminalCost,
};
use pitwall_core::f1::{self, Compound, RaceConfig};
use pitwall_core::mdp::MdpSpec;
use pitwall_core::net::ActivationKind;
use pitwall_core::oracle::{best_strategy, OracleResult};
use pitwall_core::par;
use pitwall_core::sac::{self, TrainedPolicy};

use crate::config::AppConfig;
use crate::manifest::RunManifest;
use crate::report::{self, CsvDoc, SCHEMA_BENCHMARK, SCHEMA_CRITIC_TRACE};

pub struct Ctx {
    pub config: AppConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub trace: bool,
}

impl Ctx {
    fn manifest(&self, checkpoint: Option<&Path>) -> RunManifest {
        RunManifest::new(
            &self.config,
            self.seed,
            checkpoint.map(|p| p.display().to_string()),
        )
    }

    fn race(&self) -> Arc<RaceConfig> {
        Arc::new(self.config.race.clone())
    }

    fn nominal_spec(&self) -> MdpSpec {
        f1::mdp_spec(self.race(), false)
    }

    fn traffic_spec(&self) -> Result<MdpSpec> {
        if self.config.race.traffic.is_none() {
            bail!("config has no `race.traffic` section");
        }
        Ok(f1::mdp_spec(self.race(), true))
    }

    fn controller_config(&self, horizon: usize, warm: bool) -> ControllerConfig {
        let race = &self.config.race;
        let mut cc = ControllerConfig::new(horizon, vec![0.0, race.fuel_alloc_bounds_mj.0]);
        cc.use_warm_start = warm;
        cc.terminal_cost = match self.config.controller.terminal_cost.as_str() {
            "none" => TerminalCost::None,
            _ => TerminalCost::Critic,
        };
        cc.solver = self.config.controller.solver.to_options();
        cc
    }

    fn load_policy(&self, path: &Path) -> Result<TrainedPolicy> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read checkpoint {}", path.display()))?;
        Ok(TrainedPolicy::from_json(&text)?)
    }

    fn deployed_policy(&self, path: &Path) -> Result<Arc<TrainedPolicy>> {
        let policy = self.load_policy(path)?;
        Ok(Arc::new(
            policy.deployed(self.config.controller.smooth_epsilon)?,
        ))
    }

    /// Initial state for a run; nonzero seeds perturb the start (battery
    /// level and tire wear) deterministically, for feasibility sweeps.
    fn initial_state(&self, traffic: bool, seed: u64) -> Vec<f64> {
        let race = &self.config.race;
        let mut x = f1::initial_state(race, traffic).to_vec();
        if seed != 0 {
            let u1 = splitmix(seed);
            let u2 = splitmix(seed.wrapping_add(0x9e3779b97f4a7c15));
            let u3 = splitmix(seed.wrapping_add(0x3c6ef372fe94f82a));
            x[f1::idx::BATTERY] = u1 * race.battery_capacity_mj;
            x[f1::idx::WEAR] = u2 * 3.0;
            x[f1::idx::COMPOUND] = ((u3 * 3.0) as usize).min(2) as f64;
        }
        x
    }
}

/// Deterministic u64 -> [0, 1) mix for start-state perturbations.
fn splitmix(mut s: u64) -> f64 {
    s = s.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = s;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

pub fn cmd_train(ctx: &Ctx, checkpoint_out: &Path) -> Result<()> {
    let spec = ctx.nominal_spec();
    let x0 = ctx.initial_state(false, 0);
    let (policy, log) = sac::train(&spec, &x0, &ctx.config.training, ctx.seed)?;
    if let Some(dir) = checkpoint_out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(checkpoint_out, policy.to_json())
        .with_context(|| format!("cannot write checkpoint {}", checkpoint_out.display()))?;
    let manifest = ctx.manifest(Some(checkpoint_out));
    report::training_log_csv(&log, &manifest).write(&ctx.out.join("training_log.csv"))?;
    report::write_json(&ctx.out.join("manifest.json"), &manifest)?;
    println!(
        "trained {} episodes, final closed-loop cost {:.3}, checkpoint {}",
        log.len(),
        log.last().map(|r| r.closed_loop_cost).unwrap_or(f64::NAN),
        checkpoint_out.display()
    );
    Ok(())
}

pub fn cmd_eval_rl(ctx: &Ctx, checkpoint: &Path) -> Result<()> {
    let spec = ctx.nominal_spec();
    let policy = ctx.deployed_policy(checkpoint)?;
    let x0 = ctx.initial_state(false, ctx.seed);
    let log = actor_closed_loop(&spec, &policy, &x0)?;
    let manifest = ctx.manifest(Some(checkpoint));
    report::closed_loop_csv(&log, &manifest).write(&ctx.out.join("rl_closed_loop.csv"))?;
    let summary = report::closed_loop_summary(&log, &ctx.config.race, &manifest);
    report::write_json(&ctx.out.join("rl_summary.json"), &summary)?;
    println!(
        "standalone RL race time {:.3} s, stops {:?}",
        log.total_cost, summary.stops
    );
    Ok(())
}

pub fn cmd_run_hybrid(ctx: &Ctx, checkpoint: &Path, horizon: Option<usize>, traffic: bool, model_traffic: bool) -> Result<()> {
    let policy = ctx.deployed_policy(checkpoint)?;
    let nominal = ctx.nominal_spec();
    let horizon = horizon.unwrap_or(ctx.config.controller.horizon);
    let cc = ctx.controller_config(horizon, ctx.config.controller.use_warm_start);
    let (env, log) = if traffic {
        let env = ctx.traffic_spec()?;
        let log = if model_traffic {
            let controller = Controller::new(&nominal, &env, policy, cc);
            controller.closed_loop_run(&env, &ctx.initial_state(true, ctx.seed))?
        } else {
            let controller = Controller::new(&nominal, &nominal, policy, cc);
            controller.closed_loop_run(&env, &ctx.initial_state(true, ctx.seed))?
        };
        (env, log)
    } else {
        let controller = Controller::new(&nominal, &nominal, policy, cc);
        let log = controller.closed_loop_run(&nominal, &ctx.initial_state(false, ctx.seed))?;
        (nominal, log)
    };
    let _ = env;
    let manifest = ctx.manifest(Some(checkpoint));
    let name = format!("hybrid_closed_loop_N{horizon}.csv");
    report::closed_loop_csv(&log, &manifest).write(&ctx.out.join(name))?;
    let summary = report::closed_loop_summary(&log, &ctx.config.race, &manifest);
    report::write_json(&ctx.out.join(format!("hybrid_summary_N{horizon}.json")), &summary)?;
    println!(
        "hybrid N={horizon} race time {:.3} s, stops {:?}, fallbacks {}, unrecovered {}",
        log.total_cost, summary.stops, summary.fallback_count, summary.unrecovered_failures
    );
    Ok(())
}

fn run_oracle_inner(ctx: &Ctx, seed: u64) -> Result<OracleResult> {
    let spec = ctx.nominal_spec();
    let race = &ctx.config.race;
    let x0 = ctx.initial_state(false, seed);
    let start = Compound::from_label(x0[f1::idx::COMPOUND]);
    let warm = [0.0, race.nominal_fuel_allocation()];
    let mut ecfg = ctx.config.enumeration.clone();
    if ctx.jobs != 0 {
        ecfg.jobs = ctx.jobs;
    }
    Ok(best_strategy(
        &spec,
        &x0,
        start,
        &warm,
        &ecfg,
        &ctx.config.controller.solver.to_options(),
    )?)
}

pub fn cmd_run_oracle(ctx: &Ctx) -> Result<()> {
    let result = run_oracle_inner(ctx, ctx.seed)?;
    let manifest = ctx.manifest(None);
    report::oracle_ranking_csv(&result, &manifest).write(&ctx.out.join("oracle_ranking.csv"))?;
    report::write_json(
        &ctx.out.join("oracle_summary.json"),
        &report::oracle_summary(&result, &manifest),
    )?;
    println!(
        "oracle best {} at {:.3} s over {} candidates ({} failures)",
        result.best.strategy.label(),
        result.best.race_time,
        result.nlp_count,
        result.failures
    );
    Ok(())
}

pub fn cmd_benchmark(
    ctx: &Ctx,
    checkpoint: &Path,
    horizons: &[usize],
    seeds: &[u64],
) -> Result<()> {
    let policy = ctx.deployed_policy(checkpoint)?;
    let nominal = ctx.nominal_spec();
    let manifest = ctx.manifest(Some(checkpoint));
    let mut doc = CsvDoc::new(SCHEMA_BENCHMARK, &manifest);

    struct Row {
        method: String,
        horizon: String,
        seed: u64,
        race_time: f64,
        gap: f64,
        iters: (usize, f64, usize),
        fallbacks: usize,
        unrecovered: usize,
    }

    let mut rows: Vec<Row> = Vec::new();
    for &seed in seeds {
        let x0 = ctx.initial_state(false, seed);
        let oracle = run_oracle_inner(ctx, seed)?;
        let base = oracle.best.race_time;
        rows.push(Row {
            method: "oracle".into(),
            horizon: "full".into(),
            seed,
            race_time: base,
            gap: 0.0,
            iters: (0, 0.0, 0),
            fallbacks: 0,
            unrecovered: oracle.failures,
        });

        let rl = actor_closed_loop(&nominal, &policy, &x0)?;
        rows.push(Row {
            method: "rl".into(),
            horizon: "-".into(),
            seed,
            race_time: rl.total_cost,
            gap: rl.total_cost - base,
            iters: (0, 0.0, 0),
            fallbacks: 0,
            unrecovered: 0,
        });

        // hybrid runs across horizons, fanned out over the configured width
        let runs: Vec<usize> = horizons.to_vec();
        let cc_base = ctx.controller_config(1, ctx.config.controller.use_warm_start);
        let logs: Vec<(usize, Result<ClosedLoopLog>)> = par::map_collect(
            runs,
            ctx.jobs,
            |h: usize| {
                let mut cc = cc_base.clone();
                cc.horizon = h;
                let controller = Controller::new(&nominal, &nominal, policy.clone(), cc);
                (h, controller.closed_loop_run(&nominal, &x0).map_err(Into::into))
            },
        );
        for (h, log) in logs {
            match log {
                Ok(log) => rows.push(Row {
                    method: "hybrid".into(),
                    horizon: h.to_string(),
                    seed,
                    race_time: log.total_cost,
                    gap: log.total_cost - base,
                    iters: log.iteration_stats(),
                    fallbacks: log.fallback_count(),
                    unrecovered: log.unrecovered_failures(),
                }),
                Err(e) => {
                    eprintln!("hybrid N={h} seed {seed} failed: {e}");
                    rows.push(Row {
                        method: "hybrid".into(),
                        horizon: h.to_string(),
                        seed,
                        race_time: f64::NAN,
                        gap: f64::NAN,
                        iters: (0, 0.0, 0),
                        fallbacks: 0,
                        unrecovered: usize::MAX,
                    });
                }
            }
        }
    }

    for r in &rows {
        doc.row(&[
            r.method.clone(),
            r.horizon.clone(),
            r.seed.to_string(),
            format!("{}", r.race_time),
            format!("{}", r.gap),
            r.iters.0.to_string(),
            format!("{}", r.iters.1),
            r.iters.2.to_string(),
            r.fallbacks.to_string(),
            r.unrecovered.to_string(),
        ]);
    }
    doc.write(&ctx.out.join("benchmark.csv"))?;
    report::write_json(&ctx.out.join("manifest.json"), &manifest)?;
    println!("benchmark written to {}", ctx.out.join("benchmark.csv").display());
    for r in &rows {
        println!(
            "  {:>7} N={:<4} seed {} time {:10.3} gap {:+9.3}",
            r.method, r.horizon, r.seed, r.race_time, r.gap
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TrafficSummary {
    pub manifest: RunManifest,
    pub schema: String,
    pub aware_race_time_s: f64,
    pub blind_race_time_s: f64,
    pub margin_s: f64,
    pub aware_stops: Vec<(usize, String)>,
    pub blind_stops: Vec<(usize, String)>,
    pub identical_stops: bool,
}

pub fn cmd_traffic_compare(ctx: &Ctx, checkpoint: &Path, horizon: Option<usize>) -> Result<()> {
    let policy = ctx.deployed_policy(checkpoint)?;
    let nominal = ctx.nominal_spec();
    let env = ctx.traffic_spec()?;
    let horizon = horizon.unwrap_or(ctx.config.controller.horizon);
    let x0 = ctx.initial_state(true, ctx.seed);
    let manifest = ctx.manifest(Some(checkpoint));

    let cc = ctx.controller_config(horizon, true);
    let aware = Controller::new(&nominal, &env, policy.clone(), cc.clone())
        .closed_loop_run(&env, &x0)?;
    let blind =
        Controller::new(&nominal, &nominal, policy, cc).closed_loop_run(&env, &x0)?;

    report::closed_loop_csv(&aware, &manifest).write(&ctx.out.join("traffic_aware.csv"))?;
    report::closed_loop_csv(&blind, &manifest).write(&ctx.out.join("traffic_blind.csv"))?;
    let stops = |log: &ClosedLoopLog| -> Vec<(usize, String)> {
        log.steps
            .iter()
            .filter(|s| s.action.discrete != 0)
            .map(|s| (s.lap + 1, format!("{:?}", Compound::from_pit(s.action.discrete))))
            .collect()
    };
    let summary = TrafficSummary {
        manifest: manifest.clone(),
        schema: "traffic_summary_v1".into(),
        aware_race_time_s: aware.total_cost,
        blind_race_time_s: blind.total_cost,
        margin_s: blind.total_cost - aware.total_cost,
        aware_stops: stops(&aware),
        blind_stops: stops(&blind),
        identical_stops: stops(&aware) == stops(&blind),
    };
    report::write_json(&ctx.out.join("traffic_summary.json"), &summary)?;
    println!(
        "traffic-aware {:.3} s vs traffic-blind {:.3} s: margin {:+.3} s (identical stops: {})",
        summary.aware_race_time_s, summary.blind_race_time_s, summary.margin_s,
        summary.identical_stops
    );
    if !summary.identical_stops {
        eprintln!("warning: pit strategies differ between the variants");
    }
    Ok(())
}

pub fn cmd_critic_trace(ctx: &Ctx, checkpoint: &Path, horizon: Option<usize>) -> Result<()> {
    let relu_policy = ctx.load_policy(checkpoint)?;
    if relu_policy
        .critic
        .q1
        .layers
        .iter()
        .all(|l| !matches!(l.activation, ActivationKind::Relu))
    {
        bail!("checkpoint critics carry no ReLU layers to compare against");
    }
    let smooth_policy = Arc::new(relu_policy.deployed(ctx.config.controller.smooth_epsilon)?);
    let nominal = ctx.nominal_spec();
    let horizon = horizon.unwrap_or(ctx.config.controller.horizon);
    let cc = ctx.controller_config(horizon, true);
    let x0 = ctx.initial_state(false, ctx.seed);
    let controller = Controller::new(&nominal, &nominal, smooth_policy.clone(), cc);
    let log = controller.closed_loop_run(&nominal, &x0)?;

    let gamma = relu_policy.gamma;
    let manifest = ctx.manifest(Some(checkpoint));
    let mut doc = CsvDoc::new(SCHEMA_CRITIC_TRACE, &manifest);
    let n = log.steps.len();
    for (j, step) in log.steps.iter().enumerate() {
        // realized discounted cost-to-go from lap j along the trajectory
        let mut realized = 0.0;
        let mut g = 1.0;
        for s in &log.steps[j..n] {
            realized += g * s.stage_cost;
            g *= gamma;
        }
        let c_relu = relu_policy.terminal_cost(
            &step.state,
            &step.action.continuous,
            step.action.discrete,
        )?;
        let c_smooth = smooth_policy.terminal_cost(
            &step.state,
            &step.action.continuous,
            step.action.discrete,
        )?;
        doc.row(&[
            step.lap.to_string(),
            format!("{realized}"),
            format!("{c_relu}"),
            format!("{c_smooth}"),
        ]);
    }
    doc.write(&ctx.out.join("critic_trace.csv"))?;
    println!("critic trace written to {}", ctx.out.join("critic_trace.csv").display());
    Ok(())
}

pub fn cmd_validate_config(path: &Path) -> Result<()> {
    let cfg = AppConfig::load(path)?;
    let errs = cfg.validate();
    if errs.is_empty() {
        println!("config {} is valid", path.display());
        Ok(())
    } else {
        let mut msg = format!("config {} is invalid:", path.display());
        for (field, m) in errs {
            msg.push_str(&format!("\n  {field}: {m}"));
        }
        Err(anyhow!(msg))
    }
}
