use pitwall_core::f1::{self, RaceConfig};
use pitwall_core::nlp::{SolveStatus, SolverOptions};
use pitwall_core::oracle::{enumerate_strategies, solve_fixed_strategy, EnumerationConfig};
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let cfg = Arc::new(RaceConfig::desk());
    let spec = f1::mdp_spec(cfg.clone(), false);
    let x0 = f1::initial_state(&cfg, false).to_vec();
    let warm = [0.0, cfg.nominal_fuel_allocation()];
    let strategies =
        enumerate_strategies(&EnumerationConfig::default(), cfg.n_laps, cfg.start_compound).unwrap();
    println!("{} candidates", strategies.len());
    let opts = SolverOptions::default();
    let mut failures = Vec::new();
    let t0 = Instant::now();
    let mut total_iters = 0usize;
    for s in &strategies {
        let r = solve_fixed_strategy(&spec, &x0, s, &warm, &opts).unwrap();
        total_iters += r.inner_iterations;
        if r.status != SolveStatus::Optimal {
            failures.push((s.clone(), r.status, r.kkt_residual, r.violation, r.inner_iterations));
        }
    }
    println!("solved in {:.1}s, mean iters {:.0}, {} failures", t0.elapsed().as_secs_f64(),
             total_iters as f64 / strategies.len() as f64, failures.len());
    for (s, st, kkt, viol, it) in failures.iter().take(10) {
        println!("  {} -> {:?} kkt {:.2e} viol {:.2e} iters {}", s.label(), st, kkt, viol, it);
    }
}
