use pitwall_core::f1::{self, Compound, RaceConfig};
use pitwall_core::nlp::SolverOptions;
use pitwall_core::oracle::{solve_fixed_strategy, PitStrategy};
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let cfg = Arc::new(RaceConfig::desk());
    let spec = f1::mdp_spec(cfg.clone(), false);
    let x0 = f1::initial_state(&cfg, false).to_vec();
    let warm = [0.0, cfg.nominal_fuel_allocation()];
    let opts = SolverOptions::default();
    for stops in [vec![(4, Compound::M)], vec![(8, Compound::M)], vec![(3, Compound::H), (6, Compound::M)], vec![(14, Compound::H)]] {
        let strategy = PitStrategy { stops };
        let t0 = Instant::now();
        let r = solve_fixed_strategy(&spec, &x0, &strategy, &warm, &opts).unwrap();
        println!("{} -> {:?} obj {:.6} kkt {:.2e} viol {:.2e} iters {} in {:.2}s",
            strategy.label(), r.status, r.race_time, r.kkt_residual, r.violation,
            r.inner_iterations, t0.elapsed().as_secs_f64());
    }
}
