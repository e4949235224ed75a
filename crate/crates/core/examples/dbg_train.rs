use pitwall_core::control::{actor_closed_loop, Controller, ControllerConfig};
use pitwall_core::f1::{self, RaceConfig};
use pitwall_core::nlp::SolverOptions;
use pitwall_core::oracle::{best_strategy, EnumerationConfig};
use pitwall_core::sac::{self, SacConfig};
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let episodes: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);

    let cfg = Arc::new(RaceConfig::desk());
    let spec = f1::mdp_spec(cfg.clone(), false);
    let x0 = f1::initial_state(&cfg, false).to_vec();

    let sac_cfg = SacConfig {
        episodes,
        buffer_capacity: 60_000,
        batch_size: 128,
        warmup_steps: 1000,
        update_every: 1,
        ..SacConfig::default()
    };
    let t0 = Instant::now();
    let (policy, log) = sac::train(&spec, &x0, &sac_cfg, seed).unwrap();
    println!("train {} episodes in {:.1}s", episodes, t0.elapsed().as_secs_f64());
    for row in log.iter().step_by((episodes / 15).max(1)) {
        println!(
            "ep {:4} cost {:8.2} critic {:9.4} actor {:8.3} a_c {:.4} a_d {:.4}",
            row.episode, row.closed_loop_cost, row.critic_loss, row.actor_loss, row.alpha_c, row.alpha_d
        );
    }
    let policy = Arc::new(policy.deployed(1e-6).unwrap());

    // deterministic RL closed loop
    let rl = actor_closed_loop(&spec, &policy, &x0).unwrap();
    let stops: Vec<(usize, usize)> = rl
        .steps
        .iter()
        .filter(|s| s.action.discrete != 0)
        .map(|s| (s.lap + 1, s.action.discrete))
        .collect();
    println!("RL race time {:.3}  stops {:?}", rl.total_cost, stops);

    // oracle
    let t1 = Instant::now();
    let warm = [0.0, cfg.nominal_fuel_allocation()];
    let oracle = best_strategy(
        &spec, &x0, cfg.start_compound, &warm,
        &EnumerationConfig::default(), &SolverOptions::default(),
    )
    .unwrap();
    println!(
        "oracle best {:.3} strategy {} ({} NLPs, {} failures) in {:.1}s",
        oracle.best.race_time, oracle.best.strategy.label(), oracle.nlp_count, oracle.failures,
        t1.elapsed().as_secs_f64()
    );
    for o in oracle.ranking.iter().take(5) {
        println!("   {:9.3}  {}", o.race_time, o.strategy.label());
    }

    // hybrid at several horizons
    for n in [5usize, 10, 20] {
        let t2 = Instant::now();
        let ctrl = Controller::new(
            &spec, &spec, policy.clone(),
            ControllerConfig::new(n, vec![0.0, cfg.fuel_alloc_bounds_mj.0]),
        );
        let log = ctrl.closed_loop_run(&spec, &x0).unwrap();
        let stops: Vec<(usize, usize)> = log
            .steps.iter()
            .filter(|s| s.action.discrete != 0)
            .map(|s| (s.lap + 1, s.action.discrete))
            .collect();
        let (imin, imean, imax) = log.iteration_stats();
        println!(
            "hybrid N={:2} race {:.3} gap {:+.3} stops {:?} fb {} unrecovered {} iters {}/{:.0}/{} in {:.1}s",
            n, log.total_cost, log.total_cost - oracle.best.race_time, stops,
            log.fallback_count(), log.unrecovered_failures(), imin, imean, imax,
            t2.elapsed().as_secs_f64()
        );
    }
    println!("RL gap {:+.3}", rl.total_cost - oracle.best.race_time);
}
