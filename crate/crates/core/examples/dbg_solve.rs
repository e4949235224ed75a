use pitwall_core::control::{Controller, ControllerConfig};
use pitwall_core::f1::{self, RaceConfig};
use pitwall_core::sac::{self, SacConfig};
use std::sync::Arc;

fn main() {
    let cfg = Arc::new(RaceConfig::desk());
    let spec = f1::mdp_spec(cfg.clone(), false);
    let x0 = f1::initial_state(&cfg, false).to_vec();
    let sac_cfg = SacConfig {
        episodes: 3,
        warmup_steps: 40,
        batch_size: 32,
        actor_hidden: vec![16, 16],
        critic_hidden: vec![16, 16],
        ..SacConfig::default()
    };
    let (policy, _) = sac::train(&spec, &x0, &sac_cfg, 1).unwrap();
    let policy = Arc::new(policy.deployed(1e-6).unwrap());
    let mut ctrl_cfg = ControllerConfig::new(5, vec![0.0, cfg.fuel_alloc_bounds_mj.0]);
    ctrl_cfg.horizon = 5;
    let c = Controller::new(&spec, &spec, policy, ctrl_cfg);
    let log = c.closed_loop_run(&spec, &x0).unwrap();
    for s in &log.steps {
        println!(
            "lap {:2} status {:?} horiz {} term {} fb {} plan {:.9} warm {:.9} diff {:+.3e} inner {}",
            s.lap, s.status, s.horizon, s.terminal_used as u8, s.fallback as u8,
            s.plan_objective, s.warm_objective,
            s.plan_objective - s.warm_objective, s.inner_iterations
        );
    }
    println!("total {}", log.total_cost);
}
