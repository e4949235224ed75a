//! Deployment loop: roll the actor out to fix the discrete input sequence,
//! build and solve the reduced continuous OCP with the critic as terminal
//! cost, apply the first hybrid action, and repeat with a receding horizon
//! that shrinks to the remaining episode length near the end.
//!
//! States are eliminated by single shooting, so the decision vector is the
//! stacked continuous input sequence; objective gradients come from an
//! adjoint sweep chaining the model Jacobians into the critic's reverse-mode
//! input gradient. Extended models (e.g. with a traffic state) append their
//! extra dimensions, so projecting onto a smaller model keeps the prefix.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::mdp::{HybridAction, MdpSpec};
use crate::nlp::{
    self, ConstraintBlock, NlpProblem, SolveStatus, SolverOptions,
};
use crate::sac::TrainedPolicy;

/// Terminal-cost selection; `None` is forced in the shrinking-horizon tail
/// and available as an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalCost {
    Critic,
    None,
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    /// Prediction horizon N (stages while receding).
    pub horizon: usize,
    /// Initialize the solver from the actor rollout; otherwise from the
    /// box midpoints (ablation reference).
    pub use_warm_start: bool,
    pub terminal_cost: TerminalCost,
    /// Continuous part of the terminal control law, appended when a failed
    /// solve falls back to the shifted previous plan.
    pub terminal_law_continuous: Vec<f64>,
    /// Feasibility tolerance on the current state before planning.
    pub feasibility_tol: f64,
    pub solver: SolverOptions,
}

impl ControllerConfig {
    pub fn new(horizon: usize, terminal_law_continuous: Vec<f64>) -> Self {
        ControllerConfig {
            horizon,
            use_warm_start: true,
            terminal_cost: TerminalCost::Critic,
            terminal_law_continuous,
            feasibility_tol: 1e-6,
            solver: SolverOptions::default(),
        }
    }
}

/// Everything a planning step needs: the nominal model the actor was trained
/// on (used for rollouts), the model the OCP optimizes against (may carry
/// extensions such as traffic), and the deployed policy.
pub struct Controller<'a> {
    pub rollout_model: &'a MdpSpec,
    pub plan_model: &'a MdpSpec,
    pub policy: Arc<TrainedPolicy>,
    pub config: ControllerConfig,
}

/// Deterministic actor rollout through the nominal model.
#[derive(Debug, Clone)]
pub struct RolloutPlan {
    pub discrete: Vec<usize>,
    pub continuous: Vec<Vec<f64>>,
    /// Predicted states beyond the start state, one per action.
    pub states: Vec<Vec<f64>>,
}

/// One planning step: fixed discrete sequence, warm start, solved continuous
/// sequence, shooting states and solver diagnostics.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub stages: usize,
    pub terminal_used: bool,
    pub discrete: Vec<usize>,
    pub warm_start: Vec<f64>,
    pub optimized: Vec<f64>,
    /// Shooting states x_1..x_S under the optimized inputs (plan-model dims).
    pub predicted_states: Vec<Vec<f64>>,
    pub objective: f64,
    pub warm_objective: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub violation: f64,
    pub inner_iterations: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopStep {
    pub lap: usize,
    pub state: Vec<f64>,
    pub action: HybridAction,
    pub stage_cost: f64,
    pub plan_objective: f64,
    pub warm_objective: f64,
    pub status: SolveStatus,
    pub inner_iterations: usize,
    pub violation: f64,
    pub horizon: usize,
    pub terminal_used: bool,
    pub fallback: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ClosedLoopLog {
    pub steps: Vec<ClosedLoopStep>,
    pub final_state: Vec<f64>,
    pub total_cost: f64,
}

impl ClosedLoopLog {
    pub fn fallback_count(&self) -> usize {
        self.steps.iter().filter(|s| s.fallback).count()
    }

    pub fn unrecovered_failures(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.status != SolveStatus::Optimal && !s.fallback)
            .count()
    }

    pub fn iteration_stats(&self) -> (usize, f64, usize) {
        let mut min = usize::MAX;
        let mut max = 0usize;
        let mut sum = 0usize;
        for s in &self.steps {
            min = min.min(s.inner_iterations);
            max = max.max(s.inner_iterations);
            sum += s.inner_iterations;
        }
        if self.steps.is_empty() {
            (0, 0.0, 0)
        } else {
            (min, sum as f64 / self.steps.len() as f64, max)
        }
    }
}

fn project<'x>(x: &'x [f64], dim: usize) -> &'x [f64] {
    &x[..dim]
}

/// Single-shooting transcription of the fixed-discrete-sequence OCP.
///
/// Decision vector z stacks the continuous inputs u_0..u_{K-1}. With a
/// critic the last input is the terminal decision variable and the stage sum
/// runs to K-2; without one the stage sum covers all K inputs. Objective
/// gradients come from an adjoint sweep; constraint Jacobians from forward
/// sensitivities. The critic sees the state prefix matching its input size.
pub fn build_shooting_ocp(
    model: &MdpSpec,
    x0: &[f64],
    discrete: &[usize],
    critic: Option<Arc<TrainedPolicy>>,
) -> NlpProblem {
    let n_c = model.n_continuous();
    let k_total = discrete.len();
    let stages = if critic.is_some() { k_total - 1 } else { k_total };
    let dim = k_total * n_c;
    let x0v = project(x0, model.state_dim).to_vec();
    let smooth = model.smooth.clone().expect("plan model derivatives");

    let obj_model = model.clone();
    let obj_smooth = smooth.clone();
    let obj_discrete = discrete.to_vec();
    let obj_x0 = x0v.clone();
    let obj_critic = critic.clone();
    let objective = Arc::new(move |z: &[f64]| -> (f64, Vec<f64>) {
        let model = &obj_model;
        let n = model.state_dim;
        // forward shoot, caching per-stage derivatives; the cost sum is
        // compensated so line searches see decreases near the float floor
        let mut x = obj_x0.clone();
        let mut value = 0.0;
        let mut comp = 0.0;
        let mut jac_a = Vec::with_capacity(stages);
        let mut jac_b = Vec::with_capacity(stages);
        let mut dl_dx = Vec::with_capacity(stages);
        let mut dl_du = Vec::with_capacity(stages);
        for k in 0..stages {
            let action = HybridAction::new(z[k * n_c..(k + 1) * n_c].to_vec(), obj_discrete[k]);
            let term = (model.stage_cost)(&x, &action) - comp;
            let sum = value + term;
            comp = (sum - value) - term;
            value = sum;
            let (a, b) = (obj_smooth.dynamics_jacobians)(&x, &action);
            let (gx, gu) = (obj_smooth.cost_gradients)(&x, &action);
            jac_a.push(a);
            jac_b.push(b);
            dl_dx.push(gx);
            dl_du.push(gu);
            x = (model.dynamics)(&x, &action);
        }
        let mut grad = vec![0.0; z.len()];
        // terminal critic seeds the adjoint
        let mut p = vec![0.0; n];
        if let Some(policy) = &obj_critic {
            let u_term = &z[stages * n_c..];
            let d_term = obj_discrete[stages];
            let critic_state_dim = policy.actor.net.input_dim;
            let xs = project(&x, critic_state_dim.min(n));
            match (
                policy.terminal_cost(xs, u_term, d_term),
                policy.terminal_cost_gradient(xs, u_term, d_term),
            ) {
                (Ok(c), Ok((dx, du))) => {
                    value += c;
                    p[..dx.len()].copy_from_slice(&dx);
                    grad[stages * n_c..].copy_from_slice(&du);
                }
                _ => value = f64::NAN,
            }
        }
        // adjoint sweep
        for k in (0..stages).rev() {
            let bt_p = jac_b[k].tr_matvec(&p);
            for i in 0..n_c {
                grad[k * n_c + i] = dl_du[k][i] + bt_p[i];
            }
            let at_p = jac_a[k].tr_matvec(&p);
            for (pi, v) in p.iter_mut().zip(&at_p) {
                *pi = *v;
            }
            for (pi, g) in p.iter_mut().zip(&dl_dx[k]) {
                *pi += *g;
            }
        }
        (value, grad)
    });

    // cheap value-only path for line searches: shooting without Jacobians
    let val_model = model.clone();
    let val_discrete = discrete.to_vec();
    let val_x0 = x0v.clone();
    let val_critic = critic.clone();
    let objective_value = Arc::new(move |z: &[f64]| -> f64 {
        let model = &val_model;
        let mut x = val_x0.clone();
        let mut value = 0.0;
        let mut comp = 0.0;
        for k in 0..stages {
            let action = HybridAction::new(z[k * n_c..(k + 1) * n_c].to_vec(), val_discrete[k]);
            let term = (model.stage_cost)(&x, &action) - comp;
            let sum = value + term;
            comp = (sum - value) - term;
            value = sum;
            x = (model.dynamics)(&x, &action);
        }
        if let Some(policy) = &val_critic {
            let u_term = &z[stages * n_c..];
            let d_term = val_discrete[stages];
            let critic_state_dim = policy.actor.net.input_dim;
            let xs = project(&x, critic_state_dim.min(model.state_dim));
            match policy.terminal_cost(xs, u_term, d_term) {
                Ok(c) => value += c,
                Err(_) => value = f64::NAN,
            }
        }
        value
    });

    let con_model = model.clone();
    let con_discrete = discrete.to_vec();
    let con_x0 = x0v;
    let c_dim = model.constraint_dim;
    let constraints = if c_dim > 0 && stages > 0 {
        Some(ConstraintBlock {
            count: stages * c_dim,
            affine: model.affine_constraints,
            eval: Arc::new(move |z: &[f64]| -> (Vec<f64>, Mat) {
                let model = &con_model;
                let n = model.state_dim;
                let width = z.len();
                let mut x = con_x0.clone();
                // sensitivity of the current state w.r.t. z
                let mut sens = Mat::zeros(n, width);
                let mut residuals = Vec::with_capacity(stages * c_dim);
                let mut jac = Mat::zeros(stages * c_dim, width);
                for k in 0..stages {
                    let action =
                        HybridAction::new(z[k * n_c..(k + 1) * n_c].to_vec(), con_discrete[k]);
                    let (a, b) = (smooth.dynamics_jacobians)(&x, &action);
                    // sens <- A * sens, then add B into the u_k block
                    let mut next = Mat::zeros(n, width);
                    for i in 0..n {
                        for j in 0..n {
                            let aij = a.get(i, j);
                            if aij == 0.0 {
                                continue;
                            }
                            let src = &sens.data[j * width..(j + 1) * width];
                            let dst = &mut next.data[i * width..(i + 1) * width];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += aij * s;
                            }
                        }
                        for jc in 0..n_c {
                            next.data[i * width + k * n_c + jc] += b.get(i, jc);
                        }
                    }
                    sens = next;
                    x = (model.dynamics)(&x, &action);
                    let g = (model.state_constraints)(&x);
                    let gx = (smooth.constraint_jacobian)(&x);
                    for (r, &gv) in g.iter().enumerate() {
                        residuals.push(gv);
                        let row = k * c_dim + r;
                        for j in 0..n {
                            let gxj = gx.get(r, j);
                            if gxj == 0.0 {
                                continue;
                            }
                            let src = &sens.data[j * width..(j + 1) * width];
                            let dst = &mut jac.data[row * width..(row + 1) * width];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += gxj * s;
                            }
                        }
                    }
                }
                (residuals, jac)
            }),
        })
    } else {
        None
    };

    let mut lower = Vec::with_capacity(dim);
    let mut upper = Vec::with_capacity(dim);
    for _ in 0..k_total {
        for &(lo, hi) in &model.continuous_bounds {
            lower.push(lo);
            upper.push(hi);
        }
    }
    NlpProblem {
        dim,
        objective,
        objective_value: Some(objective_value),
        constraints,
        lower,
        upper,
    }
}

impl<'a> Controller<'a> {
    pub fn new(
        rollout_model: &'a MdpSpec,
        plan_model: &'a MdpSpec,
        policy: Arc<TrainedPolicy>,
        config: ControllerConfig,
    ) -> Controller<'a> {
        assert!(
            plan_model.smooth.is_some(),
            "plan model must provide analytic derivatives"
        );
        Controller {
            rollout_model,
            plan_model,
            policy,
            config,
        }
    }

    /// Roll the deterministic actor `n_actions` steps through the nominal
    /// model, projecting each action into the per-state feasible set.
    pub fn actor_rollout(&self, x: &[f64], n_actions: usize) -> Result<RolloutPlan> {
        assert!(n_actions >= 1);
        let model = self.rollout_model;
        let mut state = project(x, model.state_dim).to_vec();
        let mut discrete = Vec::with_capacity(n_actions);
        let mut continuous = Vec::with_capacity(n_actions);
        let mut states = Vec::with_capacity(n_actions);
        for k in 0..n_actions {
            let raw = self.policy.actor.deterministic(&state)?;
            let action = match &model.action_projection {
                Some(p) => p(&state, raw),
                None => raw,
            };
            let tr = crate::mdp::step(model, &state, &action)
                .map_err(|e| e.at_step("actor rollout", k))?;
            discrete.push(action.discrete);
            continuous.push(action.continuous);
            states.push(tr.next_state.clone());
            state = tr.next_state;
        }
        Ok(RolloutPlan {
            discrete,
            continuous,
            states,
        })
    }

    /// Build the reduced OCP for a fixed discrete sequence: decision vector
    /// z = stacked continuous inputs, states eliminated by shooting,
    /// objective = stage-cost sum plus the critic head at the terminal pair
    /// when enabled, constraints = state residuals at every stage.
    pub fn build_reduced_ocp(
        &self,
        x0: &[f64],
        discrete: &[usize],
        terminal: TerminalCost,
    ) -> NlpProblem {
        let critic = match terminal {
            TerminalCost::Critic => Some(self.policy.clone()),
            TerminalCost::None => None,
        };
        build_shooting_ocp(self.plan_model, x0, discrete, critic)
    }

    fn flatten(seq: &[Vec<f64>]) -> Vec<f64> {
        seq.iter().flat_map(|v| v.iter().copied()).collect()
    }

    /// Shift a previous plan one stage: drop index 0; when the horizon is not
    /// shrinking, append the terminal control law and the actor's discrete
    /// choice at the tail.
    pub fn shift_fallback(
        &self,
        previous: &PlanResult,
        appended_discrete: usize,
        shrink: bool,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        if previous.discrete.is_empty() {
            return Err(Error::NoPreviousPlan);
        }
        let n_c = self.plan_model.n_continuous();
        let mut discrete: Vec<usize> = previous.discrete[1..].to_vec();
        let mut z: Vec<f64> = previous.optimized[n_c..].to_vec();
        if !shrink {
            discrete.push(appended_discrete);
            z.extend_from_slice(&self.config.terminal_law_continuous);
        }
        Ok((discrete, z))
    }

    /// One planning step. `remaining` is the number of episode steps left;
    /// the effective horizon is min(N, remaining) and the terminal cost is
    /// omitted when the plan reaches the episode end.
    pub fn plan_step(
        &self,
        x: &[f64],
        remaining: usize,
        previous: Option<&PlanResult>,
    ) -> Result<PlanResult> {
        assert!(remaining >= 1);
        let model = self.plan_model;
        let xp = project(x, model.state_dim);
        // precondition: current state feasible
        for (i, r) in (model.state_constraints)(xp).iter().enumerate() {
            if *r > self.config.feasibility_tol {
                return Err(Error::InfeasibleInitialState {
                    index: i,
                    residual: *r,
                });
            }
        }

        let stages = self.config.horizon.min(remaining);
        let terminal = if stages < remaining && self.config.terminal_cost == TerminalCost::Critic
        {
            TerminalCost::Critic
        } else {
            TerminalCost::None
        };
        let k_total = match terminal {
            TerminalCost::Critic => stages + 1,
            TerminalCost::None => stages,
        };

        let rollout = self.actor_rollout(x, k_total)?;
        let problem = self.build_reduced_ocp(x, &rollout.discrete, terminal);

        let warm = Self::flatten(&rollout.continuous);
        let z0 = if self.config.use_warm_start {
            warm.clone()
        } else {
            problem.midpoint()
        };
        let (warm_objective, _) = (problem.objective)(&warm);

        let solved = nlp::solve(&problem, &z0, &self.config.solver)?;
        // the refinement never applies a plan worse than the rollout: when a
        // near-optimal warm start cannot be improved within solver tolerance,
        // the rollout itself is the plan
        let keep_warm = self.config.use_warm_start && solved.objective > warm_objective;
        let z_plan = if keep_warm { warm.clone() } else { solved.z.clone() };
        let objective = if keep_warm { warm_objective } else { solved.objective };
        let mut result = PlanResult {
            stages,
            terminal_used: terminal == TerminalCost::Critic,
            discrete: rollout.discrete.clone(),
            predicted_states: self.shoot_states(xp, &z_plan, &rollout.discrete, stages),
            optimized: z_plan,
            warm_start: warm,
            objective,
            warm_objective,
            status: solved.status,
            kkt_residual: solved.kkt_residual,
            violation: solved.violation,
            inner_iterations: solved.inner_iterations,
            fallback: false,
        };

        if result.status != SolveStatus::Optimal {
            if let Some(prev) = previous {
                let shrink = k_total < prev.discrete.len();
                if let Ok((discrete, z)) =
                    self.shift_fallback(prev, *rollout.discrete.last().unwrap(), shrink)
                {
                    if discrete.len() == k_total {
                        let (viol, obj) = self.evaluate_candidate(&problem, &z);
                        if viol <= self.config.solver.violation_tol {
                            result.discrete = discrete;
                            result.optimized = z.clone();
                            result.predicted_states =
                                self.shoot_states(xp, &z, &result.discrete, stages);
                            result.objective = obj;
                            result.violation = viol;
                            result.fallback = true;
                        }
                    }
                }
            }
        }
        Ok(result)
    }

    /// Solve the reduced OCP for an externally supplied discrete sequence
    /// (e.g. the enumeration benchmark's optimum) instead of the actor's.
    pub fn plan_with_sequence(
        &self,
        x: &[f64],
        discrete: &[usize],
        terminal: TerminalCost,
        warm: &[f64],
    ) -> Result<PlanResult> {
        let model = self.plan_model;
        let xp = project(x, model.state_dim);
        let stages = match terminal {
            TerminalCost::Critic => discrete.len() - 1,
            TerminalCost::None => discrete.len(),
        };
        let problem = self.build_reduced_ocp(x, discrete, terminal);
        let (warm_objective, _) = (problem.objective)(warm);
        let solved = nlp::solve(&problem, warm, &self.config.solver)?;
        Ok(PlanResult {
            stages,
            terminal_used: terminal == TerminalCost::Critic,
            discrete: discrete.to_vec(),
            warm_start: warm.to_vec(),
            optimized: solved.z.clone(),
            predicted_states: self.shoot_states(xp, &solved.z, discrete, stages),
            objective: solved.objective,
            warm_objective,
            status: solved.status,
            kkt_residual: solved.kkt_residual,
            violation: solved.violation,
            inner_iterations: solved.inner_iterations,
            fallback: false,
        })
    }

    fn evaluate_candidate(&self, problem: &NlpProblem, z: &[f64]) -> (f64, f64) {
        let (obj, _) = (problem.objective)(z);
        let viol = problem
            .constraints
            .as_ref()
            .map(|c| {
                let (g, _) = (c.eval)(z);
                g.iter().fold(0.0_f64, |m, &v| m.max(v.max(0.0)))
            })
            .unwrap_or(0.0);
        (viol, obj)
    }

    fn shoot_states(
        &self,
        x0: &[f64],
        z: &[f64],
        discrete: &[usize],
        stages: usize,
    ) -> Vec<Vec<f64>> {
        let model = self.plan_model;
        let n_c = model.n_continuous();
        let mut x = x0.to_vec();
        let mut out = Vec::with_capacity(stages);
        for k in 0..stages {
            let action = HybridAction::new(z[k * n_c..(k + 1) * n_c].to_vec(), discrete[k]);
            x = (model.dynamics)(&x, &action);
            out.push(x.clone());
        }
        out
    }

    /// Run the full closed loop in `env` from `x0`. The environment may be a
    /// different model than the planner (e.g. traffic present but not
    /// modeled); the applied action is always the MPC's first continuous
    /// input paired with the actor's first discrete input.
    pub fn closed_loop_run(&self, env: &MdpSpec, x0: &[f64]) -> Result<ClosedLoopLog> {
        let horizon = env.horizon;
        let mut log = ClosedLoopLog::default();
        let mut x = x0.to_vec();
        let mut previous: Option<PlanResult> = None;
        for lap in 0..horizon {
            let remaining = horizon - lap;
            let plan = self.plan_step(&x, remaining, previous.as_ref())?;
            let n_c = env.n_continuous();
            let action = HybridAction::new(plan.optimized[..n_c].to_vec(), plan.discrete[0]);
            debug_assert_eq!(action.discrete, plan.discrete[0]);
            let tr = crate::mdp::step(env, &x, &action)
                .map_err(|e| e.at_step("closed loop", lap))?;
            log.steps.push(ClosedLoopStep {
                lap,
                state: x.clone(),
                action: action.clone(),
                stage_cost: tr.cost,
                plan_objective: plan.objective,
                warm_objective: plan.warm_objective,
                status: plan.status,
                inner_iterations: plan.inner_iterations,
                violation: plan.violation,
                horizon: plan.stages,
                terminal_used: plan.terminal_used,
                fallback: plan.fallback,
            });
            log.total_cost += tr.cost;
            x = tr.next_state;
            previous = Some(plan);
        }
        log.final_state = x;
        Ok(log)
    }
}

/// Closed loop of the raw deterministic actor (no MPC refinement), applying
/// the projected policy action at every step.
pub fn actor_closed_loop(
    env: &MdpSpec,
    policy: &TrainedPolicy,
    x0: &[f64],
) -> Result<ClosedLoopLog> {
    let mut log = ClosedLoopLog::default();
    let mut x = x0.to_vec();
    for lap in 0..env.horizon {
        let xs = project(&x, policy.actor.net.input_dim);
        let raw = policy.actor.deterministic(xs)?;
        let action = match &env.action_projection {
            Some(p) => p(&x, raw),
            None => raw,
        };
        let tr =
            crate::mdp::step(env, &x, &action).map_err(|e| e.at_step("actor closed loop", lap))?;
        log.steps.push(ClosedLoopStep {
            lap,
            state: x.clone(),
            action,
            stage_cost: tr.cost,
            plan_objective: f64::NAN,
            warm_objective: f64::NAN,
            status: SolveStatus::Optimal,
            inner_iterations: 0,
            violation: 0.0,
            horizon: 0,
            terminal_used: false,
            fallback: false,
        });
        log.total_cost += tr.cost;
        x = tr.next_state;
    }
    log.final_state = x;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::f1::{self, RaceConfig};
    use crate::mdp::discounted_return;
    use crate::sac::{self, SacConfig};
    use std::sync::OnceLock;

    /// Small, fast policy for structure tests (quality does not matter here).
    fn quick_policy(spec: &MdpSpec) -> TrainedPolicy {
        static CACHE: OnceLock<TrainedPolicy> = OnceLock::new();
        CACHE
            .get_or_init(|| {
                let cfg = SacConfig {
                    episodes: 3,
                    warmup_steps: 40,
                    batch_size: 32,
                    actor_hidden: vec![16, 16],
                    critic_hidden: vec![16, 16],
                    ..SacConfig::default()
                };
                let x0 = f1::initial_state(&RaceConfig::desk(), false).to_vec();
                let (policy, _) = sac::train(spec, &x0, &cfg, 1).unwrap();
                policy.deployed(1e-6).unwrap()
            })
            .clone()
    }

    fn desk_models() -> (MdpSpec, ControllerConfig) {
        let cfg = Arc::new(RaceConfig::desk());
        let spec = f1::mdp_spec(cfg.clone(), false);
        let ctrl = ControllerConfig::new(6, vec![0.0, cfg.fuel_alloc_bounds_mj.0]);
        (spec, ctrl)
    }

    #[test]
    fn rollout_length_contract_and_replay() {
        let (spec, ctrl) = desk_models();
        let policy = Arc::new(quick_policy(&spec));
        let c = Controller::new(&spec, &spec, policy, ctrl);
        let x0 = f1::initial_state(&RaceConfig::desk(), false).to_vec();
        let r = c.actor_rollout(&x0, 2).unwrap();
        assert_eq!(r.discrete.len(), 2);
        assert_eq!(r.continuous.len(), 2);
        assert_eq!(r.states.len(), 2);
        // replaying the rollout actions through the model reproduces states
        let mut x = x0.clone();
        for k in 0..2 {
            let a = HybridAction::new(r.continuous[k].clone(), r.discrete[k]);
            let tr = crate::mdp::step(&spec, &x, &a).unwrap();
            assert_eq!(tr.next_state, r.states[k]);
            x = tr.next_state;
        }
    }

    #[test]
    fn warm_start_objective_decomposition() {
        // objective at the warm start = undiscounted rollout cost over the
        // stages + critic terminal value, recomputed independently
        let (spec, ctrl) = desk_models();
        let policy = Arc::new(quick_policy(&spec));
        let c = Controller::new(&spec, &spec, policy.clone(), ctrl);
        let x0 = f1::initial_state(&RaceConfig::desk(), false).to_vec();
        let stages = 4;
        let rollout = c.actor_rollout(&x0, stages + 1).unwrap();
        let problem = c.build_reduced_ocp(&x0, &rollout.discrete, TerminalCost::Critic);
        let z0 = Controller::flatten(&rollout.continuous);
        let (value, _) = (problem.objective)(&z0);

        // independent recomputation via rollout + discounted_return(1.0)
        let mut idx = 0usize;
        let traj = crate::mdp::rollout(
            &spec,
            |_: &[f64]| {
                let a = HybridAction::new(rollout.continuous[idx].clone(), rollout.discrete[idx]);
                idx += 1;
                a
            },
            &x0,
            stages,
        )
        .unwrap();
        let stage_sum = discounted_return(&traj, 1.0);
        let x_term = traj.final_state();
        let term = policy
            .terminal_cost(
                x_term,
                &rollout.continuous[stages],
                rollout.discrete[stages],
            )
            .unwrap();
        assert!(
            (value - (stage_sum + term)).abs() < 1e-9,
            "objective {value} vs stage sum {stage_sum} + terminal {term}"
        );

        // terminal-cost None drops the critic term
        let problem2 = c.build_reduced_ocp(&x0, &rollout.discrete[..stages], TerminalCost::None);
        let (value2, _) = (problem2.objective)(&z0[..stages * 2]);
        assert!((value2 - stage_sum).abs() < 1e-9);
    }

    #[test]
    fn ocp_gradient_passes_finite_difference_check() {
        let (spec, ctrl) = desk_models();
        let policy = Arc::new(quick_policy(&spec));
        let c = Controller::new(&spec, &spec, policy, ctrl);
        let x0 = f1::initial_state(&RaceConfig::desk(), false).to_vec();
        let rollout = c.actor_rollout(&x0, 5).unwrap();
        let problem = c.build_reduced_ocp(&x0, &rollout.discrete, TerminalCost::Critic);
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let z: Vec<f64> = problem
                .lower
                .iter()
                .zip(&problem.upper)
                .map(|(&lo, &hi)| {
                    let pad = 1e-4 * (hi - lo);
                    rng.random_range(lo + pad..hi - pad)
                })
                .collect();
            let err = nlp::finite_diff_check(&problem, &z, 1e-6);
            assert!(err <= 1e-5, "finite-difference error {err}");
        }
    }

    #[test]
    fn plan_step_descent_and_shrinking_structure() {
        let (spec, ctrl) = desk_models();
        let policy = Arc::new(quick_policy(&spec));
        let c = Controller::new(&spec, &spec, policy, ctrl);
        let x0 = f1::initial_state(&RaceConfig::desk(), false).to_vec();
        // receding phase: horizon 6 < remaining 20, critic terminal on
        let plan = c.plan_step(&x0, 20, None).unwrap();
        assert_eq!(plan.stages, 6);
        assert!(plan.terminal_used);
        assert_eq!(plan.discrete.len(), 7);
        assert_eq!(plan.optimized.len(), 14);
        assert!(
            plan.objective <= plan.warm_objective + 1e-9,
            "solver must not worsen the warm start: {} vs {}",
            plan.objective,
            plan.warm_objective
        );
        // shrinking phase: remaining 3 < horizon 6 -> 3 stages, no terminal
        let plan = c.plan_step(&x0, 3, None).unwrap();
        assert_eq!(plan.stages, 3);
        assert!(!plan.terminal_used);
        assert_eq!(plan.discrete.len(), 3);
        assert_eq!(plan.optimized.len(), 6);
    }

    #[test]
    fn infeasible_initial_state_is_hard_error() {
        let (spec, ctrl) = desk_models();
        let policy = Arc::new(quick_policy(&spec));
        let c = Controller::new(&spec, &spec, policy, ctrl);
        let mut x0 = f1::initial_state(&RaceConfig::desk(), false).to_vec();
        x0[f1::idx::FUEL] = 1.0; // not enough fuel to finish
        match c.plan_step(&x0, 20, None) {
            Err(Error::InfeasibleInitialState { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected infeasibility error, got {other:?}"),
        }
    }

    #[test]
    fn shift_fallback_preserves_length_and_feasibility() {
        let (spec, ctrl) = desk_models();
        let policy = Arc::new(quick_policy(&spec));
        let c = Controller::new(&spec, &spec, policy, ctrl);
        let x0 = f1::initial_state(&RaceConfig::desk(), false).to_vec();
        let plan = c.plan_step(&x0, 20, None).unwrap();
        assert_eq!(plan.status, SolveStatus::Optimal);

        // advance the environment by the applied action
        let n_c = spec.n_continuous();
        let applied = HybridAction::new(plan.optimized[..n_c].to_vec(), plan.discrete[0]);
        let tr = crate::mdp::step(&spec, &x0, &applied).unwrap();

        let (discrete, z) = c
            .shift_fallback(&plan, *plan.discrete.last().unwrap(), false)
            .unwrap();
        assert_eq!(discrete.len(), plan.discrete.len());
        assert_eq!(z.len(), plan.optimized.len());
        // the shifted plan is feasible for the advanced state
        let problem = c.build_reduced_ocp(&tr.next_state, &discrete, TerminalCost::Critic);
        let (viol, obj) = c.evaluate_candidate(&problem, &z);
        assert!(viol <= 1e-6, "shifted plan violation {viol}");
        // and solving from it only improves
        let solved = nlp::solve(&problem, &z, &c.config.solver).unwrap();
        assert!(solved.objective <= obj + 1e-9);
    }

    #[test]
    fn no_previous_plan_fallback_errors() {
        let (spec, ctrl) = desk_models();
        let policy = Arc::new(quick_policy(&spec));
        let c = Controller::new(&spec, &spec, policy, ctrl);
        let empty = PlanResult {
            stages: 0,
            terminal_used: false,
            discrete: vec![],
            warm_start: vec![],
            optimized: vec![],
            predicted_states: vec![],
            objective: 0.0,
            warm_objective: 0.0,
            status: SolveStatus::Optimal,
            kkt_residual: 0.0,
            violation: 0.0,
            inner_iterations: 0,
            fallback: false,
        };
        assert!(matches!(
            c.shift_fallback(&empty, 0, false),
            Err(Error::NoPreviousPlan)
        ));
    }

    #[test]
    fn closed_loop_replay_and_feasibility() {
        let (spec, mut ctrl) = desk_models();
        ctrl.horizon = 5;
        let policy = Arc::new(quick_policy(&spec));
        let c = Controller::new(&spec, &spec, policy, ctrl);
        let x0 = f1::initial_state(&RaceConfig::desk(), false).to_vec();
        let log = c.closed_loop_run(&spec, &x0).unwrap();
        assert_eq!(log.steps.len(), 20);
        // replay the applied actions through the dynamics
        let mut x = x0.clone();
        let mut total = 0.0;
        for step in &log.steps {
            assert_eq!(step.state, x);
            let tr = crate::mdp::step(&spec, &x, &step.action).unwrap();
            total += tr.cost;
            x = tr.next_state;
        }
        assert_eq!(x, log.final_state);
        assert!((total - log.total_cost).abs() < 1e-9);
        // every visited state satisfies the constraints
        for step in &log.steps {
            for r in (spec.state_constraints)(&step.state) {
                assert!(r <= 1e-6, "state constraint violated: {r}");
            }
        }
        // shrinking-horizon tail: last 5 plans have horizon = remaining, no
        // terminal term
        for step in &log.steps {
            let remaining = 20 - step.lap;
            if remaining <= 5 {
                assert_eq!(step.horizon, remaining);
                assert!(!step.terminal_used);
            } else {
                assert_eq!(step.horizon, 5);
                assert!(step.terminal_used);
            }
        }
        // warm-start descent at every solved step
        for step in &log.steps {
            if !step.fallback {
                assert!(step.plan_objective <= step.warm_objective + 1e-9);
            }
        }
    }
}
