//! Hybrid Markov decision process: a continuous input box crossed with a
//! finite discrete set, deterministic dynamics and stage cost, plus rollout
//! machinery and an exact dynamic-programming oracle on gridded instances.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math::Mat;

/// Joint action of the hybrid MDP: one continuous vector and one discrete
/// label indexing the finite set.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridAction {
    pub continuous: Vec<f64>,
    pub discrete: usize,
}

impl HybridAction {
    pub fn new(continuous: Vec<f64>, discrete: usize) -> Self {
        HybridAction { continuous, discrete }
    }
}

pub type DynamicsFn = Arc<dyn Fn(&[f64], &HybridAction) -> Vec<f64> + Send + Sync>;
pub type StageCostFn = Arc<dyn Fn(&[f64], &HybridAction) -> f64 + Send + Sync>;
pub type ConstraintFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type ProjectionFn = Arc<dyn Fn(&[f64], HybridAction) -> HybridAction + Send + Sync>;

/// Analytic derivatives of the model, used by the shooting transcription.
#[derive(Clone)]
pub struct SmoothModel {
    /// (df/dx, df/du_c) at (x, u); the discrete component is held fixed.
    pub dynamics_jacobians: Arc<dyn Fn(&[f64], &HybridAction) -> (Mat, Mat) + Send + Sync>,
    /// (dl/dx, dl/du_c) at (x, u).
    pub cost_gradients: Arc<dyn Fn(&[f64], &HybridAction) -> (Vec<f64>, Vec<f64>) + Send + Sync>,
    /// d(state_constraints)/dx, one row per residual.
    pub constraint_jacobian: Arc<dyn Fn(&[f64]) -> Mat + Send + Sync>,
}

/// Deterministic hybrid MDP description.
///
/// Dynamics and stage cost are pure functions of their arguments; state
/// constraints are residual callbacks, feasible iff every entry is <= 0.
#[derive(Clone)]
pub struct MdpSpec {
    pub state_dim: usize,
    /// Per-dimension [lo, hi] box for the continuous input.
    pub continuous_bounds: Vec<(f64, f64)>,
    /// Size of the discrete action set.
    pub discrete_count: usize,
    pub discount: f64,
    /// Episode length for finite tasks (laps in the race instance).
    pub horizon: usize,
    pub dynamics: DynamicsFn,
    pub stage_cost: StageCostFn,
    pub state_constraints: ConstraintFn,
    pub constraint_dim: usize,
    /// True when the constraint residuals are affine in the stacked inputs
    /// under single shooting; lets the solver cache the Jacobian.
    pub affine_constraints: bool,
    /// Per-dimension state ranges used for network input normalization.
    pub state_bounds: Vec<(f64, f64)>,
    pub smooth: Option<SmoothModel>,
    /// Optional per-state projection of actions into the feasible set
    /// (exists whenever the continuous input can always restore feasibility).
    pub action_projection: Option<ProjectionFn>,
}

impl MdpSpec {
    pub fn n_continuous(&self) -> usize {
        self.continuous_bounds.len()
    }

    pub fn validate_action(&self, action: &HybridAction) -> Result<()> {
        if action.continuous.len() != self.continuous_bounds.len() {
            return Err(Error::DimensionMismatch {
                expected: self.continuous_bounds.len(),
                got: action.continuous.len(),
                context: "continuous action".into(),
            });
        }
        for (i, (&v, &(lo, hi))) in action
            .continuous
            .iter()
            .zip(&self.continuous_bounds)
            .enumerate()
        {
            if !(v >= lo && v <= hi) {
                return Err(Error::ActionOutOfBounds {
                    index: i,
                    value: v,
                    lo,
                    hi,
                });
            }
        }
        if action.discrete >= self.discrete_count {
            return Err(Error::DiscreteOutOfRange {
                label: action.discrete,
                count: self.discrete_count,
            });
        }
        Ok(())
    }

    /// Midpoint of the continuous box, the cold-start reference input.
    pub fn midpoint_action(&self, discrete: usize) -> HybridAction {
        HybridAction::new(
            self.continuous_bounds
                .iter()
                .map(|&(lo, hi)| 0.5 * (lo + hi))
                .collect(),
            discrete,
        )
    }
}

/// One step of the MDP: (x, u, f(x,u), l(x,u)).
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: HybridAction,
    pub next_state: Vec<f64>,
    pub cost: f64,
}

/// Chained list of transitions starting at `initial`.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub initial: Vec<f64>,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.transitions
            .last()
            .map(|t| t.next_state.as_slice())
            .unwrap_or(&self.initial)
    }

    pub fn costs(&self) -> impl Iterator<Item = f64> + '_ {
        self.transitions.iter().map(|t| t.cost)
    }

    /// Chaining invariant: transition k's next state is transition k+1's state.
    pub fn is_chained(&self) -> bool {
        if let Some(first) = self.transitions.first() {
            if first.state != self.initial {
                return false;
            }
        }
        self.transitions
            .windows(2)
            .all(|w| w[0].next_state == w[1].state)
    }
}

/// Apply one action, validating bounds, and return the resulting transition.
pub fn step(spec: &MdpSpec, state: &[f64], action: &HybridAction) -> Result<Transition> {
    spec.validate_action(action)?;
    let next_state = (spec.dynamics)(state, action);
    let cost = (spec.stage_cost)(state, action);
    Ok(Transition {
        state: state.to_vec(),
        action: action.clone(),
        next_state,
        cost,
    })
}

/// Roll a deterministic policy forward for `n_steps` transitions.
pub fn rollout<P>(spec: &MdpSpec, mut policy: P, x0: &[f64], n_steps: usize) -> Result<Trajectory>
where
    P: FnMut(&[f64]) -> HybridAction,
{
    assert!(n_steps >= 1, "rollout needs at least one step");
    let mut traj = Trajectory {
        initial: x0.to_vec(),
        transitions: Vec::with_capacity(n_steps),
    };
    let mut x = x0.to_vec();
    for k in 0..n_steps {
        let action = policy(&x);
        let tr = step(spec, &x, &action).map_err(|e| e.at_step("rollout", k))?;
        x = tr.next_state.clone();
        traj.transitions.push(tr);
    }
    debug_assert!(traj.is_chained());
    Ok(traj)
}

/// Sum of gamma^k * cost_k over the trajectory.
pub fn discounted_return(traj: &Trajectory, discount: f64) -> f64 {
    assert!(discount > 0.0 && discount <= 1.0);
    let mut acc = 0.0;
    let mut g = 1.0;
    for c in traj.costs() {
        acc += g * c;
        g *= discount;
    }
    acc
}

/// Rectangular grid over the state (or action) space: one sorted axis per
/// dimension, points enumerated row-major.
#[derive(Debug, Clone)]
pub struct Grid {
    pub axes: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(axes: Vec<Vec<f64>>) -> Self {
        assert!(!axes.is_empty() && axes.iter().all(|a| !a.is_empty()));
        Grid { axes }
    }

    pub fn uniform(ranges: &[(f64, f64)], points_per_dim: usize) -> Self {
        assert!(points_per_dim >= 1);
        let axes = ranges
            .iter()
            .map(|&(lo, hi)| {
                if points_per_dim == 1 {
                    vec![0.5 * (lo + hi)]
                } else {
                    (0..points_per_dim)
                        .map(|i| lo + (hi - lo) * i as f64 / (points_per_dim - 1) as f64)
                        .collect()
                }
            })
            .collect();
        Grid::new(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Decode a flat row-major index into grid coordinates.
    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        let mut coords = vec![0.0; self.dim()];
        for d in (0..self.dim()).rev() {
            let n = self.axes[d].len();
            coords[d] = self.axes[d][idx % n];
            idx /= n;
        }
        coords
    }

    /// Multilinear interpolation of `values` at `x`, clamping each coordinate
    /// into the grid box (off-grid queries map to the nearest face).
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        assert_eq!(values.len(), self.len());
        assert_eq!(x.len(), self.dim());
        // per-dim cell index and fractional coordinate
        let mut cell = Vec::with_capacity(self.dim());
        for (axis, &xi) in self.axes.iter().zip(x) {
            let n = axis.len();
            if n == 1 {
                cell.push((0usize, 0.0f64, 1usize));
                continue;
            }
            let xi = xi.clamp(axis[0], axis[n - 1]);
            let j = match axis.binary_search_by(|v| v.partial_cmp(&xi).unwrap()) {
                Ok(j) => j.min(n - 2),
                Err(j) => j.saturating_sub(1).min(n - 2),
            };
            let w = (xi - axis[j]) / (axis[j + 1] - axis[j]);
            cell.push((j, w, n));
        }
        // accumulate over the 2^d corners
        let d = self.dim();
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut idx = 0usize;
            for (dim, &(j, w, n)) in cell.iter().enumerate() {
                let hi = (corner >> dim) & 1 == 1;
                let (jj, ww) = if n == 1 {
                    (0, if hi { 0.0 } else { 1.0 })
                } else if hi {
                    (j + 1, w)
                } else {
                    (j, 1.0 - w)
                };
                weight *= ww;
                idx = idx * n + jj;
            }
            if weight != 0.0 {
                acc += weight * values[idx];
            }
        }
        acc
    }
}

/// Candidate hybrid actions: product of a continuous grid with every
/// discrete label, in deterministic order.
pub fn action_candidates(action_grid: &Grid, discrete_count: usize) -> Vec<HybridAction> {
    let mut out = Vec::with_capacity(action_grid.len() * discrete_count);
    for d in 0..discrete_count {
        for i in 0..action_grid.len() {
            out.push(HybridAction::new(action_grid.point(i), d));
        }
    }
    out
}

/// Stationary value table from discounted value iteration.
#[derive(Debug, Clone)]
pub struct DpSolution {
    pub state_grid: Grid,
    pub values: Vec<f64>,
    pub greedy: Vec<HybridAction>,
    pub residual: f64,
    pub sweeps: usize,
}

impl DpSolution {
    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.state_grid.interpolate(&self.values, x)
    }
}

/// Exact backward recursion over a finite horizon: values[t] is the
/// cost-to-go table with t steps already elapsed (values[horizon] = 0).
#[derive(Debug, Clone)]
pub struct FiniteDpSolution {
    pub state_grid: Grid,
    pub values: Vec<Vec<f64>>,
    pub greedy: Vec<Vec<HybridAction>>,
}

impl FiniteDpSolution {
    pub fn value_at(&self, t: usize, x: &[f64]) -> f64 {
        self.state_grid.interpolate(&self.values[t], x)
    }

    /// Greedy action at an arbitrary (off-grid) state, re-minimizing the
    /// Bellman right-hand side over the candidate set.
    pub fn greedy_at(
        &self,
        spec: &MdpSpec,
        candidates: &[HybridAction],
        t: usize,
        x: &[f64],
    ) -> HybridAction {
        let mut best = candidates[0].clone();
        let mut best_q = f64::INFINITY;
        for a in candidates {
            let nx = (spec.dynamics)(x, a);
            let q = (spec.stage_cost)(x, a)
                + spec.discount * self.state_grid.interpolate(&self.values[t + 1], &nx);
            if q < best_q {
                best_q = q;
                best = a.clone();
            }
        }
        best
    }
}

fn bellman_backup(
    spec: &MdpSpec,
    state_grid: &Grid,
    candidates: &[HybridAction],
    next_values: &[f64],
) -> (Vec<f64>, Vec<HybridAction>) {
    let n = state_grid.len();
    let mut values = vec![0.0; n];
    let mut greedy = Vec::with_capacity(n);
    for s in 0..n {
        let x = state_grid.point(s);
        let mut best_q = f64::INFINITY;
        let mut best_a = candidates[0].clone();
        for a in candidates {
            let nx = (spec.dynamics)(&x, a);
            let q = (spec.stage_cost)(&x, a)
                + spec.discount * state_grid.interpolate(next_values, &nx);
            if q < best_q {
                best_q = q;
                best_a = a.clone();
            }
        }
        values[s] = best_q;
        greedy.push(best_a);
    }
    (values, greedy)
}

/// Discounted value iteration on a gridded instance; requires discount < 1.
///
/// Off-grid next states are mapped by clamped multilinear interpolation of
/// the value table. Errors with the last residual when the sweep cap is hit.
pub fn value_iteration(
    spec: &MdpSpec,
    state_grid: &Grid,
    action_grid: &Grid,
    tol: f64,
    max_sweeps: usize,
) -> Result<DpSolution> {
    assert!(spec.discount < 1.0, "discounted mode needs gamma < 1");
    let candidates = action_candidates(action_grid, spec.discrete_count);
    let mut values = vec![0.0; state_grid.len()];
    let mut residual = f64::INFINITY;
    for sweep in 1..=max_sweeps {
        let (new_values, new_greedy) = bellman_backup(spec, state_grid, &candidates, &values);
        residual = values
            .iter()
            .zip(&new_values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        values = new_values;
        if residual <= tol {
            return Ok(DpSolution {
                state_grid: state_grid.clone(),
                values,
                greedy: new_greedy,
                residual,
                sweeps: sweep,
            });
        }
    }
    Err(Error::NoConvergence {
        residual,
        tol,
        iterations: max_sweeps,
    })
}

/// Exact finite-horizon backward DP over the step index.
pub fn finite_horizon_dp(
    spec: &MdpSpec,
    state_grid: &Grid,
    action_grid: &Grid,
    horizon: usize,
) -> FiniteDpSolution {
    assert!(horizon >= 1);
    let candidates = action_candidates(action_grid, spec.discrete_count);
    let n = state_grid.len();
    let mut values = vec![vec![0.0; n]; horizon + 1];
    let mut greedy: Vec<Vec<HybridAction>> = vec![Vec::new(); horizon];
    for t in (0..horizon).rev() {
        let (v, g) = bellman_backup(spec, state_grid, &candidates, &values[t + 1]);
        values[t] = v;
        greedy[t] = g;
    }
    FiniteDpSolution {
        state_grid: state_grid.clone(),
        values,
        greedy,
    }
}

/// Max Bellman residual of a value table over the grid (oracle self-check).
pub fn bellman_residual(
    spec: &MdpSpec,
    state_grid: &Grid,
    action_grid: &Grid,
    values: &[f64],
) -> f64 {
    let candidates = action_candidates(action_grid, spec.discrete_count);
    let (backed_up, _) = bellman_backup(spec, state_grid, &candidates, values);
    values
        .iter()
        .zip(&backed_up)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1-d integrator with |x| stage cost; u_d scales the input authority.
    fn integrator_spec() -> MdpSpec {
        MdpSpec {
            state_dim: 1,
            continuous_bounds: vec![(-1.0, 1.0)],
            discrete_count: 2,
            discount: 0.9,
            horizon: 10,
            dynamics: Arc::new(|x, a| {
                let gain = if a.discrete == 0 { 1.0 } else { 0.5 };
                vec![x[0] + gain * a.continuous[0]]
            }),
            stage_cost: Arc::new(|x, _| x[0].abs()),
            state_constraints: Arc::new(|_| vec![]),
            constraint_dim: 0,
            affine_constraints: true,
            state_bounds: vec![(-5.0, 5.0)],
            smooth: None,
            action_projection: None,
        }
    }

    #[test]
    fn step_direct_substitution() {
        let spec = integrator_spec();
        let tr = step(&spec, &[1.0], &HybridAction::new(vec![-1.0], 0)).unwrap();
        assert_eq!(tr.next_state, vec![0.0]);
        assert_eq!(tr.cost, 1.0);
    }

    #[test]
    fn step_reports_offending_dimension() {
        let spec = integrator_spec();
        let err = step(&spec, &[0.0], &HybridAction::new(vec![2.0], 0)).unwrap_err();
        match err {
            Error::ActionOutOfBounds { index, value, .. } => {
                assert_eq!(index, 0);
                assert_eq!(value, 2.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
        let err = step(&spec, &[0.0], &HybridAction::new(vec![0.0], 5)).unwrap_err();
        assert!(matches!(err, Error::DiscreteOutOfRange { label: 5, .. }));
    }

    /// Independently coded straight-line simulator for the same dynamics,
    /// written without going through `step`.
    fn duplicate_sim(x0: f64, actions: &[(f64, usize)]) -> (f64, f64) {
        let mut x = x0;
        let mut total = 0.0;
        for &(u, d) in actions {
            total += x.abs();
            x += if d == 0 { u } else { 0.5 * u };
        }
        (x, total)
    }

    #[test]
    fn step_matches_duplicate_simulator() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let spec = integrator_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let actions: Vec<(f64, usize)> = (0..20)
            .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(0..2usize)))
            .collect();
        let (expect_x, expect_cost) = duplicate_sim(0.3, &actions);
        let mut x = vec![0.3];
        let mut total = 0.0;
        for (u, d) in &actions {
            let tr = step(&spec, &x, &HybridAction::new(vec![*u], *d)).unwrap();
            total += tr.cost;
            x = tr.next_state;
        }
        assert!((x[0] - expect_x).abs() < 1e-12);
        assert!((total - expect_cost).abs() < 1e-12);
    }

    #[test]
    fn rollout_contracts() {
        let spec = integrator_spec();
        let policy = |_: &[f64]| HybridAction::new(vec![0.25], 0);
        let t1 = rollout(&spec, policy, &[0.0], 5).unwrap();
        assert_eq!(t1.len(), 5);
        assert!(t1.is_chained());
        let t2 = rollout(&spec, policy, &[0.0], 5).unwrap();
        for (a, b) in t1.transitions.iter().zip(&t2.transitions) {
            assert_eq!(a.next_state, b.next_state);
            assert_eq!(a.cost, b.cost);
        }
        // replaying the recorded actions step by step reproduces the cost sum
        let mut x = t1.initial.clone();
        let mut total = 0.0;
        for tr in &t1.transitions {
            let re = step(&spec, &x, &tr.action).unwrap();
            total += re.cost;
            x = re.next_state;
        }
        let direct: f64 = t1.costs().sum();
        assert!((total - direct).abs() < 1e-15);
    }

    #[test]
    fn rollout_error_carries_step_index() {
        let spec = integrator_spec();
        let policy = |x: &[f64]| {
            // goes out of bounds on the third step
            if x[0] > 0.4 {
                HybridAction::new(vec![3.0], 0)
            } else {
                HybridAction::new(vec![0.25], 0)
            }
        };
        let err = rollout(&spec, policy, &[0.0], 5).unwrap_err();
        match err {
            Error::AtStep { op, step, .. } => {
                assert_eq!(op, "rollout");
                assert_eq!(step, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn discounted_return_cases() {
        let mk = |costs: &[f64]| Trajectory {
            initial: vec![0.0],
            transitions: costs
                .iter()
                .map(|&c| Transition {
                    state: vec![0.0],
                    action: HybridAction::new(vec![0.0], 0),
                    next_state: vec![0.0],
                    cost: c,
                })
                .collect(),
        };
        assert!((discounted_return(&mk(&[1.0, 1.0, 1.0]), 0.5) - 1.75).abs() < 1e-15);
        assert!((discounted_return(&mk(&[1.0, 2.0, 3.0]), 1.0) - 6.0).abs() < 1e-15);
        assert!((discounted_return(&mk(&[4.2]), 0.3) - 4.2).abs() < 1e-15);
    }

    fn single_state_spec(cost: f64) -> MdpSpec {
        MdpSpec {
            state_dim: 1,
            continuous_bounds: vec![(0.0, 0.0)],
            discrete_count: 1,
            discount: 0.5,
            horizon: 1,
            dynamics: Arc::new(|x, _| x.to_vec()),
            stage_cost: Arc::new(move |_, _| cost),
            state_constraints: Arc::new(|_| vec![]),
            constraint_dim: 0,
            affine_constraints: true,
            state_bounds: vec![(0.0, 1.0)],
            smooth: None,
            action_projection: None,
        }
    }

    #[test]
    fn value_iteration_geometric_series() {
        let spec = single_state_spec(1.0);
        let grid = Grid::new(vec![vec![0.0]]);
        let agrid = Grid::new(vec![vec![0.0]]);
        let sol = value_iteration(&spec, &grid, &agrid, 1e-10, 10_000).unwrap();
        // J* = 1 / (1 - 0.5) = 2
        assert!((sol.values[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn value_iteration_absorbing_zero_cost() {
        let spec = single_state_spec(0.0);
        let grid = Grid::new(vec![vec![0.0]]);
        let agrid = Grid::new(vec![vec![0.0]]);
        let sol = value_iteration(&spec, &grid, &agrid, 1e-12, 100).unwrap();
        assert_eq!(sol.values[0], 0.0);
    }

    #[test]
    fn value_iteration_nonconvergence_reports_residual() {
        let spec = single_state_spec(1.0);
        let grid = Grid::new(vec![vec![0.0]]);
        let agrid = Grid::new(vec![vec![0.0]]);
        let err = value_iteration(&spec, &grid, &agrid, 1e-12, 3).unwrap_err();
        match err {
            Error::NoConvergence { residual, iterations, .. } => {
                assert!(residual > 0.0);
                assert_eq!(iterations, 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    /// Two-state chain, two discrete actions (stay cheap / jump expensive).
    /// The state lives exactly on grid points so interpolation is exact and
    /// the table can be cross-checked against a hand-unrolled recursion.
    fn chain_spec() -> MdpSpec {
        MdpSpec {
            state_dim: 1,
            continuous_bounds: vec![(0.0, 0.0)],
            discrete_count: 2,
            discount: 0.9,
            horizon: 50,
            dynamics: Arc::new(|x, a| {
                // action 0 stays, action 1 toggles between 0 and 1
                if a.discrete == 0 {
                    x.to_vec()
                } else {
                    vec![1.0 - x[0]]
                }
            }),
            stage_cost: Arc::new(|x, a| {
                let base = if x[0] < 0.5 { 1.0 } else { 0.2 };
                base + if a.discrete == 1 { 0.5 } else { 0.0 }
            }),
            state_constraints: Arc::new(|_| vec![]),
            constraint_dim: 0,
            affine_constraints: true,
            state_bounds: vec![(0.0, 1.0)],
            smooth: None,
            action_projection: None,
        }
    }

    /// Brute-force oracle: hand-unrolled Bellman recursion over the two
    /// chain states (no grids, no interpolation, no shared code path).
    fn brute_force_value(spec: &MdpSpec, x: f64, depth: usize) -> f64 {
        let mut v = [0.0_f64, 0.0_f64];
        for _ in 0..depth {
            let mut nv = [0.0_f64; 2];
            for (i, &xi) in [0.0, 1.0].iter().enumerate() {
                let mut best = f64::INFINITY;
                for d in 0..2usize {
                    let a = HybridAction::new(vec![0.0], d);
                    let nx = (spec.dynamics)(&[xi], &a);
                    let j = usize::from(nx[0] >= 0.5);
                    let q = (spec.stage_cost)(&[xi], &a) + spec.discount * v[j];
                    best = best.min(q);
                }
                nv[i] = best;
            }
            v = nv;
        }
        v[usize::from(x >= 0.5)]
    }

    #[test]
    fn value_iteration_matches_brute_force_recursion() {
        let spec = chain_spec();
        let grid = Grid::new(vec![vec![0.0, 1.0]]);
        let agrid = Grid::new(vec![vec![0.0]]);
        let sol = value_iteration(&spec, &grid, &agrid, 1e-10, 10_000).unwrap();
        // 50 levels: gamma^50 ~ 5e-3, so the truncation error is ~5e-3 * J
        for (i, &x) in [0.0, 1.0].iter().enumerate() {
            let brute = brute_force_value(&spec, x, 50);
            assert!(
                (sol.values[i] - brute).abs() < 0.9_f64.powi(50) / (1.0 - 0.9) * 1.5 + 1e-9,
                "state {x}: table {} vs brute {brute}",
                sol.values[i]
            );
        }
        // Bellman self-consistency on the grid
        let res = bellman_residual(&spec, &grid, &agrid, &sol.values);
        assert!(res <= 1e-9, "bellman residual {res}");
    }

    #[test]
    fn finite_horizon_dp_matches_manual_unroll() {
        let spec = chain_spec();
        let grid = Grid::new(vec![vec![0.0, 1.0]]);
        let agrid = Grid::new(vec![vec![0.0]]);
        let sol = finite_horizon_dp(&spec, &grid, &agrid, 50);
        for (i, &x) in [0.0, 1.0].iter().enumerate() {
            let brute = brute_force_value(&spec, x, 50);
            assert!(
                (sol.values[0][i] - brute).abs() < 1e-12,
                "exact backward DP must equal the brute recursion"
            );
        }
    }

    #[test]
    fn interpolation_multilinear_2d() {
        let grid = Grid::new(vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        // f(x, y) = 1 + 2x + 3y + xy at corners
        let f = |x: f64, y: f64| 1.0 + 2.0 * x + 3.0 * y + x * y;
        let values = vec![f(0.0, 0.0), f(0.0, 1.0), f(1.0, 0.0), f(1.0, 1.0)];
        for &(x, y) in &[(0.25, 0.75), (0.5, 0.5), (0.0, 1.0), (0.9, 0.1)] {
            assert!((grid.interpolate(&values, &[x, y]) - f(x, y)).abs() < 1e-12);
        }
        // clamped outside the box
        assert!((grid.interpolate(&values, &[-1.0, 0.5]) - f(0.0, 0.5)).abs() < 1e-12);
    }
}
