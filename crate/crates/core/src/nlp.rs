//! Deterministic solver for smooth nonlinear programs with box bounds and
//! general inequality constraints (feasible iff g(z) <= 0).
//!
//! Outer loop: augmented Lagrangian (PHR form) over the inequality
//! multipliers. Inner loop: projected gradient on the box with a spectral
//! step and Armijo backtracking. The problems produced by the shooting
//! transcription have constraints affine in the inputs, which the `affine`
//! flag exploits by caching the Jacobian.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math::{all_finite, axpy, dot, inf_norm, Mat};

pub type ObjectiveFn = Arc<dyn Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync>;
pub type ObjectiveValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type ConstraintEvalFn = Arc<dyn Fn(&[f64]) -> (Vec<f64>, Mat) + Send + Sync>;

/// Inequality block g(z) <= 0 with Jacobian.
#[derive(Clone)]
pub struct ConstraintBlock {
    pub count: usize,
    pub eval: ConstraintEvalFn,
    /// Constraints affine in z: residuals linearize exactly, Jacobian is
    /// evaluated once per solve.
    pub affine: bool,
}

#[derive(Clone)]
pub struct NlpProblem {
    pub dim: usize,
    pub objective: ObjectiveFn,
    /// Optional cheaper value-only evaluation (no gradient work), used by
    /// line searches. Must agree with `objective`'s value exactly.
    pub objective_value: Option<ObjectiveValueFn>,
    pub constraints: Option<ConstraintBlock>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl NlpProblem {
    pub fn constraint_count(&self) -> usize {
        self.constraints.as_ref().map(|c| c.count).unwrap_or(0)
    }

    pub fn project(&self, z: &mut [f64]) {
        for ((v, &lo), &hi) in z.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| 0.5 * (lo + hi))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// KKT residual target (dimensionless after scaling).
    pub tol: f64,
    pub violation_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    pub armijo_c: f64,
    pub armijo_shrink: f64,
    pub max_backtracks: usize,
    /// Multiplier estimates from a previous solve of the same problem.
    pub warm_multipliers: Option<Vec<f64>>,
    pub warm_penalty: Option<f64>,
    /// When set, an iteration trace (outer, inner, merit, stationarity,
    /// violation) is collected into `SolveResult::trace`.
    pub collect_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-6,
            violation_tol: 1e-6,
            max_outer: 40,
            max_inner: 400,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e8,
            armijo_c: 1e-4,
            armijo_shrink: 0.5,
            max_backtracks: 40,
            warm_multipliers: None,
            warm_penalty: None,
            collect_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    LineSearchFail,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub outer: usize,
    pub inner: usize,
    pub merit: f64,
    pub stationarity: f64,
    pub violation: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub z: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub violation: f64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub multipliers: Vec<f64>,
    pub penalty: f64,
    pub trace: Vec<TraceRow>,
}

struct ConstraintCache {
    affine: bool,
    base_z: Vec<f64>,
    base_g: Vec<f64>,
    jac: Mat,
}

impl ConstraintCache {
    fn new(block: &ConstraintBlock, z: &[f64]) -> Self {
        let (g, jac) = (block.eval)(z);
        ConstraintCache {
            affine: block.affine,
            base_z: z.to_vec(),
            base_g: g,
            jac,
        }
    }

    fn residuals(&self, block: &ConstraintBlock, z: &[f64]) -> (Vec<f64>, &Mat) {
        if self.affine {
            // g(z) = g(z0) + J (z - z0), exact for affine constraints
            let mut g = self.base_g.clone();
            let mut dz = vec![0.0; z.len()];
            for (d, (a, b)) in dz.iter_mut().zip(z.iter().zip(&self.base_z)) {
                *d = a - b;
            }
            let jdz = self.jac.matvec(&dz);
            for (gi, ji) in g.iter_mut().zip(&jdz) {
                *gi += ji;
            }
            (g, &self.jac)
        } else {
            let (g, _) = (block.eval)(z);
            (g, &self.jac)
        }
    }

    fn refresh(&mut self, block: &ConstraintBlock, z: &[f64]) {
        if !self.affine {
            let (g, jac) = (block.eval)(z);
            self.base_z = z.to_vec();
            self.base_g = g;
            self.jac = jac;
        }
    }
}

/// Infinity norm of the positive part of g.
fn violation_norm(g: &[f64]) -> f64 {
    g.iter().fold(0.0_f64, |m, &x| m.max(x.max(0.0)))
}

/// KKT residual at (z, multipliers): infinity norm over projected-gradient
/// stationarity, complementarity |lambda_i g_i| and primal violation. The
/// stationarity and complementarity parts are made dimensionless by the
/// multiplier scale s_d = 1 + ||lambda||_1, so the residual of a problem
/// with zero multipliers is exactly the projected gradient.
pub fn kkt_residual(problem: &NlpProblem, z: &[f64], multipliers: &[f64]) -> Result<f64> {
    if multipliers.len() != problem.constraint_count() {
        return Err(Error::DimensionMismatch {
            expected: problem.constraint_count(),
            got: multipliers.len(),
            context: "multipliers".into(),
        });
    }
    let (_, mut lag_grad) = (problem.objective)(z);
    let mut comp = 0.0_f64;
    let mut viol = 0.0_f64;
    if let Some(block) = &problem.constraints {
        let (g, jac) = (block.eval)(z);
        let jt_lambda = jac.tr_matvec(multipliers);
        for (lg, jl) in lag_grad.iter_mut().zip(&jt_lambda) {
            *lg += jl;
        }
        for (&l, &gi) in multipliers.iter().zip(&g) {
            comp = comp.max((l * gi).abs());
            viol = viol.max(gi.max(0.0));
        }
    }
    let mut projected = z.to_vec();
    for (p, lg) in projected.iter_mut().zip(&lag_grad) {
        *p -= lg;
    }
    problem.project(&mut projected);
    let stationarity = projected
        .iter()
        .zip(z)
        .fold(0.0_f64, |m, (p, zi)| m.max((p - zi).abs()));
    let s_d = 1.0 + multipliers.iter().map(|l| l.abs()).sum::<f64>();
    Ok((stationarity / s_d).max(comp / s_d).max(viol))
}

/// Max relative error of the objective gradient against central differences.
/// The iterate should sit at least `h` inside the box per coordinate.
pub fn finite_diff_check(problem: &NlpProblem, z: &[f64], h: f64) -> f64 {
    let (_, grad) = (problem.objective)(z);
    let mut worst = 0.0_f64;
    for i in 0..problem.dim {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[i] += h;
        zm[i] -= h;
        let (fp, _) = (problem.objective)(&zp);
        let (fm, _) = (problem.objective)(&zm);
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1.0);
        worst = worst.max((fd - grad[i]).abs() / denom);
    }
    worst
}

/// Augmented-Lagrangian value only (cheap path for line searches).
fn merit_value(
    problem: &NlpProblem,
    cache: &ConstraintCache,
    z: &[f64],
    lambda: &[f64],
    rho: f64,
) -> Result<(f64, f64)> {
    let f = match &problem.objective_value {
        Some(v) => v(z),
        None => (problem.objective)(z).0,
    };
    if !f.is_finite() {
        return Err(Error::Evaluation { iterate: z.to_vec() });
    }
    let mut merit = f;
    let mut viol = 0.0;
    if let Some(block) = &problem.constraints {
        let (g, _) = cache.residuals(block, z);
        viol = violation_norm(&g);
        for (&l, &gi) in lambda.iter().zip(&g) {
            let t = l + rho * gi;
            if t > 0.0 {
                merit += (t * t - l * l) / (2.0 * rho);
            } else {
                merit -= l * l / (2.0 * rho);
            }
        }
    }
    if !merit.is_finite() {
        return Err(Error::Evaluation { iterate: z.to_vec() });
    }
    Ok((merit, viol))
}

/// Augmented-Lagrangian value and gradient at z for (lambda, rho).
fn merit_and_grad(
    problem: &NlpProblem,
    cache: &ConstraintCache,
    z: &[f64],
    lambda: &[f64],
    rho: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    let (f, mut grad) = (problem.objective)(z);
    if !f.is_finite() || !all_finite(&grad) {
        return Err(Error::Evaluation { iterate: z.to_vec() });
    }
    let mut merit = f;
    let mut viol = 0.0;
    if let Some(block) = &problem.constraints {
        let (g, jac) = cache.residuals(block, z);
        viol = violation_norm(&g);
        let mut active = vec![0.0; g.len()];
        for (i, (&l, &gi)) in lambda.iter().zip(&g).enumerate() {
            let t = l + rho * gi;
            if t > 0.0 {
                merit += (t * t - l * l) / (2.0 * rho);
                active[i] = t;
            } else {
                merit -= l * l / (2.0 * rho);
            }
        }
        let jt = jac.tr_matvec(&active);
        for (gr, j) in grad.iter_mut().zip(&jt) {
            *gr += j;
        }
    }
    if !merit.is_finite() {
        return Err(Error::Evaluation { iterate: z.to_vec() });
    }
    Ok((merit, grad, viol))
}

/// Solve the NLP from `z0` (clipped into the box before the first iteration).
/// Deterministic given (problem, z0, opts).
pub fn solve(problem: &NlpProblem, z0: &[f64], opts: &SolverOptions) -> Result<SolveResult> {
    assert_eq!(z0.len(), problem.dim);
    let m = problem.constraint_count();
    let mut z = z0.to_vec();
    if !all_finite(&z) {
        return Err(Error::Evaluation { iterate: z });
    }
    problem.project(&mut z);

    let mut lambda = match &opts.warm_multipliers {
        Some(w) if w.len() == m => w.clone(),
        _ => vec![0.0; m],
    };
    let mut rho = opts.warm_penalty.unwrap_or(opts.initial_penalty);

    let mut cache = problem
        .constraints
        .as_ref()
        .map(|b| ConstraintCache::new(b, &z));

    // entry fast path: a warm start that already certifies optimality
    // (re-solves from a returned iterate) terminates immediately
    {
        let (f0, g0) = (problem.objective)(&z);
        if !f0.is_finite() || !all_finite(&g0) {
            return Err(Error::Evaluation { iterate: z });
        }
        let entry_viol = cache
            .as_ref()
            .map(|c| violation_norm(&c.base_g))
            .unwrap_or(0.0);
        let entry_kkt = kkt_residual(problem, &z, &lambda)?;
        if entry_kkt <= opts.tol && entry_viol <= opts.violation_tol {
            return Ok(SolveResult {
                z,
                objective: f0,
                status: SolveStatus::Optimal,
                kkt_residual: entry_kkt,
                violation: entry_viol,
                inner_iterations: 0,
                outer_iterations: 0,
                multipliers: lambda,
                penalty: rho,
                trace: Vec::new(),
            });
        }
    }

    // Best essentially-feasible iterate by objective value; such a point can
    // undercut the constrained optimum by at most a dust-level margin, so
    // returning it on failed solves is safe.
    let mut best_feasible: Option<(Vec<f64>, f64)> = None;
    let consider_best = |z: &[f64], f: f64, viol: f64, best: &mut Option<(Vec<f64>, f64)>| {
        if viol <= 1e-12 {
            match best {
                Some((_, bf)) if *bf <= f => {}
                _ => *best = Some((z.to_vec(), f)),
            }
        }
    };

    let mut trace = Vec::new();
    let mut total_inner = 0usize;
    let mut outer_done = 0usize;
    let mut prev_violation = f64::INFINITY;
    let mut line_search_failed = false;

    for outer in 0..opts.max_outer {
        outer_done = outer + 1;
        if let (Some(c), Some(b)) = (cache.as_mut(), problem.constraints.as_ref()) {
            c.refresh(b, &z);
        }
        // inner tolerance tightens with the outer loop; the stationarity
        // check uses the same multiplier scale as the KKT residual
        let inner_tol = (opts.tol * 0.5).max(1e-2 * 0.1_f64.powi(outer as i32));
        let s_d = 1.0 + lambda.iter().map(|l| l.abs()).sum::<f64>();

        let dummy = ConstraintCache {
            affine: true,
            base_z: vec![],
            base_g: vec![],
            jac: Mat::zeros(0, problem.dim),
        };
        let cache_ref = cache.as_ref().unwrap_or(&dummy);

        let (mut merit, mut grad, mut viol) = merit_and_grad(problem, cache_ref, &z, &lambda, rho)?;
        {
            let (f0, _) = (problem.objective)(&z);
            consider_best(&z, f0, viol, &mut best_feasible);
        }
        let round_start_merit = merit;
        let mut round_end_merit = merit;
        // Spectral projected gradient: Barzilai-Borwein steps with a
        // monotone Armijo safeguard while far from stationarity. Close to
        // the subproblem optimum the merit decreases sink below the float
        // noise of the evaluation, so the loop switches to raw (un-searched)
        // projected BB steps, which converge on the local quadratic without
        // consulting the merit at all; the best-stationarity iterate of that
        // phase is kept.
        let mut step = 1.0_f64;
        line_search_failed = false;
        let endgame_stat = 1e-3_f64.max(16.0 * inner_tol);
        // best-stationarity iterate of this round; raw BB steps can wander
        // on nonconvex stretches, so the round is rewound to it at the end
        let mut best_round: Option<(f64, Vec<f64>)> = None;

        for inner in 0..opts.max_inner {
            // projected-gradient stationarity for the current subproblem
            let mut cand = z.clone();
            for (c, g) in cand.iter_mut().zip(&grad) {
                *c -= g;
            }
            problem.project(&mut cand);
            let stat = cand
                .iter()
                .zip(&z)
                .fold(0.0_f64, |mx, (a, b)| mx.max((a - b).abs()))
                / s_d;
            if opts.collect_trace {
                trace.push(TraceRow {
                    outer,
                    inner,
                    merit,
                    stationarity: stat,
                    violation: viol,
                });
            }
            if stat <= inner_tol {
                best_round = None;
                break;
            }
            match &best_round {
                Some((bs, _)) if *bs <= stat => {}
                _ => best_round = Some((stat, z.clone())),
            }

            // near-stationary iterates are certified against the full KKT
            // system with freshly updated multiplier estimates
            if stat <= 4.0 * opts.tol {
                if let (Some(block), Some(c)) = (problem.constraints.as_ref(), cache.as_ref()) {
                    let (g, _) = c.residuals(block, &z);
                    let viol_now = violation_norm(&g);
                    if viol_now <= opts.violation_tol {
                        let trial: Vec<f64> = lambda
                            .iter()
                            .zip(&g)
                            .map(|(&l, &gi)| (l + rho * gi).max(0.0))
                            .collect();
                        let kkt = kkt_residual(problem, &z, &trial)?;
                        if kkt <= opts.tol {
                            let (f, _) = (problem.objective)(&z);
                            return Ok(SolveResult {
                                z,
                                objective: f,
                                status: SolveStatus::Optimal,
                                kkt_residual: kkt,
                                violation: viol_now,
                                inner_iterations: total_inner,
                                outer_iterations: outer_done,
                                multipliers: trial,
                                penalty: rho,
                                trace,
                            });
                        }
                    }
                } else if problem.constraints.is_none() {
                    let (f, _) = (problem.objective)(&z);
                    return Ok(SolveResult {
                        z,
                        objective: f,
                        status: SolveStatus::Optimal,
                        kkt_residual: stat,
                        violation: 0.0,
                        inner_iterations: total_inner,
                        outer_iterations: outer_done,
                        multipliers: lambda,
                        penalty: rho,
                        trace,
                    });
                }
            }

            total_inner += 1;
            let t = step.clamp(1e-10, 1e8);
            if stat <= endgame_stat {
                // raw projected BB step; merit not consulted
                let mut z_new = z.clone();
                for (c, g) in z_new.iter_mut().zip(&grad) {
                    *c -= t * g;
                }
                problem.project(&mut z_new);
                let diff: Vec<f64> = z_new.iter().zip(&z).map(|(a, b)| a - b).collect();
                let dn2 = dot(&diff, &diff);
                if dn2 == 0.0 {
                    break;
                }
                let (m_new, g_new, v_new) =
                    merit_and_grad(problem, cache_ref, &z_new, &lambda, rho)?;
                let dg: Vec<f64> = g_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy = dot(&diff, &dg);
                step = if sy > 1e-16 {
                    (dn2 / sy).clamp(1e-10, 1e8)
                } else {
                    t * 2.0
                };
                z = z_new;
                merit = m_new;
                grad = g_new;
                viol = v_new;
                round_end_merit = merit;
            } else {
                // globalized phase: monotone Armijo backtracking on the arc
                let mut t = t;
                let mut accepted = false;
                for _ in 0..opts.max_backtracks {
                    let mut z_new = z.clone();
                    for (c, g) in z_new.iter_mut().zip(&grad) {
                        *c -= t * g;
                    }
                    problem.project(&mut z_new);
                    let diff: Vec<f64> = z_new.iter().zip(&z).map(|(a, b)| a - b).collect();
                    let dn2 = dot(&diff, &diff);
                    if dn2 == 0.0 {
                        break;
                    }
                    let (m_new, v_new) = merit_value(problem, cache_ref, &z_new, &lambda, rho)?;
                    if m_new <= merit - opts.armijo_c / t * dn2 {
                        let (m_full, g_new, v_full) =
                            merit_and_grad(problem, cache_ref, &z_new, &lambda, rho)?;
                        let dg: Vec<f64> = g_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
                        let sy = dot(&diff, &dg);
                        step = if sy > 1e-16 {
                            (dn2 / sy).clamp(1e-10, 1e8)
                        } else {
                            t * 2.0
                        };
                        z = z_new;
                        merit = m_full;
                        grad = g_new;
                        viol = v_full.max(v_new);
                        round_end_merit = merit;
                        accepted = true;
                        break;
                    }
                    t *= opts.armijo_shrink;
                }
                if !accepted {
                    line_search_failed = true;
                    break;
                }
            }
            let (f_cur, _) = (problem.objective)(&z);
            consider_best(&z, f_cur, viol, &mut best_feasible);
        }
        // rewind to the round's most stationary iterate when the loop ended
        // somewhere worse
        if let Some((_, zb)) = best_round.take() {
            if zb != z {
                z = zb;
                let (m, _, v) = merit_and_grad(problem, cache_ref, &z, &lambda, rho)?;
                round_end_merit = m;
                viol = v;
            }
        }
        let _ = viol;
        // round-level merit progress (up to evaluation noise; the raw BB
        // endgame is non-monotone step to step but settles at the optimum)
        debug_assert!(
            round_end_merit
                <= round_start_merit + 1e-6 * (1.0 + round_start_merit.abs()),
            "inner round increased the merit: {round_start_merit} -> {round_end_merit}"
        );

        // multiplier update and convergence test
        let (g_now, viol_now) = if let (Some(block), Some(c)) =
            (problem.constraints.as_ref(), cache.as_ref())
        {
            let (g, _) = c.residuals(block, &z);
            let v = violation_norm(&g);
            (g, v)
        } else {
            (vec![], 0.0)
        };
        for (l, &gi) in lambda.iter_mut().zip(&g_now) {
            *l = (*l + rho * gi).max(0.0);
        }
        let kkt = kkt_residual(problem, &z, &lambda)?;
        if kkt <= opts.tol && viol_now <= opts.violation_tol {
            // converged: return the certified iterate
            let (f, _) = (problem.objective)(&z);
            return Ok(SolveResult {
                z,
                objective: f,
                status: SolveStatus::Optimal,
                kkt_residual: kkt,
                violation: viol_now,
                inner_iterations: total_inner,
                outer_iterations: outer_done,
                multipliers: lambda,
                penalty: rho,
                trace,
            });
        }
        // grow the penalty when feasibility stalls
        if viol_now > 0.25 * prev_violation && viol_now > opts.violation_tol {
            rho = (rho * opts.penalty_growth).min(opts.max_penalty);
        }
        prev_violation = viol_now;
    }

    let (f, _) = (problem.objective)(&z);
    let viol = if let (Some(block), Some(c)) = (problem.constraints.as_ref(), cache.as_ref()) {
        let (g, _) = c.residuals(block, &z);
        violation_norm(&g)
    } else {
        0.0
    };
    consider_best(&z, f, viol, &mut best_feasible);
    let status = if viol > opts.violation_tol && rho >= opts.max_penalty {
        SolveStatus::Infeasible
    } else if line_search_failed {
        SolveStatus::LineSearchFail
    } else {
        SolveStatus::MaxIter
    };
    // no certificate anyway; return the best feasible iterate seen
    let (z_out, f_out, viol_out) = match best_feasible {
        Some((bz, bf)) if bf < f - 1e-12 => {
            let v = problem
                .constraints
                .as_ref()
                .map(|b| violation_norm(&(b.eval)(&bz).0))
                .unwrap_or(0.0);
            (bz, bf, v)
        }
        _ => (z.clone(), f, viol),
    };
    let kkt = kkt_residual(problem, &z_out, &lambda)?;
    Ok(SolveResult {
        z: z_out,
        objective: f_out,
        status,
        kkt_residual: kkt,
        violation: viol_out,
        inner_iterations: total_inner,
        outer_iterations: outer_done,
        multipliers: lambda,
        penalty: rho,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_box() -> NlpProblem {
        NlpProblem {
            dim: 1,
            objective: Arc::new(|z| ((z[0] - 3.0).powi(2), vec![2.0 * (z[0] - 3.0)])),
            objective_value: None,
            constraints: None,
            lower: vec![0.0],
            upper: vec![2.0],
        }
    }

    #[test]
    fn clipped_unconstrained_minimum() {
        let p = quadratic_box();
        let r = solve(&p, &[0.5], &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.z[0] - 2.0).abs() < 1e-8, "z = {}", r.z[0]);
        assert!((r.objective - 1.0).abs() < 1e-8);
        // projection keeps the iterate inside the box exactly
        assert!(r.z[0] <= 2.0 && r.z[0] >= 0.0);
    }

    fn symmetric_constrained() -> NlpProblem {
        // min z1^2 + z2^2  s.t.  z1 + z2 >= 1  (g = 1 - z1 - z2 <= 0)
        NlpProblem {
            dim: 2,
            objective: Arc::new(|z| {
                (z[0] * z[0] + z[1] * z[1], vec![2.0 * z[0], 2.0 * z[1]])
            }),
            objective_value: None,
            constraints: Some(ConstraintBlock {
                count: 1,
                eval: Arc::new(|z| {
                    (
                        vec![1.0 - z[0] - z[1]],
                        Mat::from_rows(&[vec![-1.0, -1.0]]),
                    )
                }),
                affine: true,
            }),
            lower: vec![-10.0, -10.0],
            upper: vec![10.0, 10.0],
        }
    }

    #[test]
    fn symmetric_kkt_by_hand() {
        let p = symmetric_constrained();
        let r = solve(&p, &[2.0, -1.0], &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.z[0] - 0.5).abs() < 1e-6, "{:?}", r.z);
        assert!((r.z[1] - 0.5).abs() < 1e-6);
        assert!(r.violation <= 1e-6);
    }

    #[test]
    fn quadratic_with_affine_inequality_matches_kkt_solution() {
        // min (z1-2)^2 + 2 (z2-1)^2  s.t.  z1 + z2 <= 2
        // KKT by hand: lambda = 4/3, z = (4/3, 2/3), f* = 2/3
        let p = NlpProblem {
            dim: 2,
            objective: Arc::new(|z| {
                (
                    (z[0] - 2.0).powi(2) + 2.0 * (z[1] - 1.0).powi(2),
                    vec![2.0 * (z[0] - 2.0), 4.0 * (z[1] - 1.0)],
                )
            }),
            objective_value: None,
            constraints: Some(ConstraintBlock {
                count: 1,
                eval: Arc::new(|z| {
                    (vec![z[0] + z[1] - 2.0], Mat::from_rows(&[vec![1.0, 1.0]]))
                }),
                affine: true,
            }),
            lower: vec![-10.0, -10.0],
            upper: vec![10.0, 10.0],
        };
        let r = solve(&p, &[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.z[0] - 4.0 / 3.0).abs() < 1e-6, "{:?}", r.z);
        assert!((r.z[1] - 2.0 / 3.0).abs() < 1e-6);
        assert!((r.objective - 2.0 / 3.0).abs() < 1e-6);
        assert!((r.multipliers[0] - 4.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn kkt_residual_cases() {
        // unconstrained quadratic at its minimum
        let p = NlpProblem {
            dim: 2,
            objective: Arc::new(|z| {
                (
                    (z[0] - 1.0).powi(2) + (z[1] + 2.0).powi(2),
                    vec![2.0 * (z[0] - 1.0), 2.0 * (z[1] + 2.0)],
                )
            }),
            objective_value: None,
            constraints: None,
            lower: vec![-10.0, -10.0],
            upper: vec![10.0, 10.0],
        };
        assert!(kkt_residual(&p, &[1.0, -2.0], &[]).unwrap() <= 1e-12);
        // interior point, zero multipliers: residual equals |projected gradient|
        let res = kkt_residual(&p, &[2.0, -2.0], &[]).unwrap();
        assert!((res - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kkt_residual_dimension_mismatch() {
        let p = symmetric_constrained();
        assert!(kkt_residual(&p, &[0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn solve_results_pass_kkt_sweep() {
        // a few random-ish convex quadratics with one affine constraint
        for (a, b, c) in [(1.0, 2.0, 1.5), (0.5, 1.0, 0.2), (3.0, 0.7, -0.4)] {
            let p = NlpProblem {
                dim: 2,
                objective: Arc::new(move |z| {
                    (
                        a * (z[0] - c).powi(2) + b * (z[1] + c).powi(2),
                        vec![2.0 * a * (z[0] - c), 2.0 * b * (z[1] + c)],
                    )
                }),
                objective_value: None,
                constraints: Some(ConstraintBlock {
                    count: 1,
                    eval: Arc::new(|z| {
                        (vec![0.5 - z[0] - 0.5 * z[1]], Mat::from_rows(&[vec![-1.0, -0.5]]))
                    }),
                    affine: true,
                }),
                lower: vec![-5.0, -5.0],
                upper: vec![5.0, 5.0],
            };
            let opts = SolverOptions::default();
            let r = solve(&p, &[1.0, 1.0], &opts).unwrap();
            assert_eq!(r.status, SolveStatus::Optimal);
            let kkt = kkt_residual(&p, &r.z, &r.multipliers).unwrap();
            assert!(kkt <= opts.tol, "kkt {kkt}");
        }
    }

    #[test]
    fn finite_diff_detects_exact_and_corrupted_gradients() {
        let good = NlpProblem {
            dim: 3,
            objective: Arc::new(|z| {
                (
                    z.iter().map(|v| v * v).sum::<f64>(),
                    z.iter().map(|v| 2.0 * v).collect(),
                )
            }),
            objective_value: None,
            constraints: None,
            lower: vec![-10.0; 3],
            upper: vec![10.0; 3],
        };
        assert!(finite_diff_check(&good, &[0.3, -0.7, 1.1], 1e-5) <= 1e-10);

        let corrupted = NlpProblem {
            dim: 3,
            objective: Arc::new(|z| {
                let mut g: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
                g[1] += 1.0;
                (z.iter().map(|v| v * v).sum::<f64>(), g)
            }),
            objective_value: None,
            constraints: None,
            lower: vec![-10.0; 3],
            upper: vec![10.0; 3],
        };
        assert!(finite_diff_check(&corrupted, &[0.3, -0.7, 1.1], 1e-5) >= 0.1);
    }

    #[test]
    fn warm_restart_terminates_quickly() {
        let p = symmetric_constrained();
        let opts = SolverOptions::default();
        let first = solve(&p, &[2.0, -1.0], &opts).unwrap();
        let warm = SolverOptions {
            warm_multipliers: Some(first.multipliers.clone()),
            warm_penalty: Some(first.penalty),
            ..SolverOptions::default()
        };
        let again = solve(&p, &first.z, &warm).unwrap();
        assert_eq!(again.status, SolveStatus::Optimal);
        assert!(
            again.inner_iterations <= 2,
            "warm re-solve took {} inner iterations",
            again.inner_iterations
        );
    }

    #[test]
    fn deterministic_repeat() {
        let p = symmetric_constrained();
        let opts = SolverOptions::default();
        let a = solve(&p, &[3.0, 0.5], &opts).unwrap();
        let b = solve(&p, &[3.0, 0.5], &opts).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.inner_iterations, b.inner_iterations);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let p = NlpProblem {
            dim: 1,
            objective: Arc::new(|z| {
                if z[0] > 0.5 {
                    (f64::NAN, vec![f64::NAN])
                } else {
                    (z[0] * z[0], vec![2.0 * z[0]])
                }
            }),
            objective_value: None,
            constraints: None,
            lower: vec![0.0],
            upper: vec![1.0],
        };
        assert!(matches!(
            solve(&p, &[0.9], &SolverOptions::default()).unwrap_err(),
            Error::Evaluation { .. }
        ));
    }

    #[test]
    fn affine_fast_path_matches_general_path() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = Arc::new(AtomicUsize::new(0));
        let mk = |affine: bool, counter: Arc<AtomicUsize>| NlpProblem {
            dim: 2,
            objective: Arc::new(|z| {
                (
                    (z[0] - 1.5).powi(2) + (z[1] - 1.5).powi(2),
                    vec![2.0 * (z[0] - 1.5), 2.0 * (z[1] - 1.5)],
                )
            }),
            objective_value: None,
            constraints: Some(ConstraintBlock {
                count: 2,
                eval: Arc::new(move |z| {
                    counter.fetch_add(1, Ordering::Relaxed);
                    (
                        vec![z[0] + z[1] - 2.0, z[0] - 2.0 * z[1]],
                        Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, -2.0]]),
                    )
                }),
                affine,
            }),
            lower: vec![-5.0, -5.0],
            upper: vec![5.0, 5.0],
        };
        let fast = solve(&mk(true, calls.clone()), &[0.0, 0.0], &SolverOptions::default()).unwrap();
        let fast_calls = calls.swap(0, Ordering::Relaxed);
        let slow = solve(&mk(false, calls.clone()), &[0.0, 0.0], &SolverOptions::default()).unwrap();
        let slow_calls = calls.load(Ordering::Relaxed);
        assert!((fast.objective - slow.objective).abs() < 1e-8);
        for (a, b) in fast.z.iter().zip(&slow.z) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(
            fast_calls < slow_calls,
            "affine path should evaluate constraints less often ({fast_calls} vs {slow_calls})"
        );
    }

    #[test]
    fn trace_collection() {
        let p = symmetric_constrained();
        let opts = SolverOptions {
            collect_trace: true,
            ..SolverOptions::default()
        };
        let r = solve(&p, &[2.0, -1.0], &opts).unwrap();
        assert!(!r.trace.is_empty());
        assert!(r.trace.windows(2).all(|w| {
            w[0].outer < w[1].outer || (w[0].outer == w[1].outer && w[0].inner < w[1].inner)
        }));
    }
}
