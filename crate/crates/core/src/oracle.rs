//! Brute-force mixed-integer benchmark: enumerate every admissible pit
//! strategy, solve the continuous full-race NLP for each, and rank them.
//! Exhaustion over the discrete set makes the returned optimum global on
//! that set, which is what the other controllers are measured against.

use serde::{Deserialize, Serialize};

use crate::control::build_shooting_ocp;
use crate::error::{Error, Result};
use crate::f1::Compound;
use crate::mdp::MdpSpec;
use crate::nlp::{self, SolveStatus, SolverOptions};
use crate::par;

/// Ordered pit stops: (1-based lap number, compound fitted at that stop).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PitStrategy {
    pub stops: Vec<(usize, Compound)>,
}

impl PitStrategy {
    /// Discrete input sequence over the race: PS = 0 except at stop laps.
    pub fn discrete_sequence(&self, n_laps: usize) -> Vec<usize> {
        let mut seq = vec![0usize; n_laps];
        for &(lap, compound) in &self.stops {
            assert!(lap >= 1 && lap <= n_laps);
            seq[lap - 1] = compound.label() as usize + 1;
        }
        seq
    }

    /// Lexicographic key for deterministic ranking ties.
    fn lex_key(&self) -> Vec<usize> {
        let mut k = Vec::with_capacity(self.stops.len() * 2 + 1);
        k.push(self.stops.len());
        for &(lap, c) in &self.stops {
            k.push(lap);
            k.push(c.label() as usize);
        }
        k
    }

    pub fn label(&self) -> String {
        if self.stops.is_empty() {
            return "no-stop".to_string();
        }
        self.stops
            .iter()
            .map(|(lap, c)| format!("L{lap}:{c:?}"))
            .collect::<Vec<_>>()
            .join("+")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnumerationConfig {
    pub min_stops: usize,
    pub max_stops: usize,
    /// Minimum laps in every stint (before the first stop, between stops,
    /// and after the last stop).
    pub min_stint: usize,
    /// Earliest allowed stop lap.
    pub min_stop_lap: usize,
    /// Stops must leave at least this many laps to the flag.
    pub min_tail: usize,
    /// Require at least two distinct compounds over the race.
    pub two_compound_rule: bool,
    /// Hard cap on the number of candidate NLPs.
    pub max_candidates: usize,
    /// Fan-out width for the candidate solves (0 = library default).
    pub jobs: usize,
}

impl Default for EnumerationConfig {
    fn default() -> Self {
        EnumerationConfig {
            min_stops: 1,
            max_stops: 2,
            min_stint: 3,
            min_stop_lap: 3,
            min_tail: 3,
            two_compound_rule: true,
            max_candidates: 20_000,
            jobs: 0,
        }
    }
}

/// Exhaustive, duplicate-free, deterministically ordered strategy list.
pub fn enumerate_strategies(
    cfg: &EnumerationConfig,
    n_laps: usize,
    start_compound: Compound,
) -> Result<Vec<PitStrategy>> {
    assert!(cfg.max_stops >= cfg.min_stops && cfg.min_stops >= 1);
    let mut out = Vec::new();
    for n_stops in cfg.min_stops..=cfg.max_stops {
        let mut laps = Vec::with_capacity(n_stops);
        collect_lap_combos(cfg, n_laps, n_stops, &mut laps, &mut |combo| {
            let mut compounds = vec![Compound::S; combo.len()];
            collect_compounds(combo, &mut compounds, 0, &mut |cs| {
                if cfg.two_compound_rule {
                    let mut used = vec![start_compound];
                    used.extend_from_slice(cs);
                    used.sort_by_key(|c| c.label() as usize);
                    used.dedup();
                    if used.len() < 2 {
                        return;
                    }
                }
                out.push(PitStrategy {
                    stops: combo.iter().copied().zip(cs.iter().copied()).collect(),
                });
            });
        });
    }
    if out.len() > cfg.max_candidates {
        return Err(Error::EnumerationBudget {
            count: out.len(),
            cap: cfg.max_candidates,
        });
    }
    Ok(out)
}

fn collect_lap_combos(
    cfg: &EnumerationConfig,
    n_laps: usize,
    remaining: usize,
    acc: &mut Vec<usize>,
    emit: &mut impl FnMut(&[usize]),
) {
    if remaining == 0 {
        emit(acc);
        return;
    }
    let prev = acc.last().copied().unwrap_or(0);
    let lo = if acc.is_empty() {
        cfg.min_stop_lap.max(cfg.min_stint)
    } else {
        prev + cfg.min_stint
    };
    // leave room for the remaining stops and the final stint
    let needed_after = (remaining - 1) * cfg.min_stint + cfg.min_stint.max(cfg.min_tail);
    if n_laps < needed_after {
        return;
    }
    let hi = (n_laps - needed_after).min(n_laps.saturating_sub(cfg.min_tail));
    for lap in lo..=hi {
        acc.push(lap);
        collect_lap_combos(cfg, n_laps, remaining - 1, acc, emit);
        acc.pop();
    }
}

fn collect_compounds(
    laps: &[usize],
    acc: &mut Vec<Compound>,
    idx: usize,
    emit: &mut impl FnMut(&[Compound]),
) {
    if idx == laps.len() {
        emit(acc);
        return;
    }
    for c in Compound::all() {
        acc[idx] = c;
        collect_compounds(laps, acc, idx + 1, emit);
    }
}

/// Result of one fixed-strategy full-race solve.
#[derive(Debug, Clone)]
pub struct FixedStrategySolve {
    pub race_time: f64,
    pub plan: Vec<f64>,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub violation: f64,
    pub inner_iterations: usize,
}

/// Solve the full-race single-shooting NLP (no terminal cost) for a fixed
/// strategy; `stage_warm` is the per-lap continuous warm start (the nominal
/// allocation profile), repeated over the horizon.
pub fn solve_fixed_strategy(
    model: &MdpSpec,
    x0: &[f64],
    strategy: &PitStrategy,
    stage_warm: &[f64],
    opts: &SolverOptions,
) -> Result<FixedStrategySolve> {
    let n_laps = model.horizon;
    let discrete = strategy.discrete_sequence(n_laps);
    let problem = build_shooting_ocp(model, x0, &discrete, None);
    let mut z0 = Vec::with_capacity(n_laps * stage_warm.len());
    for _ in 0..n_laps {
        z0.extend_from_slice(stage_warm);
    }
    let solved = nlp::solve(&problem, &z0, opts)?;
    Ok(FixedStrategySolve {
        race_time: solved.objective,
        plan: solved.z,
        status: solved.status,
        kkt_residual: solved.kkt_residual,
        violation: solved.violation,
        inner_iterations: solved.inner_iterations,
    })
}

/// One ranked candidate.
#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub strategy: PitStrategy,
    pub race_time: f64,
    pub status: SolveStatus,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub best: StrategyOutcome,
    /// Successful candidates sorted by (race time, strategy).
    pub ranking: Vec<StrategyOutcome>,
    pub nlp_count: usize,
    pub failures: usize,
}

/// Enumerate all admissible strategies, solve each candidate independently
/// (fanned out over the configured width) and return the global optimum over
/// the discrete set.
pub fn best_strategy(
    model: &MdpSpec,
    x0: &[f64],
    start_compound: Compound,
    stage_warm: &[f64],
    enum_cfg: &EnumerationConfig,
    opts: &SolverOptions,
) -> Result<OracleResult> {
    let strategies = enumerate_strategies(enum_cfg, model.horizon, start_compound)?;
    let nlp_count = strategies.len();
    let x0v = x0.to_vec();
    let warm = stage_warm.to_vec();
    let opts = opts.clone();
    let outcomes: Vec<(PitStrategy, Result<FixedStrategySolve>)> = par::map_collect(
        strategies,
        enum_cfg.jobs,
        move |strategy: PitStrategy| {
            let solved = solve_fixed_strategy(model, &x0v, &strategy, &warm, &opts);
            (strategy, solved)
        },
    );
    let mut ranking = Vec::with_capacity(nlp_count);
    let mut failures = 0usize;
    for (strategy, solved) in outcomes {
        match solved {
            Ok(s) if s.status == SolveStatus::Optimal => ranking.push(StrategyOutcome {
                strategy,
                race_time: s.race_time,
                status: s.status,
                inner_iterations: s.inner_iterations,
            }),
            _ => failures += 1,
        }
    }
    if ranking.is_empty() {
        return Err(Error::AllCandidatesFailed { count: nlp_count });
    }
    ranking.sort_by(|a, b| {
        a.race_time
            .partial_cmp(&b.race_time)
            .unwrap()
            .then_with(|| a.strategy.lex_key().cmp(&b.strategy.lex_key()))
    });
    Ok(OracleResult {
        best: ranking[0].clone(),
        ranking,
        nlp_count,
        failures,
    })
}
