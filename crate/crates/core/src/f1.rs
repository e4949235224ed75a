//! F1 race-strategy instance of the hybrid MDP: lap-time model, battery /
//! fuel / mass / tire dynamics, pit decisions, regulatory constraints, and
//! the traffic extension.
//!
//! Continuous inputs per lap are the allocated battery energy (signed,
//! positive = charging) and fuel energy, both in MJ. The discrete input is
//! the pit decision PS in {0 = stay out, 1 = soft, 2 = medium, 3 = hard}.
//! A stop is executed at lap end: the pit lap is driven on the old tires,
//! the pit loss is added to that lap, and the fresh compound takes effect
//! from the next lap.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::mdp::{HybridAction, MdpSpec, SmoothModel};
use crate::net::{smooth_relu, smooth_relu_deriv};

/// State layout indices; the traffic variant appends the gap time.
pub mod idx {
    pub const BATTERY: usize = 0;
    pub const FUEL: usize = 1;
    pub const MASS: usize = 2;
    pub const WEAR: usize = 3;
    pub const COMPOUND: usize = 4;
    pub const LAP: usize = 5;
    pub const RACE_TIME: usize = 6;
    pub const GAP: usize = 7;
}

pub const STATE_DIM: usize = 7;
pub const STATE_DIM_TRAFFIC: usize = 8;
pub const N_CONTINUOUS: usize = 2;
pub const N_DISCRETE: usize = 4;

/// Gap value representing "no opponent in range"; the opponent appears (gap
/// reset to the configured initial gap) at the lap of the first pit stop.
pub const GAP_INACTIVE: f64 = 1.0e3;
const GAP_ACTIVE_BELOW: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Compound {
    S,
    M,
    H,
}

impl Compound {
    pub fn from_label(v: f64) -> Compound {
        match v.round() as i64 {
            0 => Compound::S,
            1 => Compound::M,
            _ => Compound::H,
        }
    }

    pub fn label(self) -> f64 {
        match self {
            Compound::S => 0.0,
            Compound::M => 1.0,
            Compound::H => 2.0,
        }
    }

    /// Compound selected by a pit decision (PS in {1, 2, 3}).
    pub fn from_pit(ps: usize) -> Compound {
        match ps {
            1 => Compound::S,
            2 => Compound::M,
            _ => Compound::H,
        }
    }

    pub fn all() -> [Compound; 3] {
        [Compound::S, Compound::M, Compound::H]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompoundParams {
    /// Base lap-time offset of the compound on fresh tires (s).
    pub offset_s: f64,
    /// Wear accumulated per lap at reference mass (wear units / lap).
    pub wear_rate: f64,
    /// Relative wear increase per kg above reference mass (1/kg).
    pub mass_wear_coupling_per_kg: f64,
    /// Linear wear-to-time coefficient (s per wear unit).
    pub wear_time_lin_s: f64,
    /// Quadratic wear-to-time coefficient (s per wear unit squared).
    pub wear_time_quad_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompoundTable {
    #[serde(rename = "S")]
    pub s: CompoundParams,
    #[serde(rename = "M")]
    pub m: CompoundParams,
    #[serde(rename = "H")]
    pub h: CompoundParams,
}

impl CompoundTable {
    pub fn get(&self, c: Compound) -> &CompoundParams {
        match c {
            Compound::S => &self.s,
            Compound::M => &self.m,
            Compound::H => &self.h,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrafficParams {
    /// Opponent pace deficit relative to the nominal-scenario lap time (s).
    pub opponent_handicap_s: f64,
    /// Gap to the opponent at the lap of the first pit stop (s).
    pub initial_gap_s: f64,
    /// Peak dirty-air penalty (s).
    pub peak_penalty_s: f64,
    /// Gap at which the penalty peaks (s).
    pub peak_gap_s: f64,
    /// Gap beyond which the wake has dissipated (s).
    pub clear_gap_s: f64,
    /// Nominal-scenario lap time the opponent pace is measured against (s).
    pub reference_lap_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaceConfig {
    pub n_laps: usize,
    /// Lap time at reference mass with zero extra fuel/battery benefit (s).
    pub base_lap_time_s: f64,
    pub reference_mass_kg: f64,
    /// Lap-time sensitivity to car mass (s/kg).
    pub mass_sensitivity_s_per_kg: f64,
    pub car_mass_empty_kg: f64,
    /// Mass of fuel holding 1 MJ (kg/MJ).
    pub fuel_mass_per_mj_kg: f64,
    /// Fuel energy budget for the race (MJ).
    pub fuel_energy_race_mj: f64,
    /// Per-lap fuel allocation bounds [min, max] (MJ).
    pub fuel_alloc_bounds_mj: (f64, f64),
    /// Linear fuel-benefit coefficient (s/MJ).
    pub fuel_gain_lin_s_per_mj: f64,
    /// Saturation of the fuel benefit (s/MJ^2); keeps the map concave.
    pub fuel_gain_quad_s_per_mj2: f64,
    /// Battery store limit (MJ).
    pub battery_capacity_mj: f64,
    pub battery_initial_mj: f64,
    /// Per-lap battery allocation bounds [min, max] (MJ, positive = charging).
    pub battery_alloc_bounds_mj: (f64, f64),
    /// Lap-time gain per MJ deployed (s/MJ).
    pub battery_deploy_gain_s_per_mj: f64,
    /// Diminishing returns on per-lap deployment (1/MJ); keeps the optimal
    /// deployment split unique.
    pub battery_deploy_saturation_per_mj: f64,
    /// Lap-time loss per MJ harvested (s/MJ); at least the deploy gain, so a
    /// charge/discharge cycle can never pay for itself.
    pub battery_charge_drag_s_per_mj: f64,
    /// Smoothing of the deployment positive-part (MJ^2); keeps the lap time
    /// continuously differentiable at zero allocation.
    pub deploy_smoothing_mj2: f64,
    pub pit_loss_s: f64,
    pub start_compound: Compound,
    pub compounds: CompoundTable,
    pub traffic: Option<TrafficParams>,
}

impl RaceConfig {
    /// Documented desk-scale configuration: 20 laps, three compounds, wear
    /// strong enough that at least one stop pays off.
    pub fn desk() -> RaceConfig {
        RaceConfig {
            n_laps: 20,
            base_lap_time_s: 80.0,
            reference_mass_kg: 740.0,
            mass_sensitivity_s_per_kg: 0.03,
            car_mass_empty_kg: 680.0,
            fuel_mass_per_mj_kg: 1.0,
            fuel_energy_race_mj: 60.0,
            fuel_alloc_bounds_mj: (2.4, 3.6),
            fuel_gain_lin_s_per_mj: 0.8,
            fuel_gain_quad_s_per_mj2: 0.05,
            battery_capacity_mj: 4.0,
            battery_initial_mj: 2.0,
            battery_alloc_bounds_mj: (-1.3, 1.3),
            battery_deploy_gain_s_per_mj: 0.4,
            battery_deploy_saturation_per_mj: 0.05,
            battery_charge_drag_s_per_mj: 0.5,
            deploy_smoothing_mj2: 1e-4,
            pit_loss_s: 18.0,
            start_compound: Compound::S,
            compounds: CompoundTable {
                s: CompoundParams {
                    offset_s: 0.0,
                    wear_rate: 1.0,
                    mass_wear_coupling_per_kg: 0.002,
                    wear_time_lin_s: 0.15,
                    wear_time_quad_s: 0.01,
                },
                m: CompoundParams {
                    offset_s: 0.4,
                    wear_rate: 0.7,
                    mass_wear_coupling_per_kg: 0.002,
                    wear_time_lin_s: 0.10,
                    wear_time_quad_s: 0.005,
                },
                h: CompoundParams {
                    offset_s: 0.8,
                    wear_rate: 0.5,
                    mass_wear_coupling_per_kg: 0.002,
                    wear_time_lin_s: 0.08,
                    wear_time_quad_s: 0.003,
                },
            },
            traffic: None,
        }
    }

    /// Desk configuration with the traffic extension enabled.
    pub fn desk_traffic() -> RaceConfig {
        let mut cfg = RaceConfig::desk();
        cfg.traffic = Some(TrafficParams {
            opponent_handicap_s: 0.5,
            initial_gap_s: 2.0,
            peak_penalty_s: 0.5,
            peak_gap_s: 0.6,
            clear_gap_s: 2.5,
            reference_lap_time_s: 78.0,
        });
        cfg
    }

    pub fn state_dim(&self, traffic: bool) -> usize {
        if traffic {
            STATE_DIM_TRAFFIC
        } else {
            STATE_DIM
        }
    }

    pub fn initial_mass_kg(&self) -> f64 {
        self.car_mass_empty_kg + self.fuel_mass_per_mj_kg * self.fuel_energy_race_mj
    }

    /// Constant per-lap allocation that exactly depletes the fuel budget.
    pub fn nominal_fuel_allocation(&self) -> f64 {
        self.fuel_energy_race_mj / self.n_laps as f64
    }

    /// Fuel allocation as a percentage of the nominal allocation.
    pub fn fuel_alloc_percent(&self, alloc_mj: f64) -> f64 {
        100.0 * alloc_mj / self.nominal_fuel_allocation()
    }

    pub fn fuel_alloc_from_percent(&self, pct: f64) -> f64 {
        pct / 100.0 * self.nominal_fuel_allocation()
    }

    /// Validate all config invariants; returns every violation with its
    /// exact field path.
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut errs: Vec<(String, String)> = Vec::new();
        let mut err = |path: &str, msg: String| errs.push((path.to_string(), msg));

        if self.n_laps == 0 {
            err("race.n_laps", "must be at least 1".into());
        }
        let (fmin, fmax) = self.fuel_alloc_bounds_mj;
        if !(fmin <= fmax) {
            err("race.fuel_alloc_bounds_mj", format!("min {fmin} > max {fmax}"));
        }
        if fmin < 0.0 {
            err("race.fuel_alloc_bounds_mj", "min must be non-negative".into());
        }
        if self.n_laps as f64 * fmin > self.fuel_energy_race_mj {
            err(
                "race.fuel_alloc_bounds_mj",
                format!(
                    "n_laps * min allocation {} exceeds fuel budget {} (terminal law infeasible)",
                    self.n_laps as f64 * fmin,
                    self.fuel_energy_race_mj
                ),
            );
        }
        let (bmin, bmax) = self.battery_alloc_bounds_mj;
        if !(bmin <= bmax) {
            err("race.battery_alloc_bounds_mj", format!("min {bmin} > max {bmax}"));
        }
        if self.battery_capacity_mj <= 0.0 {
            err("race.battery_capacity_mj", "must be positive".into());
        }
        if self.battery_initial_mj < 0.0 || self.battery_initial_mj > self.battery_capacity_mj {
            err(
                "race.battery_initial_mj",
                format!(
                    "{} outside [0, {}]",
                    self.battery_initial_mj, self.battery_capacity_mj
                ),
            );
        }
        if self.fuel_gain_lin_s_per_mj - 2.0 * self.fuel_gain_quad_s_per_mj2 * fmax <= 0.0 {
            err(
                "race.fuel_gain_quad_s_per_mj2",
                "fuel benefit must stay increasing over the allocation range".into(),
            );
        }
        if self.deploy_smoothing_mj2 <= 0.0 {
            err("race.deploy_smoothing_mj2", "must be positive".into());
        }
        let max_deploy = (-bmin).max(0.0);
        if self.battery_deploy_saturation_per_mj < 0.0
            || 2.0 * self.battery_deploy_saturation_per_mj * max_deploy >= 1.0
        {
            err(
                "race.battery_deploy_saturation_per_mj",
                "deployment gain must stay increasing over the allocation range".into(),
            );
        }
        if self.battery_charge_drag_s_per_mj < self.battery_deploy_gain_s_per_mj {
            err(
                "race.battery_charge_drag_s_per_mj",
                format!(
                    "charge drag {} below deploy gain {}: a charge/discharge cycle would create lap time",
                    self.battery_charge_drag_s_per_mj, self.battery_deploy_gain_s_per_mj
                ),
            );
        }
        if self.pit_loss_s < 0.0 {
            err("race.pit_loss_s", "must be non-negative".into());
        }
        for v in [
            self.base_lap_time_s,
            self.mass_sensitivity_s_per_kg,
            self.fuel_mass_per_mj_kg,
            self.battery_deploy_gain_s_per_mj,
        ] {
            if !v.is_finite() {
                err("race", format!("non-finite sensitivity {v}"));
            }
        }
        let (s, m, h) = (&self.compounds.s, &self.compounds.m, &self.compounds.h);
        if !(s.offset_s < m.offset_s && m.offset_s < h.offset_s) {
            err(
                "race.compounds",
                "offsets must be ordered S < M < H".into(),
            );
        }
        if !(s.wear_rate > m.wear_rate && m.wear_rate > h.wear_rate) {
            err(
                "race.compounds",
                "wear rates must be ordered S > M > H".into(),
            );
        }
        for (name, c) in [("S", s), ("M", m), ("H", h)] {
            let worst = 1.0 + c.mass_wear_coupling_per_kg
                * (self.car_mass_empty_kg - self.reference_mass_kg);
            if worst <= 0.0 {
                err(
                    &format!("race.compounds.{name}.mass_wear_coupling_per_kg"),
                    "wear multiplier becomes non-positive at the empty car mass".into(),
                );
            }
            if c.wear_time_lin_s < 0.0 || c.wear_time_quad_s < 0.0 {
                err(
                    &format!("race.compounds.{name}"),
                    "wear-to-time coefficients must be non-negative".into(),
                );
            }
        }
        if let Some(t) = &self.traffic {
            if t.opponent_handicap_s < 0.0 {
                err("race.traffic.opponent_handicap_s", "must be non-negative".into());
            }
            if !(t.peak_gap_s > 0.0 && t.peak_gap_s < t.clear_gap_s) {
                err(
                    "race.traffic.peak_gap_s",
                    format!("need 0 < peak {} < clear {}", t.peak_gap_s, t.clear_gap_s),
                );
            }
            if t.peak_penalty_s < 0.0 {
                err("race.traffic.peak_penalty_s", "must be non-negative".into());
            }
            if t.initial_gap_s <= 0.0 {
                err("race.traffic.initial_gap_s", "must be positive".into());
            }
            if !t.reference_lap_time_s.is_finite() || t.reference_lap_time_s <= 0.0 {
                err("race.traffic.reference_lap_time_s", "must be positive".into());
            }
        }
        errs
    }

    pub fn validated(self) -> Result<RaceConfig> {
        let errs = self.validate();
        match errs.into_iter().next() {
            None => Ok(self),
            Some((path, message)) => Err(Error::Config { path, message }),
        }
    }
}

/// Structured view of the race state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RaceState {
    pub battery_mj: f64,
    pub fuel_mj: f64,
    pub mass_kg: f64,
    pub tire_wear: f64,
    pub compound: Compound,
    pub lap: usize,
    pub race_time_s: f64,
    /// Present only in traffic mode; positive when behind the opponent.
    pub gap_s: Option<f64>,
}

impl RaceState {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![
            self.battery_mj,
            self.fuel_mj,
            self.mass_kg,
            self.tire_wear,
            self.compound.label(),
            self.lap as f64,
            self.race_time_s,
        ];
        if let Some(g) = self.gap_s {
            v.push(g);
        }
        v
    }

    pub fn from_slice(x: &[f64]) -> RaceState {
        RaceState {
            battery_mj: x[idx::BATTERY],
            fuel_mj: x[idx::FUEL],
            mass_kg: x[idx::MASS],
            tire_wear: x[idx::WEAR],
            compound: Compound::from_label(x[idx::COMPOUND]),
            lap: x[idx::LAP].round() as usize,
            race_time_s: x[idx::RACE_TIME],
            gap_s: x.get(idx::GAP).copied(),
        }
    }
}

/// Starting state for a race under the given config.
pub fn initial_state(config: &RaceConfig, traffic: bool) -> RaceState {
    RaceState {
        battery_mj: config.battery_initial_mj,
        fuel_mj: config.fuel_energy_race_mj,
        mass_kg: config.initial_mass_kg(),
        tire_wear: 0.0,
        compound: config.start_compound,
        lap: 0,
        race_time_s: 0.0,
        gap_s: traffic.then_some(GAP_INACTIVE),
    }
}

/// Nominal lap time per the lap-time model: base + mass penalty - fuel
/// benefit - deployment benefit + pit loss + wear penalty. The pit lap is
/// driven on the old tires, so the wear term uses the current compound.
pub fn lap_time(config: &RaceConfig, x: &[f64], batt_mj: f64, fuel_mj: f64, ps: usize) -> f64 {
    let compound = Compound::from_label(x[idx::COMPOUND]);
    let cp = config.compounds.get(compound);
    let mass_term =
        config.mass_sensitivity_s_per_kg * (x[idx::MASS] - config.reference_mass_kg);
    let fuel_gain = config.fuel_gain_lin_s_per_mj * fuel_mj
        - config.fuel_gain_quad_s_per_mj2 * fuel_mj * fuel_mj;
    // deployment = positive part of -batt, harvest = positive part of +batt,
    // both smoothed so the model stays C^1
    let deploy = smooth_relu(-batt_mj, config.deploy_smoothing_mj2);
    let deploy_gain = config.battery_deploy_gain_s_per_mj
        * (deploy - config.battery_deploy_saturation_per_mj * deploy * deploy);
    let charge_drag = config.battery_charge_drag_s_per_mj
        * smooth_relu(batt_mj, config.deploy_smoothing_mj2);
    let pit = if ps != 0 { config.pit_loss_s } else { 0.0 };
    let tw = x[idx::WEAR];
    let wear_term = cp.offset_s + cp.wear_time_lin_s * tw + cp.wear_time_quad_s * tw * tw;
    config.base_lap_time_s + mass_term - fuel_gain - deploy_gain + charge_drag + pit + wear_term
}

/// Dirty-air penalty as a function of the gap to the car ahead: zero at and
/// below zero gap, a smooth bump peaking at `peak_gap_s`, zero beyond
/// `clear_gap_s`. Continuously differentiable everywhere.
pub fn traffic_penalty(params: &TrafficParams, gap_s: f64) -> f64 {
    let smoothstep = |t: f64| 3.0 * t * t - 2.0 * t * t * t;
    if gap_s <= 0.0 || gap_s >= params.clear_gap_s {
        0.0
    } else if gap_s < params.peak_gap_s {
        params.peak_penalty_s * smoothstep(gap_s / params.peak_gap_s)
    } else {
        params.peak_penalty_s
            * smoothstep((params.clear_gap_s - gap_s) / (params.clear_gap_s - params.peak_gap_s))
    }
}

/// d traffic_penalty / d gap.
pub fn traffic_penalty_deriv(params: &TrafficParams, gap_s: f64) -> f64 {
    let smoothstep_d = |t: f64| 6.0 * t - 6.0 * t * t;
    if gap_s <= 0.0 || gap_s >= params.clear_gap_s {
        0.0
    } else if gap_s < params.peak_gap_s {
        params.peak_penalty_s * smoothstep_d(gap_s / params.peak_gap_s) / params.peak_gap_s
    } else {
        let w = params.clear_gap_s - params.peak_gap_s;
        -params.peak_penalty_s * smoothstep_d((params.clear_gap_s - gap_s) / w) / w
    }
}

/// Gap recursion: new gap = gap + (own lap time) - (opponent lap time).
pub fn gap_update(gap_s: f64, own_lap_s: f64, opponent_lap_s: f64) -> f64 {
    gap_s + own_lap_s - opponent_lap_s
}

/// Ego lap time in traffic: nominal lap time plus the dirty-air penalty at
/// the current gap. Inactive (far) gaps contribute nothing.
pub fn traffic_lap_time(config: &RaceConfig, x: &[f64], batt: f64, fuel: f64, ps: usize) -> f64 {
    let base = lap_time(config, x, batt, fuel, ps);
    match (&config.traffic, x.get(idx::GAP)) {
        (Some(t), Some(&gap)) if gap < GAP_ACTIVE_BELOW => base + traffic_penalty(t, gap),
        _ => base,
    }
}

fn wear_increment(config: &RaceConfig, compound: Compound, mass_kg: f64) -> f64 {
    let cp = config.compounds.get(compound);
    cp.wear_rate
        * (1.0 + cp.mass_wear_coupling_per_kg * (mass_kg - config.reference_mass_kg))
}

/// One lap of the race dynamics. `traffic` selects the extended state with
/// the gap recursion; the energy rows are clip-free (constraints enforce the
/// regulatory bounds).
pub fn dynamics_step(config: &RaceConfig, x: &[f64], action: &HybridAction, traffic: bool) -> Vec<f64> {
    let batt = action.continuous[0];
    let fuel = action.continuous[1];
    let ps = action.discrete;
    let compound = Compound::from_label(x[idx::COMPOUND]);
    let t_nominal = lap_time(config, x, batt, fuel, ps);

    let mut next = x.to_vec();
    next[idx::BATTERY] = x[idx::BATTERY] + batt;
    next[idx::FUEL] = x[idx::FUEL] - fuel;
    next[idx::MASS] = x[idx::MASS] - config.fuel_mass_per_mj_kg * fuel;
    if ps == 0 {
        next[idx::WEAR] = x[idx::WEAR] + wear_increment(config, compound, x[idx::MASS]);
        // compound unchanged
    } else {
        next[idx::WEAR] = 0.0;
        next[idx::COMPOUND] = Compound::from_pit(ps).label();
    }
    next[idx::LAP] = x[idx::LAP] + 1.0;

    if traffic {
        let params = config.traffic.as_ref().expect("traffic params");
        let gap = x[idx::GAP];
        if gap >= GAP_ACTIVE_BELOW {
            // opponent not yet encountered; appears at the first stop
            next[idx::RACE_TIME] = x[idx::RACE_TIME] + t_nominal;
            next[idx::GAP] = if ps != 0 { params.initial_gap_s } else { gap };
        } else {
            let ego = t_nominal + traffic_penalty(params, gap);
            let opponent = params.reference_lap_time_s + params.opponent_handicap_s;
            next[idx::RACE_TIME] = x[idx::RACE_TIME] + ego;
            next[idx::GAP] = gap_update(gap, ego, opponent);
        }
    } else {
        next[idx::RACE_TIME] = x[idx::RACE_TIME] + t_nominal;
    }
    next
}

/// Stage cost: the lap time actually driven (with dirty air in traffic mode).
pub fn stage_cost(config: &RaceConfig, x: &[f64], action: &HybridAction, traffic: bool) -> f64 {
    let batt = action.continuous[0];
    let fuel = action.continuous[1];
    if traffic {
        traffic_lap_time(config, x, batt, fuel, action.discrete)
    } else {
        lap_time(config, x, batt, fuel, action.discrete)
    }
}

/// d lap_time w.r.t. (battery alloc, fuel alloc) at fixed discrete input.
fn lap_time_input_grad(config: &RaceConfig, batt: f64, fuel: f64) -> (f64, f64) {
    let deploy = smooth_relu(-batt, config.deploy_smoothing_mj2);
    let d_batt = config.battery_deploy_gain_s_per_mj
        * (1.0 - 2.0 * config.battery_deploy_saturation_per_mj * deploy)
        * smooth_relu_deriv(-batt, config.deploy_smoothing_mj2)
        + config.battery_charge_drag_s_per_mj
            * smooth_relu_deriv(batt, config.deploy_smoothing_mj2);
    let d_fuel =
        -(config.fuel_gain_lin_s_per_mj - 2.0 * config.fuel_gain_quad_s_per_mj2 * fuel);
    (d_batt, d_fuel)
}

/// d lap_time w.r.t. state (mass and wear are the only smooth dependencies).
fn lap_time_state_grad(config: &RaceConfig, x: &[f64], dim: usize) -> Vec<f64> {
    let cp = config.compounds.get(Compound::from_label(x[idx::COMPOUND]));
    let mut g = vec![0.0; dim];
    g[idx::MASS] = config.mass_sensitivity_s_per_kg;
    g[idx::WEAR] = cp.wear_time_lin_s + 2.0 * cp.wear_time_quad_s * x[idx::WEAR];
    g
}

/// Analytic Jacobians (df/dx, df/du_c) of the race dynamics at fixed PS.
/// The battery/fuel/mass rows are constant (affine sub-dynamics).
pub fn dynamics_jacobians(
    config: &RaceConfig,
    x: &[f64],
    action: &HybridAction,
    traffic: bool,
) -> (Mat, Mat) {
    let n = config.state_dim(traffic);
    let batt = action.continuous[0];
    let fuel = action.continuous[1];
    let ps = action.discrete;
    let compound = Compound::from_label(x[idx::COMPOUND]);
    let cp = config.compounds.get(compound);

    let mut a = Mat::zeros(n, n);
    let mut b = Mat::zeros(n, N_CONTINUOUS);

    a.set(idx::BATTERY, idx::BATTERY, 1.0);
    b.set(idx::BATTERY, 0, 1.0);
    a.set(idx::FUEL, idx::FUEL, 1.0);
    b.set(idx::FUEL, 1, -1.0);
    a.set(idx::MASS, idx::MASS, 1.0);
    b.set(idx::MASS, 1, -config.fuel_mass_per_mj_kg);
    if ps == 0 {
        a.set(idx::WEAR, idx::WEAR, 1.0);
        a.set(idx::WEAR, idx::MASS, cp.wear_rate * cp.mass_wear_coupling_per_kg);
        a.set(idx::COMPOUND, idx::COMPOUND, 1.0);
    }
    a.set(idx::LAP, idx::LAP, 1.0);

    // race-time row: T' = T + lap time (+ penalty in traffic)
    let lt_state = lap_time_state_grad(config, x, n);
    let (d_batt, d_fuel) = lap_time_input_grad(config, batt, fuel);
    a.set(idx::RACE_TIME, idx::RACE_TIME, 1.0);
    for (j, &g) in lt_state.iter().enumerate() {
        if g != 0.0 {
            a.set(idx::RACE_TIME, j, g);
        }
    }
    b.set(idx::RACE_TIME, 0, d_batt);
    b.set(idx::RACE_TIME, 1, d_fuel);

    if traffic {
        let params = config.traffic.as_ref().expect("traffic params");
        let gap = x[idx::GAP];
        if gap >= GAP_ACTIVE_BELOW {
            // gap row constant: either held or reset to the initial gap
            if ps == 0 {
                a.set(idx::GAP, idx::GAP, 1.0);
            }
        } else {
            let pd = traffic_penalty_deriv(params, gap);
            a.set(idx::RACE_TIME, idx::GAP, pd);
            // gap' = gap + (lap time + penalty) - opponent
            a.set(idx::GAP, idx::GAP, 1.0 + pd);
            for (j, &g) in lt_state.iter().enumerate() {
                if g != 0.0 {
                    a.set(idx::GAP, j, g);
                }
            }
            b.set(idx::GAP, 0, d_batt);
            b.set(idx::GAP, 1, d_fuel);
        }
    }
    (a, b)
}

/// Gradients of the stage cost (dl/dx, dl/du_c) at fixed PS.
pub fn stage_cost_gradients(
    config: &RaceConfig,
    x: &[f64],
    action: &HybridAction,
    traffic: bool,
) -> (Vec<f64>, Vec<f64>) {
    let n = config.state_dim(traffic);
    let mut dx = lap_time_state_grad(config, x, n);
    let (d_batt, d_fuel) = lap_time_input_grad(config, action.continuous[0], action.continuous[1]);
    if traffic {
        if let (Some(params), Some(&gap)) = (&config.traffic, x.get(idx::GAP)) {
            if gap < GAP_ACTIVE_BELOW {
                dx[idx::GAP] = traffic_penalty_deriv(params, gap);
            }
        }
    }
    (dx, vec![d_batt, d_fuel])
}

/// Regulatory state constraints as residuals (feasible iff all <= 0):
/// battery within [0, capacity], enough fuel to finish at minimum allocation,
/// fuel not above the race budget. Affine in the stacked inputs under
/// shooting.
pub fn state_constraints(config: &RaceConfig, x: &[f64]) -> Vec<f64> {
    let (fuel_min, _) = config.fuel_alloc_bounds_mj;
    let laps_remaining = (config.n_laps as f64 - x[idx::LAP]).max(0.0);
    vec![
        -x[idx::BATTERY],
        x[idx::BATTERY] - config.battery_capacity_mj,
        laps_remaining * fuel_min - x[idx::FUEL],
        x[idx::FUEL] - config.fuel_energy_race_mj,
    ]
}

pub const CONSTRAINT_DIM: usize = 4;

/// Rows of d(state_constraints)/dx; constant for this model.
pub fn state_constraint_jacobian(config: &RaceConfig, traffic: bool) -> Mat {
    let n = config.state_dim(traffic);
    let mut j = Mat::zeros(CONSTRAINT_DIM, n);
    j.set(0, idx::BATTERY, -1.0);
    j.set(1, idx::BATTERY, 1.0);
    j.set(2, idx::FUEL, -1.0);
    j.set(2, idx::LAP, -config.fuel_alloc_bounds_mj.0);
    j.set(3, idx::FUEL, 1.0);
    j
}

/// Project a hybrid action into the per-state feasible box: battery transfer
/// limited by the store, fuel limited by the minimum allocation still needed
/// to finish. From any feasible state the projected box is non-empty.
pub fn clip_action_to_state(config: &RaceConfig, x: &[f64], mut action: HybridAction) -> HybridAction {
    let (bmin, bmax) = config.battery_alloc_bounds_mj;
    let (fmin, fmax) = config.fuel_alloc_bounds_mj;
    let laps_after = (config.n_laps as f64 - x[idx::LAP] - 1.0).max(0.0);

    let b_lo = bmin.max(-x[idx::BATTERY].max(0.0));
    let b_hi = bmax.min((config.battery_capacity_mj - x[idx::BATTERY]).max(0.0));
    let f_hi = fmax.min(x[idx::FUEL] - laps_after * fmin).max(fmin);

    action.continuous[0] = action.continuous[0].clamp(b_lo, b_hi.max(b_lo));
    action.continuous[1] = action.continuous[1].clamp(fmin, f_hi);
    action
}

/// Normalization ranges for network inputs, per state dimension.
pub fn state_bounds(config: &RaceConfig, traffic: bool) -> Vec<(f64, f64)> {
    let max_wear = config.compounds.s.wear_rate * 1.5 * config.n_laps as f64;
    let max_time = config.n_laps as f64 * (config.base_lap_time_s + config.pit_loss_s);
    let mut v = vec![
        (0.0, config.battery_capacity_mj),
        (0.0, config.fuel_energy_race_mj),
        (config.car_mass_empty_kg, config.initial_mass_kg()),
        (0.0, max_wear),
        (0.0, 2.0),
        (0.0, config.n_laps as f64),
        (0.0, max_time),
    ];
    if traffic {
        v.push((-100.0, GAP_INACTIVE));
    }
    v
}

/// Build the hybrid MDP for this race configuration.
pub fn mdp_spec(config: Arc<RaceConfig>, traffic: bool) -> MdpSpec {
    if traffic {
        assert!(config.traffic.is_some(), "traffic mode needs traffic params");
    }
    let dyn_cfg = config.clone();
    let cost_cfg = config.clone();
    let con_cfg = config.clone();
    let jac_cfg = config.clone();
    let cgrad_cfg = config.clone();
    let conjac_cfg = config.clone();
    let clip_cfg = config.clone();
    MdpSpec {
        state_dim: config.state_dim(traffic),
        continuous_bounds: vec![config.battery_alloc_bounds_mj, config.fuel_alloc_bounds_mj],
        discrete_count: N_DISCRETE,
        discount: 0.9999,
        horizon: config.n_laps,
        dynamics: Arc::new(move |x, a| dynamics_step(&dyn_cfg, x, a, traffic)),
        stage_cost: Arc::new(move |x, a| stage_cost(&cost_cfg, x, a, traffic)),
        state_constraints: Arc::new(move |x| state_constraints(&con_cfg, x)),
        constraint_dim: CONSTRAINT_DIM,
        affine_constraints: true,
        state_bounds: state_bounds(&config, traffic),
        smooth: Some(SmoothModel {
            dynamics_jacobians: Arc::new(move |x, a| dynamics_jacobians(&jac_cfg, x, a, traffic)),
            cost_gradients: Arc::new(move |x, a| stage_cost_gradients(&cgrad_cfg, x, a, traffic)),
            constraint_jacobian: Arc::new(move |_| state_constraint_jacobian(&conjac_cfg, traffic)),
        }),
        action_projection: Some(Arc::new(move |x, a| clip_action_to_state(&clip_cfg, x, a))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn desk_state() -> Vec<f64> {
        initial_state(&RaceConfig::desk(), false).to_vec()
    }

    #[test]
    fn desk_config_is_valid() {
        assert!(RaceConfig::desk().validate().is_empty());
        assert!(RaceConfig::desk_traffic().validate().is_empty());
    }

    #[test]
    fn validate_reports_field_paths() {
        let mut cfg = RaceConfig::desk();
        cfg.fuel_alloc_bounds_mj = (3.5, 3.6);
        // 20 * 3.5 = 70 > 60: terminal law infeasible
        let errs = cfg.validate();
        assert!(errs.iter().any(|(p, _)| p == "race.fuel_alloc_bounds_mj"));

        let mut cfg = RaceConfig::desk();
        cfg.compounds.m.offset_s = -1.0;
        let errs = cfg.validate();
        assert!(errs.iter().any(|(p, _)| p == "race.compounds"));

        let mut cfg = RaceConfig::desk_traffic();
        cfg.traffic.as_mut().unwrap().peak_gap_s = 5.0;
        let errs = cfg.validate();
        assert!(errs.iter().any(|(p, _)| p == "race.traffic.peak_gap_s"));
    }

    #[test]
    fn pit_adds_exact_loss() {
        let cfg = RaceConfig::desk();
        let x = desk_state();
        let t_stay = lap_time(&cfg, &x, 0.0, 3.0, 0);
        let t_pit = lap_time(&cfg, &x, 0.0, 3.0, 1);
        assert_eq!(t_pit - t_stay, cfg.pit_loss_s);
    }

    #[test]
    fn fresh_tires_have_no_wear_penalty() {
        let cfg = RaceConfig::desk();
        let mut x = desk_state();
        x[idx::WEAR] = 0.0;
        let fresh = lap_time(&cfg, &x, 0.0, 3.0, 0);
        x[idx::WEAR] = 4.0;
        let worn = lap_time(&cfg, &x, 0.0, 3.0, 0);
        let cp = cfg.compounds.get(cfg.start_compound);
        let expected = cp.wear_time_lin_s * 4.0 + cp.wear_time_quad_s * 16.0;
        assert!((worn - fresh - expected).abs() < 1e-12);
    }

    #[test]
    fn lap_time_monotone_in_wear() {
        let cfg = RaceConfig::desk();
        let mut x = desk_state();
        let mut prev = f64::NEG_INFINITY;
        for w in 0..30 {
            x[idx::WEAR] = w as f64 * 0.5;
            let t = lap_time(&cfg, &x, 0.2, 3.0, 0);
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn compound_ordering_at_equal_wear_and_mass() {
        let cfg = RaceConfig::desk();
        let mut x = desk_state();
        x[idx::WEAR] = 2.0;
        let mut times = Vec::new();
        let mut wear_steps = Vec::new();
        for c in Compound::all() {
            x[idx::COMPOUND] = c.label();
            times.push(lap_time(&cfg, &x, 0.0, 3.0, 0));
            wear_steps.push(wear_increment(&cfg, c, x[idx::MASS]));
        }
        assert!(times[0] < times[1] && times[1] < times[2], "lap times {times:?}");
        assert!(
            wear_steps[0] > wear_steps[1] && wear_steps[1] > wear_steps[2],
            "wear {wear_steps:?}"
        );
    }

    #[test]
    fn dynamics_basic_rules() {
        let cfg = RaceConfig::desk();
        let x = desk_state();
        // zero battery allocation leaves the store unchanged
        let n = dynamics_step(&cfg, &x, &HybridAction::new(vec![0.0, 3.0], 0), false);
        assert_eq!(n[idx::BATTERY], x[idx::BATTERY]);
        // PS=2 switches to medium with zero wear
        let worn = {
            let mut s = x.clone();
            s[idx::WEAR] = 5.0;
            s
        };
        let n = dynamics_step(&cfg, &worn, &HybridAction::new(vec![0.0, 3.0], 2), false);
        assert_eq!(n[idx::WEAR], 0.0);
        assert_eq!(Compound::from_label(n[idx::COMPOUND]), Compound::M);
        // staying out keeps the compound
        let n = dynamics_step(&cfg, &worn, &HybridAction::new(vec![0.0, 3.0], 0), false);
        assert_eq!(Compound::from_label(n[idx::COMPOUND]), cfg.start_compound);
        assert!(n[idx::WEAR] > worn[idx::WEAR]);
    }

    /// Spreadsheet-style recomputation of a 10-lap run, written directly
    /// from the model definition without calling any production code.
    #[test]
    fn ten_lap_totals_match_spreadsheet_recomputation() {
        let cfg = RaceConfig::desk();
        let plan: Vec<(f64, f64, usize)> = vec![
            (0.0, 3.2, 0),
            (-0.5, 3.1, 0),
            (0.3, 3.0, 0),
            (-1.0, 3.3, 0),
            (0.0, 2.9, 2),
            (0.8, 3.0, 0),
            (-0.8, 3.2, 0),
            (0.0, 3.0, 0),
            (-0.2, 2.8, 3),
            (0.1, 3.0, 0),
        ];

        // independent recomputation
        let mut e_b = cfg.battery_initial_mj;
        let mut e_f = cfg.fuel_energy_race_mj;
        let mut m = cfg.car_mass_empty_kg + cfg.fuel_mass_per_mj_kg * e_f;
        let mut tw = 0.0_f64;
        let mut comp = 0usize; // 0=S 1=M 2=H
        let mut total = 0.0;
        for &(db, df, ps) in &plan {
            let (off, rate, coup, lin, quad) = match comp {
                0 => (0.0, 1.0, 0.002, 0.15, 0.01),
                1 => (0.4, 0.7, 0.002, 0.10, 0.005),
                _ => (0.8, 0.5, 0.002, 0.08, 0.003),
            };
            let fuel_gain = 0.8 * df - 0.05 * df * df;
            let d = 0.5 * (-db + ((-db) * (-db) + 1e-4_f64).sqrt());
            let dep = 0.4 * (d - 0.05 * d * d);
            let drag = 0.5 * 0.5 * (db + (db * db + 1e-4_f64).sqrt());
            let lap = 80.0 + 0.03 * (m - 740.0) - fuel_gain - dep + drag
                + if ps != 0 { 18.0 } else { 0.0 }
                + off
                + lin * tw
                + quad * tw * tw;
            total += lap;
            e_b += db;
            e_f -= df;
            m -= df;
            if ps == 0 {
                tw += rate * (1.0 + coup * (m + df - 740.0)); // wear uses pre-burn mass
                // recompute with pre-burn mass: m before subtraction was m + df
            } else {
                tw = 0.0;
                comp = ps - 1;
            }
        }

        // production path
        let traffic = false;
        let mut x = initial_state(&cfg, traffic).to_vec();
        let mut total_prod = 0.0;
        for &(db, df, ps) in &plan {
            let a = HybridAction::new(vec![db, df], ps);
            total_prod += stage_cost(&cfg, &x, &a, traffic);
            x = dynamics_step(&cfg, &x, &a, traffic);
        }
        assert!(
            (total - total_prod).abs() < 1e-9,
            "spreadsheet {total} vs production {total_prod}"
        );
        assert!((x[idx::BATTERY] - e_b).abs() < 1e-12);
        assert!((x[idx::FUEL] - e_f).abs() < 1e-12);
        assert!((x[idx::MASS] - m).abs() < 1e-12);
        assert!((x[idx::WEAR] - tw).abs() < 1e-12);
    }

    #[test]
    fn compound_offset_is_included_in_lap_time() {
        // guards the spreadsheet test's offset handling
        let cfg = RaceConfig::desk();
        let mut x = desk_state();
        x[idx::COMPOUND] = Compound::M.label();
        let tm = lap_time(&cfg, &x, 0.0, 3.0, 0);
        x[idx::COMPOUND] = Compound::S.label();
        let ts = lap_time(&cfg, &x, 0.0, 3.0, 0);
        assert!((tm - ts - 0.4).abs() < 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let cfg = RaceConfig::desk_traffic();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for traffic in [false, true] {
            let n = cfg.state_dim(traffic);
            for _ in 0..20 {
                let mut x = initial_state(&cfg, traffic).to_vec();
                x[idx::BATTERY] = rng.random_range(0.5..3.5);
                x[idx::FUEL] = rng.random_range(20.0..60.0);
                x[idx::MASS] = rng.random_range(690.0..740.0);
                x[idx::WEAR] = rng.random_range(0.0..8.0);
                x[idx::COMPOUND] = rng.random_range(0..3) as f64;
                x[idx::LAP] = rng.random_range(0..15) as f64;
                x[idx::RACE_TIME] = rng.random_range(0.0..1500.0);
                if traffic {
                    x[idx::GAP] = rng.random_range(0.1..3.0);
                }
                let a = HybridAction::new(
                    vec![rng.random_range(-1.2..1.2), rng.random_range(2.5..3.5)],
                    if rng.random_range(0.0..1.0) < 0.3 { rng.random_range(1..4) } else { 0 },
                );
                let (ja, jb) = dynamics_jacobians(&cfg, &x, &a, traffic);
                let h = 1e-6;
                // df/dx
                for j in 0..n {
                    // skip non-smooth coordinates (compound label, lap counter)
                    if j == idx::COMPOUND || j == idx::LAP {
                        continue;
                    }
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fp = dynamics_step(&cfg, &xp, &a, traffic);
                    let fm = dynamics_step(&cfg, &xm, &a, traffic);
                    for i in 0..n {
                        let fd = (fp[i] - fm[i]) / (2.0 * h);
                        let an = ja.get(i, j);
                        let denom = fd.abs().max(an.abs()).max(1.0);
                        assert!(
                            (fd - an).abs() / denom < 1e-6,
                            "df[{i}]/dx[{j}] fd {fd} vs {an} (traffic={traffic})"
                        );
                    }
                }
                // df/du
                for j in 0..N_CONTINUOUS {
                    let mut ap = a.clone();
                    let mut am = a.clone();
                    ap.continuous[j] += h;
                    am.continuous[j] -= h;
                    let fp = dynamics_step(&cfg, &x, &ap, traffic);
                    let fm = dynamics_step(&cfg, &x, &am, traffic);
                    for i in 0..n {
                        let fd = (fp[i] - fm[i]) / (2.0 * h);
                        let an = jb.get(i, j);
                        let denom = fd.abs().max(an.abs()).max(1.0);
                        assert!(
                            (fd - an).abs() / denom < 1e-6,
                            "df[{i}]/du[{j}] fd {fd} vs {an} (traffic={traffic})"
                        );
                    }
                }
                // cost gradients
                let (dx, du) = stage_cost_gradients(&cfg, &x, &a, traffic);
                for j in 0..n {
                    if j == idx::COMPOUND || j == idx::LAP {
                        continue;
                    }
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (stage_cost(&cfg, &xp, &a, traffic)
                        - stage_cost(&cfg, &xm, &a, traffic))
                        / (2.0 * h);
                    let denom = fd.abs().max(dx[j].abs()).max(1.0);
                    assert!((fd - dx[j]).abs() / denom < 1e-6);
                }
                for j in 0..N_CONTINUOUS {
                    let mut ap = a.clone();
                    let mut am = a.clone();
                    ap.continuous[j] += h;
                    am.continuous[j] -= h;
                    let fd = (stage_cost(&cfg, &x, &ap, traffic)
                        - stage_cost(&cfg, &x, &am, traffic))
                        / (2.0 * h);
                    let denom = fd.abs().max(du[j].abs()).max(1.0);
                    assert!((fd - du[j]).abs() / denom < 1e-6);
                }
            }
        }
    }

    #[test]
    fn battery_row_exact_and_wear_independent_of_battery() {
        let cfg = RaceConfig::desk();
        let x = desk_state();
        let a = HybridAction::new(vec![0.5, 3.0], 0);
        let (ja, jb) = dynamics_jacobians(&cfg, &x, &a, false);
        assert_eq!(jb.get(idx::BATTERY, 0), 1.0);
        assert_eq!(jb.get(idx::WEAR, 0), 0.0);
        assert_eq!(ja.get(idx::WEAR, idx::BATTERY), 0.0);
    }

    #[test]
    fn traffic_penalty_paper_anchors() {
        let t = RaceConfig::desk_traffic().traffic.unwrap();
        assert!((traffic_penalty(&t, 0.6) - 0.5).abs() < 0.01);
        assert_eq!(traffic_penalty(&t, 2.5), 0.0);
        assert_eq!(traffic_penalty(&t, 3.0), 0.0);
        assert_eq!(traffic_penalty(&t, 0.0), 0.0);
        assert_eq!(traffic_penalty(&t, -1.0), 0.0);
    }

    #[test]
    fn traffic_penalty_is_c1() {
        let t = RaceConfig::desk_traffic().traffic.unwrap();
        // derivative matches finite differences across the junctions
        for i in 0..701 {
            let g = -0.5 + i as f64 * 0.005;
            let h = 1e-7;
            let fd = (traffic_penalty(&t, g + h) - traffic_penalty(&t, g - h)) / (2.0 * h);
            let an = traffic_penalty_deriv(&t, g);
            assert!((fd - an).abs() < 1e-5, "gap {g}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn gap_update_arithmetic() {
        assert_eq!(gap_update(2.0, 90.0, 90.5), 1.5);
        assert_eq!(gap_update(1.0, 88.0, 88.0), 1.0);
    }

    #[test]
    fn gap_initialized_at_first_stop() {
        let cfg = RaceConfig::desk_traffic();
        let x = initial_state(&cfg, true).to_vec();
        assert_eq!(x[idx::GAP], GAP_INACTIVE);
        // no stop: gap stays inactive exactly
        let n = dynamics_step(&cfg, &x, &HybridAction::new(vec![0.0, 3.0], 0), true);
        assert_eq!(n[idx::GAP], GAP_INACTIVE);
        // first stop: gap resets to the configured 2 s
        let n = dynamics_step(&cfg, &x, &HybridAction::new(vec![0.0, 3.0], 1), true);
        assert_eq!(n[idx::GAP], 2.0);
    }

    #[test]
    fn traffic_lap_time_additivity() {
        let cfg = RaceConfig::desk_traffic();
        let t = cfg.traffic.clone().unwrap();
        let mut x = initial_state(&cfg, true).to_vec();
        x[idx::GAP] = 5.0;
        let nominal = lap_time(&cfg, &x, 0.0, 3.0, 0);
        assert_eq!(traffic_lap_time(&cfg, &x, 0.0, 3.0, 0), nominal);
        x[idx::GAP] = 0.6;
        let in_traffic = traffic_lap_time(&cfg, &x, 0.0, 3.0, 0);
        assert!((in_traffic - nominal - traffic_penalty(&t, 0.6)).abs() < 1e-15);
        assert!((in_traffic - nominal - 0.5).abs() < 0.01);
    }

    #[test]
    fn nominal_allocation_examples() {
        let mut cfg = RaceConfig::desk();
        cfg.fuel_energy_race_mj = 100.0;
        assert_eq!(cfg.nominal_fuel_allocation(), 5.0);
        // telescoping: allocating the nominal every lap drains to zero
        let cfg = RaceConfig::desk();
        let alloc = cfg.nominal_fuel_allocation();
        let mut x = initial_state(&cfg, false).to_vec();
        for _ in 0..cfg.n_laps {
            x = dynamics_step(&cfg, &x, &HybridAction::new(vec![0.0, alloc], 0), false);
        }
        assert!(x[idx::FUEL].abs() < 1e-9);
        // percent conversion round-trips
        let v = 3.3;
        assert!((cfg.fuel_alloc_from_percent(cfg.fuel_alloc_percent(v)) - v).abs() < 1e-12);
    }

    #[test]
    fn energy_accounting_is_exact_cumulative_sum() {
        let cfg = RaceConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = initial_state(&cfg, false).to_vec();
        let mut sum_b = 0.0;
        let mut sum_f = 0.0;
        for _ in 0..cfg.n_laps {
            let db = rng.random_range(-1.3..1.3);
            let df = rng.random_range(2.4..3.6);
            let ps = if rng.random_range(0.0..1.0) < 0.1 { 1 } else { 0 };
            x = dynamics_step(&cfg, &x, &HybridAction::new(vec![db, df], ps), false);
            sum_b += db;
            sum_f += df;
            // sequential adds vs one cumulative sum differ only in rounding
            assert!((x[idx::BATTERY] - (cfg.battery_initial_mj + sum_b)).abs() < 1e-12);
            assert!((x[idx::FUEL] - (cfg.fuel_energy_race_mj - sum_f)).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_keeps_states_feasible() {
        let cfg = RaceConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let mut x = initial_state(&cfg, false).to_vec();
            // random feasible-ish state
            x[idx::BATTERY] = rng.random_range(0.0..cfg.battery_capacity_mj);
            x[idx::LAP] = rng.random_range(0..cfg.n_laps) as f64;
            let remaining = cfg.n_laps as f64 - x[idx::LAP];
            x[idx::FUEL] =
                rng.random_range(remaining * cfg.fuel_alloc_bounds_mj.0..=cfg.fuel_energy_race_mj);
            let raw = HybridAction::new(
                vec![rng.random_range(-1.3..1.3), rng.random_range(2.4..3.6)],
                rng.random_range(0..4usize),
            );
            let a = clip_action_to_state(&cfg, &x, raw);
            let next = dynamics_step(&cfg, &x, &a, false);
            for (i, r) in state_constraints(&cfg, &next).iter().enumerate() {
                assert!(*r <= 1e-9, "constraint {i} violated: {r} (x={x:?}, a={a:?})");
            }
        }
    }

    #[test]
    fn constraint_jacobian_matches_residuals() {
        let cfg = RaceConfig::desk();
        let j = state_constraint_jacobian(&cfg, false);
        let x = desk_state();
        let h = 1e-6;
        for col in [idx::BATTERY, idx::FUEL, idx::LAP] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let gp = state_constraints(&cfg, &xp);
            let gm = state_constraints(&cfg, &xm);
            for row in 0..CONSTRAINT_DIM {
                let fd = (gp[row] - gm[row]) / (2.0 * h);
                assert!((fd - j.get(row, col)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn smoothness_scan_of_lap_time() {
        // derivative of lap time w.r.t. battery allocation is continuous
        // across zero (the deployment kink is smoothed)
        let cfg = RaceConfig::desk();
        let x = desk_state();
        let mut prev: Option<f64> = None;
        for i in 0..2001 {
            let db = -0.1 + 0.2 * i as f64 / 2000.0;
            let h = 1e-7;
            let fd = (lap_time(&cfg, &x, db + h, 3.0, 0) - lap_time(&cfg, &x, db - h, 3.0, 0))
                / (2.0 * h);
            if let Some(p) = prev {
                assert!(
                    (fd - p).abs() < 0.01,
                    "derivative jump at battery alloc {db}: {p} -> {fd}"
                );
            }
            prev = Some(fd);
        }
    }
}
