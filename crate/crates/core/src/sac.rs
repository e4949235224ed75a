//! Off-policy soft actor-critic on the full hybrid action space: a squashed
//! Gaussian for the continuous input and a categorical for the discrete
//! input, with twin critics carrying one output head per discrete action.
//!
//! Internally the algebra runs in reward convention (reward = -scaled cost),
//! reusing the standard SAC soft targets; the public surface exposes costs.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{HybridAction, MdpSpec, Transition};
use crate::net::{soft_update, ActivationKind, Adam, NetGrads, NetParams};

pub const POLICY_FORMAT_VERSION: u32 = 1;

const LN_2PI: f64 = 1.8378770664093453;
/// Pre-tanh values are clamped here; tanh(8) is still strictly inside (-1, 1)
/// in f64, so squashed samples never touch the bounds.
const PRE_TANH_CLAMP: f64 = 8.0;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        0.0
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// ln(1 - tanh(z)^2), numerically stable for large |z|.
fn ln_one_minus_tanh_sq(z: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - z - softplus(-2.0 * z))
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let log_probs = logits.iter().map(|&l| l - m - sum.ln()).collect();
    (probs, log_probs)
}

/// Actor: shared trunk, a (mean, log-std) pair per continuous dimension and
/// one logit per discrete action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorNet {
    pub net: NetParams,
    pub n_continuous: usize,
    pub n_discrete: usize,
    pub action_lo: Vec<f64>,
    pub action_hi: Vec<f64>,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

/// A sampled hybrid action with its log-densities and the categorical state.
#[derive(Debug, Clone)]
pub struct SampledAction {
    pub action: HybridAction,
    pub log_prob_continuous: f64,
    pub log_prob_discrete: f64,
    pub probs: Vec<f64>,
    pub entropy_discrete: f64,
}

/// Everything the actor update needs about one sampled action.
struct DetailedSample {
    action: HybridAction,
    noise: Vec<f64>,
    tanh: Vec<f64>,
    std: Vec<f64>,
    log_std_active: Vec<bool>,
    pre_tanh_active: Vec<bool>,
    log_prob_continuous: f64,
    probs: Vec<f64>,
    log_probs_discrete: Vec<f64>,
    entropy_discrete: f64,
}

impl ActorNet {
    pub fn seeded<R: Rng>(
        spec: &MdpSpec,
        hidden: &[usize],
        log_std_min: f64,
        log_std_max: f64,
        rng: &mut R,
    ) -> ActorNet {
        let n_c = spec.n_continuous();
        let n_d = spec.discrete_count;
        let mut dims = vec![spec.state_dim];
        dims.extend_from_slice(hidden);
        dims.push(2 * n_c + n_d);
        let (lo, hi): (Vec<f64>, Vec<f64>) = spec.state_bounds.iter().cloned().unzip();
        let net = NetParams::seeded(&dims, ActivationKind::Relu, ActivationKind::Identity, rng)
            .with_normalization(lo, hi);
        ActorNet {
            net,
            n_continuous: n_c,
            n_discrete: n_d,
            action_lo: spec.continuous_bounds.iter().map(|b| b.0).collect(),
            action_hi: spec.continuous_bounds.iter().map(|b| b.1).collect(),
            log_std_min,
            log_std_max,
        }
    }

    fn heads(&self, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>)> {
        let out = self.net.forward(state)?;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "actor head output".into(),
            });
        }
        let n_c = self.n_continuous;
        let mean = out[..n_c].to_vec();
        let mut log_std = Vec::with_capacity(n_c);
        let mut active = Vec::with_capacity(n_c);
        for &raw in &out[n_c..2 * n_c] {
            let clamped = raw.clamp(self.log_std_min, self.log_std_max);
            active.push(raw > self.log_std_min && raw < self.log_std_max);
            log_std.push(clamped);
        }
        let logits = out[2 * n_c..].to_vec();
        Ok((mean, log_std, logits, active))
    }

    fn squash(&self, i: usize, t: f64) -> f64 {
        self.action_lo[i] + 0.5 * (t + 1.0) * (self.action_hi[i] - self.action_lo[i])
    }

    fn sample_detailed<R: Rng>(&self, state: &[f64], rng: &mut R) -> Result<DetailedSample> {
        let (mean, log_std, logits, log_std_active) = self.heads(state)?;
        let n_c = self.n_continuous;
        let mut noise = Vec::with_capacity(n_c);
        let mut tanh = Vec::with_capacity(n_c);
        let mut std = Vec::with_capacity(n_c);
        let mut pre_tanh_active = Vec::with_capacity(n_c);
        let mut continuous = Vec::with_capacity(n_c);
        let mut log_prob_c = 0.0;
        for i in 0..n_c {
            let s = log_std[i].exp();
            let eta = standard_normal(rng);
            let z = mean[i] + s * eta;
            let zc = z.clamp(-PRE_TANH_CLAMP, PRE_TANH_CLAMP);
            let t = zc.tanh();
            let width = 0.5 * (self.action_hi[i] - self.action_lo[i]);
            log_prob_c += -0.5 * eta * eta
                - 0.5 * LN_2PI
                - log_std[i]
                - ln_one_minus_tanh_sq(zc)
                - width.ln();
            noise.push(eta);
            pre_tanh_active.push(z.abs() < PRE_TANH_CLAMP);
            tanh.push(t);
            std.push(s);
            continuous.push(self.squash(i, t));
        }
        let (probs, log_probs) = softmax(&logits);
        // categorical draw, deterministic given the rng stream
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut discrete = self.n_discrete - 1;
        for (d, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                discrete = d;
                break;
            }
        }
        let entropy_d = -probs
            .iter()
            .zip(&log_probs)
            .map(|(&p, &lp): (&f64, &f64)| if p > 0.0 { p * lp } else { 0.0 })
            .sum::<f64>();
        Ok(DetailedSample {
            action: HybridAction::new(continuous, discrete),
            noise,
            tanh,
            std,
            log_std_active,
            pre_tanh_active,
            log_prob_continuous: log_prob_c,
            probs,
            log_probs_discrete: log_probs,
            entropy_discrete: entropy_d,
        })
    }

    /// Stochastic sample with exact tanh-corrected log-densities.
    pub fn sample<R: Rng>(&self, state: &[f64], rng: &mut R) -> Result<SampledAction> {
        let d = self.sample_detailed(state, rng)?;
        let lp_d = d.log_probs_discrete[d.action.discrete];
        Ok(SampledAction {
            action: d.action,
            log_prob_continuous: d.log_prob_continuous,
            log_prob_discrete: lp_d,
            probs: d.probs,
            entropy_discrete: d.entropy_discrete,
        })
    }

    /// Deterministic evaluation: squashed mean and argmax logit.
    pub fn deterministic(&self, state: &[f64]) -> Result<HybridAction> {
        let (mean, _, logits, _) = self.heads(state)?;
        let continuous = mean
            .iter()
            .enumerate()
            .map(|(i, &m)| self.squash(i, m.clamp(-PRE_TANH_CLAMP, PRE_TANH_CLAMP).tanh()))
            .collect();
        let discrete = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(d, _)| d)
            .unwrap();
        Ok(HybridAction::new(continuous, discrete))
    }

    /// Log-density of the squashed Gaussian at an arbitrary in-bounds action.
    pub fn log_density_continuous(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let (mean, log_std, _, _) = self.heads(state)?;
        let mut lp = 0.0;
        for i in 0..self.n_continuous {
            let width = 0.5 * (self.action_hi[i] - self.action_lo[i]);
            let t = ((action[i] - self.action_lo[i]) / width - 1.0)
                .clamp(-0.999_999_999, 0.999_999_999);
            let z = 0.5 * ((1.0 + t) / (1.0 - t)).ln(); // atanh
            let s = log_std[i].exp();
            let eta = (z - mean[i]) / s;
            lp +=
                -0.5 * eta * eta - 0.5 * LN_2PI - log_std[i] - ln_one_minus_tanh_sq(z) - width.ln();
        }
        Ok(lp)
    }
}

/// Twin critics with one output head per discrete action; their slowly
/// updated target copies live in the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticNet {
    pub q1: NetParams,
    pub q2: NetParams,
    pub n_continuous: usize,
    pub n_discrete: usize,
}

impl CriticNet {
    pub fn seeded<R: Rng>(spec: &MdpSpec, hidden: &[usize], rng: &mut R) -> CriticNet {
        let n_c = spec.n_continuous();
        let n_d = spec.discrete_count;
        let mut dims = vec![spec.state_dim + n_c];
        dims.extend_from_slice(hidden);
        dims.push(n_d);
        let mut lo: Vec<f64> = spec.state_bounds.iter().map(|b| b.0).collect();
        let mut hi: Vec<f64> = spec.state_bounds.iter().map(|b| b.1).collect();
        lo.extend(spec.continuous_bounds.iter().map(|b| b.0));
        hi.extend(spec.continuous_bounds.iter().map(|b| b.1));
        let q1 = NetParams::seeded(&dims, ActivationKind::Relu, ActivationKind::Identity, rng)
            .with_normalization(lo.clone(), hi.clone());
        let q2 = NetParams::seeded(&dims, ActivationKind::Relu, ActivationKind::Identity, rng)
            .with_normalization(lo, hi);
        CriticNet {
            q1,
            q2,
            n_continuous: n_c,
            n_discrete: n_d,
        }
    }

    fn stack_input(&self, state: &[f64], action_c: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(state.len() + action_c.len());
        v.extend_from_slice(state);
        v.extend_from_slice(action_c);
        v
    }

    /// Per-head Q values (reward convention) of both twins.
    pub fn q_values(&self, state: &[f64], action_c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let input = self.stack_input(state, action_c);
        Ok((self.q1.forward(&input)?, self.q2.forward(&input)?))
    }

    /// Element-wise min over the twins (max of the twin costs).
    pub fn min_q(&self, state: &[f64], action_c: &[f64]) -> Result<Vec<f64>> {
        let (a, b) = self.q_values(state, action_c)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect())
    }

    /// Swap hidden activations for deployment.
    pub fn with_activation(&self, from: ActivationKind, to: ActivationKind) -> Result<CriticNet> {
        Ok(CriticNet {
            q1: self.q1.swap_activation(from, to)?,
            q2: self.q2.swap_activation(from, to)?,
            n_continuous: self.n_continuous,
            n_discrete: self.n_discrete,
        })
    }
}

/// Entropy temperatures for both action components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Temperatures {
    pub log_alpha_c: f64,
    pub log_alpha_d: f64,
    pub target_entropy_c: f64,
    pub target_entropy_d: f64,
}

impl Temperatures {
    pub fn alpha_c(&self) -> f64 {
        self.log_alpha_c.exp()
    }

    pub fn alpha_d(&self) -> f64 {
        self.log_alpha_d.exp()
    }
}

/// Soft state value in reward convention:
/// sum_d p_d minQ(x', a', d) - alpha_c log pi_c(a'|x') + alpha_d H(p).
pub fn soft_state_value(
    min_q_per_d: &[f64],
    probs: &[f64],
    log_prob_c: f64,
    entropy_d: f64,
    alpha_c: f64,
    alpha_d: f64,
) -> f64 {
    let expect_q: f64 = min_q_per_d.iter().zip(probs).map(|(q, p)| q * p).sum();
    expect_q - alpha_c * log_prob_c + alpha_d * entropy_d
}

/// Ring-buffer replay memory with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<StoredTransition>,
    capacity: usize,
    write: usize,
}

#[derive(Debug, Clone)]
pub struct StoredTransition {
    pub state: Vec<f64>,
    pub action: HybridAction,
    pub cost: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer {
            items: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            write: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: StoredTransition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.write] = t;
        }
        self.write = (self.write + 1) % self.capacity;
    }

    pub fn push_transition(&mut self, tr: &Transition, terminal: bool) {
        self.push(StoredTransition {
            state: tr.state.clone(),
            action: tr.action.clone(),
            cost: tr.cost,
            next_state: tr.next_state.clone(),
            terminal,
        });
    }

    pub fn sample_indices<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        (0..batch)
            .map(|_| rng.random_range(0..self.items.len()))
            .collect()
    }

    pub fn get(&self, i: usize) -> &StoredTransition {
        &self.items[i]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacConfig {
    pub episodes: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    /// Multiplies costs before they enter the critic regression.
    pub reward_scale: f64,
    /// Environment steps collected before updates start.
    pub warmup_steps: usize,
    /// One gradient update every this many environment steps.
    pub update_every: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub init_alpha_c: f64,
    pub init_alpha_d: f64,
    /// Defaults to -(n_continuous) when absent.
    pub target_entropy_c: Option<f64>,
    /// Defaults to 0.25 * ln(n_discrete) when absent.
    pub target_entropy_d: Option<f64>,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            episodes: 400,
            buffer_capacity: 100_000,
            batch_size: 128,
            gamma: 0.9999,
            tau: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            reward_scale: 0.1,
            warmup_steps: 500,
            update_every: 1,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![32, 32, 32, 32],
            log_std_min: -5.0,
            log_std_max: 2.0,
            init_alpha_c: 0.2,
            init_alpha_d: 0.2,
            target_entropy_c: None,
            target_entropy_d: None,
        }
    }
}

/// Deployment artifact: actor, twin critics and the conventions needed to
/// read costs out of them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub version: u32,
    pub actor: ActorNet,
    pub critic: CriticNet,
    pub gamma: f64,
    /// Costs were scaled by this factor before critic regression.
    pub cost_scale: f64,
}

impl TrainedPolicy {
    /// Terminal cost C(x, u_c | u_d) in original cost units: the element-wise
    /// max of the twin costs, i.e. -min Q / scale.
    pub fn terminal_cost(&self, state: &[f64], action_c: &[f64], discrete: usize) -> Result<f64> {
        let q = self.critic.min_q(state, action_c)?;
        Ok(-q[discrete] / self.cost_scale)
    }

    /// Gradient of the terminal cost w.r.t. (state, continuous action),
    /// following the twin that attains the max cost.
    pub fn terminal_cost_gradient(
        &self,
        state: &[f64],
        action_c: &[f64],
        discrete: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let input: Vec<f64> = state.iter().chain(action_c).copied().collect();
        let q1 = self.critic.q1.forward(&input)?;
        let q2 = self.critic.q2.forward(&input)?;
        let net = if q1[discrete] <= q2[discrete] {
            &self.critic.q1
        } else {
            &self.critic.q2
        };
        let g = net.input_gradient(&input, discrete)?;
        let scale = -1.0 / self.cost_scale;
        let dstate = g[..state.len()].iter().map(|v| v * scale).collect();
        let daction = g[state.len()..].iter().map(|v| v * scale).collect();
        Ok((dstate, daction))
    }

    /// Swap the critics' ReLU hidden layers for the smooth replacement used
    /// at deployment.
    pub fn deployed(&self, epsilon: f64) -> Result<TrainedPolicy> {
        Ok(TrainedPolicy {
            version: self.version,
            actor: self.actor.clone(),
            critic: self
                .critic
                .with_activation(ActivationKind::Relu, ActivationKind::SmoothRelu { epsilon })?,
            gamma: self.gamma,
            cost_scale: self.cost_scale,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serialization")
    }

    pub fn from_json(text: &str) -> Result<TrainedPolicy> {
        let p: TrainedPolicy =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if p.version != POLICY_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported policy format version {} (expected {})",
                p.version, POLICY_FORMAT_VERSION
            )));
        }
        Ok(p)
    }
}

/// Per-update diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct UpdateDiagnostics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_c: f64,
    pub alpha_d: f64,
    pub entropy_c_estimate: f64,
    pub entropy_d: f64,
}

/// Per-episode training log row.
#[derive(Debug, Clone, Copy)]
pub struct TrainLogRow {
    pub episode: usize,
    pub closed_loop_cost: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_c: f64,
    pub alpha_d: f64,
}

/// Mutable training state: online nets, targets, optimizers, temperatures.
pub struct Trainer {
    pub actor: ActorNet,
    pub critic: CriticNet,
    pub target: CriticNet,
    pub temps: Temperatures,
    opt_actor: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    cfg: SacConfig,
}

impl Trainer {
    pub fn new(spec: &MdpSpec, cfg: &SacConfig, rng: &mut ChaCha8Rng) -> Trainer {
        let actor =
            ActorNet::seeded(spec, &cfg.actor_hidden, cfg.log_std_min, cfg.log_std_max, rng);
        let critic = CriticNet::seeded(spec, &cfg.critic_hidden, rng);
        let target = critic.clone();
        let temps = Temperatures {
            log_alpha_c: cfg.init_alpha_c.ln(),
            log_alpha_d: cfg.init_alpha_d.ln(),
            target_entropy_c: cfg
                .target_entropy_c
                .unwrap_or(-(spec.n_continuous() as f64)),
            target_entropy_d: cfg
                .target_entropy_d
                .unwrap_or(0.25 * (spec.discrete_count as f64).ln()),
        };
        let opt_actor = Adam::new(&actor.net, cfg.lr_actor);
        let opt_q1 = Adam::new(&critic.q1, cfg.lr_critic);
        let opt_q2 = Adam::new(&critic.q2, cfg.lr_critic);
        Trainer {
            actor,
            critic,
            target,
            temps,
            opt_actor,
            opt_q1,
            opt_q2,
            cfg: cfg.clone(),
        }
    }

    /// Regression targets in cost convention: y = cost + gamma * next cost,
    /// where the next cost is the negated soft state value of the target
    /// critics; terminal transitions use y = cost.
    pub fn critic_targets<R: Rng>(
        &self,
        batch: &[&StoredTransition],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(batch.len());
        for tr in batch {
            if tr.terminal {
                out.push(tr.cost);
                continue;
            }
            let next = self.actor.sample_detailed(&tr.next_state, rng)?;
            let input = self
                .target
                .stack_input(&tr.next_state, &next.action.continuous);
            let t1 = self.target.q1.forward(&input)?;
            let t2 = self.target.q2.forward(&input)?;
            let min_q: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a.min(*b)).collect();
            let v = soft_state_value(
                &min_q,
                &next.probs,
                next.log_prob_continuous,
                next.entropy_discrete,
                self.temps.alpha_c(),
                self.temps.alpha_d(),
            );
            // reward convention -> cost convention, undoing the scale
            out.push(tr.cost + self.cfg.gamma * (-v / self.cfg.reward_scale));
        }
        Ok(out)
    }

    /// One gradient step on critics, actor and temperatures plus a Polyak
    /// target update. Deterministic given the rng state and buffer contents.
    pub fn update_step(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut ChaCha8Rng,
    ) -> Result<UpdateDiagnostics> {
        assert!(buffer.len() >= self.cfg.batch_size);
        let idx = buffer.sample_indices(self.cfg.batch_size, rng);
        let batch: Vec<&StoredTransition> = idx.iter().map(|&i| buffer.get(i)).collect();
        let b = batch.len() as f64;
        let scale = self.cfg.reward_scale;

        // ---- critic regression ----
        let targets_cost = self.critic_targets(&batch, rng)?;
        let mut grads_q1 = NetGrads::zeros_like(&self.critic.q1);
        let mut grads_q2 = NetGrads::zeros_like(&self.critic.q2);
        let mut critic_loss = 0.0;
        for (tr, &y_cost) in batch.iter().zip(&targets_cost) {
            let y_q = -scale * y_cost;
            let input = self.critic.stack_input(&tr.state, &tr.action.continuous);
            let q1 = self.critic.q1.forward(&input)?;
            let q2 = self.critic.q2.forward(&input)?;
            let d = tr.action.discrete;
            let e1 = q1[d] - y_q;
            let e2 = q2[d] - y_q;
            critic_loss += 0.5 * (e1 * e1 + e2 * e2) / b;
            let mut cot = vec![0.0; self.critic.n_discrete];
            cot[d] = e1 / b;
            grads_q1.add(&self.critic.q1.backward(&input, &cot)?);
            cot[d] = e2 / b;
            grads_q2.add(&self.critic.q2.backward(&input, &cot)?);
        }
        if !critic_loss.is_finite() {
            return Err(Error::Diverged {
                episode: 0,
                detail: format!("critic loss {critic_loss}"),
            });
        }
        self.opt_q1.step(&mut self.critic.q1, &grads_q1);
        self.opt_q2.step(&mut self.critic.q2, &grads_q2);

        // ---- actor update ----
        let alpha_c = self.temps.alpha_c();
        let alpha_d = self.temps.alpha_d();
        let n_c = self.actor.n_continuous;
        let n_d = self.actor.n_discrete;
        let mut actor_grads = NetGrads::zeros_like(&self.actor.net);
        let mut actor_loss = 0.0;
        let mut mean_log_prob_c = 0.0;
        let mut mean_entropy_d = 0.0;
        for tr in &batch {
            let s = self.actor.sample_detailed(&tr.state, rng)?;
            let input = self.critic.stack_input(&tr.state, &s.action.continuous);
            let q1 = self.critic.q1.forward(&input)?;
            let q2 = self.critic.q2.forward(&input)?;
            let min_q: Vec<f64> = q1.iter().zip(&q2).map(|(a, c)| a.min(*c)).collect();

            // dQmin/da via one backward per twin, heads weighted by -p_d
            // (only the winning twin of each head gets the cotangent)
            let mut cot1 = vec![0.0; n_d];
            let mut cot2 = vec![0.0; n_d];
            for d in 0..n_d {
                if q1[d] <= q2[d] {
                    cot1[d] = -s.probs[d];
                } else {
                    cot2[d] = -s.probs[d];
                }
            }
            let g1 = self.critic.q1.backward(&input, &cot1)?;
            let g2 = self.critic.q2.backward(&input, &cot2)?;
            let state_len = tr.state.len();
            let dq_da: Vec<f64> = (0..n_c)
                .map(|i| g1.d_input[state_len + i] + g2.d_input[state_len + i])
                .collect();

            let f_d: Vec<f64> = (0..n_d)
                .map(|d| alpha_d * s.log_probs_discrete[d] - min_q[d])
                .collect();
            let t_bar: f64 = f_d.iter().zip(&s.probs).map(|(f, p)| f * p).sum();
            actor_loss += (alpha_c * s.log_prob_continuous + t_bar) / b;
            mean_log_prob_c += s.log_prob_continuous / b;
            mean_entropy_d += s.entropy_discrete / b;

            // cotangent on the actor head outputs
            let mut cot = vec![0.0; 2 * n_c + n_d];
            for i in 0..n_c {
                let width = 0.5 * (self.actor.action_hi[i] - self.actor.action_lo[i]);
                let sech2 = 1.0 - s.tanh[i] * s.tanh[i];
                let da_dz = if s.pre_tanh_active[i] { width * sech2 } else { 0.0 };
                let dlogp_dz = if s.pre_tanh_active[i] { 2.0 * s.tanh[i] } else { 0.0 };
                // mean slot: z = mu + sigma*eta, dz/dmu = 1
                cot[i] = alpha_c * dlogp_dz + dq_da[i] * da_dz;
                // log-std slot: dz/dls = sigma*eta; the -1 from the -ls term
                let dz_dls = s.std[i] * s.noise[i];
                let g_ls = alpha_c * (-1.0 + dlogp_dz * dz_dls) + dq_da[i] * da_dz * dz_dls;
                cot[n_c + i] = if s.log_std_active[i] { g_ls } else { 0.0 };
            }
            for d in 0..n_d {
                // d/dlogit_j of sum_d p_d f_d = p_j (f_j - sum p f)
                cot[2 * n_c + d] = s.probs[d] * (f_d[d] - t_bar);
            }
            for c in &mut cot {
                *c /= b;
            }
            actor_grads.add(&self.actor.net.backward(&tr.state, &cot)?);
        }
        if !actor_loss.is_finite() {
            return Err(Error::Diverged {
                episode: 0,
                detail: format!("actor loss {actor_loss}"),
            });
        }
        self.opt_actor.step(&mut self.actor.net, &actor_grads);

        // ---- temperatures ----
        // entropy below target -> mean log-prob above -target -> raise alpha
        if self.cfg.lr_alpha > 0.0 {
            self.temps.log_alpha_c +=
                self.cfg.lr_alpha * (mean_log_prob_c + self.temps.target_entropy_c);
            self.temps.log_alpha_d +=
                self.cfg.lr_alpha * (self.temps.target_entropy_d - mean_entropy_d);
            self.temps.log_alpha_c = self.temps.log_alpha_c.clamp(-20.0, 5.0);
            self.temps.log_alpha_d = self.temps.log_alpha_d.clamp(-20.0, 5.0);
        }

        // ---- Polyak target update ----
        soft_update(&mut self.target.q1, &self.critic.q1, self.cfg.tau);
        soft_update(&mut self.target.q2, &self.critic.q2, self.cfg.tau);

        Ok(UpdateDiagnostics {
            critic_loss,
            actor_loss,
            alpha_c: self.temps.alpha_c(),
            alpha_d: self.temps.alpha_d(),
            entropy_c_estimate: -mean_log_prob_c,
            entropy_d: mean_entropy_d,
        })
    }

    pub fn into_policy(self) -> TrainedPolicy {
        TrainedPolicy {
            version: POLICY_FORMAT_VERSION,
            actor: self.actor,
            critic: self.critic,
            gamma: self.cfg.gamma,
            cost_scale: self.cfg.reward_scale,
        }
    }
}

/// Train on the hybrid MDP from a fixed start state. Fully reproducible from
/// the seed; returns the trained nets and the per-episode log.
pub fn train(
    spec: &MdpSpec,
    x0: &[f64],
    cfg: &SacConfig,
    seed: u64,
) -> Result<(TrainedPolicy, Vec<TrainLogRow>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trainer = Trainer::new(spec, cfg, &mut rng);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut env_steps = 0usize;

    for episode in 0..cfg.episodes {
        let mut x = x0.to_vec();
        let mut episode_cost = 0.0;
        let mut last = UpdateDiagnostics {
            critic_loss: f64::NAN,
            actor_loss: f64::NAN,
            alpha_c: trainer.temps.alpha_c(),
            alpha_d: trainer.temps.alpha_d(),
            entropy_c_estimate: f64::NAN,
            entropy_d: f64::NAN,
        };
        for step in 0..spec.horizon {
            let sampled = trainer.actor.sample(&x, &mut rng)?;
            let action = match &spec.action_projection {
                Some(p) => p(&x, sampled.action),
                None => sampled.action,
            };
            let tr = crate::mdp::step(spec, &x, &action)
                .map_err(|e| e.at_step("train rollout", step))?;
            episode_cost += tr.cost;
            let terminal = step + 1 == spec.horizon;
            buffer.push_transition(&tr, terminal);
            x = tr.next_state;
            env_steps += 1;

            if buffer.len() >= cfg.batch_size.max(cfg.warmup_steps)
                && env_steps % cfg.update_every == 0
            {
                last = trainer.update_step(&buffer, &mut rng).map_err(|e| match e {
                    Error::Diverged { detail, .. } => Error::Diverged { episode, detail },
                    other => other,
                })?;
            }
        }
        log.push(TrainLogRow {
            episode,
            closed_loop_cost: episode_cost,
            critic_loss: last.critic_loss,
            actor_loss: last.actor_loss,
            alpha_c: last.alpha_c,
            alpha_d: last.alpha_d,
        });
    }
    Ok((trainer.into_policy(), log))
}
