//! SAC and TD3 operating on OFENet features.
//!
//! The policy reads `z_s`, the critics read `z_sa`. Target values use the
//! target critics fed with target-OFENet features. Unless `joint_finetune`
//! is set, no RL gradient reaches the encoders.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::arch::{BlockConfig, BlockKind, Network};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{
    polyak_update, Activation, Adam, AdamConfig, BatchNormConfig, BatchStats, Mode, ParamSet, Tape,
    Tensor, Var,
};
use crate::ofenet::OfeNet;
use crate::replay::Transition;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Sac,
    Td3,
}

impl AgentKind {
    pub fn default_warmup(self) -> u64 {
        match self {
            AgentKind::Sac => 10_000,
            AgentKind::Td3 => 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub actor_block: BlockConfig,
    pub critic_block: BlockConfig,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub huber_delta: f64,
    pub actor_optimizer: AdamConfig,
    pub critic_optimizer: AdamConfig,
    pub alpha_optimizer: AdamConfig,
    pub batch_norm: BatchNormConfig,
    /// Random-action env steps before learning; `None` means 10K for SAC and 100K for TD3.
    pub warmup_steps: Option<u64>,
    pub init_alpha: f64,
    pub auto_alpha: bool,
    /// Defaults to `-action_dim`.
    pub target_entropy: Option<f64>,
    pub policy_delay: u64,
    /// TD3 target smoothing, as a fraction of the action half-range.
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub exploration_noise: f64,
    /// Also push critic-loss gradients into the OFENet encoders.
    pub joint_finetune: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        let block = BlockConfig {
            kind: BlockKind::Densenet,
            layers: 2,
            units: 64,
            activation: Activation::Swish,
            batch_norm: false,
        };
        Self {
            kind: AgentKind::Sac,
            actor_block: block,
            critic_block: block,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            huber_delta: 1.0,
            actor_optimizer: AdamConfig::default(),
            critic_optimizer: AdamConfig::default(),
            alpha_optimizer: AdamConfig::default(),
            batch_norm: BatchNormConfig::default(),
            warmup_steps: None,
            init_alpha: 1.0,
            auto_alpha: true,
            target_entropy: None,
            policy_delay: 2,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            exploration_noise: 0.1,
            joint_finetune: false,
        }
    }
}

impl AgentConfig {
    /// TD3 defaults: same blocks with batch norm switched on.
    pub fn td3() -> Self {
        let mut c = Self {
            kind: AgentKind::Td3,
            ..Self::default()
        };
        c.actor_block.batch_norm = true;
        c.critic_block.batch_norm = true;
        c
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or_else(|| self.kind.default_warmup())
    }
}

/// Behavior selected by [`Agent::warmup_policy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Behavior {
    Random,
    Policy,
}

/// Column-stacked training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub s: Tensor,
    pub a: Tensor,
    pub r: Vec<f64>,
    pub s_next: Tensor,
    pub done: Vec<bool>,
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn from_transitions(ts: &[Transition], weights: Option<&[f64]>) -> Result<Self> {
        if ts.is_empty() {
            return Err(Error::State("empty training batch".into()));
        }
        let weights = match weights {
            Some(w) if w.len() != ts.len() => {
                return Err(Error::Shape(format!("{} weights for {} rows", w.len(), ts.len())))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; ts.len()],
        };
        let rows = |f: fn(&Transition) -> &Vec<f64>| {
            Tensor::from_rows(&ts.iter().map(f).collect::<Vec<_>>())
        };
        Ok(Self {
            s: rows(|t| &t.s)?,
            a: rows(|t| &t.a)?,
            r: ts.iter().map(|t| t.r).collect(),
            s_next: rows(|t| &t.s_next)?,
            done: ts.iter().map(|t| t.done).collect(),
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct CriticReport {
    pub loss: f64,
    pub td_errors: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ActorReport {
    pub loss: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub critic: CriticReport,
    pub actor: Option<ActorReport>,
}

/// Action bounds expanded into per-dimension vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub scale: Vec<f64>,
    pub center: Vec<f64>,
}

impl ActionBounds {
    pub fn from_spec(spec: &EnvSpec) -> Self {
        Self {
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
            scale: spec.action_scale(),
            center: spec.action_center(),
        }
    }

    fn dim(&self) -> usize {
        self.scale.len()
    }

    fn tile(v: &[f64], rows: usize) -> Tensor {
        let data = (0..rows).flat_map(|_| v.iter().copied()).collect();
        Tensor::matrix(rows, v.len(), data).expect("tiled bounds")
    }

    fn clip_row(&self, row: &mut [f64]) {
        for ((x, l), h) in row.iter_mut().zip(&self.low).zip(&self.high) {
            *x = x.clamp(*l, *h);
        }
    }
}

struct PolicyOut {
    action: Var,
    log_prob: Option<Var>,
    stats: Vec<(usize, BatchStats)>,
}

/// Records the policy head on a tape. For SAC, `noise` is the
/// reparameterization draw and `None` gives the squashed mean. TD3 ignores it.
#[allow(clippy::too_many_arguments)]
fn record_policy(
    kind: AgentKind,
    actor: &Network,
    bounds: &ActionBounds,
    tape: &mut Tape,
    zs: Var,
    noise: Option<&Tensor>,
    mode: Mode,
    track: bool,
) -> Result<PolicyOut> {
    let n = tape.value(zs).rows();
    let d = bounds.dim();
    let (out, stats) = actor.forward_collect(tape, zs, mode, track)?;
    let (u, log_prob) = match (kind, noise) {
        (AgentKind::Sac, Some(eps)) => {
            let mean = tape.slice_cols(out.out, 0, d)?;
            let raw = tape.slice_cols(out.out, d, 2 * d)?;
            let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
            let std = tape.exp(log_std);
            let scaled = tape.mul_const(std, eps.clone())?;
            let u = tape.add(mean, scaled)?;
            // Gaussian log-density, then the tanh change of variables written
            // as log(1 - tanh²u) = 2(ln2 - u - softplus(-2u)).
            let c: Vec<f64> = (0..n)
                .map(|i| eps.row(i).iter().map(|e| -0.5 * e * e - HALF_LN_2PI).sum())
                .collect();
            let c = tape.constant(Tensor::matrix(n, 1, c)?);
            let ls = tape.sum_cols(log_std);
            let gauss = tape.sub(c, ls)?;
            let m2u = tape.affine(u, -2.0, 0.0);
            let sp = tape.softplus(m2u);
            let t = tape.add(u, sp)?;
            let corr = tape.affine(t, -2.0, 2.0 * std::f64::consts::LN_2);
            let corr = tape.sum_cols(corr);
            (u, Some(tape.sub(gauss, corr)?))
        }
        (AgentKind::Sac, None) => (tape.slice_cols(out.out, 0, d)?, None),
        (AgentKind::Td3, _) => (out.out, None),
    };
    let squashed = tape.act(u, Activation::Tanh);
    let scaled = tape.mul_const(squashed, ActionBounds::tile(&bounds.scale, n))?;
    let center = tape.constant(ActionBounds::tile(&bounds.center, n));
    let action = tape.add(scaled, center)?;
    Ok(PolicyOut {
        action,
        log_prob,
        stats,
    })
}

fn randn<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("noise shape")
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} produced a non-finite value")))
    }
}

#[allow(clippy::too_many_arguments)]
fn act_with<R: Rng + ?Sized>(
    kind: AgentKind,
    phi_s: &Network,
    actor: &Network,
    bounds: &ActionBounds,
    exploration_noise: f64,
    s: &Tensor,
    stochastic: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let zs = phi_s.forward_eval(&mut tape, sv, false)?.out;
    let n = s.rows();
    let noise = (stochastic && kind == AgentKind::Sac).then(|| randn(rng, n, bounds.dim()));
    let out = record_policy(kind, actor, bounds, &mut tape, zs, noise.as_ref(), Mode::Eval, false)?;
    let mut a = tape.value(out.action).clone();
    check_finite(&a, "policy")?;
    let d = bounds.dim();
    if stochastic && kind == AgentKind::Td3 {
        for (j, x) in a.data_mut().iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *x += exploration_noise * bounds.scale[j % d] * e;
        }
    }
    for row in a.data_mut().chunks_mut(d) {
        bounds.clip_row(row);
    }
    Ok(a)
}

/// The acting half of an agent: state encoder plus actor, nothing else.
/// Collectors own one of these and refresh it from flat snapshots.
#[derive(Clone, Debug)]
pub struct Policy {
    pub kind: AgentKind,
    pub phi_s: Network,
    pub actor: Network,
    pub bounds: ActionBounds,
    pub exploration_noise: f64,
}

impl Policy {
    pub fn act<R: Rng + ?Sized>(&self, s: &Tensor, stochastic: bool, rng: &mut R) -> Result<Tensor> {
        act_with(
            self.kind,
            &self.phi_s,
            &self.actor,
            &self.bounds,
            self.exploration_noise,
            s,
            stochastic,
            rng,
        )
    }

    pub fn numel(&self) -> usize {
        self.phi_s.params.numel() + self.actor.params.numel()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.phi_s.params.flatten();
        v.extend(self.actor.params.flatten());
        v
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "policy snapshot has {} values, expected {}",
                flat.len(),
                self.numel()
            )));
        }
        let k = self.phi_s.params.numel();
        self.phi_s.params.load_flat(&flat[..k])?;
        self.actor.params.load_flat(&flat[k..])
    }
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub bounds: ActionBounds,
    pub target_entropy: f64,
    pub actor: Network,
    pub target_actor: Network,
    pub q1: Network,
    pub q2: Network,
    pub target_q1: Network,
    pub target_q2: Network,
    pub log_alpha: ParamSet,
    opt_actor: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_alpha: Adam,
    critic_updates: u64,
    actor_updates: u64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, ofe: &OfeNet, spec: &EnvSpec, rng: &mut R) -> Result<Self> {
        if spec.action_dim != ofe.action_dim || spec.state_dim != ofe.state_dim {
            return Err(Error::Config("OFENet dimensions do not match the environment".into()));
        }
        if config.policy_delay == 0 {
            return Err(Error::Config("policy_delay must be at least 1".into()));
        }
        if !(config.huber_delta > 0.0) {
            return Err(Error::Config("huber_delta must be positive".into()));
        }
        let d = spec.action_dim;
        let head = match config.kind {
            AgentKind::Sac => 2 * d,
            AgentKind::Td3 => d,
        };
        let bn = config.batch_norm;
        let actor = Network::new(config.actor_block.with_input(ofe.state_feature_dim()), Some(head), bn, rng)?;
        let critic_spec = config.critic_block.with_input(ofe.state_action_feature_dim());
        let q1 = Network::new(critic_spec.clone(), Some(1), bn, rng)?;
        let q2 = Network::new(critic_spec, Some(1), bn, rng)?;
        let mut log_alpha = ParamSet::new();
        log_alpha.add("log_alpha", Tensor::vector(vec![config.init_alpha.ln()]), true)?;
        Ok(Self {
            opt_actor: Adam::new(config.actor_optimizer, &actor.params),
            opt_q1: Adam::new(config.critic_optimizer, &q1.params),
            opt_q2: Adam::new(config.critic_optimizer, &q2.params),
            opt_alpha: Adam::new(config.alpha_optimizer, &log_alpha),
            target_entropy: config.target_entropy.unwrap_or(-(d as f64)),
            bounds: ActionBounds::from_spec(spec),
            target_actor: actor.clone(),
            target_q1: q1.clone(),
            target_q2: q2.clone(),
            actor,
            q1,
            q2,
            log_alpha,
            config,
            critic_updates: 0,
            actor_updates: 0,
        })
    }

    pub fn kind(&self) -> AgentKind {
        self.config.kind
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.value(0).data()[0].exp()
    }

    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    pub fn actor_updates(&self) -> u64 {
        self.actor_updates
    }

    pub fn warmup_policy(&self, env_steps: u64) -> Behavior {
        if env_steps < self.config.warmup() {
            Behavior::Random
        } else {
            Behavior::Policy
        }
    }

    pub fn policy(&self, ofe: &OfeNet) -> Policy {
        Policy {
            kind: self.config.kind,
            phi_s: ofe.phi_s.clone(),
            actor: self.actor.clone(),
            bounds: self.bounds.clone(),
            exploration_noise: self.config.exploration_noise,
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, ofe: &OfeNet, s: &Tensor, stochastic: bool, rng: &mut R) -> Result<Tensor> {
        act_with(
            self.config.kind,
            &ofe.phi_s,
            &self.actor,
            &self.bounds,
            self.config.exploration_noise,
            s,
            stochastic,
            rng,
        )
    }

    /// Standard-normal draws for one target computation (SAC next-action
    /// sampling or TD3 smoothing noise).
    pub fn sample_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Tensor {
        randn(rng, rows, self.bounds.dim())
    }

    /// Bootstrapped targets `y = r + γ(1 − done)·V(s')` with fixed noise.
    pub fn critic_targets(&self, ofe: &OfeNet, batch: &Batch, noise: &Tensor) -> Result<Vec<f64>> {
        let n = batch.len();
        let mut tape = Tape::new();
        let sn = tape.constant(batch.s_next.clone());
        let zs_t = ofe.state_features_on(&mut tape, sn, true, false)?;
        let (a_next, log_prob) = match self.config.kind {
            AgentKind::Sac => {
                let zs = ofe.state_features_on(&mut tape, sn, false, false)?;
                let p = record_policy(AgentKind::Sac, &self.actor, &self.bounds, &mut tape, zs, Some(noise), Mode::Eval, false)?;
                (p.action, p.log_prob)
            }
            AgentKind::Td3 => {
                let p = record_policy(AgentKind::Td3, &self.target_actor, &self.bounds, &mut tape, zs_t, None, Mode::Eval, false)?;
                let mut a = tape.value(p.action).clone();
                let d = self.bounds.dim();
                for (j, (x, e)) in a.data_mut().iter_mut().zip(noise.data()).enumerate() {
                    let s = self.bounds.scale[j % d];
                    let c = self.config.target_noise_clip * s;
                    *x += (self.config.target_noise * s * e).clamp(-c, c);
                }
                for row in a.data_mut().chunks_mut(d) {
                    self.bounds.clip_row(row);
                }
                (tape.constant(a), None)
            }
        };
        let zsa_t = ofe.state_action_features_on(&mut tape, zs_t, a_next, true, false)?;
        let q1 = self.target_q1.forward_eval(&mut tape, zsa_t, false)?.out;
        let q2 = self.target_q2.forward_eval(&mut tape, zsa_t, false)?.out;
        let q = tape.min(q1, q2)?;
        let alpha = self.alpha();
        let (qv, lp) = (tape.value(q), log_prob.map(|l| tape.value(l)));
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let mut v = qv.data()[i];
                if let Some(lp) = lp {
                    v -= alpha * lp.data()[i];
                }
                let boot = if batch.done[i] { 0.0 } else { 1.0 };
                batch.r[i] + self.config.gamma * boot * v
            })
            .collect();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("critic target is not finite; step rejected".into()));
        }
        Ok(y)
    }

    #[allow(clippy::type_complexity)]
    fn record_critic_loss(
        &self,
        tape: &mut Tape,
        ofe: &OfeNet,
        batch: &Batch,
        targets: &[f64],
        track: bool,
        track_ofe: bool,
    ) -> Result<(Var, Vec<f64>, [Vec<(usize, BatchStats)>; 2])> {
        let n = batch.len();
        if targets.len() != n || batch.weights.len() != n {
            return Err(Error::Shape("targets/weights do not match the batch".into()));
        }
        let s = tape.constant(batch.s.clone());
        let a = tape.constant(batch.a.clone());
        let zs = ofe.state_features_on(tape, s, false, track_ofe)?;
        let zsa = ofe.state_action_features_on(tape, zs, a, false, track_ofe)?;
        let y = tape.constant(Tensor::matrix(n, 1, targets.to_vec())?);
        let w = Tensor::matrix(n, 1, batch.weights.clone())?;
        let mut losses = Vec::with_capacity(2);
        let mut td = vec![0.0; n];
        let mut stats: [Vec<(usize, BatchStats)>; 2] = Default::default();
        for (k, net) in [&self.q1, &self.q2].into_iter().enumerate() {
            let (o, st) = net.forward_collect(tape, zsa, Mode::Train, track)?;
            stats[k] = st;
            let r = tape.sub(o.out, y)?;
            for (t, v) in td.iter_mut().zip(tape.value(r).data()) {
                *t += 0.5 * v.abs();
            }
            let h = tape.huber(r, self.config.huber_delta);
            let hw = tape.mul_const(h, w.clone())?;
            losses.push(tape.mean(hw));
        }
        let loss = tape.add(losses[0], losses[1])?;
        Ok((loss, td, stats))
    }

    /// Importance-weighted Huber loss summed over the twins, and the per-row
    /// TD error (mean of |residual| over the twins). Mutates nothing.
    pub fn critic_loss(&self, ofe: &OfeNet, batch: &Batch, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (l, td, _) = self.record_critic_loss(&mut tape, ofe, batch, targets, false, false)?;
        Ok((tape.value(l).data()[0], td))
    }

    /// Critic step with given targets; the loss reported is the pre-step value.
    pub fn critic_step(&mut self, ofe: &mut OfeNet, batch: &Batch, targets: &[f64]) -> Result<CriticReport> {
        let joint = self.config.joint_finetune && ofe.enabled();
        let mut tape = Tape::new();
        let (l, td_errors, stats) = self.record_critic_loss(&mut tape, ofe, batch, targets, true, joint)?;
        let loss = tape.value(l).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss {loss}; step rejected")));
        }
        let g = tape.backward(l)?;
        tape.accumulate(&g, &mut self.q1.params);
        tape.accumulate(&g, &mut self.q2.params);
        self.opt_q1.step(&mut self.q1.params)?;
        self.opt_q2.step(&mut self.q2.params)?;
        self.q1.apply_stats(&stats[0]);
        self.q2.apply_stats(&stats[1]);
        if joint {
            tape.accumulate(&g, &mut ofe.phi_s.params);
            tape.accumulate(&g, &mut ofe.phi_sa.params);
            ofe.step_encoders()?;
        }
        self.critic_updates += 1;
        Ok(CriticReport { loss, td_errors })
    }

    pub fn critic_update<R: Rng + ?Sized>(&mut self, ofe: &mut OfeNet, batch: &Batch, rng: &mut R) -> Result<CriticReport> {
        let noise = self.sample_noise(batch.len(), rng);
        let y = self.critic_targets(ofe, batch, &noise)?;
        self.critic_step(ofe, batch, &y)
    }

    fn record_actor_loss(
        &self,
        tape: &mut Tape,
        ofe: &OfeNet,
        s: &Tensor,
        noise: &Tensor,
        track: bool,
    ) -> Result<(Var, Option<Var>, Vec<(usize, BatchStats)>)> {
        let sv = tape.constant(s.clone());
        let zs = ofe.state_features_on(tape, sv, false, false)?;
        let p = record_policy(self.config.kind, &self.actor, &self.bounds, tape, zs, Some(noise), Mode::Train, track)?;
        let zsa = ofe.state_action_features_on(tape, zs, p.action, false, false)?;
        let q1 = self.q1.forward_eval(tape, zsa, false)?.out;
        let loss = match (self.config.kind, p.log_prob) {
            (AgentKind::Sac, Some(lp)) => {
                let q2 = self.q2.forward_eval(tape, zsa, false)?.out;
                let q = tape.min(q1, q2)?;
                let ent = tape.affine(lp, self.alpha(), 0.0);
                let diff = tape.sub(ent, q)?;
                tape.mean(diff)
            }
            _ => {
                let m = tape.mean(q1);
                tape.affine(m, -1.0, 0.0)
            }
        };
        Ok((loss, p.log_prob, p.stats))
    }

    /// Policy objective at fixed reparameterization noise (ignored by TD3).
    pub fn actor_loss(&self, ofe: &OfeNet, s: &Tensor, noise: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let (l, _, _) = self.record_actor_loss(&mut tape, ofe, s, noise, false)?;
        Ok(tape.value(l).data()[0])
    }

    /// Policy objective and its gradient with respect to the actor parameters
    /// (flat, in [`ParamSet::flatten`] order).
    pub fn actor_gradient(&self, ofe: &OfeNet, s: &Tensor, noise: &Tensor) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (l, _, _) = self.record_actor_loss(&mut tape, ofe, s, noise, true)?;
        let g = tape.backward(l)?;
        let mut flat = vec![0.0; self.actor.params.numel()];
        tape.accumulate_flat(&g, &self.actor.params, &mut flat);
        Ok((tape.value(l).data()[0], flat))
    }

    /// `∂/∂ log α` of `−log α · (log π + H̄)`, averaged over the batch.
    pub fn alpha_gradient(&self, log_probs: &[f64]) -> f64 {
        let m = log_probs.iter().sum::<f64>() / log_probs.len() as f64;
        -(m + self.target_entropy)
    }

    /// Whether the next [`Agent::actor_update`] will step the policy.
    pub fn actor_due(&self) -> bool {
        match self.config.kind {
            AgentKind::Sac => true,
            AgentKind::Td3 => self.critic_updates > 0 && self.critic_updates % self.config.policy_delay == 0,
        }
    }

    /// Policy (and temperature) step followed by the Polyak target update.
    /// TD3 returns `None` between delayed steps and leaves everything untouched.
    pub fn actor_update<R: Rng + ?Sized>(&mut self, ofe: &OfeNet, batch: &Batch, rng: &mut R) -> Result<Option<ActorReport>> {
        if !self.actor_due() {
            return Ok(None);
        }
        let noise = self.sample_noise(batch.len(), rng);
        let mut tape = Tape::new();
        let (l, lp, stats) = self.record_actor_loss(&mut tape, ofe, &batch.s, &noise, true)?;
        let loss = tape.value(l).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("actor loss {loss}; step rejected")));
        }
        let g = tape.backward(l)?;
        tape.accumulate(&g, &mut self.actor.params);
        self.opt_actor.step(&mut self.actor.params)?;
        self.actor.apply_stats(&stats);
        if let (Some(lp), true) = (lp, self.config.auto_alpha) {
            let grad = self.alpha_gradient(tape.value(lp).data());
            self.log_alpha.get_mut(0).grad = Tensor::vector(vec![grad]);
            self.opt_alpha.step(&mut self.log_alpha)?;
        }
        let tau = self.config.tau;
        polyak_update(&mut self.target_q1.params, &self.q1.params, tau)?;
        polyak_update(&mut self.target_q2.params, &self.q2.params, tau)?;
        if self.config.kind == AgentKind::Td3 {
            polyak_update(&mut self.target_actor.params, &self.actor.params, tau)?;
        }
        self.actor_updates += 1;
        Ok(Some(ActorReport {
            loss,
            alpha: self.alpha(),
        }))
    }

    /// One learner step for the agent: critics, then (maybe) actor and targets.
    pub fn train_step<R: Rng + ?Sized>(&mut self, ofe: &mut OfeNet, batch: &Batch, rng: &mut R) -> Result<StepReport> {
        let critic = self.critic_update(ofe, batch, rng)?;
        let actor = self.actor_update(ofe, batch, rng)?;
        Ok(StepReport { critic, actor })
    }

    /// `(name, network)` pairs for checkpointing.
    pub fn named_networks(&self) -> Vec<(&'static str, &Network)> {
        vec![
            ("agent.actor", &self.actor),
            ("agent.target_actor", &self.target_actor),
            ("agent.q1", &self.q1),
            ("agent.q2", &self.q2),
            ("agent.target_q1", &self.target_q1),
            ("agent.target_q2", &self.target_q2),
        ]
    }

    pub fn named_networks_mut(&mut self) -> Vec<(&'static str, &mut Network)> {
        vec![
            ("agent.actor", &mut self.actor),
            ("agent.target_actor", &mut self.target_actor),
            ("agent.q1", &mut self.q1),
            ("agent.q2", &mut self.q2),
            ("agent.target_q1", &mut self.target_q1),
            ("agent.target_q2", &mut self.target_q2),
        ]
    }
}
