//! Online feature extractor.
//!
//! Two DenseNet encoders produce `z_s = φ_s(s)` and `z_sa = φ_sa([z_s, a])`;
//! a single linear layer predicts the next state from `z_sa`. The encoders
//! are trained only on the prediction loss, and a Polyak-tracked copy of all
//! three parts serves target-value computations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{BlockConfig, BlockKind, ConnectivitySpec, Network};
use crate::error::{Error, Result};
use crate::nn::{
    polyak_update, Activation, Adam, AdamConfig, BatchNormConfig, BatchStats, Mode, Tape, Tensor,
    Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfeConfig {
    pub enabled: bool,
    pub state_block: BlockConfig,
    pub action_block: BlockConfig,
    pub tau: f64,
    pub optimizer: AdamConfig,
    pub batch_norm: BatchNormConfig,
    /// Standardize the prediction target with running state statistics.
    pub normalize_target: bool,
}

impl Default for OfeConfig {
    fn default() -> Self {
        let block = BlockConfig {
            kind: BlockKind::Densenet,
            layers: 4,
            units: 8,
            activation: Activation::Swish,
            batch_norm: true,
        };
        Self {
            enabled: true,
            state_block: block,
            action_block: block,
            tau: 0.005,
            optimizer: AdamConfig::default(),
            batch_norm: BatchNormConfig::default(),
            normalize_target: false,
        }
    }
}

/// Welford running mean/variance per dimension.
#[derive(Clone, Debug)]
pub struct RunningNorm {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn observe(&mut self, x: &Tensor) {
        for i in 0..x.rows() {
            self.count += 1.0;
            for (j, &v) in x.row(i).iter().enumerate() {
                let d = v - self.mean[j];
                self.mean[j] += d / self.count;
                self.m2[j] += d * (v - self.mean[j]);
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                let var = if self.count > 1.0 { self.m2[j] / self.count } else { 1.0 };
                row[j] = (row[j] - self.mean[j]) / (var.sqrt() + 1e-8);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct OfeNet {
    pub config: OfeConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub phi_s: Network,
    pub phi_sa: Network,
    pub f_pred: Network,
    pub target_phi_s: Network,
    pub target_phi_sa: Network,
    pub target_f_pred: Network,
    opt_s: Adam,
    opt_sa: Adam,
    opt_pred: Adam,
    norm: Option<RunningNorm>,
    updates: u64,
}

fn linear_spec(input_dim: usize) -> ConnectivitySpec {
    ConnectivitySpec {
        kind: BlockKind::Mlp,
        num_layers: 0,
        units: 1,
        activation: Activation::Tanh,
        batch_norm: false,
        input_dim,
    }
}

impl OfeNet {
    pub fn new<R: Rng + ?Sized>(
        config: OfeConfig,
        state_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (sb, ab) = if config.enabled {
            (config.state_block, config.action_block)
        } else {
            // disabled: zero-layer blocks are exact passthroughs
            let mut b = config.state_block;
            b.layers = 0;
            (b, b)
        };
        for b in [&sb, &ab] {
            if b.layers > 0 && b.kind != BlockKind::Densenet {
                log::warn!("OFENet encoder uses {:?} connectivity instead of densenet", b.kind);
            }
        }
        let phi_s = Network::new(sb.with_input(state_dim), None, config.batch_norm, rng)?;
        let zs = phi_s.feature_dim();
        let phi_sa = Network::new(ab.with_input(zs + action_dim), None, config.batch_norm, rng)?;
        let f_pred = Network::new(linear_spec(phi_sa.feature_dim()), Some(state_dim), config.batch_norm, rng)?;
        let mk = |n: &Network| Adam::new(config.optimizer, &n.params);
        Ok(Self {
            opt_s: mk(&phi_s),
            opt_sa: mk(&phi_sa),
            opt_pred: mk(&f_pred),
            target_phi_s: phi_s.clone(),
            target_phi_sa: phi_sa.clone(),
            target_f_pred: f_pred.clone(),
            norm: config.normalize_target.then(|| RunningNorm::new(state_dim)),
            phi_s,
            phi_sa,
            f_pred,
            state_dim,
            action_dim,
            config,
            updates: 0,
        })
    }

    pub fn enabled(&self) -> bool {
        self.config.enabled
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn state_feature_dim(&self) -> usize {
        self.phi_s.feature_dim()
    }

    pub fn state_action_feature_dim(&self) -> usize {
        self.phi_sa.feature_dim()
    }

    fn nets(&self, use_target: bool) -> (&Network, &Network) {
        if use_target {
            (&self.target_phi_s, &self.target_phi_sa)
        } else {
            (&self.phi_s, &self.phi_sa)
        }
    }

    /// Eval-mode `z_s` on a tape. Parameters are constants unless `track`.
    pub fn state_features_on(&self, tape: &mut Tape, s: Var, use_target: bool, track: bool) -> Result<Var> {
        Ok(self.nets(use_target).0.forward_eval(tape, s, track)?.out)
    }

    /// Eval-mode `z_sa` from `z_s` and `a` on a tape. Gradients always flow
    /// to `a` and `z_s`; they reach the encoder parameters only if `track`.
    pub fn state_action_features_on(
        &self,
        tape: &mut Tape,
        zs: Var,
        a: Var,
        use_target: bool,
        track: bool,
    ) -> Result<Var> {
        let x = tape.concat(&[zs, a])?;
        Ok(self.nets(use_target).1.forward_eval(tape, x, track)?.out)
    }

    pub fn encode_state(&self, s: &Tensor, use_target: bool) -> Result<Tensor> {
        self.check_width(s, self.state_dim, "state")?;
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let z = self.state_features_on(&mut tape, sv, use_target, false)?;
        Ok(tape.value(z).clone())
    }

    pub fn encode_state_action(&self, s: &Tensor, a: &Tensor, use_target: bool) -> Result<Tensor> {
        self.check_width(s, self.state_dim, "state")?;
        self.check_width(a, self.action_dim, "action")?;
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let av = tape.constant(a.clone());
        let zs = self.state_features_on(&mut tape, sv, use_target, false)?;
        let z = self.state_action_features_on(&mut tape, zs, av, use_target, false)?;
        Ok(tape.value(z).clone())
    }

    fn check_width(&self, t: &Tensor, want: usize, what: &str) -> Result<()> {
        if t.cols() != want || t.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "{what} batch must be [n × {want}], got {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    fn prediction_target(&self, s_next: &Tensor) -> Tensor {
        match &self.norm {
            Some(n) => n.apply(s_next),
            None => s_next.clone(),
        }
    }

    /// Records `mean_i ‖f_pred(z_sa,i) − s'_i‖²` on the tape, returning the
    /// loss node and train-mode BN statistics of both encoders.
    #[allow(clippy::type_complexity)]
    fn record_loss(
        &self,
        tape: &mut Tape,
        s: &Tensor,
        a: &Tensor,
        s_next: &Tensor,
        mode: Mode,
        track: bool,
    ) -> Result<(Var, Vec<(usize, BatchStats)>, Vec<(usize, BatchStats)>)> {
        if s.rows() == 0 {
            return Err(Error::State("aux loss on an empty batch".into()));
        }
        self.check_width(s, self.state_dim, "state")?;
        self.check_width(a, self.action_dim, "action")?;
        self.check_width(s_next, self.state_dim, "next state")?;
        let sv = tape.constant(s.clone());
        let av = tape.constant(a.clone());
        let target = tape.constant(self.prediction_target(s_next));
        let (zs, stats_s) = self.phi_s.forward_collect(tape, sv, mode, track)?;
        let x = tape.concat(&[zs.out, av])?;
        let (zsa, stats_sa) = self.phi_sa.forward_collect(tape, x, mode, track)?;
        let pred = self.f_pred.forward_eval(tape, zsa.out, track)?.out;
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        let per_row = tape.sum_cols(sq);
        Ok((tape.mean(per_row), stats_s, stats_sa))
    }

    /// Auxiliary next-state prediction loss without touching any state.
    pub fn aux_loss(&self, s: &Tensor, a: &Tensor, s_next: &Tensor, mode: Mode) -> Result<f64> {
        let mut tape = Tape::new();
        let (l, _, _) = self.record_loss(&mut tape, s, a, s_next, mode, false)?;
        Ok(tape.value(l).data()[0])
    }

    /// Gradient of the auxiliary loss (train-mode statistics) with respect to
    /// every trainable parameter, as `[phi_s, phi_sa, f_pred]` flat vectors.
    pub fn aux_gradients(&self, s: &Tensor, a: &Tensor, s_next: &Tensor) -> Result<(f64, [Vec<f64>; 3])> {
        let mut tape = Tape::new();
        let (l, _, _) = self.record_loss(&mut tape, s, a, s_next, Mode::Train, true)?;
        let g = tape.backward(l)?;
        let mut out: [Vec<f64>; 3] = Default::default();
        for (slot, net) in out.iter_mut().zip([&self.phi_s, &self.phi_sa, &self.f_pred]) {
            let mut flat = vec![0.0; net.params.numel()];
            tape.accumulate_flat(&g, &net.params, &mut flat);
            *slot = flat;
        }
        Ok((tape.value(l).data()[0], out))
    }

    /// One Adam step on all three parts followed by the Polyak target update.
    /// Returns the loss measured before the step.
    pub fn update(&mut self, s: &Tensor, a: &Tensor, s_next: &Tensor) -> Result<f64> {
        if !self.config.enabled {
            return Ok(0.0);
        }
        if let Some(n) = &mut self.norm {
            n.observe(s_next);
        }
        let mut tape = Tape::new();
        let (l, stats_s, stats_sa) = self.record_loss(&mut tape, s, a, s_next, Mode::Train, true)?;
        self.phi_s.apply_stats(&stats_s);
        self.phi_sa.apply_stats(&stats_sa);
        let loss = tape.value(l).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("OFENet aux loss {loss}")));
        }
        let g = tape.backward(l)?;
        tape.accumulate(&g, &mut self.phi_s.params);
        tape.accumulate(&g, &mut self.phi_sa.params);
        tape.accumulate(&g, &mut self.f_pred.params);
        self.opt_s.step(&mut self.phi_s.params)?;
        self.opt_sa.step(&mut self.phi_sa.params)?;
        self.opt_pred.step(&mut self.f_pred.params)?;
        self.sync_targets(self.config.tau)?;
        self.updates += 1;
        Ok(loss)
    }

    /// Applies externally accumulated encoder gradients (joint fine-tuning).
    pub fn step_encoders(&mut self) -> Result<()> {
        self.opt_s.step(&mut self.phi_s.params)?;
        self.opt_sa.step(&mut self.phi_sa.params)
    }

    pub fn sync_targets(&mut self, tau: f64) -> Result<()> {
        polyak_update(&mut self.target_phi_s.params, &self.phi_s.params, tau)?;
        polyak_update(&mut self.target_phi_sa.params, &self.phi_sa.params, tau)?;
        polyak_update(&mut self.target_f_pred.params, &self.f_pred.params, tau)
    }

    /// `(name, network)` pairs for checkpointing.
    pub fn named_networks(&self) -> Vec<(&'static str, &Network)> {
        vec![
            ("ofenet.phi_s", &self.phi_s),
            ("ofenet.phi_sa", &self.phi_sa),
            ("ofenet.f_pred", &self.f_pred),
            ("ofenet.target_phi_s", &self.target_phi_s),
            ("ofenet.target_phi_sa", &self.target_phi_sa),
            ("ofenet.target_f_pred", &self.target_f_pred),
        ]
    }

    pub fn named_networks_mut(&mut self) -> Vec<(&'static str, &mut Network)> {
        vec![
            ("ofenet.phi_s", &mut self.phi_s),
            ("ofenet.phi_sa", &mut self.phi_sa),
            ("ofenet.f_pred", &mut self.f_pred),
            ("ofenet.target_phi_s", &mut self.target_phi_s),
            ("ofenet.target_phi_sa", &mut self.target_phi_sa),
            ("ofenet.target_f_pred", &mut self.target_f_pred),
        ]
    }
}
