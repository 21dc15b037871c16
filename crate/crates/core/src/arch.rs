//! Connectivity patterns for fully connected blocks.
//!
//! Each hidden layer is `Dense → BatchNorm (optional) → activation`. The
//! patterns differ only in what a layer sees and what the block emits:
//!
//! * `mlp`      – plain chain, emits the last layer.
//! * `resnet`   – `y_i = f_i(y_{i-1}) + y_{i-1}`; when the block input width
//!   differs from `units`, layer 1's skip path goes through a learned
//!   bias-free linear projection.
//! * `densenet` – layer `i` sees `[x, y_1, …, y_{i-1}]`, the block emits
//!   `[x, y_1, …, y_N]`.
//! * `d2rl`     – layer 1 sees `x`, layer `i > 1` sees `[y_{i-1}, x]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm, BatchNormConfig, BatchStats, Dense, Mode, ParamSet, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Mlp,
    Resnet,
    Densenet,
    D2rl,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [
        BlockKind::Mlp,
        BlockKind::Resnet,
        BlockKind::Densenet,
        BlockKind::D2rl,
    ];
}

/// Block description as it appears in experiment configs (input width comes
/// from wherever the block is plugged in).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub layers: usize,
    pub units: usize,
    pub activation: Activation,
    pub batch_norm: bool,
}

impl BlockConfig {
    pub fn with_input(&self, input_dim: usize) -> ConnectivitySpec {
        ConnectivitySpec {
            kind: self.kind,
            num_layers: self.layers,
            units: self.units,
            activation: self.activation,
            batch_norm: self.batch_norm,
            input_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConnectivitySpec {
    pub kind: BlockKind,
    pub num_layers: usize,
    pub units: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    pub input_dim: usize,
}

impl ConnectivitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.units == 0 {
            return Err(Error::Config("units_per_layer must be at least 1".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Input width of each hidden layer.
    pub fn layer_input_dims(&self) -> Vec<usize> {
        (0..self.num_layers)
            .map(|i| match self.kind {
                BlockKind::Mlp | BlockKind::Resnet => {
                    if i == 0 {
                        self.input_dim
                    } else {
                        self.units
                    }
                }
                BlockKind::Densenet => self.input_dim + i * self.units,
                BlockKind::D2rl => {
                    if i == 0 {
                        self.input_dim
                    } else {
                        self.units + self.input_dim
                    }
                }
            })
            .collect()
    }

    pub fn needs_projection(&self) -> bool {
        self.kind == BlockKind::Resnet && self.num_layers > 0 && self.input_dim != self.units
    }
}

pub fn output_dim(spec: &ConnectivitySpec) -> usize {
    if spec.num_layers == 0 {
        return spec.input_dim;
    }
    match spec.kind {
        BlockKind::Densenet => spec.input_dim + spec.num_layers * spec.units,
        _ => spec.units,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub input_units: usize,
    pub output_units: usize,
    pub parameters: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCountReport {
    /// Hidden layers in order, followed by the output head when requested.
    pub per_layer: Vec<LayerCount>,
    pub total: usize,
}

/// Stored parameter count of a block plus an optional linear head.
///
/// A dense layer contributes `in·out + out`, BatchNorm `4·out` (scale, shift,
/// running mean, running variance) and a ResNet projection `in·out`.
pub fn count_parameters(spec: &ConnectivitySpec, head_output_dim: Option<usize>) -> ParamCountReport {
    let mut per_layer: Vec<LayerCount> = spec
        .layer_input_dims()
        .into_iter()
        .enumerate()
        .map(|(i, input)| {
            let mut n = input * spec.units + spec.units;
            if spec.batch_norm {
                n += 4 * spec.units;
            }
            if i == 0 && spec.needs_projection() {
                n += input * spec.units;
            }
            LayerCount {
                input_units: input,
                output_units: spec.units,
                parameters: n,
            }
        })
        .collect();
    if let Some(h) = head_output_dim {
        let input = output_dim(spec);
        per_layer.push(LayerCount {
            input_units: input,
            output_units: h,
            parameters: input * h + h,
        });
    }
    let total = per_layer.iter().map(|l| l.parameters).sum();
    ParamCountReport { per_layer, total }
}

#[derive(Clone, Debug)]
struct BlockLayer {
    dense: Dense,
    bn: Option<BatchNorm>,
    proj: Option<Dense>,
}

/// An instantiated block whose parameters live in a caller-owned [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Block {
    spec: ConnectivitySpec,
    layers: Vec<BlockLayer>,
}

/// Outputs of a block forward pass plus any train-mode BN statistics.
pub struct BlockOutput {
    pub out: Var,
    pub stats: Vec<(usize, BatchStats)>,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        prefix: &str,
        spec: ConnectivitySpec,
        bn_config: BatchNormConfig,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers);
        for (i, input) in spec.layer_input_dims().into_iter().enumerate() {
            let p = format!("{prefix}.layer{i}");
            let dense = Dense::new(set, &format!("{p}.dense"), input, spec.units, true, rng)?;
            let bn = if spec.batch_norm {
                Some(BatchNorm::new(set, &format!("{p}.bn"), spec.units, bn_config)?)
            } else {
                None
            };
            let proj = if i == 0 && spec.needs_projection() {
                Some(Dense::new(set, &format!("{p}.proj"), input, spec.units, false, rng)?)
            } else {
                None
            };
            layers.push(BlockLayer { dense, bn, proj });
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ConnectivitySpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        output_dim(&self.spec)
    }

    /// Dense layers in order (used by filter normalization).
    pub fn dense_layers(&self) -> Vec<&Dense> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.dense);
            if let Some(p) = &l.proj {
                out.push(p);
            }
        }
        out
    }

    fn composite(
        &self,
        layer: &BlockLayer,
        idx: usize,
        set: &ParamSet,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        track: bool,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        let mut h = layer.dense.forward(set, tape, x, track)?;
        if let Some(bn) = &layer.bn {
            let (y, s) = bn.forward(set, tape, h, mode, track)?;
            h = y;
            if let Some(s) = s {
                stats.push((idx, s));
            }
        }
        Ok(tape.act(h, self.spec.activation))
    }

    pub fn forward(
        &self,
        set: &ParamSet,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        track: bool,
    ) -> Result<BlockOutput> {
        let width = tape.value(x).cols();
        if width != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "block expects input width {}, got {width}",
                self.spec.input_dim
            )));
        }
        let mut stats = Vec::new();
        let out = match self.spec.kind {
            BlockKind::Mlp => {
                let mut h = x;
                for (i, l) in self.layers.iter().enumerate() {
                    h = self.composite(l, i, set, tape, h, mode, track, &mut stats)?;
                }
                h
            }
            BlockKind::Resnet => {
                let mut h = x;
                for (i, l) in self.layers.iter().enumerate() {
                    let f = self.composite(l, i, set, tape, h, mode, track, &mut stats)?;
                    let skip = match &l.proj {
                        Some(p) => p.forward(set, tape, h, track)?,
                        None => h,
                    };
                    h = tape.add(f, skip)?;
                }
                h
            }
            BlockKind::Densenet => {
                let mut parts = vec![x];
                for (i, l) in self.layers.iter().enumerate() {
                    let inp = tape.concat(&parts)?;
                    let y = self.composite(l, i, set, tape, inp, mode, track, &mut stats)?;
                    parts.push(y);
                }
                tape.concat(&parts)?
            }
            BlockKind::D2rl => {
                let mut h = x;
                for (i, l) in self.layers.iter().enumerate() {
                    let inp = if i == 0 { h } else { tape.concat(&[h, x])? };
                    h = self.composite(l, i, set, tape, inp, mode, track, &mut stats)?;
                }
                h
            }
        };
        Ok(BlockOutput { out, stats })
    }

    pub fn apply_stats(&self, set: &mut ParamSet, stats: &[(usize, BatchStats)]) {
        for (i, s) in stats {
            if let Some(bn) = &self.layers[*i].bn {
                bn.update_running(set, s);
            }
        }
    }
}

/// A block with an optional linear output head, owning its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub params: ParamSet,
    pub block: Block,
    pub head: Option<Dense>,
}

pub struct NetOutput {
    /// Head output, or the block output when there is no head.
    pub out: Var,
    /// Block output (the penultimate representation when a head exists).
    pub features: Var,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(
        spec: ConnectivitySpec,
        head_output_dim: Option<usize>,
        bn_config: BatchNormConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let block = Block::new(&mut params, "block", spec, bn_config, rng)?;
        let head = match head_output_dim {
            Some(h) => Some(Dense::new(&mut params, "head", block.output_dim(), h, true, rng)?),
            None => None,
        };
        Ok(Self { params, block, head })
    }

    pub fn spec(&self) -> &ConnectivitySpec {
        self.block.spec()
    }

    pub fn feature_dim(&self) -> usize {
        self.block.output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.head.as_ref().map(|h| h.out_dim).unwrap_or_else(|| self.block.output_dim())
    }

    pub fn dense_layers(&self) -> Vec<&Dense> {
        let mut v = self.block.dense_layers();
        if let Some(h) = &self.head {
            v.push(h);
        }
        v
    }

    /// Forward pass that returns train-mode BN statistics instead of applying them.
    pub fn forward_collect(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        track: bool,
    ) -> Result<(NetOutput, Vec<(usize, BatchStats)>)> {
        let b = self.block.forward(&self.params, tape, x, mode, track)?;
        let out = match &self.head {
            Some(h) => h.forward(&self.params, tape, b.out, track)?,
            None => b.out,
        };
        Ok((
            NetOutput {
                out,
                features: b.out,
            },
            b.stats,
        ))
    }

    /// Forward pass; in train mode the BN running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode, track: bool) -> Result<NetOutput> {
        let (o, stats) = self.forward_collect(tape, x, mode, track)?;
        self.block.apply_stats(&mut self.params, &stats);
        Ok(o)
    }

    pub fn apply_stats(&mut self, stats: &[(usize, BatchStats)]) {
        self.block.apply_stats(&mut self.params, stats);
    }

    /// Eval-mode forward; never mutates the network.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var, track: bool) -> Result<NetOutput> {
        Ok(self.forward_collect(tape, x, Mode::Eval, track)?.0)
    }

    /// Train-mode forward that discards the batch statistics (no mutation).
    pub fn forward_train_pure(&self, tape: &mut Tape, x: Var, track: bool) -> Result<NetOutput> {
        Ok(self.forward_collect(tape, x, Mode::Train, track)?.0)
    }
}
