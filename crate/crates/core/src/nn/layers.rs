use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::tape::{BatchStats, Tape, Var};
use crate::nn::{ParamSet, Tensor};

/// Whether BatchNorm uses batch statistics (and updates running ones) or
/// normalizes by the stored running statistics only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer stored as `weight: [in × out]`, `bias: [out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Dense {
    /// Weights uniform in `±1/√in_dim`, bias zero.
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return shape_err(format!("dense layer {prefix} with dims {in_dim}x{out_dim}"));
        }
        let limit = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        let weight = set.add(format!("{prefix}.weight"), Tensor::matrix(in_dim, out_dim, w)?, true)?;
        let bias = if with_bias {
            Some(set.add(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]), true)?)
        } else {
            None
        };
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward(&self, set: &ParamSet, tape: &mut Tape, x: Var, track: bool) -> Result<Var> {
        if tape.value(x).cols() != self.in_dim {
            return shape_err(format!(
                "dense expects {} inputs, got {}",
                self.in_dim,
                tape.value(x).cols()
            ));
        }
        let w = tape.param(set, self.weight, track);
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(set, b, track);
            y = tape.add_bias(y, b)?;
        }
        Ok(y)
    }
}

/// `y = x·W + b` on plain tensors.
pub fn dense_forward(weight: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Tensor> {
    if weight.rows() != x.cols() || bias.len() != weight.cols() {
        return shape_err(format!(
            "dense_forward: x {:?}, W {:?}, b {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        ));
    }
    let mut y = x.matmul(weight)?;
    let n = y.cols();
    for row in y.data_mut().chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.99,
            epsilon: 1e-3,
        }
    }
}

/// Batch normalization over feature columns.
///
/// Stores `gamma`, `beta` (trainable) and `running_mean`, `running_var`
/// (non-trainable), so a layer of `units` holds `4 · units` scalars.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub units: usize,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub config: BatchNormConfig,
}

impl BatchNorm {
    pub fn new(set: &mut ParamSet, prefix: &str, units: usize, config: BatchNormConfig) -> Result<Self> {
        Ok(Self {
            units,
            gamma: set.add(format!("{prefix}.gamma"), Tensor::full(&[units], 1.0), true)?,
            beta: set.add(format!("{prefix}.beta"), Tensor::zeros(&[units]), true)?,
            running_mean: set.add(format!("{prefix}.running_mean"), Tensor::zeros(&[units]), false)?,
            running_var: set.add(format!("{prefix}.running_var"), Tensor::full(&[units], 1.0), false)?,
            config,
        })
    }

    pub fn param_count(&self) -> usize {
        4 * self.units
    }

    /// Records the normalization. In train mode the returned statistics must be
    /// folded into the running averages with [`BatchNorm::update_running`].
    pub fn forward(
        &self,
        set: &ParamSet,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        track: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let gamma = tape.param(set, self.gamma, track);
        let beta = tape.param(set, self.beta, track);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.config.epsilon)?;
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                let y = tape.batch_norm_eval(
                    x,
                    gamma,
                    beta,
                    set.value(self.running_mean).data(),
                    set.value(self.running_var).data(),
                    self.config.epsilon,
                )?;
                Ok((y, None))
            }
        }
    }

    /// `running ← momentum · running + (1 − momentum) · batch`.
    pub fn update_running(&self, set: &mut ParamSet, stats: &BatchStats) {
        let m = self.config.momentum;
        let rm = set.get_mut(self.running_mean).value.data_mut();
        for (r, b) in rm.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        let rv = set.get_mut(self.running_var).value.data_mut();
        for (r, b) in rv.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_identity() {
        let y = dense_forward(
            &Tensor::identity(2),
            &Tensor::zeros(&[2]),
            &Tensor::from_rows(&[[3.0, 4.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn dense_hand_sum() {
        let w = Tensor::from_rows(&[[1.0], [1.0]]).unwrap();
        let y = dense_forward(&w, &Tensor::vector(vec![1.0]), &Tensor::from_rows(&[[2.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn dense_shape_error() {
        let w = Tensor::zeros(&[3, 2]);
        assert!(dense_forward(&w, &Tensor::zeros(&[2]), &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn dense_matches_triple_loop() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut set = ParamSet::new();
        let layer = Dense::new(&mut set, "l", 4, 3, true, &mut rng).unwrap();
        for v in set.get_mut(layer.bias.unwrap()).value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let xt = Tensor::matrix(5, 4, x.clone()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(xt);
        let y = layer.forward(&set, &mut tape, xv, false).unwrap();
        let w = set.value(layer.weight).data();
        let b = set.value(layer.bias.unwrap()).data();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = b[j];
                for k in 0..4 {
                    s += x[i * 4 + k] * w[k * 3 + j];
                }
                assert!((tape.value(y).get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_within_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut set = ParamSet::new();
        let l = Dense::new(&mut set, "l", 16, 8, true, &mut rng).unwrap();
        assert!(set.value(l.weight).data().iter().all(|w| w.abs() <= 0.25));
        assert!(set.value(l.bias.unwrap()).data().iter().all(|&b| b == 0.0));
        assert_eq!(l.param_count(), 16 * 8 + 8);
    }

    fn bn_fixture() -> (ParamSet, BatchNorm) {
        let mut set = ParamSet::new();
        let bn = BatchNorm::new(&mut set, "bn", 2, BatchNormConfig::default()).unwrap();
        (set, bn)
    }

    #[test]
    fn train_mode_standardizes_columns() {
        let (set, bn) = bn_fixture();
        let x = Tensor::from_rows(&[[1.0, 10.0], [2.0, 20.0], [4.0, 35.0], [9.0, -3.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        // eps shifts the variance slightly; use a config with a negligible eps
        let bn = BatchNorm {
            config: BatchNormConfig {
                momentum: 0.99,
                epsilon: 1e-14,
            },
            ..bn
        };
        let (y, _) = bn.forward(&set, &mut tape, xv, Mode::Train, false).unwrap();
        let y = tape.value(y);
        for j in 0..2 {
            let col: Vec<f64> = (0..4).map(|i| y.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eval_mode_is_pure() {
        let (mut set, bn) = bn_fixture();
        set.get_mut(bn.running_mean).value = Tensor::vector(vec![0.5, -1.0]);
        set.get_mut(bn.running_var).value = Tensor::vector(vec![2.0, 0.25]);
        let before = set.flatten();
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let run = |set: &ParamSet| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (y, stats) = bn.forward(set, &mut tape, xv, Mode::Eval, false).unwrap();
            assert!(stats.is_none());
            tape.value(y).clone()
        };
        let a = run(&set);
        let b = run(&set);
        assert_eq!(a.data(), b.data());
        assert_eq!(set.flatten(), before);
    }

    #[test]
    fn running_stats_follow_scalar_recurrence() {
        use rand::Rng;
        let (mut set, bn) = bn_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut om, mut ov) = ([0.0f64; 2], [1.0f64; 2]);
        for _ in 0..7 {
            let rows: Vec<[f64; 2]> = (0..6)
                .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(0.0..5.0)])
                .collect();
            // oracle: scalar recurrence on per-column biased moments
            for j in 0..2 {
                let m = rows.iter().map(|r| r[j]).sum::<f64>() / 6.0;
                let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / 6.0;
                om[j] = 0.99 * om[j] + 0.01 * m;
                ov[j] = 0.99 * ov[j] + 0.01 * v;
            }
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::from_rows(&rows).unwrap());
            let (_, stats) = bn.forward(&set, &mut tape, xv, Mode::Train, false).unwrap();
            bn.update_running(&mut set, &stats.unwrap());
        }
        for j in 0..2 {
            assert!((set.value(bn.running_mean).data()[j] - om[j]).abs() < 1e-12);
            assert!((set.value(bn.running_var).data()[j] - ov[j]).abs() < 1e-12);
            assert!(set.value(bn.running_var).data()[j] >= 0.0);
        }
    }
}
