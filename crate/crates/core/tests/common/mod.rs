//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use widenet::arch::{BlockKind, ConnectivitySpec, Network};
use widenet::envs::{EnvSpec, LinearDynamics};
use widenet::nn::{Activation, BatchNormConfig, Mode, Tape, Tensor};
use widenet::ofenet::{OfeConfig, OfeNet};

pub const KINDS: [BlockKind; 4] = [BlockKind::Mlp, BlockKind::Resnet, BlockKind::Densenet, BlockKind::D2rl];

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Scalar test loss `mean(out² ⊙ C) + mean(features ⊙ D)` of a network with a head.
fn scalar_loss(net: &Network, x: &Tensor, c: &Tensor, d: &Tensor, mode: Mode) -> (f64, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let o = match mode {
        Mode::Train => net.forward_train_pure(&mut tape, xv, true).unwrap(),
        Mode::Eval => net.forward_eval(&mut tape, xv, true).unwrap(),
    };
    let sq = tape.square(o.out);
    let l1 = tape.mul_const(sq, c.clone()).unwrap();
    let l1 = tape.mean(l1);
    let l2 = tape.mul_const(o.features, d.clone()).unwrap();
    let l2 = tape.mean(l2);
    let loss = tape.add(l1, l2).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut flat = vec![0.0; net.params.numel()];
    tape.accumulate_flat(&grads, &net.params, &mut flat);
    let gx = grads.get(xv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
    (tape.value(loss).data()[0], flat, gx)
}

fn loss_only(net: &Network, x: &Tensor, c: &Tensor, d: &Tensor, mode: Mode) -> f64 {
    scalar_loss(net, x, c, d, mode).0
}

/// Fourth-order central difference of `f` at 0, returned with its roundoff
/// floor. The step shrinks until two successive estimates agree, which moves
/// the stencil off any ReLU kink lying within `2h` of the evaluation point.
pub fn finite_difference(f0: f64, f: &dyn Fn(f64) -> f64) -> (f64, f64) {
    let stencil = |h: f64| (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h);
    let noise = |h: f64| 1e3 * f64::EPSILON * f0.abs().max(1e-3) / h;
    let mut h = 1e-4;
    let mut prev = stencil(h);
    for _ in 0..8 {
        let next = stencil(h / 4.0);
        if (next - prev).abs() <= 1e-8 * prev.abs().max(next.abs()) + noise(h / 4.0) {
            return (prev, noise(h));
        }
        h /= 4.0;
        prev = next;
    }
    (prev, noise(h))
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter and every input entry.
pub fn gradient_max_rel_error(kind: BlockKind, batch_norm: bool, activation: Activation, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConnectivitySpec {
        kind,
        num_layers: 3,
        units: 4,
        activation,
        batch_norm,
        input_dim: 3,
    };
    let mut net = Network::new(spec, Some(2), BatchNormConfig::default(), &mut rng).unwrap();
    // move BN away from the identity initialisation so its gradients are exercised
    let theta: Vec<f64> = net.params.flatten().iter().map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    net.params.load_flat(&theta).unwrap();
    let x = randn(&mut rng, 6, 3);
    let c = randn(&mut rng, 6, 2);
    let d = randn(&mut rng, 6, net.feature_dim());
    let mode = if batch_norm { Mode::Train } else { Mode::Eval };
    let (_, g, gx) = scalar_loss(&net, &x, &c, &d, mode);
    let l0 = loss_only(&net, &x, &c, &d, mode);
    let rel = |a: f64, (n, noise): (f64, f64)| {
        let m = a.abs().max(n.abs());
        if m <= noise {
            0.0
        } else {
            (a - n).abs() / m
        }
    };
    let mut worst: f64 = 0.0;
    for k in 0..theta.len() {
        let n = finite_difference(l0, &|e| {
            let mut probe = net.clone();
            let mut t = theta.clone();
            t[k] += e;
            probe.params.load_flat(&t).unwrap();
            loss_only(&probe, &x, &c, &d, mode)
        });
        worst = worst.max(rel(g[k], n));
    }
    for k in 0..x.len() {
        let n = finite_difference(l0, &|e| {
            let mut xp = x.clone();
            xp.data_mut()[k] += e;
            loss_only(&net, &xp, &c, &d, mode)
        });
        worst = worst.max(rel(gx[k], n));
    }
    worst
}

/// `min{k : Σ_{i≤k} σ_i ≥ (1 − δ) Σ σ}` over a known spectrum.
pub fn srank_oracle(spectrum: &[f64], delta: f64) -> usize {
    let mut s = spectrum.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = s.iter().sum();
    let mut acc = 0.0;
    for (i, v) in s.iter().enumerate() {
        acc += v;
        if acc >= (1.0 - delta) * total {
            return i + 1;
        }
    }
    s.len()
}

pub fn diag(values: &[f64]) -> Tensor {
    let n = values.len();
    let mut m = Tensor::zeros(&[n, n]);
    for (i, v) in values.iter().enumerate() {
        m.data_mut()[i * n + i] = *v;
    }
    m
}

/// Fresh i.i.d. batch `(s, a, A s + B a)` from the noiseless linear system.
pub fn linsys_batch(dyn_: &LinearDynamics, spec: &EnvSpec, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
    let mut s = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut sn = Vec::with_capacity(n);
    for _ in 0..n {
        let si: Vec<f64> = (0..spec.state_dim).map(|_| rng.sample(StandardNormal)).collect();
        let ai = spec.sample_action(rng);
        sn.push(dyn_.apply(&si, &ai));
        s.push(si);
        a.push(ai);
    }
    (
        Tensor::from_rows(&s).unwrap(),
        Tensor::from_rows(&a).unwrap(),
        Tensor::from_rows(&sn).unwrap(),
    )
}

/// Trains the default OFENet on the noiseless linear system with batches of
/// 64 and returns `(initial, best)` auxiliary loss on a fixed held-out batch,
/// checked every 250 updates up to `updates`.
pub fn ofenet_linsys(seed: u64, updates: usize) -> (f64, f64) {
    let dyn_ = LinearDynamics::default();
    let env = widenet::envs::make_env("linsys", Some(&dyn_)).unwrap();
    let spec = env.spec().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ofe = OfeNet::new(OfeConfig::default(), spec.state_dim, spec.action_dim, &mut rng).unwrap();
    let (hs, ha, hn) = linsys_batch(&dyn_, &spec, 1024, &mut rng);
    let initial = ofe.aux_loss(&hs, &ha, &hn, Mode::Train).unwrap();
    let mut best = initial;
    for k in 1..=updates {
        let (s, a, sn) = linsys_batch(&dyn_, &spec, 64, &mut rng);
        ofe.update(&s, &a, &sn).unwrap();
        if k % 250 == 0 {
            best = best.min(ofe.aux_loss(&hs, &ha, &hn, Mode::Train).unwrap());
        }
    }
    (initial, best)
}
