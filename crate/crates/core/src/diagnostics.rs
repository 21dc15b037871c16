//! Effective rank of critic features and filter-normalized TD-loss surfaces.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor};
use crate::ofenet::OfeNet;

/// Default δ for `srank_δ`.
pub const DEFAULT_DELTA: f64 = 0.01;

/// Singular values of `phi` in descending order.
///
/// The decomposition runs on whichever of `Φ` and `Φᵀ` is wide, which has
/// the same spectrum and is cheaper when there are many samples.
pub fn singular_values(phi: &Tensor) -> Result<Vec<f64>> {
    if phi.shape().len() != 2 {
        return Err(Error::Shape(format!("feature matrix must be 2-D, got {:?}", phi.shape())));
    }
    if !phi.is_finite() {
        return Err(Error::NonFinite("feature matrix has non-finite entries".into()));
    }
    let (n, d) = (phi.rows(), phi.cols());
    let m = DMatrix::from_row_slice(n, d, phi.data());
    let m = if n > d { m.transpose() } else { m };
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// `min{k : Σ_{i≤k} σ_i / Σ_i σ_i ≥ 1 − δ}` over a descending spectrum.
/// A zero spectrum has rank 0.
pub fn srank_from_spectrum(sv: &[f64], delta: f64) -> usize {
    let total: f64 = sv.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let goal = (1.0 - delta) * total;
    // SVD round-off on exactly tied spectra must not push k one past the boundary
    let slack = 1e-12 * total;
    let mut cum = 0.0;
    for (k, s) in sv.iter().enumerate() {
        cum += s;
        if cum >= goal - slack {
            return k + 1;
        }
    }
    sv.len()
}

pub fn effective_rank(phi: &Tensor, delta: f64) -> Result<usize> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    if phi.rows() < phi.cols() {
        log::warn!(
            "effective rank on {} samples of {} features; the rank is capped by the sample count",
            phi.rows(),
            phi.cols()
        );
    }
    let sv = singular_values(phi)?;
    if sv.iter().all(|&s| s == 0.0) {
        log::warn!("effective rank of an all-zero feature matrix is taken as 0");
        return Ok(0);
    }
    Ok(srank_from_spectrum(&sv, delta))
}

/// Penultimate critic activations (block output, eval mode) for `(s, a)`.
pub fn collect_features(ofe: &OfeNet, critic: &Network, s: &Tensor, a: &Tensor) -> Result<Tensor> {
    if s.rows() == 0 {
        return Err(Error::State("feature probe batch is empty".into()));
    }
    let z = ofe.encode_state_action(s, a, false)?;
    critic_features(critic, &z)
}

/// Penultimate activations for precomputed critic inputs.
pub fn critic_features(critic: &Network, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let f = critic.forward_eval(&mut tape, zv, false)?.features;
    Ok(tape.value(f).clone())
}

fn offsets(net: &Network) -> Vec<usize> {
    let mut out = Vec::with_capacity(net.params.len());
    let mut off = 0;
    for p in net.params.iter() {
        out.push(off);
        off += p.value.len();
    }
    out
}

/// Rescales each output-neuron column of every dense weight in `direction`
/// to the norm of the matching column of the network's weights. All other
/// entries (biases, BN parameters and statistics) are zeroed. An all-zero
/// direction column facing a nonzero weight column is redrawn first.
pub fn filter_normalize<R: Rng + ?Sized>(net: &Network, direction: &mut [f64], rng: &mut R) -> Result<()> {
    if direction.len() != net.params.numel() {
        return Err(Error::Shape(format!(
            "direction has {} entries, network has {}",
            direction.len(),
            net.params.numel()
        )));
    }
    let off = offsets(net);
    let mut keep = vec![false; direction.len()];
    for layer in net.dense_layers() {
        let w = net.params.value(layer.weight);
        let (rows, cols) = (layer.in_dim, layer.out_dim);
        let base = off[layer.weight];
        for j in 0..cols {
            let idx = |k: usize| base + k * cols + j;
            let theta_norm = (0..rows).map(|k| w.data()[k * cols + j].powi(2)).sum::<f64>().sqrt();
            let mut dir_norm = (0..rows).map(|k| direction[idx(k)].powi(2)).sum::<f64>().sqrt();
            while dir_norm == 0.0 && theta_norm > 0.0 {
                for k in 0..rows {
                    direction[idx(k)] = rng.sample(StandardNormal);
                }
                dir_norm = (0..rows).map(|k| direction[idx(k)].powi(2)).sum::<f64>().sqrt();
            }
            for k in 0..rows {
                let v = &mut direction[idx(k)];
                *v = if theta_norm == 0.0 { 0.0 } else { *v * theta_norm / dir_norm };
                keep[idx(k)] = true;
            }
        }
    }
    for (d, k) in direction.iter_mut().zip(keep) {
        if !k {
            *d = 0.0;
        }
    }
    Ok(())
}

/// A Gaussian direction in the network's flat parameter space, filter-normalized.
pub fn random_direction<R: Rng + ?Sized>(net: &Network, rng: &mut R) -> Result<Vec<f64>> {
    let mut d: Vec<f64> = (0..net.params.numel()).map(|_| rng.sample(StandardNormal)).collect();
    filter_normalize(net, &mut d, rng)?;
    Ok(d)
}

/// Frozen `(s, a, Q̂)` tuples for surface scans.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceDataset {
    pub s: Tensor,
    pub a: Tensor,
    pub q_hat: Vec<f64>,
}

impl SurfaceDataset {
    pub fn len(&self) -> usize {
        self.q_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_hat.is_empty()
    }

    /// CSV with columns `s0..`, `a0..`, `q_hat`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.s.cols()).map(|i| format!("s{i}")).collect();
        header.extend((0..self.a.cols()).map(|i| format!("a{i}")));
        header.push("q_hat".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.s.row(i).iter().map(|v| format!("{v:e}")).collect();
            rec.extend(self.a.row(i).iter().map(|v| format!("{v:e}")));
            rec.push(format!("{:e}", self.q_hat[i]));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let ns = header.iter().filter(|h| h.starts_with('s')).count();
        let na = header.iter().filter(|h| h.starts_with('a')).count();
        if header.len() != ns + na + 1 || header.get(header.len() - 1) != Some("q_hat") {
            return Err(Error::Config("surface dataset header must be s*, a*, q_hat".into()));
        }
        let (mut s, mut a, mut q) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| Error::Config(format!("bad number {v:?}: {e}"))))
                .collect::<Result<_>>()?;
            s.push(vals[..ns].to_vec());
            a.push(vals[ns..ns + na].to_vec());
            q.push(vals[ns + na]);
        }
        if q.is_empty() {
            return Err(Error::Config("surface dataset is empty".into()));
        }
        Ok(Self {
            s: Tensor::from_rows(&s)?,
            a: Tensor::from_rows(&a)?,
            q_hat: q,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// `J_Q = mean ½ (Q(z) − Q̂)²` for precomputed critic inputs.
pub fn j_q(critic: &Network, z: &Tensor, q_hat: &[f64]) -> Result<f64> {
    if z.rows() != q_hat.len() || q_hat.is_empty() {
        return Err(Error::Shape(format!("{} inputs for {} targets", z.rows(), q_hat.len())));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let q = critic.forward_eval(&mut tape, zv, false)?.out;
    let q = tape.value(q);
    let s: f64 = q.data().iter().zip(q_hat).map(|(p, y)| 0.5 * (p - y).powi(2)).sum();
    Ok(s / q_hat.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceGrid {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `loss[i][j]` at `θ + a[i]·d1 + b[j]·d2`; non-finite cells hold NaN.
    pub loss: Vec<Vec<f64>>,
    pub nonfinite_cells: usize,
}

impl SurfaceGrid {
    /// Value at `a = b = 0` when the grid has such a cell.
    pub fn center(&self) -> Option<f64> {
        let i = self.a.iter().position(|&x| x == 0.0)?;
        let j = self.b.iter().position(|&x| x == 0.0)?;
        Some(self.loss[i][j])
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["a", "b", "loss"])?;
        for (i, a) in self.a.iter().enumerate() {
            for (j, b) in self.b.iter().enumerate() {
                out.write_record(&[a.to_string(), b.to_string(), self.loss[i][j].to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// `res` evenly spaced points on `[-range, range]`; odd `res` includes 0 exactly.
pub fn grid_coords(res: usize, range: f64) -> Vec<f64> {
    match res {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => {
            let mid = (res - 1) as f64 / 2.0;
            (0..res).map(|i| range * (i as f64 - mid) / mid).collect()
        }
    }
}

/// Scans `J_Q` over the plane spanned by `d1` and `d2` around the critic's
/// current parameters. Targets stay frozen throughout.
pub fn loss_surface(
    critic: &Network,
    z: &Tensor,
    q_hat: &[f64],
    d1: &[f64],
    d2: &[f64],
    a_coords: &[f64],
    b_coords: &[f64],
) -> Result<SurfaceGrid> {
    let n = critic.params.numel();
    if d1.len() != n || d2.len() != n {
        return Err(Error::Shape(format!("directions must have {n} entries")));
    }
    if q_hat.is_empty() {
        return Err(Error::State("surface dataset is empty".into()));
    }
    let theta = critic.params.flatten();
    let mut probe = critic.clone();
    let mut loss = Vec::with_capacity(a_coords.len());
    let mut nonfinite_cells = 0;
    for &a in a_coords {
        let mut row = Vec::with_capacity(b_coords.len());
        for &b in b_coords {
            let p: Vec<f64> = (0..n).map(|k| theta[k] + a * d1[k] + b * d2[k]).collect();
            probe.params.load_flat(&p)?;
            let v = j_q(&probe, z, q_hat)?;
            if v.is_finite() {
                row.push(v);
            } else {
                nonfinite_cells += 1;
                row.push(f64::NAN);
            }
        }
        loss.push(row);
    }
    if nonfinite_cells > 0 {
        log::warn!("{nonfinite_cells} surface cells were non-finite");
    }
    Ok(SurfaceGrid {
        a: a_coords.to_vec(),
        b: b_coords.to_vec(),
        loss,
        nonfinite_cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{BlockKind, ConnectivitySpec};
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(kind: BlockKind, input: usize, layers: usize, units: usize, bn: bool, seed: u64) -> Network {
        let spec = ConnectivitySpec {
            kind,
            num_layers: layers,
            units,
            activation: Activation::Swish,
            batch_norm: bn,
            input_dim: input,
        };
        Network::new(spec, Some(1), Default::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn identity_rank() {
        assert_eq!(effective_rank(&Tensor::identity(100), 0.01).unwrap(), 99);
    }

    #[test]
    fn rank_one() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -0.7];
        let data = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let phi = Tensor::matrix(4, 3, data).unwrap();
        for delta in [0.01, 0.5, 0.99] {
            assert_eq!(effective_rank(&phi, delta).unwrap(), 1);
        }
    }

    #[test]
    fn diagonal_spectrum_oracle() {
        let phi = Tensor::matrix(4, 4, {
            let mut d = vec![0.0; 16];
            for (i, s) in [10.0, 1.0, 0.1, 0.01].iter().enumerate() {
                d[i * 5] = *s;
            }
            d
        })
        .unwrap();
        // 10/11.11 = 0.9001, 11/11.11 = 0.9901 ≥ 0.99
        assert_eq!(effective_rank(&phi, 0.01).unwrap(), 2);
        assert_eq!(effective_rank(&phi, 0.2).unwrap(), 1);
        assert_eq!(effective_rank(&phi, 0.001).unwrap(), 3);
    }

    #[test]
    fn zero_matrix_and_bad_delta() {
        assert_eq!(effective_rank(&Tensor::zeros(&[5, 3]), 0.01).unwrap(), 0);
        assert!(effective_rank(&Tensor::identity(3), 0.0).is_err());
        assert!(effective_rank(&Tensor::identity(3), 1.0).is_err());
    }

    #[test]
    fn tall_and_wide_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..40 * 6).map(|_| rng.sample(StandardNormal)).collect();
        let phi = Tensor::matrix(40, 6, data).unwrap();
        let a = singular_values(&phi).unwrap();
        let b = singular_values(&phi.transpose()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!(a.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn densenet_feature_dim_is_full_concat() {
        let critic = net(BlockKind::Densenet, 5, 3, 4, false, 0);
        let z = Tensor::matrix(7, 5, (0..35).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(critic_features(&critic, &z).unwrap().cols(), 5 + 3 * 4);
    }

    #[test]
    fn constant_batch_has_rank_one() {
        let critic = net(BlockKind::Densenet, 3, 2, 4, false, 1);
        let z = Tensor::matrix(10, 3, [0.2, -0.4, 0.9].repeat(10)).unwrap();
        let f = critic_features(&critic, &z).unwrap();
        assert_eq!(effective_rank(&f, 0.01).unwrap(), 1);
    }

    #[test]
    fn filter_normalize_matches_slice_norms() {
        let critic = net(BlockKind::Mlp, 4, 3, 5, true, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_direction(&critic, &mut rng).unwrap();
        let off = offsets(&critic);
        for layer in critic.dense_layers() {
            let w = critic.params.value(layer.weight);
            for j in 0..layer.out_dim {
                let col = |v: &[f64]| {
                    (0..layer.in_dim).map(|k| v[k * layer.out_dim + j].powi(2)).sum::<f64>().sqrt()
                };
                let dn = col(&d[off[layer.weight]..]);
                assert!((dn - col(w.data())).abs() < 1e-12);
            }
            if let Some(b) = layer.bias {
                let len = critic.params.value(b).len();
                assert!(d[off[b]..off[b] + len].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn filter_normalize_slice_cases() {
        let mut critic = net(BlockKind::Mlp, 2, 0, 1, false, 0);
        let w = critic.params.find("head.weight").unwrap();
        critic.params.get_mut(w).value = Tensor::matrix(2, 1, vec![3.0, 0.0]).unwrap();
        let mut d = vec![0.6, 0.8, 5.0];
        filter_normalize(&critic, &mut d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((d[0] - 1.8).abs() < 1e-12 && (d[1] - 2.4).abs() < 1e-12);
        assert_eq!(d[2], 0.0);
        critic.params.get_mut(w).value = Tensor::zeros(&[2, 1]);
        let mut d = vec![0.6, 0.8, 5.0];
        filter_normalize(&critic, &mut d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_direction_slice_is_redrawn() {
        let critic = net(BlockKind::Mlp, 3, 0, 1, false, 4);
        let mut d = vec![0.0; critic.params.numel()];
        filter_normalize(&critic, &mut d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let wn = critic.params.value(critic.params.find("head.weight").unwrap()).norm();
        let dn = d[..3].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dn - wn).abs() < 1e-12);
    }

    #[test]
    fn surface_center_and_cells() {
        // one input, no hidden layers: Q = w·z + b, two parameters
        let critic = net(BlockKind::Mlp, 1, 0, 1, false, 5);
        let z = Tensor::matrix(6, 1, vec![-1.0, -0.5, 0.0, 0.3, 0.8, 1.5]).unwrap();
        let q_hat = vec![0.5, -0.2, 0.1, 0.9, -1.0, 0.4];
        let (d1, d2) = (vec![0.7, -0.3], vec![-0.2, 1.1]);
        let coords = grid_coords(5, 1.0);
        let g = loss_surface(&critic, &z, &q_hat, &d1, &d2, &coords, &coords).unwrap();
        assert!((g.center().unwrap() - j_q(&critic, &z, &q_hat).unwrap()).abs() < 1e-10);
        let theta = critic.params.flatten();
        for (i, a) in coords.iter().enumerate() {
            for (j, b) in coords.iter().enumerate() {
                let w = theta[0] + a * d1[0] + b * d2[0];
                let c = theta[1] + a * d1[1] + b * d2[1];
                let mut s = 0.0;
                for r in 0..6 {
                    s += 0.5 * (w * z.data()[r] + c - q_hat[r]).powi(2);
                }
                assert!((g.loss[i][j] - s / 6.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn exact_targets_give_zero_center() {
        let critic = net(BlockKind::Densenet, 2, 2, 3, false, 6);
        let z = Tensor::matrix(4, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let q = critic.forward_eval(&mut tape, zv, false).unwrap().out;
        let q_hat = tape.value(q).data().to_vec();
        let n = critic.params.numel();
        let g = loss_surface(&critic, &z, &q_hat, &vec![0.1; n], &vec![-0.1; n], &[0.0], &[0.0]).unwrap();
        assert_eq!(g.center(), Some(0.0));
    }

    #[test]
    fn grid_coords_include_zero() {
        let c = grid_coords(25, 1.0);
        assert_eq!(c.len(), 25);
        assert_eq!(c[12], 0.0);
        assert_eq!(c[0], -1.0);
        assert_eq!(c[24], 1.0);
    }

    #[test]
    fn surface_csv_shape() {
        let critic = net(BlockKind::Mlp, 1, 0, 1, false, 5);
        let z = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let c = grid_coords(3, 0.5);
        let g = loss_surface(&critic, &z, &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0], &c, &c).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("a,b,loss\n"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let ds = SurfaceDataset {
            s: Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 1e-9, 7.0]).unwrap(),
            a: Tensor::matrix(2, 1, vec![0.5, -2.0]).unwrap(),
            q_hat: vec![-12.5, 0.125],
        };
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(SurfaceDataset::read_csv(&buf[..]).unwrap(), ds);
    }
}
