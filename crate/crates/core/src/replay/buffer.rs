use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::SumTree;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// Terminal flag: when set the target does not bootstrap from `s_next`.
    pub done: bool,
    /// Snapshot version of the policy that produced the action.
    pub version: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    Prioritized,
    Uniform,
}

/// Identifies a sampled slot together with the occupant it held at sampling time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleIndex {
    pub slot: usize,
    pub generation: u64,
}

#[derive(Clone, Debug)]
pub struct SampledBatch {
    pub transitions: Vec<Transition>,
    pub indices: Vec<SampleIndex>,
    pub is_weights: Vec<f64>,
}

/// Ring buffer with proportional prioritization over a sum tree.
///
/// The tree stores `p_i^α`; `P(i) = p_i^α / Σ_j p_j^α`. In uniform mode every
/// leaf is 1 and every importance weight is 1, which makes it identical to
/// prioritized mode with `α = 0` under the same RNG stream.
#[derive(Clone, Debug)]
pub struct PrioritizedBuffer {
    alpha: f64,
    eps: f64,
    mode: ReplayMode,
    tree: SumTree,
    slots: Vec<Option<Transition>>,
    priorities: Vec<f64>,
    generations: Vec<u64>,
    cursor: usize,
    len: usize,
    max_priority: f64,
    stale_updates: u64,
}

impl PrioritizedBuffer {
    pub fn new(capacity: usize, alpha: f64, eps: f64, mode: ReplayMode) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Replay("capacity must be positive".into()));
        }
        if alpha < 0.0 || !alpha.is_finite() {
            return Err(Error::Replay(format!("alpha must be >= 0, got {alpha}")));
        }
        if eps <= 0.0 {
            return Err(Error::Replay(format!("priority epsilon must be > 0, got {eps}")));
        }
        Ok(Self {
            alpha,
            eps,
            mode,
            tree: SumTree::new(capacity),
            slots: vec![None; capacity],
            priorities: vec![0.0; capacity],
            generations: vec![0; capacity],
            cursor: 0,
            len: 0,
            max_priority: 1.0,
            stale_updates: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    /// Sum of `p_i^α` at the tree root.
    pub fn total(&self) -> f64 {
        self.tree.total()
    }

    /// Direct sum over live leaves, for auditing the tree.
    pub fn naive_total(&self) -> f64 {
        (0..self.capacity())
            .filter(|&i| self.slots[i].is_some())
            .map(|i| self.tree.get(i))
            .sum()
    }

    pub fn priority(&self, slot: usize) -> Option<f64> {
        self.slots.get(slot)?.as_ref().map(|_| self.priorities[slot])
    }

    pub fn stale_updates(&self) -> u64 {
        self.stale_updates
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    pub fn transition(&self, slot: usize) -> Option<&Transition> {
        self.slots.get(slot)?.as_ref()
    }

    fn leaf_value(&self, p: f64) -> f64 {
        match self.mode {
            ReplayMode::Uniform => 1.0,
            ReplayMode::Prioritized => p.powf(self.alpha),
        }
    }

    /// Inserts at the ring cursor. Without an explicit priority the current
    /// maximum is used, so fresh data gets sampled soon.
    pub fn add(&mut self, t: Transition, priority: Option<f64>) -> Result<usize> {
        let p = priority.unwrap_or(self.max_priority);
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::Replay(format!("priority must be positive and finite, got {p}")));
        }
        if !t.r.is_finite() {
            return Err(Error::NonFinite("transition reward".into()));
        }
        let slot = self.cursor;
        self.slots[slot] = Some(t);
        self.generations[slot] += 1;
        self.priorities[slot] = p;
        self.max_priority = self.max_priority.max(p);
        let leaf = self.leaf_value(p);
        self.tree.set(slot, leaf);
        self.cursor = (self.cursor + 1) % self.capacity();
        self.len = (self.len + 1).min(self.capacity());
        Ok(slot)
    }

    /// Stratified proportional sampling: one draw per equal-mass segment.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.len == 0 {
            return Err(Error::Replay("cannot sample from an empty buffer".into()));
        }
        if batch_size == 0 || batch_size > self.len {
            return Err(Error::Replay(format!(
                "batch of {batch_size} requested from {} stored transitions",
                self.len
            )));
        }
        let total = self.tree.total();
        let segment = total / batch_size as f64;
        Ok((0..batch_size)
            .map(|j| {
                let u: f64 = rng.gen();
                self.tree.find((j as f64 + u) * segment)
            })
            .collect())
    }

    /// `P(i)` for a live slot.
    pub fn probability(&self, slot: usize) -> f64 {
        self.tree.get(slot) / self.tree.total()
    }

    /// Importance weights `(N·P(i))^{-β}` normalized by the batch maximum.
    pub fn is_weights(&self, slots: &[usize], beta: f64) -> Vec<f64> {
        if self.mode == ReplayMode::Uniform {
            return vec![1.0; slots.len()];
        }
        let n = self.len as f64;
        let raw: Vec<f64> = slots
            .iter()
            .map(|&i| (n * self.probability(i)).powf(-beta))
            .collect();
        let max = raw.iter().cloned().fold(f64::MIN, f64::max);
        raw.iter().map(|w| w / max).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, beta: f64, rng: &mut R) -> Result<SampledBatch> {
        let slots = self.sample_indices(batch_size, rng)?;
        let is_weights = self.is_weights(&slots, beta);
        let transitions = slots
            .iter()
            .map(|&i| self.slots[i].clone().expect("sampled a live slot"))
            .collect();
        let indices = slots
            .iter()
            .map(|&slot| SampleIndex {
                slot,
                generation: self.generations[slot],
            })
            .collect();
        Ok(SampledBatch {
            transitions,
            indices,
            is_weights,
        })
    }

    /// `p_i ← |δ_i| + ε`. Entries overwritten since sampling are skipped and counted.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], td_errors: &[f64]) -> Result<()> {
        if indices.len() != td_errors.len() {
            return Err(Error::Replay(format!(
                "{} indices but {} TD errors",
                indices.len(),
                td_errors.len()
            )));
        }
        for (idx, td) in indices.iter().zip(td_errors) {
            if idx.slot >= self.capacity() {
                return Err(Error::Replay(format!("slot {} out of range", idx.slot)));
            }
            if !td.is_finite() {
                return Err(Error::NonFinite(format!("TD error for slot {}", idx.slot)));
            }
            if self.generations[idx.slot] != idx.generation || self.slots[idx.slot].is_none() {
                self.stale_updates += 1;
                continue;
            }
            let p = td.abs() + self.eps;
            self.priorities[idx.slot] = p;
            self.max_priority = self.max_priority.max(p);
            let leaf = self.leaf_value(p);
            self.tree.set(idx.slot, leaf);
        }
        Ok(())
    }
}

/// Linear annealing of the importance exponent from `start` to `end`.
pub fn annealed_beta(start: f64, end: f64, step: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return end;
    }
    let frac = (step as f64 / horizon as f64).min(1.0);
    start + (end - start) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(r: f64) -> Transition {
        Transition {
            s: vec![r],
            a: vec![0.0],
            r,
            s_next: vec![r],
            done: false,
            version: 0,
        }
    }

    #[test]
    fn add_to_empty() {
        let mut b = PrioritizedBuffer::new(4, 0.6, 1e-6, ReplayMode::Prioritized).unwrap();
        b.add(tr(0.0), Some(2.0)).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b.total() - 2f64.powf(0.6)).abs() < 1e-15);
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = PrioritizedBuffer::new(2, 1.0, 1e-6, ReplayMode::Prioritized).unwrap();
        b.add(tr(1.0), Some(1.0)).unwrap();
        b.add(tr(2.0), Some(1.0)).unwrap();
        let slot = b.add(tr(3.0), Some(1.0)).unwrap();
        assert_eq!(slot, 0);
        assert_eq!(b.len(), 2);
        assert_eq!(b.transition(0).unwrap().r, 3.0);
        assert_eq!(b.transition(1).unwrap().r, 2.0);
    }

    #[test]
    fn rejects_bad_priority_and_empty_sample() {
        let mut b = PrioritizedBuffer::new(2, 1.0, 1e-6, ReplayMode::Prioritized).unwrap();
        assert!(b.add(tr(0.0), Some(0.0)).is_err());
        assert!(b.add(tr(0.0), Some(-1.0)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample(1, 0.4, &mut rng).is_err());
    }

    #[test]
    fn default_priority_is_running_max() {
        let mut b = PrioritizedBuffer::new(4, 1.0, 1e-6, ReplayMode::Prioritized).unwrap();
        b.add(tr(0.0), Some(5.0)).unwrap();
        let s = b.add(tr(0.0), None).unwrap();
        assert_eq!(b.priority(s), Some(5.0));
    }

    #[test]
    fn alpha_zero_is_uniform_with_unit_weights() {
        let mut b = PrioritizedBuffer::new(8, 0.0, 1e-6, ReplayMode::Prioritized).unwrap();
        for i in 0..8 {
            b.add(tr(i as f64), Some(1.0 + i as f64)).unwrap();
        }
        for i in 0..8 {
            assert!((b.probability(i) - 0.125).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = b.sample(4, 0.7, &mut rng).unwrap();
        assert!(batch.is_weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn weight_formula_two_items() {
        let mut b = PrioritizedBuffer::new(2, 1.0, 1e-6, ReplayMode::Prioritized).unwrap();
        b.add(tr(0.0), Some(1.0)).unwrap();
        b.add(tr(1.0), Some(3.0)).unwrap();
        assert!((b.probability(0) - 0.25).abs() < 1e-15);
        assert!((b.probability(1) - 0.75).abs() < 1e-15);
        let w = b.is_weights(&[0, 1], 1.0);
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn td_zero_floors_at_epsilon() {
        let mut b = PrioritizedBuffer::new(2, 1.0, 1e-6, ReplayMode::Prioritized).unwrap();
        let s = b.add(tr(0.0), Some(1.0)).unwrap();
        let idx = SampleIndex { slot: s, generation: 1 };
        b.update_priorities(&[idx], &[0.0]).unwrap();
        assert_eq!(b.priority(s), Some(1e-6));
    }

    #[test]
    fn stale_updates_dropped() {
        let mut b = PrioritizedBuffer::new(1, 1.0, 1e-6, ReplayMode::Prioritized).unwrap();
        b.add(tr(0.0), Some(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = b.sample(1, 0.4, &mut rng).unwrap();
        b.add(tr(1.0), Some(2.0)).unwrap();
        b.update_priorities(&batch.indices, &[10.0]).unwrap();
        assert_eq!(b.priority(0), Some(2.0));
        assert_eq!(b.stale_updates(), 1);
    }

    #[test]
    fn uniform_mode_matches_alpha_zero_stream() {
        let mut u = PrioritizedBuffer::new(16, 0.6, 1e-6, ReplayMode::Uniform).unwrap();
        let mut z = PrioritizedBuffer::new(16, 0.0, 1e-6, ReplayMode::Prioritized).unwrap();
        for i in 0..16 {
            u.add(tr(i as f64), Some(0.1 + i as f64)).unwrap();
            z.add(tr(i as f64), Some(0.1 + i as f64)).unwrap();
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let a = u.sample(8, 0.5, &mut r1).unwrap();
            let b = z.sample(8, 0.5, &mut r2).unwrap();
            assert_eq!(a.indices, b.indices);
            assert_eq!(a.is_weights, b.is_weights);
        }
    }

    #[test]
    fn beta_annealing() {
        assert_eq!(annealed_beta(0.4, 1.0, 0, 100), 0.4);
        assert!((annealed_beta(0.4, 1.0, 50, 100) - 0.7).abs() < 1e-15);
        assert_eq!(annealed_beta(0.4, 1.0, 500, 100), 1.0);
    }
}
