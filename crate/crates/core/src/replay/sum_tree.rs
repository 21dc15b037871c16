/// Binary sum tree over a fixed number of leaves.
///
/// Internal node `i` stores the sum of its children `2i` and `2i + 1`; leaves
/// start at `base` (a power of two), so the root is node 1.
#[derive(Clone, Debug)]
pub struct SumTree {
    base: usize,
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let base = capacity.max(1).next_power_of_two();
        Self {
            base,
            capacity,
            nodes: vec![0.0; 2 * base],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.base + leaf]
    }

    /// Sets a leaf and refreshes the sums on its path to the root.
    pub fn set(&mut self, leaf: usize, value: f64) {
        debug_assert!(leaf < self.capacity);
        let mut i = self.base + leaf;
        self.nodes[i] = value;
        i /= 2;
        while i >= 1 {
            // recompute rather than add deltas so rounding never accumulates
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
            i /= 2;
        }
    }

    /// Leaf whose cumulative interval contains `mass`, restricted to leaves
    /// with positive value. `mass` is clamped into `[0, total)`.
    pub fn find(&self, mass: f64) -> usize {
        let mut mass = mass.clamp(0.0, self.total());
        let mut i = 1;
        while i < self.base {
            let left = self.nodes[2 * i];
            let right = self.nodes[2 * i + 1];
            if mass < left || right <= 0.0 {
                i *= 2;
            } else {
                mass -= left;
                i = 2 * i + 1;
            }
        }
        let leaf = i - self.base;
        if self.nodes[i] > 0.0 {
            return leaf;
        }
        // rounding pushed us onto an empty leaf; fall back to the nearest live one
        (0..leaf)
            .rev()
            .chain(leaf + 1..self.capacity)
            .find(|&l| self.get(l) > 0.0)
            .unwrap_or(leaf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_is_sum() {
        let mut t = SumTree::new(5);
        for (i, v) in [1.0, 2.0, 3.0, 4.0, 5.0].iter().enumerate() {
            t.set(i, *v);
        }
        assert_eq!(t.total(), 15.0);
        t.set(2, 0.5);
        assert_eq!(t.total(), 12.5);
    }

    #[test]
    fn find_intervals() {
        let mut t = SumTree::new(3);
        t.set(0, 1.0);
        t.set(1, 3.0);
        t.set(2, 2.0);
        assert_eq!(t.find(0.0), 0);
        assert_eq!(t.find(0.999), 0);
        assert_eq!(t.find(1.0), 1);
        assert_eq!(t.find(3.999), 1);
        assert_eq!(t.find(4.0), 2);
        assert_eq!(t.find(100.0), 2);
    }

    #[test]
    fn find_skips_empty_leaves() {
        let mut t = SumTree::new(4);
        t.set(0, 1.0);
        assert_eq!(t.find(1.0), 0);
    }
}
