//! Prioritized experience replay.

mod buffer;
mod sum_tree;

pub use buffer::{
    annealed_beta, PrioritizedBuffer, ReplayMode, SampleIndex, SampledBatch, Transition,
};
pub use sum_tree::SumTree;
