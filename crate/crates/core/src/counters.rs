//! Operation counters used by the inference-purity and
//! full-precision-path assertions.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Default)]
pub struct OpCounters {
    /// Packed XNOR/popcount kernel invocations.
    pub packed_conv: AtomicU64,
    /// Dense (real-valued) convolution invocations.
    pub dense_conv: AtomicU64,
    /// Attention-mask constructions (restriction machinery).
    pub restrict_mask: AtomicU64,
    /// Whole-model forward passes.
    pub forward: AtomicU64,
}

/// Point-in-time copy for before/after comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub packed_conv: u64,
    pub dense_conv: u64,
    pub restrict_mask: u64,
    pub forward: u64,
}

impl OpCounters {
    pub fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            packed_conv: self.packed_conv.load(Ordering::Relaxed),
            dense_conv: self.dense_conv.load(Ordering::Relaxed),
            restrict_mask: self.restrict_mask.load(Ordering::Relaxed),
            forward: self.forward.load(Ordering::Relaxed),
        }
    }
}
