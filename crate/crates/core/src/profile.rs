//! Per-operator-type time accounting for network forwards.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Primitive operator categories, the granularity of the runtime breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Conv,
    DepthwiseConv,
    BatchNorm,
    Relu,
    Add,
    Concat,
    AvgPool,
    Se,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Conv,
        OpKind::DepthwiseConv,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::Add,
        OpKind::Concat,
        OpKind::AvgPool,
        OpKind::Se,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::DepthwiseConv => "dconv",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::AvgPool => "avgpool",
            OpKind::Se => "se",
        }
    }

    fn slot(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap()
    }
}

/// Accumulated wall-clock time and invocation count per operator kind.
#[derive(Clone, Debug, Default)]
pub struct Profile {
    enabled: bool,
    totals: [Duration; 8],
    counts: [u64; 8],
}

impl Profile {
    /// Profile that records timings.
    pub fn enabled() -> Self {
        Profile {
            enabled: true,
            ..Profile::default()
        }
    }

    /// Profile that skips the clock entirely; for plain forwards.
    pub fn disabled() -> Self {
        Profile::default()
    }

    #[inline]
    pub fn time<T>(&mut self, kind: OpKind, f: impl FnOnce() -> T) -> T {
        if !self.enabled {
            return f();
        }
        let start = Instant::now();
        let out = f();
        self.totals[kind.slot()] += start.elapsed();
        self.counts[kind.slot()] += 1;
        out
    }

    pub fn total(&self, kind: OpKind) -> Duration {
        self.totals[kind.slot()]
    }

    pub fn count(&self, kind: OpKind) -> u64 {
        self.counts[kind.slot()]
    }

    /// Sum of all recorded operator times.
    pub fn sum(&self) -> Duration {
        self.totals.iter().sum()
    }

    pub fn merge(&mut self, other: &Profile) {
        for i in 0..8 {
            self.totals[i] += other.totals[i];
            self.counts[i] += other.counts[i];
        }
    }
}
