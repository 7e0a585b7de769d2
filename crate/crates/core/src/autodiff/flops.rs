use serde::{Deserialize, Serialize};

/// Which part of the network an operation belongs to, for FLOP accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlopScope {
    Embedding,
    AttentionProjections,
    AttentionScores,
    Ffn,
    Fusion,
    Classifier,
    Other,
}

impl FlopScope {
    pub const ALL: [FlopScope; 7] = [
        FlopScope::Embedding,
        FlopScope::AttentionProjections,
        FlopScope::AttentionScores,
        FlopScope::Ffn,
        FlopScope::Fusion,
        FlopScope::Classifier,
        FlopScope::Other,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

// Per-element FLOP constants for non-matmul work. A multiply-add is 2.
pub const ADD_PER_ELEM: u64 = 1;
pub const MUL_PER_ELEM: u64 = 1;
pub const AFFINE_PER_ELEM: u64 = 2;
pub const SOFTMAX_PER_ELEM: u64 = 4;
pub const LAYER_NORM_PER_ELEM: u64 = 8;
pub const GELU_PER_ELEM: u64 = 8;
pub const CUMSUM_PER_ELEM: u64 = 1;
pub const CLAMP_PER_ELEM: u64 = 1;
pub const SUM_PER_ELEM: u64 = 1;
pub const CROSS_ENTROPY_PER_LOGIT: u64 = 4;

/// Instrumented forward-pass operation counter.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    matmul: [u64; 7],
    elementwise: [u64; 7],
}

impl FlopCounter {
    pub(crate) fn add_matmul(&mut self, scope: FlopScope, flops: u64) {
        self.matmul[scope.index()] += flops;
    }

    pub(crate) fn add_elementwise(&mut self, scope: FlopScope, flops: u64) {
        self.elementwise[scope.index()] += flops;
    }

    pub fn matmul(&self, scope: FlopScope) -> u64 {
        self.matmul[scope.index()]
    }

    pub fn elementwise(&self, scope: FlopScope) -> u64 {
        self.elementwise[scope.index()]
    }

    pub fn total(&self) -> u64 {
        self.matmul.iter().sum::<u64>() + self.elementwise.iter().sum::<u64>()
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for i in 0..7 {
            self.matmul[i] += other.matmul[i];
            self.elementwise[i] += other.elementwise[i];
        }
    }
}
