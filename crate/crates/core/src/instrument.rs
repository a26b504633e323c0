//! Per-thread counters of attention-module invocations.

use std::cell::Cell;

thread_local! {
    static GLOBAL_CONTEXT_RUNS: Cell<u64> = const { Cell::new(0) };
    static PART_ATTENTION_RUNS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionCounts {
    pub global_context: u64,
    pub part_attention: u64,
}

impl AttentionCounts {
    pub fn total(&self) -> u64 {
        self.global_context + self.part_attention
    }
}

pub(crate) fn record_global_context() {
    GLOBAL_CONTEXT_RUNS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_part_attention() {
    PART_ATTENTION_RUNS.with(|c| c.set(c.get() + 1));
}

pub fn counts() -> AttentionCounts {
    AttentionCounts {
        global_context: GLOBAL_CONTEXT_RUNS.with(Cell::get),
        part_attention: PART_ATTENTION_RUNS.with(Cell::get),
    }
}

pub fn reset() {
    GLOBAL_CONTEXT_RUNS.with(|c| c.set(0));
    PART_ATTENTION_RUNS.with(|c| c.set(0));
}
