//! Synthetic access-pattern generators.
//!
//! Generators address their memory by slot: slot `i` is the `i`-th page the
//! workload allocated and still holds. The driver maps slots to page ids.

use serde::{Deserialize, Serialize};

use crate::model::{MachineConfig, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    /// Allocate once, then sequential passes over the hot fraction.
    Streaming,
    /// Streaming over a footprint that follows a schedule of targets.
    Bursty,
    /// Visit the footprint block by block, touching each block twice and
    /// then leaving it alone until the next lap.
    Thrashing,
    Idle,
}

/// Footprint target that takes effect `at` ticks after launch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BurstStep {
    pub at: Tick,
    pub footprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Pages; for bursty workloads the footprint before the first step.
    pub footprint: u64,
    /// Accesses per hot page per simulated second.
    pub hotness: f64,
    pub hot_fraction: f64,
    pub launch_delay: Tick,
    pub burst_profile: Vec<BurstStep>,
    /// Pages per tick visited by a thrashing workload.
    pub block_size: Option<u64>,
    /// Pages allocated per tick while ramping up; unlimited when unset.
    pub alloc_rate: Option<u64>,
}

impl WorkloadSpec {
    pub fn streaming(footprint: u64, hotness: f64) -> Self {
        WorkloadSpec {
            kind: WorkloadKind::Streaming,
            footprint,
            hotness,
            hot_fraction: 1.0,
            launch_delay: 0,
            burst_profile: Vec::new(),
            block_size: None,
            alloc_rate: None,
        }
    }

    pub fn thrashing(footprint: u64, block_size: u64) -> Self {
        WorkloadSpec {
            kind: WorkloadKind::Thrashing,
            block_size: Some(block_size),
            ..Self::streaming(footprint, 0.0)
        }
    }

    pub fn idle() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::Idle,
            ..Self::streaming(1, 0.0)
        }
    }
}

/// Block size a thrashing workload uses when none is given: one lap over the
/// footprint takes three hint windows, so a block is never touched twice
/// within one window across laps.
pub fn default_block_size(footprint: u64, cfg: &MachineConfig) -> u64 {
    footprint.div_ceil(3 * cfg.hint_window).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Request {
    Allocate(u64),
    Access(usize),
    /// Release the most recently allocated `n` slots.
    Free(u64),
}

/// Stateful generator for one container.
#[derive(Debug, Clone)]
pub struct Workload {
    spec: WorkloadSpec,
    block_size: u64,
    tick_seconds: f64,
    slots: u64,
    cursor: usize,
    carry: f64,
    terminated: bool,
}

impl Workload {
    pub fn new(spec: WorkloadSpec, cfg: &MachineConfig) -> Self {
        let block_size = spec
            .block_size
            .unwrap_or_else(|| default_block_size(spec.footprint, cfg));
        Workload {
            spec,
            block_size,
            tick_seconds: cfg.tick_seconds(),
            slots: 0,
            cursor: 0,
            carry: 0.0,
            terminated: false,
        }
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn slots(&self) -> u64 {
        self.slots
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Stops the workload for good, e.g. after an allocation failure.
    pub fn terminate(&mut self) {
        self.terminated = true;
    }

    /// Undo the bookkeeping of an allocation the memory manager refused.
    pub fn allocation_failed(&mut self, n: u64) {
        self.slots = self.slots.saturating_sub(n);
        self.terminate();
    }

    fn target_footprint(&self, since_launch: Tick) -> u64 {
        match self.spec.kind {
            WorkloadKind::Bursty => self
                .spec
                .burst_profile
                .iter()
                .filter(|s| s.at <= since_launch)
                .max_by_key(|s| s.at)
                .map_or(self.spec.footprint, |s| s.footprint),
            WorkloadKind::Idle => 0,
            _ => self.spec.footprint,
        }
    }

    /// Requests for one tick: allocations or frees first, then accesses.
    pub fn next_ops(&mut self, tick: Tick) -> Vec<Request> {
        let mut ops = Vec::new();
        if self.terminated || tick < self.spec.launch_delay || self.spec.kind == WorkloadKind::Idle {
            return ops;
        }
        let target = self.target_footprint(tick - self.spec.launch_delay);
        if self.slots < target {
            let want = target - self.slots;
            let n = self.spec.alloc_rate.map_or(want, |r| r.min(want));
            ops.push(Request::Allocate(n));
            self.slots += n;
        } else if self.slots > target {
            ops.push(Request::Free(self.slots - target));
            self.slots = target;
        }
        if self.slots == 0 {
            return ops;
        }

        match self.spec.kind {
            WorkloadKind::Streaming | WorkloadKind::Bursty => {
                let hot = ((self.slots as f64 * self.spec.hot_fraction).ceil() as usize).max(1);
                let due = self.spec.hotness * hot as f64 * self.tick_seconds + self.carry;
                let n = due.floor();
                self.carry = due - n;
                for _ in 0..n as u64 {
                    if self.cursor >= hot {
                        self.cursor = 0;
                    }
                    ops.push(Request::Access(self.cursor));
                    self.cursor += 1;
                }
            }
            WorkloadKind::Thrashing => {
                let slots = self.slots as usize;
                let block = (self.block_size as usize).min(slots);
                for _ in 0..block {
                    if self.cursor >= slots {
                        self.cursor = 0;
                    }
                    ops.push(Request::Access(self.cursor));
                    ops.push(Request::Access(self.cursor));
                    self.cursor += 1;
                }
            }
            WorkloadKind::Idle => {}
        }
        ops
    }
}
