//! Background demotion with per-container prioritization and upper-bound
//! enforcement.
//!
//! A container whose local usage is at or below its lower protection is
//! exempt from pressure-driven demotion. Every other container gets a scan
//! window sized by how far it sits above its protection, and the windows are
//! consumed in interleaved batches proportional to their size until the local
//! tier climbs back above the high watermark.

use crate::memory::{MemError, MemoryManager, WatermarkState};
use crate::model::{ContainerId, Policy, Tick, Tier};
use crate::promotion;

/// Pages scanned per round by the container with the largest window.
const SCAN_BATCH: u64 = 32;

/// Number of LRU pages to consider for demotion:
/// `n_lru * (n_cgroup - n_protection) / n_cgroup`, floored, and zero when the
/// container is at or below its protection.
pub fn scan_size(n_lru: u64, n_cgroup: u64, n_protection: u64) -> u64 {
    if n_cgroup == 0 || n_cgroup <= n_protection {
        return 0;
    }
    let over = (n_cgroup - n_protection) as u128;
    (n_lru as u128 * over / n_cgroup as u128) as u64
}

/// Demotion scan size for a container using its current local LRU size.
pub fn demotion_scan_size(mm: &MemoryManager, c: ContainerId) -> Result<u64, MemError> {
    let cont = mm.container(c)?;
    Ok(scan_size(
        mm.lru_len(c, Tier::Local),
        cont.local_usage,
        cont.lower_protection,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemotionEntry {
    pub container: ContainerId,
    pub exempt: bool,
    /// Pressure-driven window, zero when exempt or when there is no pressure.
    pub d_scan: u64,
    /// Pages above the upper-bound headroom line.
    pub bound_scan: u64,
    pub overage_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DemotionPlan {
    /// Whether local memory pressure triggered this plan.
    pub pressure: bool,
    /// Ordered by descending overage ratio.
    pub entries: Vec<DemotionEntry>,
}

impl DemotionPlan {
    pub fn entry(&self, c: ContainerId) -> Option<&DemotionEntry> {
        self.entries.iter().find(|e| e.container == c)
    }

    pub fn has_work(&self) -> bool {
        self.entries.iter().any(|e| e.d_scan > 0 || e.bound_scan > 0)
    }
}

fn overage_ratio(local: u64, protection: u64) -> f64 {
    if protection == 0 {
        if local == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        local as f64 / protection as f64
    }
}

/// Builds this pass's plan. `pressure` is set when the local tier is short of
/// free pages; without it only containers approaching their upper bound get
/// work. Re-evaluates every container's promotion-throttle flag against the
/// current watermark so demotion and promotion never pull in opposite
/// directions at full strength.
pub fn build_demotion_plan(mm: &mut MemoryManager, policy: &Policy, pressure: bool) -> DemotionPlan {
    let wm = mm.watermark_state();
    let cfg = mm.config().clone();
    let ids: Vec<ContainerId> = mm.container_ids().collect();
    let mut entries = Vec::with_capacity(ids.len());
    for c in ids {
        let n_lru = mm.lru_len(c, Tier::Local);
        let cont = mm.container_mut(c).expect("known id");
        if policy.promotion_throttling {
            cont.throttled = promotion::promotion_throttled(cont, wm, &cfg);
        }
        let exempt = cont.local_usage <= cont.lower_protection;
        let d_scan = if pressure && !exempt {
            scan_size(n_lru, cont.local_usage, cont.lower_protection)
        } else {
            0
        };
        let bound_scan = cont.upper_bound.map_or(0, |b| {
            let line = b - cfg.headroom_for(b);
            cont.local_usage.saturating_sub(line)
        });
        entries.push(DemotionEntry {
            container: c,
            exempt,
            d_scan,
            bound_scan,
            overage_ratio: overage_ratio(cont.local_usage, cont.lower_protection),
        });
    }
    let usage: Vec<u64> = mm.containers().iter().map(|c| c.local_usage).collect();
    entries.sort_by(|a, b| {
        b.overage_ratio
            .total_cmp(&a.overage_ratio)
            .then(usage[b.container.index()].cmp(&usage[a.container.index()]))
            .then(a.container.cmp(&b.container))
    });
    DemotionPlan { pressure, entries }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DemotionOutcome {
    pub demoted: u64,
    pub deactivated: u64,
    /// CXL could not absorb a demotion; the rest of the plan was abandoned.
    pub cxl_full: bool,
}

enum Step {
    Continue,
    StopAll,
}

fn scan_page(mm: &mut MemoryManager, page: crate::model::PageId, tick: Tick, out: &mut DemotionOutcome) -> Step {
    let Some(p) = mm.page(page) else {
        return Step::Continue;
    };
    if p.tier != Tier::Local {
        return Step::Continue;
    }
    if p.active {
        mm.deactivate(page);
        out.deactivated += 1;
        return Step::Continue;
    }
    match mm.migrate(page, Tier::Cxl, tick) {
        Ok(()) => {
            out.demoted += 1;
            Step::Continue
        }
        Err(_) => {
            out.cxl_full = true;
            Step::StopAll
        }
    }
}

fn cap_reached(mm: &MemoryManager) -> bool {
    mm.config()
        .migration_cap_per_tick
        .is_some_and(|cap| mm.migrations_this_tick() >= cap)
}

/// Executes a plan. Scan windows start at the LRU tail; inactive pages are
/// demoted and active ones are deactivated instead. Upper-bound work always
/// runs to completion, pressure work stops once free local pages rise above
/// the high watermark.
pub fn run_background_demotion(mm: &mut MemoryManager, plan: &DemotionPlan, tick: Tick) -> DemotionOutcome {
    let mut out = DemotionOutcome::default();

    for e in plan.entries.iter().filter(|e| e.bound_scan > 0) {
        for page in mm.lru_tail_window(e.container, Tier::Local, e.bound_scan) {
            if cap_reached(mm) {
                return out;
            }
            if let Step::StopAll = scan_page(mm, page, tick, &mut out) {
                return out;
            }
        }
    }

    if !plan.pressure {
        return out;
    }
    let mut windows: Vec<(std::vec::IntoIter<crate::model::PageId>, u64)> = plan
        .entries
        .iter()
        .filter(|e| e.d_scan > 0)
        .map(|e| (mm.lru_tail_window(e.container, Tier::Local, e.d_scan).into_iter(), e.d_scan))
        .collect();
    let Some(max_scan) = windows.iter().map(|w| w.1).max() else {
        return out;
    };
    let chunks: Vec<u64> = windows
        .iter()
        .map(|w| (SCAN_BATCH * w.1).div_ceil(max_scan).max(1))
        .collect();

    loop {
        let mut progressed = false;
        for (w, &chunk) in windows.iter_mut().zip(&chunks) {
            for _ in 0..chunk {
                if mm.watermark_state() == WatermarkState::AboveHigh || cap_reached(mm) {
                    return out;
                }
                let Some(page) = w.0.next() else {
                    break;
                };
                progressed = true;
                if let Step::StopAll = scan_page(mm, page, tick, &mut out) {
                    return out;
                }
            }
        }
        if !progressed {
            return out;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SyncOutcome {
    pub freed: u64,
    pub cxl_full: bool,
}

/// Synchronously demotes the container's own LRU-tail local pages until
/// `local_usage + requested` fits under its upper bound. Each attempt demotes
/// at least the pages over the bound and at least `1/sync_batch_divisor` of
/// the local LRU; at most `sync_retries` attempts are made.
pub fn enforce_upper_bound(mm: &mut MemoryManager, c: ContainerId, requested: u64, tick: Tick) -> SyncOutcome {
    let mut out = SyncOutcome::default();
    let Ok(cont) = mm.container(c) else {
        return out;
    };
    let Some(bound) = cont.upper_bound else {
        return out;
    };
    let (divisor, retries) = (mm.config().sync_batch_divisor, mm.config().sync_retries);
    for _ in 0..retries {
        let local = mm.container(c).map(|c| c.local_usage).unwrap_or(0);
        if local + requested <= bound || local == 0 {
            break;
        }
        let over = local + requested - bound;
        let batch = over.max(mm.lru_len(c, Tier::Local) / divisor).min(local);
        let (done, full) = mm.demote_tail(c, batch, tick);
        out.freed += done;
        if let Ok(cont) = mm.container_mut(c) {
            cont.counters.sync_demotions += done;
        }
        if full {
            out.cxl_full = true;
            break;
        }
    }
    out
}
