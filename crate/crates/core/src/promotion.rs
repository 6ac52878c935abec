//! Promotion of hot CXL pages under the per-container throttle.

use crate::demotion;
use crate::memory::{MemoryManager, WatermarkState};
use crate::model::{Container, ContainerId, MachineConfig, PageId, Policy, Tick, Tier};

/// Lowest fraction of the base scan rate a throttled container keeps.
pub const THROTTLE_FLOOR: f64 = 1.0 / 16.0;

/// Throttle factor `max((n_protection / n_cgroup)^4, 1/16)`, capped at 1.
///
/// The factor shrinks with the fourth power of the overage so small bursts
/// over protection barely slow promotion while large ones cut it hard.
pub fn throttle_factor(n_cgroup: u64, n_protection: u64) -> f64 {
    if n_cgroup == 0 || n_cgroup <= n_protection {
        return 1.0;
    }
    let ratio = n_protection as f64 / n_cgroup as f64;
    ratio.powi(4).max(THROTTLE_FLOOR)
}

/// A container is throttled when it is over its lower protection while the
/// local tier is not above its high watermark, or when its local usage is
/// within the headroom of its upper bound.
pub fn promotion_throttled(c: &Container, wm: WatermarkState, cfg: &MachineConfig) -> bool {
    let over_and_full = c.local_usage > c.lower_protection && wm != WatermarkState::AboveHigh;
    let near_bound = c
        .upper_bound
        .is_some_and(|b| c.local_usage >= b - cfg.headroom_for(b));
    over_and_full || near_bound
}

/// Unthrottled scan budget: `p_base_fraction` of the CXL-resident pages, rounded up.
pub fn base_scan(c: &Container, cfg: &MachineConfig) -> u64 {
    (c.cxl_usage as f64 * cfg.p_base_fraction).ceil() as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromotionBudget {
    pub p_base: u64,
    pub throttle_factor: f64,
    pub effective_scan: u64,
}

/// Scan budget for this pass. Uses the container's `throttled` flag as
/// already evaluated; the thrash multiplier always applies.
pub fn promotion_budget(c: &Container, cfg: &MachineConfig) -> PromotionBudget {
    let p_base = base_scan(c, cfg);
    let factor = if c.throttled {
        throttle_factor(c.local_usage, c.lower_protection)
    } else {
        1.0
    };
    let effective_scan = (p_base as f64 * factor * c.promo_multiplier.value()).floor() as u64;
    PromotionBudget {
        p_base,
        throttle_factor: factor,
        effective_scan,
    }
}

pub fn promotion_scan_size(c: &Container, cfg: &MachineConfig) -> u64 {
    promotion_budget(c, cfg).effective_scan
}

/// Up to `budget` candidate pages, most recently hot first. Counts them as
/// promotion attempts.
pub fn collect_candidates(mm: &mut MemoryManager, c: ContainerId, budget: u64) -> Vec<PageId> {
    let picked: Vec<PageId> = mm.candidates(c).take(budget as usize).collect();
    if let Ok(cont) = mm.container_mut(c) {
        cont.counters.promotion_attempts += picked.len() as u64;
    }
    picked
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PromotionOutcome {
    pub promoted: u64,
    pub skipped: u64,
    pub sync_demoted: u64,
}

/// Containers below their protection go first, deepest deficit first; the
/// rest follow by ascending overage ratio.
fn promotion_order(mm: &MemoryManager) -> Vec<ContainerId> {
    let mut ids: Vec<ContainerId> = mm.container_ids().collect();
    let key = |c: &Container| {
        if c.lower_protection == 0 {
            f64::INFINITY
        } else {
            c.local_usage as f64 / c.lower_protection as f64
        }
    };
    ids.sort_by(|a, b| {
        let (ca, cb) = (&mm.containers()[a.index()], &mm.containers()[b.index()]);
        key(ca).total_cmp(&key(cb)).then(a.cmp(b))
    });
    ids
}

/// One promotion pass over every container.
///
/// Promotions take local frames above the low watermark. A container at its
/// upper bound makes room by synchronously demoting its own LRU tail first,
/// and the frames freed that way are available to it even below the low
/// watermark. Candidates that find no frame stay candidates.
pub fn run_promotion(mm: &mut MemoryManager, policy: &Policy, tick: Tick) -> PromotionOutcome {
    let mut out = PromotionOutcome::default();
    let cfg = mm.config().clone();
    let wm = mm.watermark_state();

    for c in promotion_order(mm) {
        let cont = mm.container_mut(c).expect("known id");
        cont.protection_starved = false;
        cont.throttled = policy.promotion_throttling && promotion_throttled(cont, wm, &cfg);
        let budget = promotion_scan_size(cont, &cfg);
        if budget == 0 {
            continue;
        }
        let picked = collect_candidates(mm, c, budget);
        if picked.is_empty() {
            continue;
        }

        let mut own_frames = 0;
        if let Some(bound) = mm.container(c).expect("known id").upper_bound {
            let local = mm.container(c).expect("known id").local_usage;
            if local + picked.len() as u64 > bound {
                let sync = demotion::enforce_upper_bound(mm, c, picked.len() as u64, tick);
                own_frames = sync.freed;
                out.sync_demoted += sync.freed;
            }
        }

        for (i, &page) in picked.iter().enumerate() {
            if cfg
                .migration_cap_per_tick
                .is_some_and(|cap| mm.migrations_this_tick() >= cap)
            {
                out.skipped += (picked.len() - i) as u64;
                return out;
            }
            let cont = mm.container(c).expect("known id");
            let under_bound = cont.upper_bound.is_none_or(|b| cont.local_usage < b);
            let frame = own_frames > 0 || mm.free_pages(Tier::Local) > cfg.low_watermark;
            if under_bound && frame && mm.migrate(page, Tier::Local, tick).is_ok() {
                own_frames = own_frames.saturating_sub(1);
                out.promoted += 1;
            } else {
                out.skipped += 1;
                let cont = mm.container_mut(c).expect("known id");
                if cont.local_usage < cont.lower_protection && !frame {
                    cont.protection_starved = true;
                }
            }
        }
    }
    out
}
