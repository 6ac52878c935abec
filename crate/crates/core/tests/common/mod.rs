#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use fairtier::memory::TraceEvent;
use fairtier::metrics::MetricsSnapshot;
use fairtier::{parse_scenario, ContainerId, PageId, Scenario, Simulation, Tick, Tier};

/// 1 MiB of 4 KiB pages.
pub const UNIT: u64 = 256;

pub const FIXTURES: &[&str] = &[
    "local_preferred",
    "protection_enforced",
    "protection_donated",
    "upper_bound",
    "thrashing",
    "hotness_asymmetry",
    "launch_order_baseline",
    "launch_order_fair",
    "thrashing_interference",
];

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.toml"))
}

pub fn fixture(name: &str) -> Scenario {
    parse_scenario(&fixture_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn units(pages: u64) -> f64 {
    pages as f64 / UNIT as f64
}

/// Independent model of the two-touch filter, driven by the page trace.
#[derive(Debug, Default)]
pub struct TwoTouchOracle {
    window: Tick,
    pages: HashMap<PageId, OraclePage>,
    pub hint_faults: HashMap<ContainerId, u64>,
}

#[derive(Debug, Clone, Copy)]
struct OraclePage {
    owner: ContainerId,
    tier: Tier,
    prev: Option<Tick>,
    candidate: bool,
}

impl TwoTouchOracle {
    pub fn new(window: Tick) -> Self {
        TwoTouchOracle {
            window,
            ..Default::default()
        }
    }

    pub fn apply(&mut self, ev: &TraceEvent) {
        match *ev {
            TraceEvent::Place { page, owner, tier, .. } => {
                self.pages.insert(
                    page,
                    OraclePage {
                        owner,
                        tier,
                        prev: None,
                        candidate: false,
                    },
                );
            }
            TraceEvent::Free { page } => {
                self.pages.remove(&page);
            }
            TraceEvent::Access { page, tick } => {
                let p = self.pages.get_mut(&page).expect("access to a live page");
                let second = matches!(p.prev, Some(t) if tick - t <= self.window);
                p.prev = Some(tick);
                if second && p.tier == Tier::Cxl {
                    if !p.candidate {
                        *self.hint_faults.entry(p.owner).or_default() += 1;
                    }
                    p.candidate = true;
                }
            }
            TraceEvent::Migrate { page, dest, .. } => {
                let p = self.pages.get_mut(&page).expect("migration of a live page");
                p.tier = dest;
                p.prev = None;
                p.candidate = false;
            }
            TraceEvent::Deactivate { page } => {
                if let Some(p) = self.pages.get_mut(&page) {
                    p.prev = None;
                }
            }
        }
    }

    pub fn is_candidate(&self, page: PageId) -> bool {
        self.pages.get(&page).is_some_and(|p| p.candidate)
    }

    pub fn live_pages(&self) -> impl Iterator<Item = PageId> + '_ {
        self.pages.keys().copied()
    }
}

/// Steps a scenario to the end while checking every run invariant.
/// Returns the first violation found.
pub fn run_checked(scenario: &Scenario) -> Result<Vec<MetricsSnapshot>, String> {
    let cfg = scenario.machine.clone();
    let mut sim = Simulation::new(scenario);
    sim.enable_trace();
    let mut oracle = TwoTouchOracle::new(cfg.hint_window);
    let max_shift = cfg.multiplier_max_shift();
    let sync_slack: Vec<u64> = scenario
        .containers
        .iter()
        .map(|c| {
            let alloc = c.workload.alloc_rate.unwrap_or(c.workload.footprint);
            let lru = c.spec.upper_bound.unwrap_or(0) / cfg.sync_batch_divisor;
            alloc.max(lru).max(1)
        })
        .collect();
    let mut prev_mult: Vec<u8> = vec![0; scenario.containers.len()];

    while !sim.is_done() {
        let tick = sim.tick();
        sim.step();
        let at = |what: String| format!("{} tick {tick}: {what}", scenario.name);

        for ev in sim.take_trace() {
            oracle.apply(&ev);
        }
        let mm = sim.memory();

        let local: u64 = mm.containers().iter().map(|c| c.local_usage).sum();
        let cxl: u64 = mm.containers().iter().map(|c| c.cxl_usage).sum();
        if local + mm.free_pages(Tier::Local) != cfg.local_capacity {
            return Err(at(format!("local pages {local} + free do not add up")));
        }
        if cxl + mm.free_pages(Tier::Cxl) != cfg.cxl_capacity {
            return Err(at(format!("cxl pages {cxl} + free do not add up")));
        }
        let demoted: u64 = mm.containers().iter().map(|c| c.counters.demoted).sum();
        let promoted: u64 = mm.containers().iter().map(|c| c.counters.promoted).sum();
        if demoted != mm.total_demoted() || promoted != mm.total_promoted() {
            return Err(at("per-container migration counters disagree with totals".into()));
        }

        for c in mm.containers() {
            let expect = oracle.hint_faults.get(&c.id).copied().unwrap_or(0);
            if c.counters.hint_faults != expect {
                return Err(at(format!(
                    "{}: hint faults {} but the two-touch oracle counts {expect}",
                    c.name, c.counters.hint_faults
                )));
            }
            if let Some(b) = c.upper_bound {
                if c.local_usage > b + sync_slack[c.id.index()] {
                    return Err(at(format!("{} holds {} local pages over bound {b}", c.name, c.local_usage)));
                }
            }
            let shift = c.promo_multiplier.shift();
            if shift > max_shift {
                return Err(at(format!("{} multiplier below floor", c.name)));
            }
            let old = prev_mult[c.id.index()];
            if shift != old {
                if !(tick + 1).is_multiple_of(cfg.detector_period) {
                    return Err(at(format!("{} multiplier moved off a period boundary", c.name)));
                }
                if shift.abs_diff(old) != 1 {
                    return Err(at(format!("{} multiplier jumped from 2^-{old} to 2^-{shift}", c.name)));
                }
            }
            prev_mult[c.id.index()] = shift;
        }

        if let Some(pass) = sim.last_demotion().filter(|p| p.tick == tick) {
            for e in &pass.plan.entries {
                let i = e.container.index();
                if e.exempt && e.bound_scan == 0 && pass.demoted[i] > 0 {
                    return Err(at(format!("exempt container {i} lost {} pages", pass.demoted[i])));
                }
                if scenario.policy.promotion_throttling && !e.exempt && e.d_scan > 0 && !pass.throttled[i] {
                    return Err(at(format!("container {i} is demoted but promotes unthrottled")));
                }
            }
        }

        if (tick + 1).is_multiple_of(10) {
            mm.check_consistency().map_err(at)?;
            for page in oracle.live_pages() {
                if mm.is_candidate(page) != oracle.is_candidate(page) {
                    return Err(at(format!("candidate set differs from oracle at {page:?}")));
                }
            }
        }
    }

    let snaps = sim.snapshots().to_vec();
    for w in snaps.windows(2) {
        for (a, b) in w[0].containers.iter().zip(&w[1].containers) {
            let pairs = [
                (a.demoted, b.demoted),
                (a.promoted, b.promoted),
                (a.promotion_attempts, b.promotion_attempts),
                (a.hint_faults, b.hint_faults),
                (a.thrash_events, b.thrash_events),
                (a.sync_demotions, b.sync_demotions),
                (a.cxl_fallback_allocs, b.cxl_fallback_allocs),
                (a.freed, b.freed),
                (a.accesses, b.accesses),
            ];
            if pairs.iter().any(|(x, y)| y < x) {
                return Err(format!("{}: counter of {} decreased at tick {}", scenario.name, b.container, w[1].tick));
            }
        }
    }
    Ok(snaps)
}
