//! The tick loop.
//!
//! Every tick runs the same phases in the same order:
//!
//! 1. workload ops, containers in id order (allocations, frees, accesses)
//! 2. LRU aging
//! 3. promotion, every `promo_scan_interval` ticks
//! 4. demotion, every `demote_scan_interval` ticks, when there is pressure or
//!    a container is over its upper bound
//! 5. thrash-detector update at the end of every detector period
//! 6. snapshot every `snapshot_interval` ticks
//!
//! Migrations are handed to the thrash detector right after the phase that
//! performed them. Changing this order changes results; the golden export
//! test pins it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::demotion::{build_demotion_plan, run_background_demotion, DemotionPlan};
use crate::memory::{MemError, MemoryManager, MigrationKind, TraceEvent, WatermarkState};
use crate::metrics::{self, ContainerMetrics, ExportError, MetricsSnapshot};
use crate::model::{ContainerId, MachineConfig, PageId, Policy, Tick, Tier};
use crate::promotion::run_promotion;
use crate::scenario::Scenario;
use crate::thrash::{ContainerActivity, MultiplierDecision, ThrashDetector};
use crate::workload::{Request, Workload};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OomEvent {
    pub tick: Tick,
    pub container: String,
    pub requested: u64,
}

/// Detector decisions at one period boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodRecord {
    /// Tick count at the end of the period.
    pub tick: Tick,
    pub rates: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub steady: Vec<bool>,
}

/// What the demotion phase of the latest tick did.
#[derive(Debug, Clone, PartialEq)]
pub struct DemotionPass {
    pub tick: Tick,
    pub plan: DemotionPlan,
    /// Background demotions per container, by container id.
    pub demoted: Vec<u64>,
    /// Throttle flags right after planning, by container id.
    pub throttled: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub ticks: Tick,
    pub containers: Vec<ContainerMetrics>,
    pub total_demoted: u64,
    pub total_promoted: u64,
    pub oom_events: Vec<OomEvent>,
    /// Ticks at which background demotion stopped because CXL was full.
    pub cxl_full_ticks: Vec<Tick>,
    pub periods: Vec<PeriodRecord>,
}

impl RunSummary {
    pub fn container(&self, name: &str) -> Option<&ContainerMetrics> {
        self.containers.iter().find(|c| c.container == name)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub snapshots: Vec<MetricsSnapshot>,
}

/// One simulation instance. Owns all state; nothing is shared between runs.
#[derive(Debug, Clone)]
pub struct Simulation {
    name: String,
    cfg: MachineConfig,
    policy: Policy,
    duration: Tick,
    snapshot_interval: Tick,
    mm: MemoryManager,
    detector: ThrashDetector,
    rng: ChaCha8Rng,
    workloads: Vec<Workload>,
    /// Workload slot to page, per container.
    slots: Vec<Vec<PageId>>,
    tick: Tick,
    snapshots: Vec<MetricsSnapshot>,
    migrations_at_last_snapshot: u64,
    /// Fallback allocations seen by the last demotion pass.
    fallbacks_seen: u64,
    oom_events: Vec<OomEvent>,
    cxl_full_ticks: Vec<Tick>,
    periods: Vec<PeriodRecord>,
    last_demotion: Option<DemotionPass>,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Self {
        let cfg = scenario.machine.clone();
        let specs = scenario.container_specs();
        Simulation {
            name: scenario.name.clone(),
            mm: MemoryManager::new(&cfg, &specs),
            detector: ThrashDetector::new(&cfg, specs.len()),
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            workloads: scenario
                .containers
                .iter()
                .map(|c| Workload::new(c.workload.clone(), &cfg))
                .collect(),
            slots: vec![Vec::new(); specs.len()],
            policy: scenario.policy,
            duration: scenario.duration,
            snapshot_interval: scenario.snapshot_interval,
            cfg,
            tick: 0,
            snapshots: Vec::new(),
            migrations_at_last_snapshot: 0,
            fallbacks_seen: 0,
            oom_events: Vec::new(),
            cxl_full_ticks: Vec::new(),
            periods: Vec::new(),
            last_demotion: None,
        }
    }

    /// Records every page operation from now on.
    pub fn enable_trace(&mut self) {
        self.mm.enable_trace();
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.mm.take_trace()
    }

    /// The demotion phase of the most recent tick that ran one.
    pub fn last_demotion(&self) -> Option<&DemotionPass> {
        self.last_demotion.as_ref()
    }

    pub fn tick(&self) -> Tick {
        self.tick
    }

    pub fn is_done(&self) -> bool {
        self.tick >= self.duration
    }

    pub fn memory(&self) -> &MemoryManager {
        &self.mm
    }

    pub fn detector(&self) -> &ThrashDetector {
        &self.detector
    }

    pub fn snapshots(&self) -> &[MetricsSnapshot] {
        &self.snapshots
    }

    pub fn periods(&self) -> &[PeriodRecord] {
        &self.periods
    }

    fn drain_migrations(&mut self) {
        for ev in self.mm.take_events() {
            match ev.kind {
                MigrationKind::Promotion => {
                    self.detector.record_promotion(ev.page, ev.tick, &mut self.rng);
                }
                MigrationKind::Demotion => {
                    if self.detector.observe_demotion(ev.page, ev.owner, ev.tick) {
                        if let Ok(c) = self.mm.container_mut(ev.owner) {
                            c.counters.thrash_events += 1;
                        }
                    }
                }
            }
        }
    }

    /// Phase 1 for one container. Returns (local, cxl) accesses made.
    fn run_workload(&mut self, c: ContainerId) -> (u64, u64) {
        let tick = self.tick;
        let i = c.index();
        let (mut local, mut cxl) = (0, 0);
        for op in self.workloads[i].next_ops(tick) {
            match op {
                Request::Allocate(n) => match self.mm.allocate(c, n, tick) {
                    Ok(pages) => self.slots[i].extend(pages),
                    Err(MemError::OutOfMemory { requested, .. }) => {
                        self.workloads[i].allocation_failed(n);
                        self.oom_events.push(OomEvent {
                            tick,
                            container: self.mm.containers()[i].name.clone(),
                            requested,
                        });
                        break;
                    }
                    Err(e) => panic!("allocation for {c:?} failed unexpectedly: {e}"),
                },
                Request::Free(n) => {
                    let keep = self.slots[i].len().saturating_sub(n as usize);
                    let gone = self.slots[i].split_off(keep);
                    self.mm.free(c, &gone).expect("workload frees its own pages");
                }
                Request::Access(slot) => {
                    let Some(&page) = self.slots[i].get(slot) else {
                        continue;
                    };
                    match self.mm.page(page).map(|p| p.tier) {
                        Some(Tier::Local) => local += 1,
                        Some(Tier::Cxl) => cxl += 1,
                        None => continue,
                    }
                    self.mm
                        .record_access(c, page, tick)
                        .expect("workload touches its own pages");
                }
            }
        }
        (local, cxl)
    }

    /// Background demotion runs below the low watermark, after an allocation
    /// had to fall back to CXL (the allocator wakes reclaim), or while a
    /// container below its protection could not get a frame for promotion.
    fn demotion_pressure(&mut self) -> bool {
        let wm = self.mm.watermark_state();
        let fallbacks: u64 = self.mm.containers().iter().map(|c| c.counters.cxl_fallback_allocs).sum();
        let woken = fallbacks > self.fallbacks_seen;
        self.fallbacks_seen = fallbacks;
        wm == WatermarkState::BelowLow
            || (wm != WatermarkState::AboveHigh
                && (woken || self.mm.containers().iter().any(|c| c.protection_starved)))
    }

    fn detector_update(&mut self) {
        let activity: Vec<ContainerActivity> = self
            .mm
            .container_ids()
            .map(|c| {
                let cont = &self.mm.containers()[c.index()];
                ContainerActivity {
                    active_pages: self.mm.working_set(c, self.cfg.aging_horizon, self.tick),
                    freed: cont.counters.freed,
                    resident: cont.total_usage() > 0,
                }
            })
            .collect();
        let decisions: Vec<MultiplierDecision> = self.detector.periodic_update(&activity, self.policy.thrash_mitigation);
        for d in &decisions {
            let c = self.mm.container_mut(d.container).expect("known id");
            c.promo_multiplier = d.multiplier;
            c.steady_state = d.steady;
        }
        self.periods.push(PeriodRecord {
            tick: self.tick + 1,
            rates: decisions.iter().map(|d| d.rate).collect(),
            multipliers: decisions.iter().map(|d| d.multiplier.value()).collect(),
            steady: decisions.iter().map(|d| d.steady).collect(),
        });
    }

    fn take_snapshot(&mut self, at: Tick) {
        let total = self.mm.total_demoted() + self.mm.total_promoted();
        let snap = metrics::snapshot(&self.mm, at, total - self.migrations_at_last_snapshot);
        self.migrations_at_last_snapshot = total;
        self.snapshots.push(snap);
    }

    /// Runs one full tick.
    pub fn step(&mut self) {
        let tick = self.tick;
        self.mm.reset_tick_migrations();
        let ids: Vec<ContainerId> = self.mm.container_ids().collect();

        // 1. workloads
        let mut tick_accesses = vec![(0u64, 0u64); ids.len()];
        for &c in &ids {
            tick_accesses[c.index()] = self.run_workload(c);
        }
        self.drain_migrations();

        // 2. aging
        self.mm.age_lrus(tick);

        // 3. promotion
        if tick.is_multiple_of(self.cfg.promo_scan_interval) {
            run_promotion(&mut self.mm, &self.policy, tick);
            self.drain_migrations();
        }

        // 4. demotion
        if tick.is_multiple_of(self.cfg.demote_scan_interval) {
            let pressure = self.demotion_pressure();
            let plan = build_demotion_plan(&mut self.mm, &self.policy, pressure);
            let throttled = self.mm.containers().iter().map(|c| c.throttled).collect();
            let before: Vec<u64> = self.mm.containers().iter().map(|c| c.counters.demoted).collect();
            if plan.has_work() {
                let out = run_background_demotion(&mut self.mm, &plan, tick);
                if out.cxl_full {
                    self.cxl_full_ticks.push(tick);
                }
            }
            let demoted = self
                .mm
                .containers()
                .iter()
                .zip(&before)
                .map(|(c, b)| c.counters.demoted - b)
                .collect();
            self.last_demotion = Some(DemotionPass {
                tick,
                plan,
                demoted,
                throttled,
            });
            self.drain_migrations();
        }

        // Access cost for the tick: CXL accesses cost more, and migrations
        // contend with every tenant's accesses for memory bandwidth.
        let migrations = self.mm.migrations_this_tick() as f64;
        let all_accesses: u64 = tick_accesses.iter().map(|(l, x)| l + x).sum();
        let inflation = if all_accesses == 0 {
            1.0
        } else {
            1.0 + self.cfg.migration_interference * migrations / all_accesses as f64
        };
        for &c in &ids {
            let (local, cxl) = tick_accesses[c.index()];
            let cost = self.cfg.cxl_access_cost;
            let acc = &mut self.mm.container_mut(c).expect("known id").access;
            acc.accesses += local + cxl;
            acc.local_accesses += local;
            acc.access_time += (local as f64 + cxl as f64 * cost) * inflation;
        }

        // 5. thrash detector
        if (tick + 1).is_multiple_of(self.cfg.detector_period) {
            self.detector_update();
        }

        // 6. snapshot
        if (tick + 1).is_multiple_of(self.snapshot_interval) {
            self.take_snapshot(tick + 1);
        }

        self.tick += 1;
    }

    pub fn run_to_end(&mut self) {
        while !self.is_done() {
            self.step();
        }
    }

    pub fn summary(&self) -> RunSummary {
        let total = self.mm.total_demoted() + self.mm.total_promoted();
        let last = metrics::snapshot(&self.mm, self.tick, total - self.migrations_at_last_snapshot);
        RunSummary {
            scenario: self.name.clone(),
            seed: self.cfg.rng_seed,
            ticks: self.tick,
            containers: last.containers,
            total_demoted: self.mm.total_demoted(),
            total_promoted: self.mm.total_promoted(),
            oom_events: self.oom_events.clone(),
            cxl_full_ticks: self.cxl_full_ticks.clone(),
            periods: self.periods.clone(),
        }
    }

    pub fn into_result(self) -> RunResult {
        RunResult {
            summary: self.summary(),
            snapshots: self.snapshots,
        }
    }
}

/// Runs a scenario to completion in memory.
pub fn run(scenario: &Scenario) -> RunResult {
    let mut sim = Simulation::new(scenario);
    sim.run_to_end();
    sim.into_result()
}

/// Runs a scenario and writes its time series to the configured output, if any.
pub fn run_and_export(scenario: &Scenario) -> Result<RunResult, ExportError> {
    let result = run(scenario);
    if let Some(path) = &scenario.output.path {
        metrics::export_to_path(&scenario.run_header(), &result.snapshots, path, scenario.output.format)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario_str;

    fn scenario(containers: &str, extra_machine: &str) -> Scenario {
        let text = format!(
            r#"
name = "t"
duration = 200
snapshot_interval = 10
[machine]
local_capacity = 1000
cxl_capacity = 1000
low_watermark = 10
rng_seed = 1
{extra_machine}
{containers}
"#
        );
        let s = parse_scenario_str(&text).unwrap();
        s.validate().unwrap();
        s
    }

    const TWO: &str = r#"
[[containers]]
name = "a"
lower_protection = 400
[containers.workload]
kind = "streaming"
footprint = 300
hotness = 2.0
[[containers]]
name = "b"
lower_protection = 400
[containers.workload]
kind = "streaming"
footprint = 300
hotness = 2.0
launch_delay = 50
"#;

    #[test]
    fn snapshots_on_interval() {
        let r = run(&scenario(TWO, ""));
        assert_eq!(r.snapshots.len(), 20);
        assert_eq!(r.snapshots[0].tick, 10);
        assert_eq!(r.snapshots.last().unwrap().tick, 200);
        assert_eq!(r.summary.ticks, 200);
    }

    #[test]
    fn fits_entirely_local() {
        let r = run(&scenario(TWO, ""));
        for c in &r.summary.containers {
            assert_eq!((c.local_pages, c.cxl_pages), (300, 0));
            assert_eq!(c.accesses as f64, c.access_time);
        }
        assert!(r.summary.oom_events.is_empty());
    }

    #[test]
    fn out_of_memory_is_recorded_not_fatal() {
        let big = TWO.replace("footprint = 300", "footprint = 1500");
        let r = run(&scenario(&big, ""));
        assert_eq!(r.summary.oom_events.len(), 1);
        assert_eq!(r.summary.oom_events[0].container, "b");
        assert_eq!(r.summary.oom_events[0].tick, 50);
        assert_eq!(r.summary.container("b").unwrap().local_pages, 0);
    }

    #[test]
    fn repeat_runs_are_identical() {
        let s = scenario(TWO, "");
        let a = run(&s);
        let b = run(&s);
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.snapshots, b.snapshots);
    }

    #[test]
    fn detector_runs_each_period() {
        let r = run(&scenario(TWO, "detector_period = 20"));
        assert_eq!(r.summary.periods.len(), 10);
        assert_eq!(r.summary.periods[0].tick, 20);
    }
}
