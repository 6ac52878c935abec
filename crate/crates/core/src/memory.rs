//! Page table, per-container LRU lists, allocation and migration.
//!
//! Every page lives on exactly one of four intrusive lists per container:
//! (local, cxl) x (active, inactive). Lists are ordered most-recent-first.
//! Migrations are appended to an event log that the driver drains into the
//! thrash detector, so the detector sees promotions and demotions in the
//! order they happened.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demotion;
use crate::model::{Container, ContainerId, ContainerSpec, MachineConfig, PageId, Tick, Tier};

const NIL: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("out of memory: container {container} could not place {requested} pages")]
    OutOfMemory {
        container: ContainerId,
        requested: u64,
    },
    #[error("page {page:?} is not owned by container {container}")]
    NotOwner { page: PageId, container: ContainerId },
    #[error("no such page {0:?}")]
    NoSuchPage(PageId),
    #[error("no such container {0}")]
    NoSuchContainer(ContainerId),
    #[error("no free frame on the {0} tier")]
    DestinationFull(Tier),
    #[error("page {0:?} already resides on the destination tier")]
    AlreadyOnTier(PageId),
}

/// Free-memory classification of the local tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WatermarkState {
    AboveHigh,
    BelowHigh,
    BelowLow,
}

impl WatermarkState {
    pub fn classify(free: u64, low: u64, high: u64) -> Self {
        if free > high {
            WatermarkState::AboveHigh
        } else if free < low {
            WatermarkState::BelowLow
        } else {
            WatermarkState::BelowHigh
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WatermarkState::AboveHigh => "above_high",
            WatermarkState::BelowHigh => "below_high",
            WatermarkState::BelowLow => "below_low",
        }
    }
}

/// Read-only view of a resident page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Page {
    pub id: PageId,
    pub owner: ContainerId,
    pub tier: Tier,
    pub last_access: Tick,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MigrationKind {
    Promotion,
    Demotion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationEvent {
    pub page: PageId,
    pub owner: ContainerId,
    pub kind: MigrationKind,
    pub tick: Tick,
}

/// Emitted when a CXL page first qualifies as a promotion candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HintFault {
    pub page: PageId,
    pub tick: Tick,
}

/// Low-level page operation, recorded in order when tracing is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Place { page: PageId, owner: ContainerId, tier: Tier, tick: Tick },
    Free { page: PageId },
    Access { page: PageId, tick: Tick },
    Migrate { page: PageId, dest: Tier, tick: Tick },
    Deactivate { page: PageId },
}

#[derive(Debug, Clone)]
struct Slot {
    owner: Option<ContainerId>,
    tier: Tier,
    last_access: Tick,
    /// Tick of the previous access since the page entered its current tier.
    touched: Option<Tick>,
    /// Key under which the page sits in its owner's candidate set.
    hot_tick: Option<Tick>,
    active: bool,
    prev: u32,
    next: u32,
}

impl Slot {
    fn vacant() -> Self {
        Slot {
            owner: None,
            tier: Tier::Local,
            last_access: 0,
            touched: None,
            hot_tick: None,
            active: false,
            prev: NIL,
            next: NIL,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct List {
    head: u32,
    tail: u32,
    len: u64,
}

impl List {
    const EMPTY: List = List {
        head: NIL,
        tail: NIL,
        len: 0,
    };
}

fn list_index(c: ContainerId, tier: Tier, active: bool) -> usize {
    c.index() * 4 + tier.index() * 2 + active as usize
}

/// Owns pages, containers and LRU state for one simulation instance.
#[derive(Debug, Clone)]
pub struct MemoryManager {
    cfg: MachineConfig,
    slots: Vec<Slot>,
    vacant: Vec<u32>,
    lists: Vec<List>,
    containers: Vec<Container>,
    free_local: u64,
    free_cxl: u64,
    candidates: Vec<BTreeSet<(Tick, PageId)>>,
    events: Vec<MigrationEvent>,
    migrations_this_tick: u64,
    total_demoted: u64,
    total_promoted: u64,
    trace: Option<Vec<TraceEvent>>,
}

impl MemoryManager {
    pub fn new(cfg: &MachineConfig, specs: &[ContainerSpec]) -> Self {
        let containers: Vec<Container> = specs
            .iter()
            .enumerate()
            .map(|(i, s)| Container::new(ContainerId(i as u16), s))
            .collect();
        MemoryManager {
            cfg: cfg.clone(),
            slots: Vec::new(),
            vacant: Vec::new(),
            lists: vec![List::EMPTY; containers.len() * 4],
            candidates: vec![BTreeSet::new(); containers.len()],
            containers,
            free_local: cfg.local_capacity,
            free_cxl: cfg.cxl_capacity,
            events: Vec::new(),
            migrations_this_tick: 0,
            total_demoted: 0,
            total_promoted: 0,
            trace: None,
        }
    }

    /// Starts recording every page operation; see `take_trace`.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn log(&mut self, ev: TraceEvent) {
        if let Some(t) = &mut self.trace {
            t.push(ev);
        }
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    pub fn containers(&self) -> &[Container] {
        &self.containers
    }

    pub fn container(&self, c: ContainerId) -> Result<&Container, MemError> {
        self.containers.get(c.index()).ok_or(MemError::NoSuchContainer(c))
    }

    pub fn container_mut(&mut self, c: ContainerId) -> Result<&mut Container, MemError> {
        self.containers
            .get_mut(c.index())
            .ok_or(MemError::NoSuchContainer(c))
    }

    pub fn container_ids(&self) -> impl Iterator<Item = ContainerId> {
        (0..self.containers.len() as u16).map(ContainerId)
    }

    pub fn free_pages(&self, tier: Tier) -> u64 {
        match tier {
            Tier::Local => self.free_local,
            Tier::Cxl => self.free_cxl,
        }
    }

    pub fn watermark_state(&self) -> WatermarkState {
        WatermarkState::classify(
            self.free_local,
            self.cfg.low_watermark,
            self.cfg.high_watermark,
        )
    }

    pub fn page(&self, id: PageId) -> Option<Page> {
        let s = self.slots.get(id.index())?;
        Some(Page {
            id,
            owner: s.owner?,
            tier: s.tier,
            last_access: s.last_access,
            active: s.active,
        })
    }

    /// Number of pages on the (active + inactive) list of one tier.
    pub fn lru_len(&self, c: ContainerId, tier: Tier) -> u64 {
        self.lists[list_index(c, tier, true)].len + self.lists[list_index(c, tier, false)].len
    }

    pub fn list_len(&self, c: ContainerId, tier: Tier, active: bool) -> u64 {
        self.lists[list_index(c, tier, active)].len
    }

    pub fn active_pages(&self, c: ContainerId) -> u64 {
        self.list_len(c, Tier::Local, true) + self.list_len(c, Tier::Cxl, true)
    }

    /// Pages of the container, on either tier, accessed within the last
    /// `horizon` ticks. Unlike the active lists this does not move when
    /// migrations reshuffle pages between lists.
    pub fn working_set(&self, c: ContainerId, horizon: Tick, tick: Tick) -> u64 {
        let since = tick.saturating_sub(horizon);
        let mut n = 0;
        for tier in [Tier::Local, Tier::Cxl] {
            for active in [false, true] {
                let mut cur = self.lists[list_index(c, tier, active)].head;
                while cur != NIL {
                    let s = &self.slots[cur as usize];
                    if s.last_access >= since {
                        n += 1;
                    }
                    cur = s.next;
                }
            }
        }
        n
    }

    /// Pages of one list, most recent first.
    pub fn list_pages(&self, c: ContainerId, tier: Tier, active: bool) -> Vec<PageId> {
        let mut out = Vec::new();
        let mut cur = self.lists[list_index(c, tier, active)].head;
        while cur != NIL {
            out.push(PageId(cur));
            cur = self.slots[cur as usize].next;
        }
        out
    }

    /// Up to `n` pages of a tier taken from the LRU tail: the inactive list
    /// oldest-first, then the active list oldest-first.
    pub fn lru_tail_window(&self, c: ContainerId, tier: Tier, n: u64) -> Vec<PageId> {
        let mut out = Vec::with_capacity(n.min(self.lru_len(c, tier)) as usize);
        for active in [false, true] {
            let mut cur = self.lists[list_index(c, tier, active)].tail;
            while cur != NIL && (out.len() as u64) < n {
                out.push(PageId(cur));
                cur = self.slots[cur as usize].prev;
            }
        }
        out
    }

    pub fn is_candidate(&self, page: PageId) -> bool {
        self.slots
            .get(page.index())
            .is_some_and(|s| s.owner.is_some() && s.hot_tick.is_some())
    }

    /// Promotion candidates of a container, most recently hot first.
    pub fn candidates(&self, c: ContainerId) -> impl Iterator<Item = PageId> + '_ {
        self.candidates[c.index()].iter().rev().map(|&(_, p)| p)
    }

    pub fn candidate_count(&self, c: ContainerId) -> usize {
        self.candidates[c.index()].len()
    }

    pub fn take_events(&mut self) -> Vec<MigrationEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn migrations_this_tick(&self) -> u64 {
        self.migrations_this_tick
    }

    pub fn reset_tick_migrations(&mut self) {
        self.migrations_this_tick = 0;
    }

    pub fn total_demoted(&self) -> u64 {
        self.total_demoted
    }

    pub fn total_promoted(&self) -> u64 {
        self.total_promoted
    }

    /// Allocates `n` pages for `c`, preferring the local tier.
    ///
    /// Local placement requires free local pages above the low watermark and
    /// room under the container's upper bound. Crossing the bound first runs
    /// synchronous demotion of the container's own LRU tail. Pages that do not
    /// fit locally fall back to CXL, and only when CXL is full do they dip
    /// into the local reserve below the low watermark.
    pub fn allocate(&mut self, c: ContainerId, n: u64, tick: Tick) -> Result<Vec<PageId>, MemError> {
        let container = self.container(c)?;
        if n == 0 {
            return Ok(Vec::new());
        }
        let bound = container.upper_bound;
        let mut sync_freed = 0;
        if let Some(b) = bound {
            if container.local_usage + n > b && container.local_usage > 0 {
                sync_freed = demotion::enforce_upper_bound(self, c, n, tick).freed;
            }
        }

        let local_usage = self.containers[c.index()].local_usage;
        let bound_room = bound.map_or(u64::MAX, |b| b.saturating_sub(local_usage));
        let above_low = self.free_local.saturating_sub(self.cfg.low_watermark);
        let watermark_room = above_low.max(sync_freed.min(self.free_local));
        let local_n = n.min(bound_room).min(watermark_room);
        let cxl_n = (n - local_n).min(self.free_cxl);
        let reserve_n = (n - local_n - cxl_n)
            .min(self.free_local - local_n)
            .min(bound_room - local_n);
        if local_n + cxl_n + reserve_n < n {
            return Err(MemError::OutOfMemory {
                container: c,
                requested: n,
            });
        }

        let mut ids = Vec::with_capacity(n as usize);
        for _ in 0..local_n + reserve_n {
            ids.push(self.place(c, Tier::Local, tick));
        }
        for _ in 0..cxl_n {
            ids.push(self.place(c, Tier::Cxl, tick));
        }
        self.containers[c.index()].counters.cxl_fallback_allocs += cxl_n;
        Ok(ids)
    }

    fn place(&mut self, c: ContainerId, tier: Tier, tick: Tick) -> PageId {
        let idx = match self.vacant.pop() {
            Some(i) => i,
            None => {
                self.slots.push(Slot::vacant());
                (self.slots.len() - 1) as u32
            }
        };
        let slot = &mut self.slots[idx as usize];
        *slot = Slot {
            owner: Some(c),
            tier,
            last_access: tick,
            touched: None,
            hot_tick: None,
            active: true,
            prev: NIL,
            next: NIL,
        };
        self.push_head(list_index(c, tier, true), idx);
        *self.containers[c.index()].usage_mut(tier) += 1;
        match tier {
            Tier::Local => self.free_local -= 1,
            Tier::Cxl => self.free_cxl -= 1,
        }
        self.log(TraceEvent::Place {
            page: PageId(idx),
            owner: c,
            tier,
            tick,
        });
        PageId(idx)
    }

    fn owned_slot(&self, c: ContainerId, page: PageId) -> Result<&Slot, MemError> {
        self.container(c)?;
        let slot = self
            .slots
            .get(page.index())
            .filter(|s| s.owner.is_some())
            .ok_or(MemError::NoSuchPage(page))?;
        if slot.owner != Some(c) {
            return Err(MemError::NotOwner { page, container: c });
        }
        Ok(slot)
    }

    /// Releases pages owned by `c`. Nothing is freed if any page is not owned.
    pub fn free(&mut self, c: ContainerId, pages: &[PageId]) -> Result<(), MemError> {
        for &p in pages {
            self.owned_slot(c, p)?;
        }
        for &p in pages {
            let idx = p.0;
            let (tier, active) = {
                let s = &self.slots[idx as usize];
                (s.tier, s.active)
            };
            self.unlink(list_index(c, tier, active), idx);
            self.drop_candidate(c, idx);
            self.slots[idx as usize] = Slot::vacant();
            self.vacant.push(idx);
            self.log(TraceEvent::Free { page: p });
            let cont = &mut self.containers[c.index()];
            *cont.usage_mut(tier) -= 1;
            cont.counters.freed += 1;
            match tier {
                Tier::Local => self.free_local += 1,
                Tier::Cxl => self.free_cxl += 1,
            }
        }
        Ok(())
    }

    /// Records an access. Two accesses within `hint_window` ticks activate an
    /// inactive page and, on CXL, make the page a promotion candidate.
    pub fn record_access(
        &mut self,
        c: ContainerId,
        page: PageId,
        tick: Tick,
    ) -> Result<Option<HintFault>, MemError> {
        self.owned_slot(c, page)?;
        self.log(TraceEvent::Access { page, tick });
        let idx = page.0;
        let window = self.cfg.hint_window;
        let (tier, was_active, second) = {
            let s = &mut self.slots[idx as usize];
            let second = s.touched.is_some_and(|p| tick.saturating_sub(p) <= window);
            s.touched = Some(tick);
            s.last_access = tick;
            (s.tier, s.active, second)
        };

        let from = list_index(c, tier, was_active);
        self.unlink(from, idx);
        let active = was_active || second;
        self.slots[idx as usize].active = active;
        self.push_head(list_index(c, tier, active), idx);

        if tier == Tier::Cxl && second {
            let first_time = self.slots[idx as usize].hot_tick.is_none();
            self.drop_candidate(c, idx);
            self.slots[idx as usize].hot_tick = Some(tick);
            self.candidates[c.index()].insert((tick, page));
            if first_time {
                self.containers[c.index()].counters.hint_faults += 1;
                return Ok(Some(HintFault { page, tick }));
            }
        }
        Ok(None)
    }

    /// Moves a page to `dest`, updating usage and the owner's counters.
    pub fn migrate(&mut self, page: PageId, dest: Tier, tick: Tick) -> Result<(), MemError> {
        let slot = self
            .slots
            .get(page.index())
            .filter(|s| s.owner.is_some())
            .ok_or(MemError::NoSuchPage(page))?;
        let owner = slot.owner.expect("filtered");
        let src = slot.tier;
        if src == dest {
            return Err(MemError::AlreadyOnTier(page));
        }
        if self.free_pages(dest) == 0 {
            return Err(MemError::DestinationFull(dest));
        }
        let idx = page.0;
        let was_active = slot.active;
        self.unlink(list_index(owner, src, was_active), idx);
        self.drop_candidate(owner, idx);
        let to_active = dest == Tier::Local;
        {
            let s = &mut self.slots[idx as usize];
            s.tier = dest;
            s.active = to_active;
            s.touched = None;
        }
        self.push_head(list_index(owner, dest, to_active), idx);

        let cont = &mut self.containers[owner.index()];
        *cont.usage_mut(src) -= 1;
        *cont.usage_mut(dest) += 1;
        let kind = match dest {
            Tier::Cxl => {
                self.free_local += 1;
                self.free_cxl -= 1;
                cont.counters.demoted += 1;
                self.total_demoted += 1;
                MigrationKind::Demotion
            }
            Tier::Local => {
                self.free_cxl += 1;
                self.free_local -= 1;
                cont.counters.promoted += 1;
                self.total_promoted += 1;
                MigrationKind::Promotion
            }
        };
        self.migrations_this_tick += 1;
        self.log(TraceEvent::Migrate { page, dest, tick });
        self.events.push(MigrationEvent {
            page,
            owner,
            kind,
            tick,
        });
        Ok(())
    }

    /// Moves an active page to the inactive head of its tier and forgets its
    /// last touch, so two fresh accesses are needed to reactivate it.
    pub fn deactivate(&mut self, page: PageId) {
        let Some(s) = self.slots.get(page.index()) else {
            return;
        };
        let (Some(owner), true) = (s.owner, s.active) else {
            return;
        };
        let tier = s.tier;
        self.unlink(list_index(owner, tier, true), page.0);
        let s = &mut self.slots[page.index()];
        s.active = false;
        s.touched = None;
        self.push_head(list_index(owner, tier, false), page.0);
        self.log(TraceEvent::Deactivate { page });
    }

    /// Moves active pages untouched for `aging_horizon` ticks to the inactive
    /// tail, keeping their relative recency order.
    pub fn age_lrus(&mut self, tick: Tick) {
        let horizon = self.cfg.aging_horizon;
        for c in 0..self.containers.len() as u16 {
            let c = ContainerId(c);
            for tier in [Tier::Local, Tier::Cxl] {
                let active = list_index(c, tier, true);
                let inactive = list_index(c, tier, false);
                let mut aged = Vec::new();
                let mut cur = self.lists[active].tail;
                while cur != NIL {
                    let s = &self.slots[cur as usize];
                    if tick.saturating_sub(s.last_access) < horizon {
                        break;
                    }
                    aged.push(cur);
                    cur = s.prev;
                }
                for &idx in aged.iter().rev() {
                    self.unlink(active, idx);
                    self.slots[idx as usize].active = false;
                    self.push_tail(inactive, idx);
                }
            }
        }
    }

    /// Demotes up to `n` of the container's local pages from the LRU tail,
    /// active or not. Returns the number demoted; stops early when CXL is full.
    pub fn demote_tail(&mut self, c: ContainerId, n: u64, tick: Tick) -> (u64, bool) {
        let window = self.lru_tail_window(c, Tier::Local, n);
        let mut done = 0;
        for p in window {
            match self.migrate(p, Tier::Cxl, tick) {
                Ok(()) => done += 1,
                Err(_) => return (done, true),
            }
        }
        (done, false)
    }

    fn drop_candidate(&mut self, c: ContainerId, idx: u32) {
        if let Some(t) = self.slots[idx as usize].hot_tick.take() {
            self.candidates[c.index()].remove(&(t, PageId(idx)));
        }
    }

    fn push_head(&mut self, list: usize, idx: u32) {
        let head = self.lists[list].head;
        {
            let s = &mut self.slots[idx as usize];
            s.prev = NIL;
            s.next = head;
        }
        if head != NIL {
            self.slots[head as usize].prev = idx;
        } else {
            self.lists[list].tail = idx;
        }
        self.lists[list].head = idx;
        self.lists[list].len += 1;
    }

    fn push_tail(&mut self, list: usize, idx: u32) {
        let tail = self.lists[list].tail;
        {
            let s = &mut self.slots[idx as usize];
            s.next = NIL;
            s.prev = tail;
        }
        if tail != NIL {
            self.slots[tail as usize].next = idx;
        } else {
            self.lists[list].head = idx;
        }
        self.lists[list].tail = idx;
        self.lists[list].len += 1;
    }

    fn unlink(&mut self, list: usize, idx: u32) {
        let (prev, next) = {
            let s = &self.slots[idx as usize];
            (s.prev, s.next)
        };
        if prev != NIL {
            self.slots[prev as usize].next = next;
        } else {
            self.lists[list].head = next;
        }
        if next != NIL {
            self.slots[next as usize].prev = prev;
        } else {
            self.lists[list].tail = prev;
        }
        let s = &mut self.slots[idx as usize];
        s.prev = NIL;
        s.next = NIL;
        self.lists[list].len -= 1;
    }

    /// Cross-checks lists, usage counters and free-page accounting.
    /// Returns a description of the first inconsistency found.
    pub fn check_consistency(&self) -> Result<(), String> {
        let mut used = [0u64; 2];
        for c in &self.containers {
            for tier in [Tier::Local, Tier::Cxl] {
                let mut n = 0;
                for active in [true, false] {
                    for p in self.list_pages(c.id, tier, active) {
                        let s = &self.slots[p.index()];
                        if s.owner != Some(c.id) || s.tier != tier || s.active != active {
                            return Err(format!("page {p:?} misfiled on list of {}", c.name));
                        }
                        n += 1;
                    }
                }
                if n != c.usage(tier) {
                    return Err(format!(
                        "{} {tier} usage {} but lists hold {n}",
                        c.name,
                        c.usage(tier)
                    ));
                }
                used[tier.index()] += n;
            }
        }
        if used[0] + self.free_local != self.cfg.local_capacity {
            return Err(format!(
                "local conservation broken: used {} + free {} != {}",
                used[0], self.free_local, self.cfg.local_capacity
            ));
        }
        if used[1] + self.free_cxl != self.cfg.cxl_capacity {
            return Err(format!(
                "cxl conservation broken: used {} + free {} != {}",
                used[1], self.free_cxl, self.cfg.cxl_capacity
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm_with(local: u64, cxl: u64, specs: &[(u64, Option<u64>)]) -> MemoryManager {
        let mut cfg = MachineConfig::with_capacities(local, cxl, 7);
        cfg.low_watermark = 10;
        cfg.high_watermark = 20;
        let specs: Vec<_> = specs
            .iter()
            .enumerate()
            .map(|(i, &(p, b))| ContainerSpec {
                name: format!("c{i}"),
                lower_protection: p,
                upper_bound: b,
            })
            .collect();
        MemoryManager::new(&cfg, &specs)
    }

    const A: ContainerId = ContainerId(0);
    const B: ContainerId = ContainerId(1);

    #[test]
    fn uncontended_allocation_lands_local() {
        let mut mm = mm_with(1000, 100, &[(0, None)]);
        mm.allocate(A, 490, 0).unwrap();
        assert_eq!(mm.free_pages(Tier::Local), 510);
        let ids = mm.allocate(A, 100, 0).unwrap();
        assert_eq!(ids.len(), 100);
        assert!(ids.iter().all(|&p| mm.page(p).unwrap().tier == Tier::Local));
        assert_eq!(mm.container(A).unwrap().counters.cxl_fallback_allocs, 0);
        mm.check_consistency().unwrap();
    }

    #[test]
    fn allocation_respects_low_watermark() {
        let mut mm = mm_with(100, 100, &[(0, None)]);
        mm.allocate(A, 95, 0).unwrap();
        let c = mm.container(A).unwrap();
        assert_eq!(c.local_usage, 90);
        assert_eq!(c.cxl_usage, 5);
        assert_eq!(c.counters.cxl_fallback_allocs, 5);
    }

    #[test]
    fn allocation_at_bound_demotes_synchronously() {
        let mut mm = mm_with(1000, 500, &[(0, Some(100))]);
        mm.allocate(A, 100, 0).unwrap();
        assert_eq!(mm.container(A).unwrap().local_usage, 100);
        mm.allocate(A, 10, 1).unwrap();
        let c = mm.container(A).unwrap();
        assert!(c.counters.sync_demotions >= 10);
        assert!(c.local_usage <= 100);
        assert_eq!(c.total_usage(), 110);
        mm.check_consistency().unwrap();
    }

    #[test]
    fn first_allocation_over_bound_spills() {
        let mut mm = mm_with(1000, 500, &[(0, Some(80))]);
        mm.allocate(A, 120, 0).unwrap();
        let c = mm.container(A).unwrap();
        assert_eq!((c.local_usage, c.cxl_usage), (80, 40));
        assert_eq!(c.counters.sync_demotions, 0);
    }

    #[test]
    fn exhaustion_is_out_of_memory() {
        let mut mm = mm_with(100, 50, &[(0, None)]);
        mm.allocate(A, 150, 0).unwrap();
        assert_eq!(mm.free_pages(Tier::Local), 0);
        assert_eq!(mm.free_pages(Tier::Cxl), 0);
        assert_eq!(
            mm.allocate(A, 1, 1),
            Err(MemError::OutOfMemory {
                container: A,
                requested: 1
            })
        );
        mm.check_consistency().unwrap();
    }

    #[test]
    fn free_updates_usage_and_counter() {
        let mut mm = mm_with(1000, 100, &[(0, None), (0, None)]);
        let ids = mm.allocate(A, 30, 0).unwrap();
        mm.free(A, &ids[..10]).unwrap();
        let c = mm.container(A).unwrap();
        assert_eq!((c.local_usage, c.counters.freed), (20, 10));
        mm.free(A, &ids[10..]).unwrap();
        let c = mm.container(A).unwrap();
        assert_eq!((c.local_usage, c.cxl_usage), (0, 0));
        mm.check_consistency().unwrap();
    }

    #[test]
    fn free_foreign_page_is_not_owner() {
        let mut mm = mm_with(1000, 100, &[(0, None), (0, None)]);
        let ids = mm.allocate(A, 1, 0).unwrap();
        assert_eq!(
            mm.free(B, &ids),
            Err(MemError::NotOwner {
                page: ids[0],
                container: B
            })
        );
        assert_eq!(mm.container(A).unwrap().local_usage, 1);
    }

    #[test]
    fn two_touches_make_a_candidate() {
        let mut mm = mm_with(100, 100, &[(0, None)]);
        let ids = mm.allocate(A, 100, 0).unwrap();
        let cxl = *ids.iter().find(|&&p| mm.page(p).unwrap().tier == Tier::Cxl).unwrap();
        assert_eq!(mm.record_access(A, cxl, 5).unwrap(), None);
        assert!(!mm.is_candidate(cxl));
        assert_eq!(
            mm.record_access(A, cxl, 15).unwrap(),
            Some(HintFault { page: cxl, tick: 15 })
        );
        assert!(mm.is_candidate(cxl));
        assert_eq!(mm.container(A).unwrap().counters.hint_faults, 1);
        // Further hot accesses refresh ranking but are not new faults.
        assert_eq!(mm.record_access(A, cxl, 16).unwrap(), None);
        assert_eq!(mm.container(A).unwrap().counters.hint_faults, 1);
    }

    #[test]
    fn touches_further_apart_than_window_do_not_qualify() {
        let mut mm = mm_with(100, 100, &[(0, None)]);
        let ids = mm.allocate(A, 100, 0).unwrap();
        let cxl = *ids.last().unwrap();
        mm.record_access(A, cxl, 0).unwrap();
        mm.record_access(A, cxl, 21).unwrap();
        assert!(!mm.is_candidate(cxl));
    }

    #[test]
    fn local_access_moves_to_head_without_counters() {
        let mut mm = mm_with(1000, 100, &[(0, None)]);
        let ids = mm.allocate(A, 3, 0).unwrap();
        mm.record_access(A, ids[0], 1).unwrap();
        assert_eq!(mm.list_pages(A, Tier::Local, true)[0], ids[0]);
        assert_eq!(mm.container(A).unwrap().counters, Default::default());
    }

    #[test]
    fn migrate_updates_counters() {
        let mut mm = mm_with(100, 100, &[(0, None)]);
        let ids = mm.allocate(A, 10, 0).unwrap();
        mm.migrate(ids[0], Tier::Cxl, 1).unwrap();
        let c = mm.container(A).unwrap();
        assert_eq!((c.cxl_usage, c.counters.demoted), (1, 1));
        assert!(!mm.page(ids[0]).unwrap().active);
        mm.migrate(ids[0], Tier::Local, 2).unwrap();
        let c = mm.container(A).unwrap();
        assert_eq!(c.counters.promoted, 1);
        assert!(mm.page(ids[0]).unwrap().active);
        assert_eq!(mm.migrate(ids[0], Tier::Local, 2), Err(MemError::AlreadyOnTier(ids[0])));
    }

    #[test]
    fn promotion_without_frame_is_destination_full() {
        let mut mm = mm_with(100, 100, &[(0, None)]);
        let ids = mm.allocate(A, 200, 0).unwrap();
        assert_eq!(mm.free_pages(Tier::Local), 0);
        let cxl = *ids.iter().find(|&&p| mm.page(p).unwrap().tier == Tier::Cxl).unwrap();
        assert_eq!(
            mm.migrate(cxl, Tier::Local, 1),
            Err(MemError::DestinationFull(Tier::Local))
        );
    }

    #[test]
    fn aging_deactivates_only_stale_pages() {
        let mut mm = mm_with(1000, 100, &[(0, None), (0, None)]);
        let ids = mm.allocate(A, 4, 0).unwrap();
        mm.record_access(A, ids[1], 60).unwrap();
        mm.age_lrus(60);
        assert!(mm.page(ids[1]).unwrap().active);
        for &p in [ids[0], ids[2], ids[3]].iter() {
            assert!(!mm.page(p).unwrap().active);
        }
        // Recency order is preserved on the inactive list.
        assert_eq!(mm.list_len(A, Tier::Local, false), 3);
        mm.age_lrus(61);
        assert_eq!(mm.list_len(B, Tier::Local, true), 0);
        mm.check_consistency().unwrap();
    }

    #[test]
    fn watermark_classification() {
        assert_eq!(WatermarkState::classify(21, 10, 20), WatermarkState::AboveHigh);
        assert_eq!(WatermarkState::classify(9, 10, 20), WatermarkState::BelowLow);
        assert_eq!(WatermarkState::classify(15, 10, 20), WatermarkState::BelowHigh);
        assert_eq!(WatermarkState::classify(20, 10, 20), WatermarkState::BelowHigh);
        assert_eq!(WatermarkState::classify(10, 10, 20), WatermarkState::BelowHigh);
    }
}
