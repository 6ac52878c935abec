//! Thrash detection: sampled promotion records, promote-to-demote timing and
//! the per-container promotion multiplier.
//!
//! A fraction of promotions is recorded in a fixed-size table keyed by page
//! number. A demotion that finds its page in the table less than
//! `t_resident` after the promotion counts as a thrash event for the owner.
//! Every detector period the table is cleared and each container's event rate
//! over the period decides whether its promotion multiplier halves (still
//! thrashing, and in steady state) or doubles back towards 1.

use rand::Rng;

use crate::model::{ContainerId, MachineConfig, Multiplier, PageId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromotionRecord {
    pub page: PageId,
    pub promote_tick: Tick,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ThrashState {
    pub thrash_counter: u64,
    pub last_period_counter: u64,
    pub promo_multiplier: Multiplier,
    pub active_pages_prev: Option<u64>,
    pub freed_prev: u64,
    /// Periods observed since the container first held pages.
    pub periods_observed: u32,
    pub steady: bool,
}

/// What the periodic update decided for one container.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiplierDecision {
    pub container: ContainerId,
    pub rate: f64,
    pub steady: bool,
    pub multiplier: Multiplier,
}

/// Per-period inputs the detector cannot see on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerActivity {
    pub active_pages: u64,
    pub freed: u64,
    pub resident: bool,
}

#[derive(Debug, Clone)]
pub struct ThrashDetector {
    table: Vec<Option<PromotionRecord>>,
    states: Vec<ThrashState>,
    sample_rate: f64,
    tick_length: u64,
    t_resident: u64,
    r_thrashing: f64,
    period_seconds: f64,
    max_shift: u8,
    steady_active_delta: f64,
    steady_free_rate: f64,
    grace_periods: u32,
}

fn slot_of(page: PageId, slots: usize) -> usize {
    // Fibonacci hashing spreads dense page numbers across the table.
    let h = (page.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ((h >> 16) % slots as u64) as usize
}

impl ThrashDetector {
    pub fn new(cfg: &MachineConfig, containers: usize) -> Self {
        ThrashDetector {
            table: vec![None; cfg.hash_table_slots],
            states: vec![ThrashState::default(); containers],
            sample_rate: cfg.promo_sample_rate,
            tick_length: cfg.tick_length,
            t_resident: cfg.t_resident,
            r_thrashing: cfg.r_thrashing,
            period_seconds: cfg.period_seconds(),
            max_shift: cfg.multiplier_max_shift(),
            steady_active_delta: cfg.steady_active_delta,
            steady_free_rate: cfg.steady_free_rate,
            grace_periods: cfg.steady_grace_periods,
        }
    }

    pub fn state(&self, c: ContainerId) -> &ThrashState {
        &self.states[c.index()]
    }

    pub fn record(&self, page: PageId) -> Option<PromotionRecord> {
        self.table[slot_of(page, self.table.len())].filter(|r| r.page == page)
    }

    pub fn occupied_slots(&self) -> usize {
        self.table.iter().filter(|s| s.is_some()).count()
    }

    /// Samples a just-promoted page into the table, overwriting any occupant
    /// of its slot.
    pub fn record_promotion<R: Rng + ?Sized>(&mut self, page: PageId, tick: Tick, rng: &mut R) {
        let sampled = if self.sample_rate >= 1.0 {
            true
        } else if self.sample_rate <= 0.0 {
            false
        } else {
            rng.gen::<f64>() < self.sample_rate
        };
        if sampled {
            let slot = slot_of(page, self.table.len());
            self.table[slot] = Some(PromotionRecord {
                page,
                promote_tick: tick,
            });
        }
    }

    /// Checks a demotion against the table. A hit younger than `t_resident`
    /// is a thrash event: the owner's counter is bumped and the record dropped.
    pub fn observe_demotion(&mut self, page: PageId, owner: ContainerId, tick: Tick) -> bool {
        let slot = slot_of(page, self.table.len());
        let Some(rec) = self.table[slot].filter(|r| r.page == page) else {
            return false;
        };
        let resident_ms = tick.saturating_sub(rec.promote_tick) * self.tick_length;
        if resident_ms < self.t_resident {
            self.table[slot] = None;
            self.states[owner.index()].thrash_counter += 1;
            true
        } else {
            false
        }
    }

    /// Steady-state test for one container; advances its stored history.
    pub fn is_steady_state(&mut self, c: ContainerId, activity: ContainerActivity) -> bool {
        let st = &mut self.states[c.index()];
        if !activity.resident && st.periods_observed == 0 {
            return false;
        }
        st.periods_observed += 1;
        let prev = st.active_pages_prev.replace(activity.active_pages);
        let freed_delta = activity.freed.saturating_sub(st.freed_prev);
        st.freed_prev = activity.freed;
        let Some(prev) = prev else {
            st.steady = false;
            return false;
        };
        let delta = activity.active_pages.abs_diff(prev) as f64;
        let active_ok = delta <= self.steady_active_delta * activity.active_pages as f64;
        let free_ok = freed_delta as f64 / self.period_seconds <= self.steady_free_rate;
        st.steady = st.periods_observed > self.grace_periods && active_ok && free_ok;
        st.steady
    }

    /// Period boundary: clears the table and updates every multiplier.
    /// With `mitigate` false the rates are still computed but multipliers stay at 1.
    pub fn periodic_update(&mut self, activity: &[ContainerActivity], mitigate: bool) -> Vec<MultiplierDecision> {
        self.table.iter_mut().for_each(|s| *s = None);
        let mut out = Vec::with_capacity(self.states.len());
        for (i, act) in activity.iter().enumerate() {
            let c = ContainerId(i as u16);
            let steady = self.is_steady_state(c, *act);
            let st = &mut self.states[i];
            let rate = (st.thrash_counter - st.last_period_counter) as f64 / self.period_seconds;
            st.last_period_counter = st.thrash_counter;
            if mitigate {
                if rate > self.r_thrashing {
                    if steady {
                        st.promo_multiplier = st.promo_multiplier.halved(self.max_shift);
                    }
                } else if !st.promo_multiplier.is_one() {
                    st.promo_multiplier = st.promo_multiplier.doubled();
                }
            }
            out.push(MultiplierDecision {
                container: c,
                rate,
                steady,
                multiplier: st.promo_multiplier,
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(sample: f64) -> MachineConfig {
        let mut c = MachineConfig::with_capacities(1000, 1000, 5);
        c.promo_sample_rate = sample;
        c.hash_table_slots = 64;
        c.r_thrashing = 1.0;
        c
    }

    fn steady_activity() -> ContainerActivity {
        ContainerActivity {
            active_pages: 100,
            freed: 0,
            resident: true,
        }
    }

    #[test]
    fn full_sampling_records_promotion() {
        let mut d = ThrashDetector::new(&cfg(1.0), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        d.record_promotion(PageId(3), 10, &mut rng);
        assert_eq!(
            d.record(PageId(3)),
            Some(PromotionRecord {
                page: PageId(3),
                promote_tick: 10
            })
        );
    }

    #[test]
    fn colliding_pages_overwrite() {
        let mut d = ThrashDetector::new(&cfg(1.0), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = PageId(1);
        let b = (2..10_000)
            .map(PageId)
            .find(|&p| slot_of(p, 64) == slot_of(a, 64))
            .unwrap();
        d.record_promotion(a, 1, &mut rng);
        d.record_promotion(b, 2, &mut rng);
        assert_eq!(d.record(a), None);
        assert_eq!(d.record(b).unwrap().promote_tick, 2);
        assert_eq!(d.occupied_slots(), 1);
    }

    #[test]
    fn zero_sample_rate_keeps_table_empty() {
        let mut d = ThrashDetector::new(&cfg(0.0), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in 0..100 {
            d.record_promotion(PageId(p), 0, &mut rng);
        }
        assert_eq!(d.occupied_slots(), 0);
    }

    #[test]
    fn fast_demotion_is_thrash() {
        // Promoted at tick 100, demoted at 110: 1 000 ms < 10 000 ms.
        let mut d = ThrashDetector::new(&cfg(1.0), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        d.record_promotion(PageId(7), 100, &mut rng);
        assert!(d.observe_demotion(PageId(7), ContainerId(0), 110));
        assert_eq!(d.state(ContainerId(0)).thrash_counter, 1);
        // The record is consumed.
        assert!(!d.observe_demotion(PageId(7), ContainerId(0), 111));
    }

    #[test]
    fn slow_demotion_is_not_thrash() {
        let mut d = ThrashDetector::new(&cfg(1.0), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        d.record_promotion(PageId(7), 100, &mut rng);
        assert!(!d.observe_demotion(PageId(7), ContainerId(0), 2100));
        assert!(!d.observe_demotion(PageId(8), ContainerId(0), 101));
    }

    fn thrash_burst(d: &mut ThrashDetector, base: u32, n: u32, tick: Tick) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in base..base + n {
            d.record_promotion(PageId(p), tick, &mut rng);
            d.observe_demotion(PageId(p), ContainerId(0), tick + 1);
        }
    }

    #[test]
    fn multiplier_halves_then_recovers() {
        let mut c = cfg(1.0);
        c.hash_table_slots = 4096;
        let mut d = ThrashDetector::new(&c, 1);
        let act = [steady_activity()];
        // Grace periods: not steady, no halving even while thrashing.
        for _ in 0..2 {
            thrash_burst(&mut d, 0, 100, 0);
            let dec = d.periodic_update(&act, true);
            assert_eq!(dec[0].multiplier, Multiplier::ONE);
        }
        thrash_burst(&mut d, 0, 100, 0);
        assert_eq!(d.periodic_update(&act, true)[0].multiplier.value(), 0.5);
        thrash_burst(&mut d, 0, 100, 0);
        assert_eq!(d.periodic_update(&act, true)[0].multiplier.value(), 0.25);
        assert_eq!(d.periodic_update(&act, true)[0].multiplier.value(), 0.5);
        assert_eq!(d.periodic_update(&act, true)[0].multiplier.value(), 1.0);
        assert_eq!(d.periodic_update(&act, true)[0].multiplier.value(), 1.0);
    }

    #[test]
    fn non_steady_container_is_not_mitigated() {
        let mut c = cfg(1.0);
        c.hash_table_slots = 4096;
        let mut d = ThrashDetector::new(&c, 1);
        for i in 0..6u64 {
            thrash_burst(&mut d, 0, 100, 0);
            // Active set grows 50% per period.
            let act = [ContainerActivity {
                active_pages: 100 * 3u64.pow(i as u32) / 2u64.pow(i as u32),
                freed: 0,
                resident: true,
            }];
            let dec = d.periodic_update(&act, true);
            assert!(!dec[0].steady);
            assert_eq!(dec[0].multiplier, Multiplier::ONE);
        }
    }

    #[test]
    fn brand_new_container_is_not_steady() {
        let mut d = ThrashDetector::new(&cfg(1.0), 1);
        assert!(!d.is_steady_state(ContainerId(0), steady_activity()));
    }

    #[test]
    fn table_cleared_each_period() {
        let mut d = ThrashDetector::new(&cfg(1.0), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        d.record_promotion(PageId(1), 0, &mut rng);
        d.periodic_update(&[steady_activity()], true);
        assert_eq!(d.occupied_slots(), 0);
    }
}
