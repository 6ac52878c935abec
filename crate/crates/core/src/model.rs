//! Shared data model: tiers, pages, containers, machine configuration.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation time, in ticks.
pub type Tick = u64;

/// Memory tier. `Local` is the fast CPU-attached tier, `Cxl` the capacity tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Local,
    Cxl,
}

impl Tier {
    pub fn other(self) -> Tier {
        match self {
            Tier::Local => Tier::Cxl,
            Tier::Cxl => Tier::Local,
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            Tier::Local => 0,
            Tier::Cxl => 1,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tier::Local => f.write_str("local"),
            Tier::Cxl => f.write_str("cxl"),
        }
    }
}

/// Dense container index. Containers are numbered in scenario order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContainerId(pub u16);

impl ContainerId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ContainerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Dense page number. Numbers are recycled after a page is freed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PageId(pub u32);

impl PageId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Per-container tiering activity counters. All monotonically non-decreasing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCounters {
    pub demoted: u64,
    pub promoted: u64,
    pub promotion_attempts: u64,
    pub hint_faults: u64,
    pub sync_demotions: u64,
    pub cxl_fallback_allocs: u64,
    pub thrash_events: u64,
    pub freed: u64,
}

/// Promotion-rate multiplier driven by the thrash detector, always `2^-shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Multiplier {
    shift: u8,
}

impl Multiplier {
    pub const ONE: Multiplier = Multiplier { shift: 0 };

    pub fn from_shift(shift: u8) -> Self {
        Multiplier { shift }
    }

    pub fn shift(self) -> u8 {
        self.shift
    }

    pub fn value(self) -> f64 {
        1.0 / (1u64 << self.shift) as f64
    }

    pub fn is_one(self) -> bool {
        self.shift == 0
    }

    /// Halves the multiplier, never going below `2^-max_shift`.
    pub fn halved(self, max_shift: u8) -> Self {
        Multiplier {
            shift: (self.shift + 1).min(max_shift),
        }
    }

    /// Doubles the multiplier, capped at 1.
    pub fn doubled(self) -> Self {
        Multiplier {
            shift: self.shift.saturating_sub(1),
        }
    }
}

/// Cumulative access accounting used to derive achieved throughput.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessStats {
    pub accesses: u64,
    pub local_accesses: u64,
    /// Sum of per-access latency in local-access units.
    pub access_time: f64,
}

/// A tenant of the simulated machine.
#[derive(Debug, Clone)]
pub struct Container {
    pub id: ContainerId,
    pub name: String,
    pub lower_protection: u64,
    pub upper_bound: Option<u64>,
    pub local_usage: u64,
    pub cxl_usage: u64,
    pub counters: TierCounters,
    pub promo_multiplier: Multiplier,
    pub throttled: bool,
    pub steady_state: bool,
    pub access: AccessStats,
    /// Set when a candidate was skipped for lack of a local frame while the
    /// container sat below its lower protection. Reset every promotion pass.
    pub protection_starved: bool,
}

impl Container {
    pub fn new(id: ContainerId, spec: &ContainerSpec) -> Self {
        Container {
            id,
            name: spec.name.clone(),
            lower_protection: spec.lower_protection,
            upper_bound: spec.upper_bound,
            local_usage: 0,
            cxl_usage: 0,
            counters: TierCounters::default(),
            promo_multiplier: Multiplier::ONE,
            throttled: false,
            steady_state: false,
            access: AccessStats::default(),
            protection_starved: false,
        }
    }

    pub fn usage(&self, tier: Tier) -> u64 {
        match tier {
            Tier::Local => self.local_usage,
            Tier::Cxl => self.cxl_usage,
        }
    }

    pub(crate) fn usage_mut(&mut self, tier: Tier) -> &mut u64 {
        match tier {
            Tier::Local => &mut self.local_usage,
            Tier::Cxl => &mut self.cxl_usage,
        }
    }

    pub fn total_usage(&self) -> u64 {
        self.local_usage + self.cxl_usage
    }

    pub fn is_over_protection(&self) -> bool {
        self.local_usage > self.lower_protection
    }
}

/// Tenant parameters as given in a scenario, before any pages exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub name: String,
    pub lower_protection: u64,
    pub upper_bound: Option<u64>,
}

/// Policy switches. The defaults enable every mechanism; turning them off
/// together with zero protections emulates an unmodified tiering kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policy {
    pub promotion_throttling: bool,
    pub thrash_mitigation: bool,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            promotion_throttling: true,
            thrash_mitigation: true,
        }
    }
}

/// Machine-wide configuration. Capacities and watermarks are page counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub local_capacity: u64,
    pub cxl_capacity: u64,
    pub page_size: u64,
    pub low_watermark: u64,
    pub high_watermark: u64,
    /// Simulated milliseconds per tick.
    pub tick_length: u64,
    pub promo_scan_interval: u64,
    pub demote_scan_interval: u64,
    pub detector_period: u64,
    /// Milliseconds.
    pub t_resident: u64,
    /// Thrash events per second per container.
    pub r_thrashing: f64,
    pub hash_table_slots: usize,
    pub promo_sample_rate: f64,
    pub p_base_fraction: f64,
    pub multiplier_floor: f64,
    pub hint_window: u64,
    pub aging_horizon: u64,
    pub steady_active_delta: f64,
    /// Pages per second.
    pub steady_free_rate: f64,
    pub steady_grace_periods: u32,
    /// Fraction of the upper bound below it at which background enforcement starts.
    pub bound_headroom: f64,
    pub sync_batch_divisor: u64,
    pub sync_retries: u32,
    pub migration_cap_per_tick: Option<u64>,
    /// CXL access latency relative to a local access.
    pub cxl_access_cost: f64,
    /// Latency inflation per unit of (pages migrated / pages accessed) in a tick.
    pub migration_interference: f64,
    pub rng_seed: u64,
}

impl MachineConfig {
    /// Machine with the documented defaults for everything but capacities and seed.
    pub fn with_capacities(local_capacity: u64, cxl_capacity: u64, rng_seed: u64) -> Self {
        let low = (local_capacity / 1000).max(1);
        MachineConfig {
            local_capacity,
            cxl_capacity,
            page_size: 4096,
            low_watermark: low,
            high_watermark: low * 2,
            tick_length: 100,
            promo_scan_interval: 1,
            demote_scan_interval: 1,
            detector_period: 50,
            t_resident: 10_000,
            r_thrashing: 1000.0,
            hash_table_slots: 65_536,
            promo_sample_rate: 0.125,
            p_base_fraction: 0.125,
            multiplier_floor: 1.0 / 64.0,
            hint_window: 20,
            aging_horizon: 50,
            steady_active_delta: 0.05,
            steady_free_rate: (local_capacity as f64 / 100.0).max(1.0),
            steady_grace_periods: 2,
            bound_headroom: 0.02,
            sync_batch_divisor: 100,
            sync_retries: 3,
            migration_cap_per_tick: None,
            cxl_access_cost: 2.0,
            migration_interference: 0.0,
            rng_seed,
        }
    }

    pub fn tick_seconds(&self) -> f64 {
        self.tick_length as f64 / 1000.0
    }

    pub fn period_seconds(&self) -> f64 {
        self.detector_period as f64 * self.tick_seconds()
    }

    /// Largest halving count allowed by `multiplier_floor`.
    pub fn multiplier_max_shift(&self) -> u8 {
        let shift = (1.0 / self.multiplier_floor).log2().round();
        shift.clamp(0.0, 30.0) as u8
    }

    /// Pages below the upper bound at which the bound counts as "approached".
    pub fn headroom_for(&self, upper_bound: u64) -> u64 {
        (upper_bound as f64 * self.bound_headroom).floor() as u64
    }

    pub fn capacity(&self, tier: Tier) -> u64 {
        match tier {
            Tier::Local => self.local_capacity,
            Tier::Cxl => self.cxl_capacity,
        }
    }
}

/// One violated configuration constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    WatermarkOrdering { low: u64, high: u64, capacity: u64 },
    ZeroCapacity(&'static str),
    ZeroInterval(&'static str),
    FractionOutOfRange { field: &'static str, value: String },
    MultiplierFloor(String),
    ProtectionExceedsCapacity { protections: u64, capacity: u64 },
    BoundBelowProtection { container: String, protection: u64, bound: u64 },
    DuplicateContainer(String),
    NoContainers,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::WatermarkOrdering { low, high, capacity } => write!(
                f,
                "watermark ordering: need 0 < low ({low}) < high ({high}) < local_capacity ({capacity})"
            ),
            Violation::ZeroCapacity(field) => write!(f, "{field} must be positive"),
            Violation::ZeroInterval(field) => write!(f, "{field} must be positive"),
            Violation::FractionOutOfRange { field, value } => {
                write!(f, "{field} = {value} must lie in (0, 1]")
            }
            Violation::MultiplierFloor(v) => {
                write!(f, "multiplier_floor = {v} must be a power of two in (0, 1]")
            }
            Violation::ProtectionExceedsCapacity {
                protections,
                capacity,
            } => write!(
                f,
                "lower protections sum to {protections} pages, above local capacity {capacity}"
            ),
            Violation::BoundBelowProtection {
                container,
                protection,
                bound,
            } => write!(
                f,
                "bound ordering: container {container} has upper_bound {bound} below lower_protection {protection}"
            ),
            Violation::DuplicateContainer(name) => write!(f, "duplicate container id {name}"),
            Violation::NoContainers => f.write_str("scenario defines no containers"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid configuration: {}", format_violations(.0))]
    InvalidConfig(Vec<Violation>),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

fn check_fraction(out: &mut Vec<Violation>, field: &'static str, value: f64) {
    if !(value > 0.0 && value <= 1.0) {
        out.push(Violation::FractionOutOfRange {
            field,
            value: value.to_string(),
        });
    }
}

/// Checks every scenario-wide constraint and reports all violations at once.
pub fn validate_config(
    machine: &MachineConfig,
    containers: &[ContainerSpec],
) -> Result<(), ConfigError> {
    let mut out = Vec::new();
    let m = machine;

    if m.local_capacity == 0 {
        out.push(Violation::ZeroCapacity("local_capacity"));
    }
    if m.page_size == 0 {
        out.push(Violation::ZeroCapacity("page_size"));
    }
    if m.hash_table_slots == 0 {
        out.push(Violation::ZeroCapacity("hash_table_slots"));
    }
    if !(m.low_watermark > 0 && m.low_watermark < m.high_watermark && m.high_watermark < m.local_capacity)
    {
        out.push(Violation::WatermarkOrdering {
            low: m.low_watermark,
            high: m.high_watermark,
            capacity: m.local_capacity,
        });
    }
    for (field, v) in [
        ("tick_length", m.tick_length),
        ("promo_scan_interval", m.promo_scan_interval),
        ("demote_scan_interval", m.demote_scan_interval),
        ("detector_period", m.detector_period),
        ("hint_window", m.hint_window),
        ("aging_horizon", m.aging_horizon),
        ("sync_batch_divisor", m.sync_batch_divisor),
    ] {
        if v == 0 {
            out.push(Violation::ZeroInterval(field));
        }
    }
    // A sample rate of zero is a legal way to switch detection off.
    if !(0.0..=1.0).contains(&m.promo_sample_rate) {
        out.push(Violation::FractionOutOfRange {
            field: "promo_sample_rate",
            value: m.promo_sample_rate.to_string(),
        });
    }
    check_fraction(&mut out, "p_base_fraction", m.p_base_fraction);
    if !(0.0..1.0).contains(&m.bound_headroom) {
        out.push(Violation::FractionOutOfRange {
            field: "bound_headroom",
            value: m.bound_headroom.to_string(),
        });
    }
    let floor_ok = m.multiplier_floor > 0.0
        && m.multiplier_floor <= 1.0
        && (1.0 / m.multiplier_floor).log2().fract().abs() < 1e-9;
    if !floor_ok {
        out.push(Violation::MultiplierFloor(m.multiplier_floor.to_string()));
    }

    if containers.is_empty() {
        out.push(Violation::NoContainers);
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut protections = 0u64;
    for c in containers {
        if !seen.insert(c.name.as_str()) {
            out.push(Violation::DuplicateContainer(c.name.clone()));
        }
        protections = protections.saturating_add(c.lower_protection);
        if let Some(bound) = c.upper_bound {
            if bound < c.lower_protection {
                out.push(Violation::BoundBelowProtection {
                    container: c.name.clone(),
                    protection: c.lower_protection,
                    bound,
                });
            }
        }
    }
    if protections > m.local_capacity {
        out.push(Violation::ProtectionExceedsCapacity {
            protections,
            capacity: m.local_capacity,
        });
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::InvalidConfig(out))
    }
}
