//! Scenario files: a TOML document describing the machine, the policy, the
//! tenants and their workloads.
//!
//! Sizes are page counts, either as bare integers or as strings with a unit:
//! `"120MiB"`, `"4KiB"`, `"2GiB"`, `"512B"`, `"300p"` / `"300pages"`.
//! Byte sizes must be a whole number of pages.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::metrics::{ContainerHeader, ExportFormat, RunHeader};
use crate::model::{validate_config, ConfigError, ContainerSpec, MachineConfig, Policy, Tick};
use crate::workload::{BurstStep, WorkloadKind, WorkloadSpec};

/// Default ticks between snapshots (one simulated second at 100 ms ticks).
pub const DEFAULT_SNAPSHOT_INTERVAL: Tick = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerConfig {
    pub spec: ContainerSpec,
    pub workload: WorkloadSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub path: Option<PathBuf>,
    pub format: ExportFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub machine: MachineConfig,
    pub policy: Policy,
    pub containers: Vec<ContainerConfig>,
    pub duration: Tick,
    pub snapshot_interval: Tick,
    pub output: OutputConfig,
}

impl Scenario {
    pub fn container_specs(&self) -> Vec<ContainerSpec> {
        self.containers.iter().map(|c| c.spec.clone()).collect()
    }

    /// Resolved values as recorded at the top of every export.
    pub fn run_header(&self) -> RunHeader {
        RunHeader {
            scenario: self.name.clone(),
            seed: self.machine.rng_seed,
            page_size: self.machine.page_size,
            duration: self.duration,
            snapshot_interval: self.snapshot_interval,
            policy: self.policy,
            machine: self.machine.clone(),
            containers: self
                .containers
                .iter()
                .map(|c| ContainerHeader {
                    name: c.spec.name.clone(),
                    lower_protection: c.spec.lower_protection,
                    upper_bound: c.spec.upper_bound,
                    workload: c.workload.clone(),
                })
                .collect(),
        }
    }

    /// Checks machine and container constraints plus the scenario-level ones
    /// (positive duration, sane workloads). Reports every problem at once.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut problems = Vec::new();
        if let Err(ConfigError::InvalidConfig(v)) = validate_config(&self.machine, &self.container_specs()) {
            problems.extend(v.iter().map(|v| v.to_string()));
        }
        if self.duration == 0 {
            problems.push("duration must be positive".to_string());
        }
        if self.snapshot_interval == 0 {
            problems.push("snapshot_interval must be positive".to_string());
        }
        for c in &self.containers {
            let w = &c.workload;
            let name = &c.spec.name;
            if w.footprint == 0 && w.kind != WorkloadKind::Idle {
                problems.push(format!("container {name}: footprint must be positive"));
            }
            if !(w.hot_fraction > 0.0 && w.hot_fraction <= 1.0) {
                problems.push(format!("container {name}: hot_fraction = {} must lie in (0, 1]", w.hot_fraction));
            }
            if !(w.hotness >= 0.0 && w.hotness.is_finite()) {
                problems.push(format!("container {name}: hotness must be a non-negative number"));
            }
            if w.block_size == Some(0) {
                problems.push(format!("container {name}: block_size must be positive"));
            }
            if w.alloc_rate == Some(0) {
                problems.push(format!("container {name}: alloc_rate must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(problems))
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Size {
    Pages(u64),
    Text(String),
}

impl Size {
    fn pages(&self, page_size: u64, field: &str) -> Result<u64, ScenarioError> {
        let err = |message: String| ScenarioError::Field {
            field: field.to_string(),
            message,
        };
        let text = match self {
            Size::Pages(n) => return Ok(*n),
            Size::Text(t) => t.trim(),
        };
        let split = text
            .find(|ch: char| !ch.is_ascii_digit())
            .unwrap_or(text.len());
        let (num, unit) = text.split_at(split);
        let n: u64 = num
            .parse()
            .map_err(|_| err(format!("{text:?} is not a size")))?;
        let bytes_per = match unit.trim() {
            "" | "p" | "pages" => return Ok(n),
            "B" => 1,
            "KiB" => 1 << 10,
            "MiB" => 1 << 20,
            "GiB" => 1 << 30,
            other => return Err(err(format!("unknown size unit {other:?}"))),
        };
        let bytes = n
            .checked_mul(bytes_per)
            .ok_or_else(|| err(format!("{text:?} overflows")))?;
        if page_size == 0 || bytes % page_size != 0 {
            return Err(err(format!("{text:?} is not a whole number of {page_size}-byte pages")));
        }
        Ok(bytes / page_size)
    }
}

fn opt_pages(s: &Option<Size>, page_size: u64, field: &str) -> Result<Option<u64>, ScenarioError> {
    s.as_ref().map(|s| s.pages(page_size, field)).transpose()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<String>,
    duration: Tick,
    snapshot_interval: Option<Tick>,
    machine: RawMachine,
    #[serde(default)]
    policy: Policy,
    containers: Vec<RawContainer>,
    output: Option<RawOutput>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMachine {
    local_capacity: Size,
    cxl_capacity: Size,
    rng_seed: Option<u64>,
    page_size: Option<u64>,
    low_watermark: Option<Size>,
    high_watermark: Option<Size>,
    tick_length: Option<u64>,
    promo_scan_interval: Option<u64>,
    demote_scan_interval: Option<u64>,
    detector_period: Option<u64>,
    t_resident: Option<u64>,
    r_thrashing: Option<f64>,
    hash_table_slots: Option<usize>,
    promo_sample_rate: Option<f64>,
    p_base_fraction: Option<f64>,
    multiplier_floor: Option<f64>,
    hint_window: Option<u64>,
    aging_horizon: Option<u64>,
    steady_active_delta: Option<f64>,
    steady_free_rate: Option<f64>,
    steady_grace_periods: Option<u32>,
    bound_headroom: Option<f64>,
    sync_batch_divisor: Option<u64>,
    sync_retries: Option<u32>,
    migration_cap_per_tick: Option<u64>,
    cxl_access_cost: Option<f64>,
    migration_interference: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawContainer {
    name: String,
    #[serde(default)]
    lower_protection: Option<Size>,
    upper_bound: Option<Size>,
    workload: RawWorkload,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkload {
    kind: WorkloadKind,
    footprint: Option<Size>,
    hotness: Option<f64>,
    hot_fraction: Option<f64>,
    launch_delay: Option<Tick>,
    #[serde(default)]
    burst_profile: Vec<RawBurstStep>,
    block_size: Option<Size>,
    alloc_rate: Option<Size>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBurstStep {
    at: Tick,
    footprint: Size,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    path: Option<PathBuf>,
    format: Option<String>,
}

fn resolve_machine(m: &RawMachine) -> Result<MachineConfig, ScenarioError> {
    let seed = m.rng_seed.ok_or_else(|| ScenarioError::Field {
        field: "machine.rng_seed".into(),
        message: "required; every run must name its seed".into(),
    })?;
    let page_size = m.page_size.unwrap_or(4096);
    let local = m.local_capacity.pages(page_size, "machine.local_capacity")?;
    let cxl = m.cxl_capacity.pages(page_size, "machine.cxl_capacity")?;
    let mut c = MachineConfig::with_capacities(local, cxl, seed);
    c.page_size = page_size;
    if let Some(v) = opt_pages(&m.low_watermark, page_size, "machine.low_watermark")? {
        c.low_watermark = v;
        c.high_watermark = 2 * v;
    }
    if let Some(v) = opt_pages(&m.high_watermark, page_size, "machine.high_watermark")? {
        c.high_watermark = v;
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = m.$f { c.$f = v; } )* };
    }
    set!(
        tick_length,
        promo_scan_interval,
        demote_scan_interval,
        detector_period,
        t_resident,
        r_thrashing,
        hash_table_slots,
        promo_sample_rate,
        p_base_fraction,
        multiplier_floor,
        hint_window,
        aging_horizon,
        steady_active_delta,
        steady_free_rate,
        steady_grace_periods,
        bound_headroom,
        sync_batch_divisor,
        sync_retries,
        cxl_access_cost,
        migration_interference
    );
    c.migration_cap_per_tick = m.migration_cap_per_tick;
    Ok(c)
}

fn resolve_workload(w: &RawWorkload, page_size: u64, at: &str) -> Result<WorkloadSpec, ScenarioError> {
    let footprint = match (&w.footprint, w.kind) {
        (Some(f), _) => f.pages(page_size, &format!("{at}.footprint"))?,
        (None, WorkloadKind::Idle) => 0,
        (None, _) => {
            return Err(ScenarioError::Field {
                field: format!("{at}.footprint"),
                message: "required".into(),
            })
        }
    };
    let burst_profile = w
        .burst_profile
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(BurstStep {
                at: s.at,
                footprint: s.footprint.pages(page_size, &format!("{at}.burst_profile[{i}].footprint"))?,
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    Ok(WorkloadSpec {
        kind: w.kind,
        footprint,
        hotness: w.hotness.unwrap_or(1.0),
        hot_fraction: w.hot_fraction.unwrap_or(1.0),
        launch_delay: w.launch_delay.unwrap_or(0),
        burst_profile,
        block_size: opt_pages(&w.block_size, page_size, &format!("{at}.block_size"))?,
        alloc_rate: opt_pages(&w.alloc_rate, page_size, &format!("{at}.alloc_rate"))?,
    })
}

/// Parses and resolves a scenario document without validating it.
pub fn parse_scenario_str(text: &str) -> Result<Scenario, ScenarioError> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let machine = resolve_machine(&raw.machine)?;
    let page_size = machine.page_size;
    let containers = raw
        .containers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let at = format!("containers[{i}]");
            Ok(ContainerConfig {
                spec: ContainerSpec {
                    name: c.name.clone(),
                    lower_protection: opt_pages(&c.lower_protection, page_size, &format!("{at}.lower_protection"))?
                        .unwrap_or(0),
                    upper_bound: opt_pages(&c.upper_bound, page_size, &format!("{at}.upper_bound"))?,
                },
                workload: resolve_workload(&c.workload, page_size, &format!("{at}.workload"))?,
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    let output = match &raw.output {
        None => OutputConfig {
            path: None,
            format: ExportFormat::Csv,
        },
        Some(o) => {
            let format = match &o.format {
                Some(f) => f.parse().map_err(|e: crate::metrics::ExportError| ScenarioError::Field {
                    field: "output.format".into(),
                    message: e.to_string(),
                })?,
                None => o.path.as_deref().map_or(ExportFormat::Csv, ExportFormat::from_path),
            };
            OutputConfig {
                path: o.path.clone(),
                format,
            }
        }
    };
    Ok(Scenario {
        name: raw.name.unwrap_or_else(|| "scenario".into()),
        machine,
        policy: raw.policy,
        containers,
        duration: raw.duration,
        snapshot_interval: raw.snapshot_interval.unwrap_or(DEFAULT_SNAPSHOT_INTERVAL),
        output,
    })
}

/// Reads, resolves and validates a scenario file. A relative output path is
/// taken relative to the scenario file.
pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut s = parse_scenario_str(&text)?;
    if let Some(p) = &s.output.path {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                s.output.path = Some(dir.join(p));
            }
        }
    }
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
duration = 100

[machine]
local_capacity = "16MiB"
cxl_capacity = 1024
rng_seed = 3

[[containers]]
name = "a"
[containers.workload]
kind = "streaming"
footprint = "1MiB"
"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let s = parse_scenario_str(MINIMAL).unwrap();
        s.validate().unwrap();
        assert_eq!(s.machine.local_capacity, 4096);
        assert_eq!(s.machine.cxl_capacity, 1024);
        assert_eq!(s.machine.low_watermark, 4);
        assert_eq!(s.machine.detector_period, 50);
        assert_eq!(s.snapshot_interval, 10);
        assert_eq!(s.containers[0].workload.footprint, 256);
        assert_eq!(s.containers[0].spec.lower_protection, 0);
        assert_eq!(s.policy, Policy::default());
        assert_eq!(s.output.format, ExportFormat::Csv);
    }

    #[test]
    fn seed_is_required() {
        let text = MINIMAL.replace("rng_seed = 3", "");
        let err = parse_scenario_str(&text).unwrap_err();
        assert!(err.to_string().contains("rng_seed"), "{err}");
    }

    #[test]
    fn sizes() {
        let s = |t: &str| Size::Text(t.into()).pages(4096, "f");
        assert_eq!(s("2GiB").unwrap(), 524_288);
        assert_eq!(s("8KiB").unwrap(), 2);
        assert_eq!(s("8192B").unwrap(), 2);
        assert_eq!(s("7p").unwrap(), 7);
        assert_eq!(s("7 pages").unwrap(), 7);
        assert!(s("1000B").is_err());
        assert!(s("3 furlongs").is_err());
    }

    #[test]
    fn syntax_errors_carry_location() {
        let err = parse_scenario_str("duration = \n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = parse_scenario_str(&MINIMAL.replace("footprint", "footprnt")).unwrap_err();
        assert!(err.to_string().contains("footprnt"), "{err}");
    }

    #[test]
    fn validation_lists_every_problem() {
        let text = MINIMAL.replace("duration = 100", "duration = 0").replace(
            "footprint = \"1MiB\"",
            "footprint = \"1MiB\"\nhot_fraction = 1.5",
        );
        let s = parse_scenario_str(&text).unwrap();
        let Err(ScenarioError::Invalid(v)) = s.validate() else {
            panic!("expected violations")
        };
        assert_eq!(v.len(), 2, "{v:?}");
    }
}
