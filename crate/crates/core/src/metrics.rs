//! Point-in-time snapshots of every container's tiering counters, and
//! CSV / JSON-lines export of a run's time series.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::MemoryManager;
use crate::model::{MachineConfig, Policy, Tick, Tier};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerMetrics {
    pub container: String,
    pub local_pages: u64,
    pub cxl_pages: u64,
    pub demoted: u64,
    pub promoted: u64,
    pub promotion_attempts: u64,
    pub hint_faults: u64,
    pub thrash_events: u64,
    pub sync_demotions: u64,
    pub cxl_fallback_allocs: u64,
    pub freed: u64,
    pub promo_multiplier: f64,
    pub throttled: bool,
    pub steady_state: bool,
    pub accesses: u64,
    /// Cumulative access latency in local-access units.
    pub access_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub free_local: u64,
    pub free_cxl: u64,
    pub watermark_state: String,
    pub migrations_this_interval: u64,
    pub demoted_total: u64,
    pub promoted_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub tick: Tick,
    pub containers: Vec<ContainerMetrics>,
    pub system: SystemMetrics,
}

impl MetricsSnapshot {
    pub fn container(&self, name: &str) -> Option<&ContainerMetrics> {
        self.containers.iter().find(|c| c.container == name)
    }
}

/// Copies every counter and gauge. `migrations_this_interval` is supplied by
/// the caller, who knows where the previous interval ended.
pub fn snapshot(mm: &MemoryManager, tick: Tick, migrations_this_interval: u64) -> MetricsSnapshot {
    let containers = mm
        .containers()
        .iter()
        .map(|c| ContainerMetrics {
            container: c.name.clone(),
            local_pages: c.local_usage,
            cxl_pages: c.cxl_usage,
            demoted: c.counters.demoted,
            promoted: c.counters.promoted,
            promotion_attempts: c.counters.promotion_attempts,
            hint_faults: c.counters.hint_faults,
            thrash_events: c.counters.thrash_events,
            sync_demotions: c.counters.sync_demotions,
            cxl_fallback_allocs: c.counters.cxl_fallback_allocs,
            freed: c.counters.freed,
            promo_multiplier: c.promo_multiplier.value(),
            throttled: c.throttled,
            steady_state: c.steady_state,
            accesses: c.access.accesses,
            access_time: c.access.access_time,
        })
        .collect();
    MetricsSnapshot {
        tick,
        containers,
        system: SystemMetrics {
            free_local: mm.free_pages(Tier::Local),
            free_cxl: mm.free_pages(Tier::Cxl),
            watermark_state: mm.watermark_state().as_str().to_string(),
            migrations_this_interval,
            demoted_total: mm.total_demoted(),
            promoted_total: mm.total_promoted(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub name: String,
    pub lower_protection: u64,
    pub upper_bound: Option<u64>,
    pub workload: WorkloadSpec,
}

/// Everything needed to reproduce a run. Page counts throughout; multiply by
/// `page_size` for bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub scenario: String,
    pub seed: u64,
    pub page_size: u64,
    pub duration: Tick,
    pub snapshot_interval: Tick,
    pub policy: Policy,
    pub machine: MachineConfig,
    pub containers: Vec<ContainerHeader>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl FromStr for ExportFormat {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            _ => Err(ExportError::UnknownFormat(s.to_string())),
        }
    }
}

impl ExportFormat {
    /// Guess from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("jsonl") => ExportFormat::Jsonl,
            _ => ExportFormat::Csv,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("unknown export format {0:?}, expected csv or jsonl")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed export: {0}")]
    Malformed(String),
}

/// Column order of the CSV export.
pub const CSV_COLUMNS: &[&str] = &[
    "record",
    "tick",
    "container",
    "local_pages",
    "cxl_pages",
    "demoted",
    "promoted",
    "promotion_attempts",
    "hint_faults",
    "thrash_events",
    "sync_demotions",
    "cxl_fallback_allocs",
    "freed",
    "promo_multiplier",
    "throttled",
    "steady_state",
    "accesses",
    "access_time",
    "free_local",
    "free_cxl",
    "watermark_state",
    "migrations_this_interval",
    "demoted_total",
    "promoted_total",
];

/// One CSV line. Container rows leave the system columns empty and the other
/// way round. Field order must match `CSV_COLUMNS`.
#[derive(Debug, Default, Serialize, Deserialize)]
struct CsvRow {
    record: String,
    tick: Tick,
    container: Option<String>,
    local_pages: Option<u64>,
    cxl_pages: Option<u64>,
    demoted: Option<u64>,
    promoted: Option<u64>,
    promotion_attempts: Option<u64>,
    hint_faults: Option<u64>,
    thrash_events: Option<u64>,
    sync_demotions: Option<u64>,
    cxl_fallback_allocs: Option<u64>,
    freed: Option<u64>,
    promo_multiplier: Option<f64>,
    throttled: Option<bool>,
    steady_state: Option<bool>,
    accesses: Option<u64>,
    access_time: Option<f64>,
    free_local: Option<u64>,
    free_cxl: Option<u64>,
    watermark_state: Option<String>,
    migrations_this_interval: Option<u64>,
    demoted_total: Option<u64>,
    promoted_total: Option<u64>,
}

impl CsvRow {
    fn container(tick: Tick, c: &ContainerMetrics) -> Self {
        CsvRow {
            record: "container".into(),
            tick,
            container: Some(c.container.clone()),
            local_pages: Some(c.local_pages),
            cxl_pages: Some(c.cxl_pages),
            demoted: Some(c.demoted),
            promoted: Some(c.promoted),
            promotion_attempts: Some(c.promotion_attempts),
            hint_faults: Some(c.hint_faults),
            thrash_events: Some(c.thrash_events),
            sync_demotions: Some(c.sync_demotions),
            cxl_fallback_allocs: Some(c.cxl_fallback_allocs),
            freed: Some(c.freed),
            promo_multiplier: Some(c.promo_multiplier),
            throttled: Some(c.throttled),
            steady_state: Some(c.steady_state),
            accesses: Some(c.accesses),
            access_time: Some(c.access_time),
            ..Default::default()
        }
    }

    fn system(tick: Tick, s: &SystemMetrics) -> Self {
        CsvRow {
            record: "system".into(),
            tick,
            free_local: Some(s.free_local),
            free_cxl: Some(s.free_cxl),
            watermark_state: Some(s.watermark_state.clone()),
            migrations_this_interval: Some(s.migrations_this_interval),
            demoted_total: Some(s.demoted_total),
            promoted_total: Some(s.promoted_total),
            ..Default::default()
        }
    }

    fn into_container(self) -> Result<ContainerMetrics, ExportError> {
        let missing = |f: &str| ExportError::Malformed(format!("container row at tick {} lacks {f}", self.tick));
        Ok(ContainerMetrics {
            container: self.container.clone().ok_or_else(|| missing("container"))?,
            local_pages: self.local_pages.ok_or_else(|| missing("local_pages"))?,
            cxl_pages: self.cxl_pages.ok_or_else(|| missing("cxl_pages"))?,
            demoted: self.demoted.unwrap_or(0),
            promoted: self.promoted.unwrap_or(0),
            promotion_attempts: self.promotion_attempts.unwrap_or(0),
            hint_faults: self.hint_faults.unwrap_or(0),
            thrash_events: self.thrash_events.unwrap_or(0),
            sync_demotions: self.sync_demotions.unwrap_or(0),
            cxl_fallback_allocs: self.cxl_fallback_allocs.unwrap_or(0),
            freed: self.freed.unwrap_or(0),
            promo_multiplier: self.promo_multiplier.unwrap_or(1.0),
            throttled: self.throttled.unwrap_or(false),
            steady_state: self.steady_state.unwrap_or(false),
            accesses: self.accesses.unwrap_or(0),
            access_time: self.access_time.unwrap_or(0.0),
        })
    }

    fn into_system(self) -> SystemMetrics {
        SystemMetrics {
            free_local: self.free_local.unwrap_or(0),
            free_cxl: self.free_cxl.unwrap_or(0),
            watermark_state: self.watermark_state.unwrap_or_default(),
            migrations_this_interval: self.migrations_this_interval.unwrap_or(0),
            demoted_total: self.demoted_total.unwrap_or(0),
            promoted_total: self.promoted_total.unwrap_or(0),
        }
    }
}

/// Writes the run header and all snapshots.
///
/// CSV: a `# `-prefixed JSON header line, the column header, then per
/// snapshot one row per container followed by one system row.
/// JSONL: the header object, then one object per snapshot.
pub fn export_timeseries<W: Write>(
    header: &RunHeader,
    snapshots: &[MetricsSnapshot],
    out: W,
    format: ExportFormat,
) -> Result<(), ExportError> {
    let mut out = BufWriter::new(out);
    match format {
        ExportFormat::Csv => {
            writeln!(out, "# {}", serde_json::to_string(header)?)?;
            let mut w = csv::Writer::from_writer(&mut out);
            for s in snapshots {
                for c in &s.containers {
                    w.serialize(CsvRow::container(s.tick, c))?;
                }
                w.serialize(CsvRow::system(s.tick, &s.system))?;
            }
            w.flush()?;
        }
        ExportFormat::Jsonl => {
            serde_json::to_writer(&mut out, header)?;
            out.write_all(b"\n")?;
            for s in snapshots {
                serde_json::to_writer(&mut out, s)?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn export_to_path(
    header: &RunHeader,
    snapshots: &[MetricsSnapshot],
    path: &Path,
    format: ExportFormat,
) -> Result<(), ExportError> {
    let file = fs::File::create(path)?;
    export_timeseries(header, snapshots, file, format)
}

/// A run read back from an export file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedRun {
    pub header: RunHeader,
    pub snapshots: Vec<MetricsSnapshot>,
}

impl ExportedRun {
    pub fn last(&self) -> Option<&MetricsSnapshot> {
        self.snapshots.last()
    }
}

pub fn parse_export(text: &str, format: ExportFormat) -> Result<ExportedRun, ExportError> {
    match format {
        ExportFormat::Jsonl => {
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            let first = lines
                .next()
                .ok_or_else(|| ExportError::Malformed("empty file".into()))?;
            let header: RunHeader = serde_json::from_str(first)?;
            let snapshots = lines
                .map(serde_json::from_str)
                .collect::<Result<Vec<MetricsSnapshot>, _>>()?;
            Ok(ExportedRun { header, snapshots })
        }
        ExportFormat::Csv => {
            let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
            let json = first
                .strip_prefix("# ")
                .ok_or_else(|| ExportError::Malformed("missing run header line".into()))?;
            let header: RunHeader = serde_json::from_str(json)?;
            let mut snapshots: Vec<MetricsSnapshot> = Vec::new();
            let mut pending = Vec::new();
            for row in csv::Reader::from_reader(rest.as_bytes()).deserialize::<CsvRow>() {
                let row = row?;
                match row.record.as_str() {
                    "container" => pending.push(row.into_container()?),
                    "system" => snapshots.push(MetricsSnapshot {
                        tick: row.tick,
                        containers: std::mem::take(&mut pending),
                        system: row.into_system(),
                    }),
                    other => return Err(ExportError::Malformed(format!("unknown record type {other:?}"))),
                }
            }
            if !pending.is_empty() {
                return Err(ExportError::Malformed("container rows without a system row".into()));
            }
            Ok(ExportedRun { header, snapshots })
        }
    }
}

/// Reads an export, picking the format by sniffing the first byte.
pub fn read_export(path: &Path) -> Result<ExportedRun, ExportError> {
    let text = fs::read_to_string(path)?;
    let format = if text.starts_with('#') {
        ExportFormat::Csv
    } else {
        ExportFormat::Jsonl
    };
    parse_export(&text, format)
}

/// Final placement and counter totals per container, as a text table.
pub fn format_summary(run: &ExportedRun) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "scenario {} seed {} page_size {}",
        run.header.scenario, run.header.seed, run.header.page_size
    );
    let Some(last) = run.last() else {
        s.push_str("no snapshots\n");
        return s;
    };
    let _ = writeln!(s, "final tick {}", last.tick);
    let _ = writeln!(
        s,
        "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>10}",
        "container", "local", "cxl", "demoted", "promoted", "hint", "sync", "thrash", "multiplier"
    );
    for c in &last.containers {
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>10}",
            c.container,
            c.local_pages,
            c.cxl_pages,
            c.demoted,
            c.promoted,
            c.hint_faults,
            c.sync_demotions,
            c.thrash_events,
            c.promo_multiplier
        );
    }
    let _ = writeln!(
        s,
        "free local {} free cxl {} demoted {} promoted {}",
        last.system.free_local, last.system.free_cxl, last.system.demoted_total, last.system.promoted_total
    );
    s
}
