//! Serializable experiment specs, the on-disk artifact layout and the stock
//! figure recipes.
//!
//! Layout of an output directory (stable; plotting scripts depend on it):
//!
//! ```text
//! runs/<label>/spec.toml      resolved spec snapshot, re-runnable as is
//! runs/<label>/metrics.json   RunRecord: label, hashes, MetricsReport
//! runs/<label>/metrics.csv    metric,value pairs
//! runs/<label>/turns.csv      one row per turn
//! runs/<label>/events.jsonl   raw events, only with `record_events`
//! figures/<figure>.csv        one table per recipe
//! ```
//!
//! Every file carries the spec hash: a `spec_hash` key in JSON and TOML, a
//! leading `# spec_hash=` comment line in CSV and JSONL.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{compute, MetricsError, MetricsReport, PriceTable};
use crate::model::{builtin_profile, kv_size, ModelError, ModelProfile, TierConfig};
use crate::policy::{PolicyConfig, PolicyKind};
use crate::sim::{run, EventLog, Mode, SimConfig, SimError};
use crate::trace::{generate, load_trace_with, ArrivalModel, SyntheticSpec, ThinkDist, TraceError, TraceFormat, Workload};
use crate::units::{ByteSize, GIB, TIB};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("runs come from different base specs ({0}); pass the override flag to mix them")]
    MixedHashes(String),
}

impl ExperimentError {
    /// Whether the failure is the user's input rather than a runtime fault.
    pub fn is_config(&self) -> bool {
        match self {
            ExperimentError::Config(_) | ExperimentError::Toml(_) | ExperimentError::Model(_) => true,
            ExperimentError::Trace(e) => !matches!(e, TraceError::Io { .. }),
            ExperimentError::Sim(e) => matches!(e, SimError::Config(_) | SimError::Model(_) | SimError::EmptyWorkload),
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

fn artifact_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Artifact { path: path.to_path_buf(), message: e.to_string() }
}

/// Where conversations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadSource {
    /// JSON-lines trace (optionally gzipped); timestamps are synthesized.
    Trace {
        path: PathBuf,
        #[serde(default = "default_rate")]
        rate: f64,
        #[serde(default)]
        think: ThinkDist,
    },
    Synthetic(SyntheticSpec),
}

fn default_rate() -> f64 {
    1.0
}

/// Everything needed to reproduce one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub seed: u64,
    pub workload: WorkloadSource,
    pub sim: SimConfig,
    #[serde(default)]
    pub prices: PriceTable,
    /// Not part of the hash: moving the output does not change results.
    #[serde(default)]
    pub output_dir: PathBuf,
}

/// Sessions in the desk-scale default trace.
pub const DESK_SESSIONS: usize = 2000;
/// Conversations in the reference deployment the default tiers scale from.
pub const REFERENCE_SESSIONS: usize = 9000;
/// Turns excluded from metrics in the reference deployment.
pub const REFERENCE_WARMUP_TURNS: usize = 10_000;
pub const DEFAULT_SEED: u64 = 7;
/// Disk tier of the desk default. Chosen so the scheduler-aware hit rate on
/// the default trace sits where the reference deployment reports it.
pub const DESK_DISK: ByteSize = ByteSize(900 * GIB);
pub const DESK_DISK_BANDWIDTH: f64 = 4.0 * GIB as f64;

/// Testbed tiers shrunk to the desk trace: HBM cache and DRAM by
/// sessions / reference sessions, disk as [`DESK_DISK`].
pub fn desk_tiers() -> TierConfig {
    let mut t = TierConfig::default().scaled(DESK_SESSIONS as f64 / REFERENCE_SESSIONS as f64);
    t.disk_capacity = DESK_DISK;
    t.disk_bandwidth.0 = DESK_DISK_BANDWIDTH;
    t
}

impl ExperimentSpec {
    /// Desk-scale default: 2K synthetic sessions, cached reuse with the
    /// scheduler-aware policy, scaled tiers and a proportionally scaled
    /// warm-up.
    pub fn desk_default(profile: ModelProfile) -> ExperimentSpec {
        let mut sim = SimConfig::new(profile, Mode::CachedReuse);
        sim.tiers = desk_tiers();
        sim.warmup_turns = REFERENCE_WARMUP_TURNS * DESK_SESSIONS / REFERENCE_SESSIONS;
        ExperimentSpec {
            name: "default".into(),
            seed: DEFAULT_SEED,
            workload: WorkloadSource::Synthetic(SyntheticSpec { sessions: DESK_SESSIONS, ..SyntheticSpec::default() }),
            sim,
            prices: PriceTable::default(),
            output_dir: PathBuf::from("out"),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.sim.validate()?;
        let p = &self.prices;
        if [p.gpu_per_hour, p.dram_per_gb_hour, p.ssd_per_gb_hour].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(ExperimentError::Config(format!("prices must be finite and non-negative: {p:?}")));
        }
        if let WorkloadSource::Trace { rate, .. } = &self.workload {
            if !(*rate > 0.0 && rate.is_finite()) {
                return Err(ExperimentError::Config(format!("arrival rate must be positive, got {rate}")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("spec serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn load_workload(&self) -> Result<Workload, ExperimentError> {
        Ok(match &self.workload {
            WorkloadSource::Synthetic(s) => generate(s, self.seed)?,
            WorkloadSource::Trace { path, rate, think } => {
                load_trace_with(path, TraceFormat::Auto, &ArrivalModel { rate: *rate, think: *think, seed: self.seed })?
            }
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<ExperimentSpec, ExperimentError> {
        let spec: ExperimentSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// User-facing TOML config: every key optional, layered over the defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub name: Option<String>,
    pub seed: Option<u64>,
    /// Built-in profile name.
    pub profile: Option<String>,
    /// Fully custom profile; wins over `profile`.
    pub model: Option<ModelProfile>,
    pub mode: Option<String>,
    pub policy: Option<String>,
    pub prefetch_window: Option<usize>,
    pub eviction_window: Option<usize>,
    pub trace: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub rate: Option<f64>,
    pub think: Option<ThinkDist>,
    pub tiers: Option<TierConfig>,
    pub batch_size: Option<u32>,
    pub ttl: Option<f64>,
    pub warmup_turns: Option<usize>,
    pub link_contention: Option<bool>,
    pub record_events: Option<bool>,
    pub prices: Option<PriceTable>,
    pub output_dir: Option<PathBuf>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile, ExperimentError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<ConfigFile, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        ConfigFile::parse(&text)
    }

    /// Applies the file over the desk defaults.
    pub fn resolve(&self) -> Result<ExperimentSpec, ExperimentError> {
        let profile = match (&self.model, &self.profile) {
            (Some(m), _) => m.clone(),
            (None, Some(name)) => builtin_profile(name)?,
            (None, None) => builtin_profile("llama-13b")?,
        };
        let mut spec = ExperimentSpec::desk_default(profile);
        if let Some(n) = &self.name {
            spec.name.clone_from(n);
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        if let Some(m) = &self.mode {
            spec.sim.mode = Mode::from_str(m).map_err(ExperimentError::Config)?;
        }
        if let Some(p) = &self.policy {
            spec.sim.policy.kind = PolicyKind::from_str(p).map_err(ExperimentError::Config)?;
        }
        if self.prefetch_window.is_some() {
            spec.sim.policy.prefetch_window = self.prefetch_window;
        }
        if self.eviction_window.is_some() {
            spec.sim.policy.eviction_window = self.eviction_window;
        }
        match (&self.trace, &self.synthetic) {
            (Some(_), Some(_)) => return Err(ExperimentError::Config("set either `trace` or `synthetic`, not both".into())),
            (Some(path), None) => {
                spec.workload = WorkloadSource::Trace {
                    path: path.clone(),
                    rate: self.rate.unwrap_or_else(default_rate),
                    think: self.think.unwrap_or_default(),
                }
            }
            (None, Some(s)) => spec.workload = WorkloadSource::Synthetic(s.clone()),
            (None, None) => {
                if let WorkloadSource::Synthetic(s) = &mut spec.workload {
                    if let Some(r) = self.rate {
                        s.rate = r;
                    }
                    if let Some(t) = self.think {
                        s.think = t;
                    }
                }
            }
        }
        if let Some(t) = &self.tiers {
            spec.sim.tiers = t.clone();
        }
        if let Some(b) = self.batch_size {
            spec.sim.batch_size = b;
        }
        if self.ttl.is_some() {
            spec.sim.ttl = self.ttl;
        }
        if let Some(w) = self.warmup_turns {
            spec.sim.warmup_turns = w;
        }
        if let Some(c) = self.link_contention {
            spec.sim.link_contention = c;
        }
        if let Some(r) = self.record_events {
            spec.sim.record_events = r;
        }
        if let Some(p) = self.prices {
            spec.prices = p;
        }
        if let Some(o) = &self.output_dir {
            spec.output_dir.clone_from(o);
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// What `metrics.json` holds for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    #[serde(default)]
    pub figure: Option<String>,
    pub spec_hash: String,
    /// Hash of the spec the run was derived from (its own hash for single runs).
    pub base_hash: String,
    pub mode: Mode,
    pub policy: PolicyKind,
    pub profile: String,
    /// Recipe parameters, e.g. `capacity_ratio`.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// How storage is billed.
    pub storage_billing: String,
    pub report: MetricsReport,
}

pub const STORAGE_BILLING: &str = "configured capacity for the whole wall time";

pub struct RunOutput {
    pub log: EventLog,
    pub report: MetricsReport,
}

pub fn execute(spec: &ExperimentSpec) -> Result<RunOutput, ExperimentError> {
    spec.validate()?;
    let w = spec.load_workload()?;
    let log = run(&w, &spec.sim)?;
    let report = compute(&log, &spec.sim, &spec.prices)?;
    Ok(RunOutput { log, report })
}

/// A run scheduled by a recipe or by `run`.
#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub label: String,
    pub figure: Option<Figure>,
    pub params: BTreeMap<String, f64>,
    pub spec: ExperimentSpec,
}

impl PlannedRun {
    pub fn single(label: &str, spec: ExperimentSpec) -> PlannedRun {
        PlannedRun { label: label.to_string(), figure: None, params: BTreeMap::new(), spec }
    }

    pub fn record(&self, base_hash: &str, report: MetricsReport) -> RunRecord {
        RunRecord {
            label: self.label.clone(),
            figure: self.figure.map(|f| f.key().to_string()),
            spec_hash: self.spec.hash(),
            base_hash: base_hash.to_string(),
            mode: self.spec.sim.mode,
            policy: self.spec.sim.policy.kind,
            profile: self.spec.sim.profile.name.clone(),
            params: self.params.clone(),
            storage_billing: STORAGE_BILLING.to_string(),
            report,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn hash_line(w: &mut impl Write, path: &Path, hash: &str) -> Result<(), ExperimentError> {
    writeln!(w, "# spec_hash={hash}").map_err(io_err(path))
}

/// Serializes the resolved spec with its hash as a top-level key.
pub fn spec_snapshot(spec: &ExperimentSpec) -> String {
    format!("spec_hash = \"{}\"\n{}", spec.hash(), spec.to_toml())
}

/// Reads a snapshot or a plain spec TOML, ignoring a `spec_hash` key.
pub fn load_spec(path: &Path) -> Result<ExperimentSpec, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut table: toml::Table = toml::from_str(&text)?;
    table.remove("spec_hash");
    let spec: ExperimentSpec = table.try_into()?;
    spec.validate()?;
    Ok(spec)
}

/// Writes one run's artifacts under `dir` and returns its record.
pub fn write_run(dir: &Path, planned: &PlannedRun, base_hash: &str, out: &RunOutput) -> Result<RunRecord, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let hash = planned.spec.hash();
    let record = planned.record(base_hash, out.report.clone());

    let p = dir.join("spec.toml");
    fs::write(&p, spec_snapshot(&planned.spec)).map_err(io_err(&p))?;

    let p = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&record).map_err(|e| artifact_err(&p, e))?;
    fs::write(&p, json + "\n").map_err(io_err(&p))?;

    let p = dir.join("metrics.csv");
    let mut f = create(&p)?;
    hash_line(&mut f, &p, &hash)?;
    out.report.write_csv(&mut f).map_err(|e| artifact_err(&p, e))?;

    let p = dir.join("turns.csv");
    let mut f = create(&p)?;
    hash_line(&mut f, &p, &hash)?;
    out.log.write_turns_csv(&mut f).map_err(|e| artifact_err(&p, e))?;

    if planned.spec.sim.record_events {
        let p = dir.join("events.jsonl");
        let mut f = create(&p)?;
        hash_line(&mut f, &p, &hash)?;
        out.log.write_events_jsonl(&mut f).map_err(io_err(&p))?;
        f.flush().map_err(io_err(&p))?;
    }
    Ok(record)
}

pub fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

/// Runs every planned simulation (in parallel) and writes its artifacts.
/// Results keep the input order.
pub fn execute_all(runs: &[PlannedRun], out: &Path, base_hash: &str) -> Vec<Result<RunRecord, ExperimentError>> {
    runs.par_iter()
        .map(|r| {
            let output = execute(&r.spec)?;
            write_run(&runs_dir(out).join(&r.label), r, base_hash, &output)
        })
        .collect()
}

/// The figure tables the tool knows how to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Figure {
    HitRate,
    Policy,
    Overflow,
    Capacity,
    Tiers,
}

impl Figure {
    pub const ALL: [Figure; 5] = [Figure::HitRate, Figure::Policy, Figure::Overflow, Figure::Capacity, Figure::Tiers];

    pub fn key(self) -> &'static str {
        match self {
            Figure::HitRate => "fig13",
            Figure::Policy => "fig17",
            Figure::Overflow => "fig19",
            Figure::Capacity => "fig21",
            Figure::Tiers => "fig22",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Figure::HitRate => "fig13_hit_rate.csv",
            Figure::Policy => "fig17_policy.csv",
            Figure::Overflow => "fig19_overflow.csv",
            Figure::Capacity => "fig21_capacity.csv",
            Figure::Tiers => "fig22_tiers.csv",
        }
    }
}

impl FromStr for Figure {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Figure::ALL
            .into_iter()
            .find(|f| f.key() == s || f.file_name().trim_end_matches(".csv") == s)
            .ok_or_else(|| format!("unknown figure `{s}` (expected one of fig13, fig17, fig19, fig21, fig22)"))
    }
}

/// The four profiles the model-comparison figures iterate over.
pub const FIGURE_PROFILES: [&str; 4] = ["llama-13b", "llama-65b", "llama-70b", "falcon-40b"];
pub const DEFAULT_CAPACITY_RATIOS: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 1.0];
/// Retention used by the capacity recipe, seconds.
pub const CAPACITY_TTL: f64 = 3600.0;

fn with(base: &ExperimentSpec, f: impl FnOnce(&mut ExperimentSpec)) -> ExperimentSpec {
    let mut s = base.clone();
    f(&mut s);
    s
}

fn planned(label: String, figure: Figure, spec: ExperimentSpec) -> PlannedRun {
    PlannedRun { label, figure: Some(figure), params: BTreeMap::new(), spec }
}

/// Labels a figure's table needs, in row order. Capacity labels depend on
/// the ratios.
pub fn expected_labels(figure: Figure, ratios: &[f64]) -> Vec<String> {
    let profiles = FIGURE_PROFILES.iter();
    match figure {
        Figure::HitRate => profiles.map(|p| format!("fig13-{p}")).collect(),
        Figure::Policy => ["sa", "lru", "fifo"].iter().map(|p| format!("fig17-{p}")).collect(),
        Figure::Overflow => profiles.flat_map(|p| [format!("fig19-{p}-as"), format!("fig19-{p}-of")]).collect(),
        Figure::Capacity => ratios.iter().map(|r| capacity_label(*r)).collect(),
        Figure::Tiers => {
            profiles.flat_map(|p| ["hbm", "hbm-dram", "as"].map(|m| format!("fig22-{p}-{m}"))).collect()
        }
    }
}

fn capacity_label(ratio: f64) -> String {
    format!("fig21-r{ratio:.3}")
}

/// Session capacity figures used by the capacity recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityModel {
    /// Retention window, seconds (the "unit time").
    pub ttl: f64,
    /// Most sessions whose items can be alive at the same moment.
    pub distinct_sessions: u64,
    /// Block-rounded footprint of a full context window.
    pub per_session: u64,
    pub per_unit_time: u64,
}

/// Most sessions simultaneously inside `[first arrival, last finish + ttl]`.
/// A session's item can only exist within that interval.
pub fn distinct_sessions(log: &EventLog, ttl: f64) -> u64 {
    let mut span: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for r in &log.records {
        let e = span.entry(r.session.as_str()).or_insert((r.arrival, r.done));
        e.0 = e.0.min(r.arrival);
        e.1 = e.1.max(r.done);
    }
    // (time, +1 / -1); ends sort after starts at equal times
    let mut edges: Vec<(f64, i64)> = span.values().flat_map(|&(a, d)| [(a, 1), (d + ttl, -1)]).collect();
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut live = 0i64;
    let mut peak = 0i64;
    for (_, d) in edges {
        live += d;
        peak = peak.max(live);
    }
    peak as u64
}

/// Runs a pilot with unbounded disk and derives the per-unit-time capacity.
pub fn capacity_model(base: &ExperimentSpec) -> Result<CapacityModel, ExperimentError> {
    let ttl = base.sim.ttl.unwrap_or(CAPACITY_TTL);
    let pilot = with(base, |s| {
        s.sim.ttl = Some(ttl);
        s.sim.tiers.disk_capacity = ByteSize(1024 * TIB);
    });
    let out = execute(&pilot)?;
    let p = &base.sim.profile;
    let block = base.sim.tiers.block_size.0.max(1);
    let per_session = kv_size(u64::from(p.context_window), p).div_ceil(block) * block;
    let distinct = distinct_sessions(&out.log, ttl);
    Ok(CapacityModel { ttl, distinct_sessions: distinct, per_session, per_unit_time: distinct * per_session })
}

/// Plans the runs of one figure from `base`.
pub fn plan(figure: Figure, base: &ExperimentSpec, ratios: &[f64]) -> Result<Vec<PlannedRun>, ExperimentError> {
    let profile = |name: &str| builtin_profile(name);
    let runs = match figure {
        Figure::HitRate => FIGURE_PROFILES
            .iter()
            .map(|p| {
                let prof = profile(p)?;
                Ok(planned(format!("fig13-{p}"), figure, with(base, |s| s.sim.profile = prof)))
            })
            .collect::<Result<Vec<_>, ExperimentError>>()?,
        Figure::Policy => [("sa", PolicyKind::SchedulerAware), ("lru", PolicyKind::Lru), ("fifo", PolicyKind::Fifo)]
            .iter()
            .map(|(l, k)| {
                planned(format!("fig17-{l}"), figure, with(base, |s| s.sim.policy = PolicyConfig::new(*k)))
            })
            .collect(),
        Figure::Overflow => {
            let mut v = Vec::new();
            for p in FIGURE_PROFILES {
                let prof = profile(p)?;
                for mode in [Mode::CachedReuse, Mode::TokenTruncationOverflow] {
                    // roomy tiers so that only overflow causes misses
                    let spec = with(base, |s| {
                        s.sim.profile = prof.clone();
                        s.sim.mode = mode;
                        s.sim.tiers = TierConfig::default();
                    });
                    v.push(planned(format!("fig19-{p}-{}", mode.label()), figure, spec));
                }
            }
            v
        }
        Figure::Capacity => {
            if ratios.is_empty() || ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                return Err(ExperimentError::Config(format!("capacity ratios must be positive: {ratios:?}")));
            }
            let cm = capacity_model(base)?;
            ratios
                .iter()
                .map(|&r| {
                    let spec = with(base, |s| {
                        s.sim.ttl = Some(cm.ttl);
                        s.sim.tiers.disk_capacity = ByteSize((r * cm.per_unit_time as f64).round() as u64);
                    });
                    let mut run = planned(capacity_label(r), figure, spec);
                    run.params.insert("capacity_ratio".into(), r);
                    run.params.insert("distinct_sessions".into(), cm.distinct_sessions as f64);
                    run.params.insert("per_session_bytes".into(), cm.per_session as f64);
                    run
                })
                .collect()
        }
        Figure::Tiers => {
            let mut v = Vec::new();
            for p in FIGURE_PROFILES {
                let prof = profile(p)?;
                for mode in [Mode::HbmOnly, Mode::HbmDram, Mode::CachedReuse] {
                    let spec = with(base, |s| {
                        s.sim.profile = prof.clone();
                        s.sim.mode = mode;
                    });
                    v.push(planned(format!("fig22-{p}-{}", mode.label()), figure, spec));
                }
            }
            v
        }
    };
    Ok(runs)
}

/// Result of assembling figure tables.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct FigureBundle {
    pub written: Vec<PathBuf>,
    /// Labels a table needed but no run provided.
    pub missing: Vec<String>,
    pub warnings: Vec<String>,
}

/// Reads every `runs/*/metrics.json` under `out`.
pub fn read_records(out: &Path) -> Result<Vec<RunRecord>, ExperimentError> {
    let dir = runs_dir(out);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path().join("metrics.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| artifact_err(p, e))
        })
        .collect()
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

/// Writes one CSV per figure with at least one run into `out/figures`.
pub fn build_figures(out: &Path, allow_mixed: bool) -> Result<FigureBundle, ExperimentError> {
    let records = read_records(out)?;
    let mut bundle = FigureBundle::default();
    let fig_dir = out.join("figures");
    fs::create_dir_all(&fig_dir).map_err(io_err(&fig_dir))?;
    if records.is_empty() {
        bundle.warnings.push(format!("no completed runs under {}", runs_dir(out).display()));
        return Ok(bundle);
    }
    let hashes: BTreeSet<&str> =
        records.iter().filter(|r| r.figure.is_some()).map(|r| r.base_hash.as_str()).collect();
    if hashes.len() > 1 {
        let list = hashes.iter().copied().collect::<Vec<_>>().join(", ");
        if !allow_mixed {
            return Err(ExperimentError::MixedHashes(list));
        }
        bundle.warnings.push(format!("mixing base specs {list}"));
    }
    let hash_tag = hashes.iter().copied().collect::<Vec<_>>().join(",");
    let by_label: BTreeMap<&str, &RunRecord> = records.iter().map(|r| (r.label.as_str(), r)).collect();

    for figure in Figure::ALL {
        let mine: Vec<&RunRecord> = records.iter().filter(|r| r.figure.as_deref() == Some(figure.key())).collect();
        let expected = if figure == Figure::Capacity {
            let mut ratios: Vec<f64> = mine.iter().filter_map(|r| r.params.get("capacity_ratio").copied()).collect();
            ratios.sort_by(f64::total_cmp);
            if ratios.is_empty() {
                bundle.missing.push("fig21-*".into());
                continue;
            }
            expected_labels(figure, &ratios)
        } else {
            expected_labels(figure, &[])
        };
        let present: Vec<&RunRecord> = expected.iter().filter_map(|l| by_label.get(l.as_str()).copied()).collect();
        bundle.missing.extend(expected.iter().filter(|l| !by_label.contains_key(l.as_str())).cloned());
        if present.is_empty() {
            continue;
        }
        let path = fig_dir.join(figure.file_name());
        let mut f = create(&path)?;
        hash_line(&mut f, &path, &hash_tag)?;
        let mut w = csv::Writer::from_writer(f);
        let e = |err| artifact_err(&path, err);
        let hit = |r: &RunRecord| [fmt(r.report.overall_hit_rate), fmt(r.report.mem_hit_rate), fmt(r.report.disk_hit_rate)];
        match figure {
            Figure::HitRate | Figure::Policy => {
                w.write_record(["label", "profile", "policy", "overall_hit_rate", "mem_hit_rate", "disk_hit_rate"])
                    .map_err(e)?;
                for r in &present {
                    let [o, m, d] = hit(r);
                    w.write_record([&r.label, &r.profile, r.policy.as_str(), &o, &m, &d]).map_err(e)?;
                }
            }
            Figure::Overflow => {
                w.write_record(["profile", "as_hit_rate", "of_hit_rate", "drop_points"]).map_err(e)?;
                for p in FIGURE_PROFILES {
                    let get = |m: &str| by_label.get(format!("fig19-{p}-{m}").as_str()).map(|r| r.report.overall_hit_rate);
                    if let (Some(a), Some(o)) = (get("as"), get("of")) {
                        w.write_record([p.to_string(), fmt(a), fmt(o), fmt(100.0 * (a - o))]).map_err(e)?;
                    }
                }
            }
            Figure::Capacity => {
                w.write_record(["capacity_ratio", "disk_capacity_bytes", "overall_hit_rate", "mem_hit_rate", "disk_hit_rate", "output_throughput"])
                    .map_err(e)?;
                for r in &present {
                    let ratio = r.params.get("capacity_ratio").copied().unwrap_or(f64::NAN);
                    let bytes = ratio * r.params.get("distinct_sessions").copied().unwrap_or(0.0)
                        * r.params.get("per_session_bytes").copied().unwrap_or(0.0);
                    let [o, m, d] = hit(r);
                    w.write_record([fmt(ratio), format!("{:.0}", bytes), o, m, d, fmt(r.report.output_throughput)])
                        .map_err(e)?;
                }
            }
            Figure::Tiers => {
                w.write_record(["profile", "hbm", "hbm_dram", "hbm_dram_ssd"]).map_err(e)?;
                for p in FIGURE_PROFILES {
                    let get = |m: &str| {
                        by_label.get(format!("fig22-{p}-{m}").as_str()).map_or(String::new(), |r| fmt(r.report.overall_hit_rate))
                    };
                    let row = [get("hbm"), get("hbm-dram"), get("as")];
                    if row.iter().any(|c| !c.is_empty()) {
                        w.write_record([p.to_string(), row[0].clone(), row[1].clone(), row[2].clone()]).map_err(e)?;
                    }
                }
            }
        }
        w.flush().map_err(io_err(&path))?;
        bundle.written.push(path);
    }
    if bundle.written.is_empty() {
        bundle.warnings.push("no figure runs found; nothing written".into());
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{TokenDist, TurnDist};

    fn tiny() -> ExperimentSpec {
        let mut s = ExperimentSpec::desk_default(builtin_profile("llama-13b").unwrap());
        s.workload = WorkloadSource::Synthetic(SyntheticSpec {
            sessions: 30,
            rate: 0.5,
            turns: TurnDist::default(),
            tokens: TokenDist::default(),
            think: ThinkDist::Exponential { mean: 20.0 },
        });
        s.sim.warmup_turns = 10;
        s
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let s = tiny();
        let back = ExperimentSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
        let moved = with(&s, |x| x.output_dir = "elsewhere".into());
        assert_eq!(moved.hash(), s.hash());
        assert_ne!(with(&s, |x| x.seed = 8).hash(), s.hash());
    }

    #[test]
    fn config_layers_over_defaults() {
        let c = ConfigFile::parse(
            r#"
            profile = "llama-70b"
            mode = "of"
            policy = "lru"
            ttl = 600
            [tiers]
            dram_capacity = "16GB"
            "#,
        )
        .unwrap();
        let s = c.resolve().unwrap();
        assert_eq!(s.sim.profile.name, "llama-70b");
        assert_eq!(s.sim.mode, Mode::TokenTruncationOverflow);
        assert_eq!(s.sim.policy.kind, PolicyKind::Lru);
        assert_eq!(s.sim.ttl, Some(600.0));
        assert_eq!(s.sim.tiers.dram_capacity, ByteSize::gib(16));
        assert_eq!(s.seed, DEFAULT_SEED);
        assert!(ConfigFile::parse("bogus = 1").is_err());
        let bad = ConfigFile { mode: Some("nope".into()), ..ConfigFile::default() }.resolve();
        assert!(bad.unwrap_err().is_config());
    }

    #[test]
    fn distinct_sessions_counts_overlap() {
        let mut s = tiny();
        s.sim.warmup_turns = 0;
        let out = execute(&s).unwrap();
        // an enormous retention keeps every session alive at once
        assert_eq!(distinct_sessions(&out.log, 1e9), 30);
        assert!(distinct_sessions(&out.log, 0.0) <= 30);
    }

    #[test]
    fn figure_names_parse() {
        for f in Figure::ALL {
            assert_eq!(f.key().parse::<Figure>().unwrap(), f);
        }
        assert!("fig99".parse::<Figure>().is_err());
    }

    #[test]
    fn artifacts_embed_hash_and_figures_skip_missing() {
        let dir = tempfile::tempdir().unwrap();
        let base = tiny();
        let runs = plan(Figure::Policy, &base, &[]).unwrap();
        let res = execute_all(&runs[..2], dir.path(), &base.hash());
        assert!(res.iter().all(Result::is_ok));
        let run_dir = runs_dir(dir.path()).join("fig17-sa");
        for f in ["spec.toml", "metrics.json", "metrics.csv", "turns.csv"] {
            let text = fs::read_to_string(run_dir.join(f)).unwrap();
            assert!(text.contains(&runs[0].spec.hash()), "{f}");
        }
        assert_eq!(load_spec(&run_dir.join("spec.toml")).unwrap(), runs[0].spec);
        let b = build_figures(dir.path(), false).unwrap();
        assert!(b.missing.contains(&"fig17-fifo".to_string()));
        assert_eq!(b.written.len(), 1);
        let table = fs::read_to_string(&b.written[0]).unwrap();
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    fn empty_output_gives_empty_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let b = build_figures(dir.path(), false).unwrap();
        assert!(b.written.is_empty());
        assert_eq!(b.warnings.len(), 1);
    }
}
