//! Aggregation of an [`EventLog`] into hit rates, latency, throughput and
//! dollar cost, plus side-by-side comparison of several runs.
//!
//! Only turns marked `warm` (past the warm-up prefix) are counted. The hit
//! rate denominator excludes first turns, which can never hit.
//!
//! `mean_ttft` is dispatch-to-first-token, the engine-side latency that the
//! caching modes change. Queueing delay is folded into
//! `mean_arrival_to_first_token`, which is reported alongside it.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{EventLog, Mode, SimConfig};
use crate::store::HitClass;
use crate::units::GIB;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("log is incomplete: {} session(s) unfinished (first: {})", .0.len(), .0.first().map_or("?", String::as_str))]
    Incomplete(Vec<String>),
    #[error("need at least two reports to compare, got {0}")]
    TooFewReports(usize),
}

/// Hourly prices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceTable {
    pub gpu_per_hour: f64,
    pub dram_per_gb_hour: f64,
    pub ssd_per_gb_hour: f64,
}

impl Default for PriceTable {
    fn default() -> Self {
        PriceTable { gpu_per_hour: 5.0, dram_per_gb_hour: 0.0088, ssd_per_gb_hour: 0.000082 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub gpu: f64,
    pub dram: f64,
    pub disk: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.gpu + self.dram + self.disk
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Option<Mode>,
    pub profile: String,
    /// Post-warm-up turns, first turns included.
    pub turns: u64,
    /// Post-warm-up turns that could hit (not first turns).
    pub reuse_turns: u64,
    pub mem_hits: u64,
    pub disk_hits: u64,
    pub overall_hit_rate: f64,
    pub mem_hit_rate: f64,
    pub disk_hit_rate: f64,
    pub mean_ttft: f64,
    pub p50_ttft: f64,
    pub p99_ttft: f64,
    pub mean_arrival_to_first_token: f64,
    pub mean_queue_wait: f64,
    /// Prompt tokens (history + new) per second of TTFT.
    pub prefill_throughput: f64,
    pub gpu_time: f64,
    pub wall_time: f64,
    pub decode_time: f64,
    pub stall_time: f64,
    /// Output tokens per second of GPU time.
    pub output_throughput: f64,
    pub overflow_turns: u64,
    pub stale_turns: u64,
    pub bytes_loaded: u64,
    pub bytes_saved: u64,
    pub internal_fragmentation: u64,
    pub cost_usd: f64,
    pub cost_breakdown: CostBreakdown,
    pub storage_cost_share: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Nearest-rank percentile of sorted data; 0 for empty input.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Storage capacities billed for a run, in bytes: `(dram, disk)`.
fn billed_capacity(cfg: &SimConfig) -> (u64, u64) {
    let t = &cfg.tiers;
    match cfg.mode {
        Mode::Recompute | Mode::HbmOnly => (0, 0),
        Mode::HbmDram => (t.dram_capacity.0, 0),
        _ => (t.dram_capacity.0, t.disk_capacity.0),
    }
}

pub fn compute(log: &EventLog, cfg: &SimConfig, prices: &PriceTable) -> Result<MetricsReport, MetricsError> {
    if !log.unfinished.is_empty() {
        return Err(MetricsError::Incomplete(log.unfinished.clone()));
    }
    let warm: Vec<_> = log.records.iter().filter(|r| r.warm).collect();
    if warm.is_empty() {
        return Ok(MetricsReport { mode: Some(log.mode), profile: log.profile.clone(), ..MetricsReport::default() });
    }
    let reuse: Vec<_> = warm.iter().filter(|r| !r.first_turn).collect();
    let mem_hits = reuse.iter().filter(|r| r.hit_class == HitClass::MemoryHit).count() as u64;
    let disk_hits = reuse.iter().filter(|r| r.hit_class == HitClass::DiskHit).count() as u64;
    let n_reuse = reuse.len() as u64;

    let mut ttfts: Vec<f64> = warm.iter().map(|r| r.ttft_s).collect();
    let ttft_sum: f64 = ttfts.iter().sum();
    ttfts.sort_by(f64::total_cmp);
    let n = warm.len() as f64;
    let prompt_tokens: u64 = warm.iter().map(|r| r.prompt_tokens()).sum();
    let output_tokens: u64 = log.records.iter().map(|r| r.output_tokens).sum();

    let s = &log.stats;
    let hours_gpu = s.busy_time / 3600.0;
    let hours_wall = s.wall_time / 3600.0;
    let (dram, disk) = billed_capacity(cfg);
    let cost = CostBreakdown {
        gpu: hours_gpu * f64::from(cfg.profile.gpus) * prices.gpu_per_hour,
        dram: hours_wall * (dram as f64 / GIB as f64) * prices.dram_per_gb_hour,
        disk: hours_wall * (disk as f64 / GIB as f64) * prices.ssd_per_gb_hour,
    };
    let total = cost.total();

    Ok(MetricsReport {
        mode: Some(log.mode),
        profile: log.profile.clone(),
        turns: warm.len() as u64,
        reuse_turns: n_reuse,
        mem_hits,
        disk_hits,
        overall_hit_rate: ratio((mem_hits + disk_hits) as f64, n_reuse as f64),
        mem_hit_rate: ratio(mem_hits as f64, n_reuse as f64),
        disk_hit_rate: ratio(disk_hits as f64, n_reuse as f64),
        mean_ttft: ttft_sum / n,
        p50_ttft: percentile(&ttfts, 0.50),
        p99_ttft: percentile(&ttfts, 0.99),
        mean_arrival_to_first_token: warm.iter().map(|r| r.first_token - r.arrival).sum::<f64>() / n,
        mean_queue_wait: warm.iter().map(|r| r.dispatch - r.arrival).sum::<f64>() / n,
        prefill_throughput: ratio(prompt_tokens as f64, ttft_sum),
        gpu_time: s.busy_time,
        wall_time: s.wall_time,
        decode_time: s.decode_time,
        stall_time: s.stall_time,
        output_throughput: ratio(output_tokens as f64, s.busy_time),
        overflow_turns: warm.iter().filter(|r| r.overflow).count() as u64,
        stale_turns: warm.iter().filter(|r| r.stale).count() as u64,
        bytes_loaded: warm.iter().map(|r| r.bytes_loaded).sum(),
        bytes_saved: warm.iter().map(|r| r.bytes_saved).sum(),
        internal_fragmentation: s.final_fragmentation,
        cost_usd: total,
        cost_breakdown: cost,
        storage_cost_share: ratio(cost.dram + cost.disk, total),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Two-column `metric,value` CSV.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "value"])?;
        if let serde_json::Value::Object(map) = value {
            flatten(&mut out, "", &map)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn flatten<W: Write>(
    out: &mut csv::Writer<W>,
    prefix: &str,
    map: &serde_json::Map<String, serde_json::Value>,
) -> csv::Result<()> {
    for (k, v) in map {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            serde_json::Value::Object(inner) => flatten(out, &key, inner)?,
            serde_json::Value::String(s) => out.write_record([key.as_str(), s.as_str()])?,
            other => out.write_record([key.as_str(), other.to_string().as_str()])?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub overall_hit_rate: f64,
    pub mean_ttft: f64,
    /// `mean_ttft / baseline.mean_ttft`.
    pub ttft_ratio: f64,
    pub ttft_reduction: f64,
    pub prefill_speedup: f64,
    pub gpu_time_ratio: f64,
    pub cost_ratio: f64,
    pub hit_rate_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
}

/// Compares every report against the first one.
pub fn compare(reports: &[(String, MetricsReport)]) -> Result<ComparisonTable, MetricsError> {
    if reports.len() < 2 {
        return Err(MetricsError::TooFewReports(reports.len()));
    }
    let (base_label, base) = &reports[0];
    let mut warnings = Vec::new();
    let rows = reports
        .iter()
        .map(|(label, r)| {
            if r.turns != base.turns {
                warnings.push(format!("{label}: {} measured turns vs {} in {base_label}", r.turns, base.turns));
            }
            let ttft_ratio = ratio(r.mean_ttft, base.mean_ttft);
            ComparisonRow {
                label: label.clone(),
                overall_hit_rate: r.overall_hit_rate,
                mean_ttft: r.mean_ttft,
                ttft_ratio,
                ttft_reduction: 1.0 - ttft_ratio,
                prefill_speedup: ratio(r.prefill_throughput, base.prefill_throughput),
                gpu_time_ratio: ratio(r.gpu_time, base.gpu_time),
                cost_ratio: ratio(r.cost_usd, base.cost_usd),
                hit_rate_delta: r.overall_hit_rate - base.overall_hit_rate,
            }
        })
        .collect();
    Ok(ComparisonTable { baseline: base_label.clone(), rows, warnings })
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<14} {:>8} {:>10} {:>9} {:>9} {:>8} {:>8}\n",
            "label", "hit", "ttft_s", "ttft_red", "prefill×", "gpu×", "cost×"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>8.3} {:>10.4} {:>8.1}% {:>9.2} {:>8.3} {:>8.3}",
                r.label,
                r.overall_hit_rate,
                r.mean_ttft,
                100.0 * r.ttft_reduction,
                r.prefill_speedup,
                r.gpu_time_ratio,
                r.cost_ratio
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_profile;
    use crate::sim::{run, EngineStats, TurnRecord};
    use crate::trace::{Session, Turn, Workload};

    fn rec(first: bool, class: HitClass, ttft: f64) -> TurnRecord {
        TurnRecord {
            session: "a".into(),
            turn: usize::from(!first),
            arrival: 0.0,
            dispatch: 1.0,
            first_token: 1.0 + ttft,
            done: 2.0,
            hit_class: class,
            first_turn: first,
            warm: true,
            ttft_s: ttft,
            stall_s: 0.0,
            hist_tokens: 100,
            new_tokens: 10,
            output_tokens: 5,
            bytes_loaded: 0,
            bytes_saved: 0,
            bytes_evicted: 0,
            overflow: false,
            stale: false,
        }
    }

    fn log(records: Vec<TurnRecord>) -> EventLog {
        EventLog {
            mode: Mode::CachedReuse,
            policy: crate::policy::PolicyKind::SchedulerAware,
            profile: "llama-70b".into(),
            records,
            stats: EngineStats { busy_time: 3600.0, wall_time: 3600.0, ..EngineStats::default() },
            unfinished: Vec::new(),
            events: Vec::new(),
        }
    }

    #[test]
    fn hit_identity_and_percentiles() {
        let l = log(vec![
            rec(true, HitClass::Miss, 0.4),
            rec(false, HitClass::MemoryHit, 0.1),
            rec(false, HitClass::DiskHit, 0.2),
            rec(false, HitClass::Miss, 0.3),
        ]);
        let cfg = SimConfig::new(builtin_profile("llama-70b").unwrap(), Mode::CachedReuse);
        let r = compute(&l, &cfg, &PriceTable::default()).unwrap();
        assert_eq!(r.reuse_turns, 3);
        assert!((r.overall_hit_rate - (r.mem_hit_rate + r.disk_hit_rate)).abs() < 1e-15);
        assert!((r.overall_hit_rate - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.p50_ttft, 0.2);
        assert_eq!(r.p99_ttft, 0.4);
        assert!((r.cost_usd - r.cost_breakdown.total()).abs() < 1e-12);
    }

    #[test]
    fn storage_share_for_four_gpus_is_about_nine_percent() {
        let l = log(vec![rec(true, HitClass::Miss, 0.1)]);
        let cfg = SimConfig::new(builtin_profile("llama-70b").unwrap(), Mode::CachedReuse);
        let r = compute(&l, &cfg, &PriceTable::default()).unwrap();
        assert!((r.storage_cost_share - 0.0895).abs() < 0.002, "{}", r.storage_cost_share);
        let cfg13 = SimConfig::new(builtin_profile("llama-13b").unwrap(), Mode::CachedReuse);
        let r13 = compute(&l, &cfg13, &PriceTable::default()).unwrap();
        assert!((r13.storage_cost_share - 0.164).abs() < 0.003, "{}", r13.storage_cost_share);
    }

    #[test]
    fn empty_window_is_all_zero() {
        let mut r0 = rec(true, HitClass::Miss, 0.1);
        r0.warm = false;
        let cfg = SimConfig::new(builtin_profile("llama-70b").unwrap(), Mode::CachedReuse);
        let r = compute(&log(vec![r0]), &cfg, &PriceTable::default()).unwrap();
        assert_eq!(r.turns, 0);
        assert_eq!(r.cost_usd, 0.0);
        assert_eq!(r.overall_hit_rate, 0.0);
    }

    #[test]
    fn incomplete_log_is_rejected() {
        let mut l = log(vec![]);
        l.unfinished.push("s1".into());
        let cfg = SimConfig::new(builtin_profile("llama-70b").unwrap(), Mode::CachedReuse);
        assert!(matches!(compute(&l, &cfg, &PriceTable::default()), Err(MetricsError::Incomplete(_))));
    }

    #[test]
    fn compare_identity_and_inversion() {
        let s = Session {
            id: "a".into(),
            turns: vec![Turn { new_input_tokens: 500, output_tokens: 3 }; 3],
            arrival_times: vec![0.0, 10.0, 20.0],
        };
        let w = Workload::from_sessions(vec![s]);
        let p = builtin_profile("llama-13b").unwrap();
        let mut re = SimConfig::new(p.clone(), Mode::Recompute);
        re.warmup_turns = 0;
        let mut cached = SimConfig::new(p, Mode::CachedReuse);
        cached.warmup_turns = 0;
        let a = compute(&run(&w, &re).unwrap(), &re, &PriceTable::default()).unwrap();
        let b = compute(&run(&w, &cached).unwrap(), &cached, &PriceTable::default()).unwrap();
        let same = compare(&[("x".into(), a.clone()), ("y".into(), a.clone())]).unwrap();
        assert!(same.rows.iter().all(|r| r.ttft_ratio == 1.0 && r.prefill_speedup == 1.0));
        let fwd = compare(&[("re".into(), a.clone()), ("as".into(), b.clone())]).unwrap();
        let back = compare(&[("as".into(), b), ("re".into(), a)]).unwrap();
        assert!(fwd.rows[1].ttft_reduction > 0.0);
        assert!((fwd.rows[1].ttft_ratio * back.rows[1].ttft_ratio - 1.0).abs() < 1e-12);
        assert!(compare(&[]).is_err());
    }
}
