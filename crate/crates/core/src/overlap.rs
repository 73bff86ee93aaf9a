//! Per-job timelines for layer-wise pre-loading and asynchronous saving.
//!
//! Times are seconds relative to the moment the job gets the engine. Layers
//! are uniform: each holds `kv_size / l` bytes and computes for
//! `prefill_time / l` seconds.
//!
//! Pre-load dependency: the read stream loads layer slices back to back, and
//! layer `k`'s partial prefill may not *finish* before its slice has landed.
//! The projections and feed-forward work of a layer do not touch the cached
//! keys and values, so only the attention tail waits on the load. Under this
//! rule the zero-stall read buffer is exactly
//! `max(0, B·(T_load·L_hist − T_pref·L_new))`.

use serde::{Deserialize, Serialize};

use crate::model::{kv_size, prefill_time, ModelProfile};

/// Gaps shorter than this are floating-point noise, not stalls.
pub const GAP_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub load_intervals: Vec<Interval>,
    pub compute_intervals: Vec<Interval>,
    pub save_intervals: Vec<Interval>,
    /// Engine time not spent computing.
    pub stall_total: f64,
    pub max_gap: f64,
    pub makespan: f64,
    /// Bytes still unwritten when computation ends.
    pub write_residue: u64,
}

impl Timeline {
    pub fn compute_total(&self) -> f64 {
        self.compute_intervals.iter().map(Interval::len).sum()
    }

    pub fn load_total(&self) -> f64 {
        self.load_intervals.iter().map(Interval::len).sum()
    }

    pub fn save_total(&self) -> f64 {
        self.save_intervals.iter().map(Interval::len).sum()
    }

    /// Every stream is ordered and free of overlaps.
    pub fn streams_ordered(&self) -> bool {
        [&self.load_intervals, &self.compute_intervals, &self.save_intervals]
            .iter()
            .all(|s| s.windows(2).all(|w| w[0].end <= w[1].start + GAP_EPSILON) && s.iter().all(|i| i.end >= i.start))
    }
}

/// Plans a hit's prefill with layer-wise pre-loading over a link of
/// `t.pcie_bandwidth`.
pub fn plan_preload(
    hist_tokens: u64,
    new_tokens: u64,
    p: &ModelProfile,
    t: &crate::model::TierConfig,
    read_buffer: u64,
    prev_job_running: bool,
) -> Timeline {
    plan_preload_at(hist_tokens, new_tokens, p, t.pcie_bandwidth.0, read_buffer, prev_job_running)
}

/// [`plan_preload`] with an explicit link bandwidth (disk hits, contention).
pub fn plan_preload_at(
    hist_tokens: u64,
    new_tokens: u64,
    p: &ModelProfile,
    bandwidth: f64,
    read_buffer: u64,
    prev_job_running: bool,
) -> Timeline {
    let l = p.layers.max(1) as usize;
    let slice = kv_size(hist_tokens, p) as f64 / l as f64;
    let c = prefill_time(new_tokens, p) / l as f64;
    let head_start = if prev_job_running { read_buffer as f64 } else { 0.0 };

    let mut tl = Timeline::default();
    let mut prev_end = 0.0f64;
    for k in 1..=l {
        let load_end = if hist_tokens == 0 {
            0.0
        } else {
            let start = ((k - 1) as f64 * slice - head_start) / bandwidth;
            let end = (k as f64 * slice - head_start) / bandwidth;
            tl.load_intervals.push(Interval { start, end });
            end.max(0.0)
        };
        let mut start = prev_end.max(load_end - c);
        let mut gap = start - prev_end;
        if gap < GAP_EPSILON {
            gap = 0.0;
            start = prev_end;
        }
        tl.max_gap = tl.max_gap.max(gap);
        tl.stall_total += gap;
        tl.compute_intervals.push(Interval { start, end: start + c });
        prev_end = start + c;
    }
    tl.makespan = prev_end;
    tl
}

/// Load everything first, then run the partial prefill.
pub fn plan_sequential_load(hist_tokens: u64, new_tokens: u64, p: &ModelProfile, bandwidth: f64) -> Timeline {
    let load = kv_size(hist_tokens, p) as f64 / bandwidth;
    let compute = prefill_time(new_tokens, p);
    let mut tl = Timeline::default();
    if hist_tokens > 0 {
        tl.load_intervals.push(Interval { start: 0.0, end: load });
    }
    tl.compute_intervals.push(Interval { start: load, end: load + compute });
    tl.stall_total = load;
    tl.max_gap = load;
    tl.makespan = load + compute;
    tl
}

/// Saving plan for one job: `prompt_tokens` prefilled at once, then
/// `decode_steps` iterations each producing `tokens_per_step` tokens.
///
/// Prefill KV is written layer by layer once the prefill ends, overlapping
/// the decode iterations. A step's KV streams out layer by layer while the
/// step runs, so it may be written from the step's start. Bytes
/// still unwritten when compute ends spill to the write buffer and only the
/// excess extends the makespan.
pub fn plan_async_save_batched(
    prompt_tokens: u64,
    decode_steps: u32,
    tokens_per_step: u64,
    p: &ModelProfile,
    bandwidth: f64,
    write_buffer: u64,
) -> Timeline {
    let l = p.layers.max(1) as usize;
    let prefill = prefill_time(prompt_tokens, p);
    let layer_c = prefill / l as f64;
    let step = p.decode_seconds_per_step;
    let mut tl = Timeline::default();

    // (ready time, bytes) chunks in production order
    let mut chunks: Vec<(f64, f64)> = Vec::with_capacity(l + decode_steps as usize);
    let layer_bytes = kv_size(prompt_tokens, p) as f64 / l as f64;
    for k in 1..=l {
        tl.compute_intervals.push(Interval { start: (k - 1) as f64 * layer_c, end: k as f64 * layer_c });
        if prompt_tokens > 0 {
            chunks.push((prefill, layer_bytes));
        }
    }
    let step_bytes = kv_size(tokens_per_step, p) as f64;
    for i in 0..decode_steps {
        let start = prefill + f64::from(i) * step;
        tl.compute_intervals.push(Interval { start, end: start + step });
        if step_bytes > 0.0 {
            chunks.push((start, step_bytes));
        }
    }
    let compute_end = prefill + f64::from(decode_steps) * step;

    let mut link_free = 0.0f64;
    let mut residue = 0.0f64;
    for (ready, bytes) in chunks {
        let start = link_free.max(ready);
        let end = start + bytes / bandwidth;
        if start >= compute_end {
            residue += bytes;
        } else if end > compute_end {
            residue += (end - compute_end) * bandwidth;
        }
        tl.save_intervals.push(Interval { start, end });
        link_free = end;
    }
    let residue_bytes = residue.round() as u64;
    let spill = residue_bytes.min(write_buffer);
    let extra = (residue_bytes - spill) as f64 / bandwidth;
    tl.write_residue = residue_bytes;
    tl.stall_total = extra;
    tl.max_gap = extra;
    tl.makespan = compute_end + extra;
    tl
}

/// Single-sequence [`plan_async_save_batched`].
pub fn plan_async_save(
    prompt_tokens: u64,
    decode_steps: u32,
    p: &ModelProfile,
    t: &crate::model::TierConfig,
    write_buffer: u64,
) -> Timeline {
    plan_async_save_batched(prompt_tokens, decode_steps, 1, p, t.pcie_bandwidth.0, write_buffer)
}

/// Baseline: compute, then write every produced byte before the next job.
pub fn plan_sync_save(prompt_tokens: u64, decode_steps: u32, tokens_per_step: u64, p: &ModelProfile, bandwidth: f64) -> Timeline {
    let compute = prefill_time(prompt_tokens, p) + f64::from(decode_steps) * p.decode_seconds_per_step;
    let bytes = kv_size(prompt_tokens + u64::from(decode_steps) * tokens_per_step, p) as f64;
    let save = bytes / bandwidth;
    Timeline {
        compute_intervals: vec![Interval { start: 0.0, end: compute }],
        save_intervals: vec![Interval { start: compute, end: compute + save }],
        stall_total: save,
        max_gap: save,
        makespan: compute + save,
        write_residue: bytes as u64,
        ..Timeline::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_profile, preload_buffer_size, TierConfig};
    use crate::units::{Bandwidth, ByteSize};

    fn toy() -> (ModelProfile, TierConfig) {
        let p = ModelProfile {
            name: "toy".into(),
            kv_bytes_per_token: ByteSize(1000),
            prefill_seconds_per_token: 1e-3,
            decode_seconds_per_step: 0.01,
            context_window: 4096,
            layers: 10,
            truncation_ratio: 0.5,
            gpus: 1,
        };
        let t = TierConfig { pcie_bandwidth: Bandwidth(1e6), ..TierConfig::default() };
        (p, t)
    }

    #[test]
    fn perfect_overlap_has_no_stall() {
        let (p, t) = toy();
        // load per token 1e-3 s, compute per token 1e-3 s
        let tl = plan_preload(100, 100, &p, &t, 0, false);
        assert_eq!(tl.stall_total, 0.0);
        assert!((tl.makespan - 0.1).abs() < 1e-12);
        assert!(tl.streams_ordered());
    }

    #[test]
    fn load_bound_without_buffer_stalls() {
        let (p, t) = toy();
        let tl = plan_preload(300, 100, &p, &t, 0, false);
        assert!(tl.stall_total > 0.0);
        assert!(tl.max_gap > 0.0);
        assert!((tl.makespan - 0.3).abs() < 1e-12);
        assert!((tl.load_total() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn formula_buffer_removes_stall() {
        let (p, t) = toy();
        let buf = preload_buffer_size(300, 100, &p, &t);
        assert_eq!(buf, 200_000);
        let tl = plan_preload(300, 100, &p, &t, buf, true);
        assert_eq!(tl.stall_total, 0.0);
        let short = plan_preload(300, 100, &p, &t, buf - 30_000, true);
        assert!(short.stall_total > 0.0);
        // the buffer only helps while a previous job holds the engine
        assert!(plan_preload(300, 100, &p, &t, buf, false).stall_total > 0.0);
    }

    #[test]
    fn no_history_is_pure_compute() {
        let p = builtin_profile("llama-65b").unwrap();
        let tl = plan_preload(0, 2048, &p, &TierConfig::default(), 0, false);
        assert!((tl.makespan - 0.360).abs() < 1e-12);
        assert!(tl.load_intervals.is_empty());
    }

    #[test]
    fn save_fully_hidden_by_long_decode() {
        let (p, t) = toy();
        let tl = plan_async_save(100, 100, &p, &t, 0);
        assert!((tl.makespan - (0.1 + 1.0)).abs() < 1e-12);
        assert_eq!(tl.write_residue, 0);
    }

    #[test]
    fn no_decode_no_buffer_matches_sync_tail() {
        let (p, t) = toy();
        let tl = plan_async_save(100, 0, &p, &t, 0);
        let sync = plan_sync_save(100, 0, 1, &p, t.pcie_bandwidth.0);
        assert!((tl.makespan - sync.makespan).abs() < 1e-12);
        assert!((tl.makespan - 0.2).abs() < 1e-12);
        let big = plan_async_save(100, 0, &p, &t, u64::MAX);
        assert!((big.makespan - 0.1).abs() < 1e-12);
    }
}
