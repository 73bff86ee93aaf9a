//! Discrete-event replay of a workload through one serving engine.
//!
//! The engine runs continuous batching with prefill priority: whenever it is
//! free and the batch has a slot, the queue head is prefilled (blocking every
//! in-flight decode); otherwise one batched decode step runs. A turn's prefill
//! produces its first token, so a turn with `o` output tokens needs `o − 1`
//! decode steps. The next turn of a session arrives one think time after the
//! previous turn finishes.
//!
//! Cached modes look the session up at dispatch. A hit runs a partial prefill
//! over the new tokens while the history streams in layer by layer; the read
//! buffer lets loading begin while the job waits at the queue head. A miss
//! (or [`Mode::Recompute`]) prefills history and new tokens together.
//!
//! TTFT is measured from dispatch to first token; queueing delay is recorded
//! separately.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{kv_size, prefill_time, ModelError, ModelProfile, TierConfig};
use crate::overlap::plan_preload_at;
use crate::policy::{apply_prefetch, JobQueue, PolicyConfig, PolicyKind, QueueEntry, QueueEvictor};
use crate::store::{HitClass, Movement, SessionId, Store, StoreConfig, StoreError, Tier};
use crate::trace::Workload;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("workload is empty")]
    EmptyWorkload,
    #[error("store failure at t={time:.3}s for session {session}: {source}")]
    Store {
        time: f64,
        session: String,
        #[source]
        source: StoreError,
    },
}

/// Which serving strategy is emulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Discard KV after each turn and recompute the whole history.
    Recompute,
    /// Keep positional-encoding-free KV in memory and disk; truncation keeps it valid.
    CachedReuse,
    /// Cache only in a small HBM slice; hits need no transfer.
    HbmOnly,
    /// HBM plus host memory, no disk tier.
    HbmDram,
    /// Cached reuse with coupled KV truncated in place (stale positions).
    NaiveKvTruncation,
    /// Cached reuse with coupled KV: overflow invalidates the cache.
    TokenTruncationOverflow,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Recompute,
        Mode::CachedReuse,
        Mode::HbmOnly,
        Mode::HbmDram,
        Mode::NaiveKvTruncation,
        Mode::TokenTruncationOverflow,
    ];

    /// Short CLI/report label.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Recompute => "re",
            Mode::CachedReuse => "as",
            Mode::HbmOnly => "hbm",
            Mode::HbmDram => "hbm-dram",
            Mode::NaiveKvTruncation => "nkvt",
            Mode::TokenTruncationOverflow => "of",
        }
    }

    pub fn uses_store(self) -> bool {
        self != Mode::Recompute
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.label() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown mode `{s}` (re, as, hbm, hbm-dram, nkvt, of)"))
    }
}

fn default_batch() -> u32 {
    24
}
fn default_warmup() -> usize {
    10_000
}
fn default_reserve_factor() -> f64 {
    2.0
}
fn default_refresh() -> u64 {
    100
}
fn default_sweep() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub profile: ModelProfile,
    #[serde(default)]
    pub tiers: TierConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default = "default_batch")]
    pub batch_size: u32,
    pub mode: Mode,
    /// Seconds; `None` never expires.
    #[serde(default)]
    pub ttl: Option<f64>,
    /// Arrivals (in processing order) excluded from metrics.
    #[serde(default = "default_warmup")]
    pub warmup_turns: usize,
    /// Concurrent reads and writes share the link and each get half of it.
    #[serde(default)]
    pub link_contention: bool,
    #[serde(default = "default_reserve_factor")]
    pub reserve_factor: f64,
    #[serde(default = "default_refresh")]
    pub window_refresh_events: u64,
    #[serde(default = "default_sweep")]
    pub ttl_sweep_interval: f64,
    /// Keep the raw event stream (large).
    #[serde(default)]
    pub record_events: bool,
}

impl SimConfig {
    pub fn new(profile: ModelProfile, mode: Mode) -> SimConfig {
        SimConfig {
            profile,
            tiers: TierConfig::default(),
            policy: PolicyConfig::default(),
            batch_size: default_batch(),
            mode,
            ttl: None,
            warmup_turns: default_warmup(),
            link_contention: false,
            reserve_factor: default_reserve_factor(),
            window_refresh_events: default_refresh(),
            ttl_sweep_interval: default_sweep(),
            record_events: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.profile.validate()?;
        self.tiers.validate()?;
        if self.batch_size == 0 {
            return Err(SimError::Config("batch_size must be at least 1".into()));
        }
        if let Some(ttl) = self.ttl {
            if !(ttl > 0.0) {
                return Err(SimError::Config(format!("ttl must be positive, got {ttl}")));
            }
        }
        if !(self.ttl_sweep_interval > 0.0) {
            return Err(SimError::Config("ttl_sweep_interval must be positive".into()));
        }
        if !(self.reserve_factor >= 0.0) {
            return Err(SimError::Config("reserve_factor must be non-negative".into()));
        }
        Ok(())
    }

    /// Store layout implied by the mode; `None` for recompute.
    pub fn store_config(&self) -> Option<StoreConfig> {
        let t = &self.tiers;
        let (dram, disk) = match self.mode {
            Mode::Recompute => return None,
            Mode::HbmOnly => (t.hbm_cache.0, 0),
            Mode::HbmDram => (t.hbm_cache.0 + t.dram_capacity.0, 0),
            _ => (t.dram_capacity.0, t.disk_capacity.0),
        };
        Some(StoreConfig {
            dram_capacity: dram,
            disk_capacity: disk,
            block_size: t.block_size.0,
            kv_bytes_per_token: self.profile.kv_bytes_per_token.0,
            ttl: self.ttl,
            decoupled: matches!(self.mode, Mode::CachedReuse | Mode::HbmOnly | Mode::HbmDram),
            reserve_factor: self.reserve_factor,
            refresh_every: self.window_refresh_events,
        })
    }
}

/// What the engine does next when it becomes free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EngineAction {
    Prefill,
    Decode,
    Idle,
}

/// Prefill priority: admit the queue head while the batch has room, else
/// decode whatever is active.
pub fn continuous_batching_step(active: usize, batch_size: usize, waiting: usize) -> EngineAction {
    if waiting > 0 && active < batch_size {
        EngineAction::Prefill
    } else if active > 0 {
        EngineAction::Decode
    } else {
        EngineAction::Idle
    }
}

/// What happens to a session's stored KV when its context overflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CacheAction {
    /// No stored cache to touch.
    None,
    /// Decoupled item shrinks and stays valid.
    Shrink,
    /// Coupled item shrinks and keeps wrong positions.
    ShrinkStale,
    /// Coupled item is dropped.
    Invalidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverflowAction {
    pub keep_from: u64,
    pub keep_tokens: u64,
    pub cache: CacheAction,
}

/// Drops the earliest `floor(ratio · tokens)` tokens of a context that has
/// reached the window.
pub fn handle_overflow(tokens: u64, p: &ModelProfile, mode: Mode) -> Option<OverflowAction> {
    if tokens < u64::from(p.context_window) {
        return None;
    }
    let drop = ((tokens as f64) * p.truncation_ratio).floor() as u64;
    let cache = match mode {
        Mode::Recompute => CacheAction::None,
        Mode::CachedReuse | Mode::HbmOnly | Mode::HbmDram => CacheAction::Shrink,
        Mode::NaiveKvTruncation => CacheAction::ShrinkStale,
        Mode::TokenTruncationOverflow => CacheAction::Invalidate,
    };
    Some(OverflowAction { keep_from: drop, keep_tokens: tokens - drop, cache })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Arrival,
    PrefillDone,
    DecodeStep,
    JobDone,
    PrefetchDone,
    EvictDone,
    TtlSweep,
}

impl EventKind {
    fn rank(self) -> u8 {
        // completions before new work at equal times
        match self {
            EventKind::PrefetchDone => 0,
            EventKind::EvictDone => 1,
            EventKind::PrefillDone => 2,
            EventKind::DecodeStep => 3,
            EventKind::JobDone => 4,
            EventKind::Arrival => 5,
            EventKind::TtlSweep => 6,
        }
    }
}

/// One logged event. `session` is the session's index in the workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub session: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    ev: Event,
    turn: usize,
    seq: u64,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // reversed: BinaryHeap pops the earliest event first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .ev
            .time
            .total_cmp(&self.ev.time)
            .then(other.ev.kind.rank().cmp(&self.ev.kind.rank()))
            .then(other.ev.session.cmp(&self.ev.session))
            .then(other.seq.cmp(&self.seq))
    }
}

/// Per-turn outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub session: String,
    pub turn: usize,
    pub arrival: f64,
    pub dispatch: f64,
    pub first_token: f64,
    pub done: f64,
    pub hit_class: HitClass,
    pub first_turn: bool,
    pub warm: bool,
    pub ttft_s: f64,
    pub stall_s: f64,
    pub hist_tokens: u64,
    pub new_tokens: u64,
    pub output_tokens: u64,
    pub bytes_loaded: u64,
    pub bytes_saved: u64,
    pub bytes_evicted: u64,
    /// Context truncated at dispatch or at save.
    pub overflow: bool,
    /// Served from a cache whose positions are stale.
    pub stale: bool,
}

impl TurnRecord {
    pub fn prompt_tokens(&self) -> u64 {
        self.hist_tokens + self.new_tokens
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineStats {
    pub busy_time: f64,
    pub prefill_time: f64,
    pub decode_time: f64,
    pub stall_time: f64,
    pub decode_steps: u64,
    pub wall_time: f64,
    pub prefetches: u64,
    pub prefetch_bytes: u64,
    pub demotions: u64,
    pub evictions: u64,
    pub expirations: u64,
    pub max_queue_len: usize,
    pub peak_mem_used: u64,
    pub peak_disk_used: u64,
    pub final_fragmentation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub mode: Mode,
    pub policy: PolicyKind,
    pub profile: String,
    pub records: Vec<TurnRecord>,
    pub stats: EngineStats,
    /// Sessions whose turns did not all finish (empty after a clean run).
    pub unfinished: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Event>,
}

impl EventLog {
    /// Writes the raw events as JSON lines.
    pub fn write_events_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes one JSON line per turn record.
    pub fn write_turns_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Per-turn CSV with the stable column set.
    pub fn write_turns_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "time", "session", "turn", "mode", "hit_class", "ttft_s", "stall_s", "bytes_loaded", "bytes_saved",
            "bytes_evicted",
        ])?;
        for r in &self.records {
            out.write_record([
                format!("{:.6}", r.dispatch),
                r.session.clone(),
                r.turn.to_string(),
                self.mode.label().to_string(),
                r.hit_class.as_str().to_string(),
                format!("{:.6}", r.ttft_s),
                format!("{:.6}", r.stall_s),
                r.bytes_loaded.to_string(),
                r.bytes_saved.to_string(),
                r.bytes_evicted.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

struct Active {
    session: usize,
    remaining: u32,
    record: usize,
}

struct SessionState {
    ctx: u64,
    next_turn: usize,
    stale: bool,
}

struct Waiting {
    turn: usize,
    record_seq: usize,
    head_since: Option<f64>,
}

struct Engine<'a> {
    w: &'a Workload,
    cfg: &'a SimConfig,
    heap: BinaryHeap<Queued>,
    seq: u64,
    store: Option<Store>,
    queue: JobQueue,
    waiting: BTreeMap<usize, Waiting>,
    active: BTreeMap<u64, Active>,
    next_job: u64,
    busy: bool,
    pending_stall: f64,
    write_busy_until: f64,
    sessions: Vec<SessionState>,
    records: Vec<TurnRecord>,
    stats: EngineStats,
    events: Vec<Event>,
    arrivals_seen: usize,
    now: f64,
}

impl<'a> Engine<'a> {
    fn push(&mut self, time: f64, kind: EventKind, session: Option<usize>, turn: usize) {
        self.seq += 1;
        self.heap.push(Queued { ev: Event { time, kind, session }, turn, seq: self.seq });
    }

    fn log(&mut self, kind: EventKind, session: Option<usize>) {
        if self.cfg.record_events {
            self.events.push(Event { time: self.now, kind, session });
        }
    }

    fn sid(i: usize) -> SessionId {
        SessionId(i as u32)
    }

    fn store_err(&self, session: usize, source: StoreError) -> SimError {
        SimError::Store { time: self.now, session: self.w.sessions[session].id.clone(), source }
    }

    fn note_movements(&mut self, moves: &[Movement]) -> u64 {
        let mut bytes = 0;
        for m in moves {
            match m.to {
                Some(Tier::Disk) => self.stats.demotions += 1,
                None => self.stats.evictions += 1,
                Some(Tier::Memory) => {}
            }
            bytes += m.bytes;
        }
        bytes
    }

    fn track_peaks(&mut self) {
        if let Some(s) = &self.store {
            self.stats.peak_mem_used = self.stats.peak_mem_used.max(s.mem_used());
            self.stats.peak_disk_used = self.stats.peak_disk_used.max(s.disk_used());
        }
        self.stats.max_queue_len = self.stats.max_queue_len.max(self.queue.len());
    }

    fn prefetch_pass(&mut self) -> Result<(), SimError> {
        if self.cfg.policy.kind != PolicyKind::SchedulerAware {
            return Ok(());
        }
        let Some(store) = self.store.as_mut() else { return Ok(()) };
        if store.config().disk_capacity == 0 {
            return Ok(());
        }
        let done = apply_prefetch(&self.queue, store, &self.cfg.policy, self.now, self.cfg.tiers.disk_bandwidth.0)
            .map_err(|e| SimError::Store { time: self.now, session: "<prefetch>".into(), source: e })?;
        for p in done {
            self.stats.prefetches += 1;
            self.stats.prefetch_bytes += p.bytes;
            self.note_movements(&p.movements);
            let idx = p.session.0 as usize;
            self.push(p.ready_at, EventKind::PrefetchDone, Some(idx), 0);
            for m in &p.movements {
                let t = self.now + m.bytes as f64 / self.cfg.tiers.disk_bandwidth.0;
                self.push(t, EventKind::EvictDone, Some(m.session.0 as usize), 0);
            }
        }
        self.track_peaks();
        Ok(())
    }

    fn mark_head(&mut self) {
        if let Some(head) = self.queue.front() {
            let idx = head.session.0 as usize;
            let now = self.now;
            if let Some(wt) = self.waiting.get_mut(&idx) {
                wt.head_since.get_or_insert(now);
            }
        }
    }

    fn on_arrival(&mut self, session: usize, turn: usize) -> Result<(), SimError> {
        let warm = self.arrivals_seen >= self.cfg.warmup_turns;
        self.arrivals_seen += 1;
        let s = &self.w.sessions[session];
        let t = s.turns[turn];
        self.records.push(TurnRecord {
            session: s.id.clone(),
            turn,
            arrival: self.now,
            dispatch: f64::NAN,
            first_token: f64::NAN,
            done: f64::NAN,
            hit_class: HitClass::Miss,
            first_turn: turn == 0,
            warm,
            ttft_s: 0.0,
            stall_s: 0.0,
            hist_tokens: 0,
            new_tokens: u64::from(t.new_input_tokens),
            output_tokens: u64::from(t.output_tokens),
            bytes_loaded: 0,
            bytes_saved: 0,
            bytes_evicted: 0,
            overflow: false,
            stale: false,
        });
        self.queue.push(QueueEntry { session: Self::sid(session), turn: turn as u32, enqueue_time: self.now });
        self.waiting.insert(
            session,
            Waiting { turn, record_seq: self.records.len() - 1, head_since: None },
        );
        self.mark_head();
        self.track_peaks();
        self.prefetch_pass()?;
        self.schedule_next()
    }

    fn schedule_next(&mut self) -> Result<(), SimError> {
        if self.busy {
            return Ok(());
        }
        match continuous_batching_step(self.active.len(), self.cfg.batch_size as usize, self.queue.len()) {
            EngineAction::Prefill => self.dispatch(),
            EngineAction::Decode => {
                let d = self.cfg.profile.decode_seconds_per_step + std::mem::take(&mut self.pending_stall);
                self.stats.decode_time += self.cfg.profile.decode_seconds_per_step;
                self.stats.busy_time += d;
                self.stats.decode_steps += 1;
                self.busy = true;
                self.push(self.now + d, EventKind::DecodeStep, None, 0);
                Ok(())
            }
            EngineAction::Idle => Ok(()),
        }
    }

    fn dispatch(&mut self) -> Result<(), SimError> {
        let entry = self.queue.pop().expect("queue non-empty");
        let idx = entry.session.0 as usize;
        let wt = self.waiting.remove(&idx).expect("waiting job");
        self.mark_head();
        let p = &self.cfg.profile;
        let window = u64::from(p.context_window);
        let sess = &self.w.sessions[idx];
        let turn = sess.turns[wt.turn];
        let new = u64::from(turn.new_input_tokens).min(window.saturating_sub(1).max(1));
        let mut ctx = self.sessions[idx].ctx;
        let sid = Self::sid(idx);
        let mode = self.cfg.mode;

        let mut class = HitClass::Miss;
        let mut item_ready = 0.0f64;
        let mut item_bytes = 0u64;
        if wt.turn > 0 {
            if let Some(store) = self.store.as_mut() {
                let before = store.get(sid).cloned();
                class = store.lookup(sid, self.now);
                if let Some(item) = before.as_ref() {
                    item_ready = item.ready_at.unwrap_or(0.0);
                    item_bytes = item.bytes;
                }
            }
        }
        let mut overflow = false;
        while ctx > 0 && ctx + new >= window {
            overflow = true;
            let act = handle_overflow(ctx + new, p, mode).expect("at window");
            // drop from history only
            let keep = ctx.saturating_sub(act.keep_from);
            ctx = keep;
            if class.is_hit() {
                let store = self.store.as_mut().expect("hit implies store");
                match act.cache {
                    CacheAction::Shrink => {
                        store.truncate_item(sid, keep).map_err(|e| self.store_err(idx, e))?;
                    }
                    CacheAction::ShrinkStale => {
                        store.truncate_in_place(sid, keep).map_err(|e| self.store_err(idx, e))?;
                        self.sessions[idx].stale = true;
                    }
                    CacheAction::Invalidate => {
                        store.remove(sid);
                        class = HitClass::Miss;
                    }
                    CacheAction::None => {}
                }
            }
        }
        if !class.is_hit() {
            // recomputed from tokens, positions are fresh again
            self.sessions[idx].stale = false;
        }
        let stale = class.is_hit() && self.sessions[idx].stale;

        let (ttft, loaded) = if !class.is_hit() || ctx == 0 {
            (prefill_time(ctx + new, p), 0)
        } else if mode == Mode::HbmOnly {
            (prefill_time(new, p), 0)
        } else if class == HitClass::DiskHit {
            // Disk hits stream straight from disk. Bytes an in-flight copy
            // has already landed in host memory act as a head start.
            let bw = self.cfg.tiers.disk_bandwidth.0;
            let full = kv_size(ctx, p);
            let left = ((item_ready - self.now).max(0.0) * bw) as u64;
            let copied = if item_ready > self.now { item_bytes.saturating_sub(left).min(full) } else { 0 };
            let tl = plan_preload_at(ctx, new, p, bw, copied, copied > 0);
            (tl.makespan, full)
        } else {
            let mut bw = self.cfg.tiers.pcie_bandwidth.0;
            if self.cfg.link_contention && self.write_busy_until > self.now {
                bw /= 2.0;
            }
            // the read buffer fills while this job waits at the queue head
            let since = wt.head_since.unwrap_or(self.now).max(item_ready).min(self.now);
            let ahead = (bw * (self.now - since)).max(0.0) as u64;
            let buffer = ahead.min(self.cfg.tiers.hbm_read_buffer.0);
            let tl = plan_preload_at(ctx, new, p, bw, buffer, buffer > 0);
            (tl.makespan, kv_size(ctx, p))
        };
        let stall = std::mem::take(&mut self.pending_stall);
        let busy = ttft + stall;
        self.stats.prefill_time += ttft;
        self.stats.stall_time += stall;
        self.stats.busy_time += busy;

        let rec = &mut self.records[wt.record_seq];
        rec.dispatch = self.now;
        rec.hit_class = class;
        rec.ttft_s = busy;
        rec.stall_s = stall;
        rec.hist_tokens = ctx;
        rec.new_tokens = new;
        rec.bytes_loaded = loaded;
        rec.overflow = overflow;
        rec.stale = stale;

        self.sessions[idx].ctx = ctx;
        let steps = turn.output_tokens.saturating_sub(1);
        let job = self.next_job;
        self.next_job += 1;
        self.active.insert(job, Active { session: idx, remaining: steps, record: wt.record_seq });
        self.busy = true;
        self.push(self.now + busy, EventKind::PrefillDone, Some(idx), job as usize);
        self.log(EventKind::PrefillDone, Some(idx));
        Ok(())
    }

    fn on_prefill_done(&mut self, job: u64) -> Result<(), SimError> {
        self.busy = false;
        let a = self.active.get(&job).expect("active job");
        let rec = a.record;
        self.records[rec].first_token = self.now;
        if a.remaining == 0 {
            self.finish(job)?;
        }
        self.schedule_next()
    }

    fn on_decode_step(&mut self) -> Result<(), SimError> {
        self.busy = false;
        let mut done = Vec::new();
        for (&job, a) in self.active.iter_mut() {
            // jobs admitted after this step started were still prefilling
            if a.remaining > 0 {
                a.remaining -= 1;
                if a.remaining == 0 {
                    done.push(job);
                }
            }
        }
        for job in done {
            self.finish(job)?;
        }
        self.schedule_next()
    }

    fn finish(&mut self, job: u64) -> Result<(), SimError> {
        let a = self.active.remove(&job).expect("active job");
        let idx = a.session;
        self.log(EventKind::JobDone, Some(idx));
        let p = &self.cfg.profile;
        let rec = &self.records[a.record];
        let (ctx, new, out, hit, prefill_end) =
            (rec.hist_tokens, rec.new_tokens, rec.output_tokens, rec.hit_class, rec.first_token);
        let mut total = ctx + new + out;
        let mut overflow = false;
        if let Some(act) = handle_overflow(total, p, self.cfg.mode) {
            overflow = true;
            total = act.keep_tokens;
        }
        let sid = Self::sid(idx);
        let mut saved = 0u64;
        let mut evicted = 0u64;
        if let Some(store) = self.store.as_mut() {
            let in_memory = hit == HitClass::MemoryHit
                && store.get(sid).is_some_and(|i| i.tier == Tier::Memory && i.ready_at.is_none());
            let invalidate = overflow && self.cfg.mode == Mode::TokenTruncationOverflow;
            if invalidate {
                store.remove(sid);
            } else {
                let mut ev = QueueEvictor { queue: &self.queue, cfg: &self.cfg.policy };
                match store.save(sid, total, self.now, &mut ev) {
                    Ok(report) => {
                        saved = if in_memory { kv_size(new + out, p) } else { report.item.bytes };
                        self.stats.expirations += report.expired.len() as u64;
                        evicted = self.note_movements(&report.movements);
                        for m in &report.movements {
                            let t = self.now + m.bytes as f64 / self.cfg.tiers.disk_bandwidth.0;
                            self.push(t, EventKind::EvictDone, Some(m.session.0 as usize), 0);
                        }
                    }
                    Err(StoreError::StoredNowhere { .. }) => {}
                    Err(e) => return Err(self.store_err(idx, e)),
                }
            }
            if overflow && self.cfg.mode == Mode::NaiveKvTruncation {
                // the saved copy keeps positions from before the cut
                self.sessions[idx].stale = true;
            }
            // write stream: started at first token, overlapped with decoding
            let bw = self.cfg.tiers.pcie_bandwidth.0;
            let window = (self.now - prefill_end).max(0.0);
            let residue = (saved as f64 - bw * window).max(0.0);
            let excess = (residue - self.cfg.tiers.hbm_write_buffer.0 as f64).max(0.0);
            self.pending_stall += excess / bw;
            let write_end = prefill_end + saved as f64 / bw;
            self.write_busy_until = self.write_busy_until.max(write_end);
        }
        let r = &mut self.records[a.record];
        r.done = self.now;
        r.bytes_saved = saved;
        r.bytes_evicted = evicted;
        r.overflow |= overflow;
        self.sessions[idx].ctx = total;
        self.sessions[idx].next_turn += 1;
        let next = self.sessions[idx].next_turn;
        let sess = &self.w.sessions[idx];
        if next < sess.turns.len() {
            let think = sess.think_time(next);
            self.push(self.now + think, EventKind::Arrival, Some(idx), next);
        }
        self.track_peaks();
        self.prefetch_pass()
    }
}

/// Replays `w` under `cfg`.
pub fn run(w: &Workload, cfg: &SimConfig) -> Result<EventLog, SimError> {
    cfg.validate()?;
    if w.sessions.is_empty() {
        return Err(SimError::EmptyWorkload);
    }
    let mut e = Engine {
        w,
        cfg,
        heap: BinaryHeap::new(),
        seq: 0,
        store: cfg.store_config().map(Store::new),
        queue: JobQueue::new(),
        waiting: BTreeMap::new(),
        active: BTreeMap::new(),
        next_job: 0,
        busy: false,
        pending_stall: 0.0,
        write_busy_until: 0.0,
        sessions: w.sessions.iter().map(|_| SessionState { ctx: 0, next_turn: 0, stale: false }).collect(),
        records: Vec::with_capacity(w.total_turns()),
        stats: EngineStats::default(),
        events: Vec::new(),
        arrivals_seen: 0,
        now: 0.0,
    };
    for (i, s) in w.sessions.iter().enumerate() {
        e.push(s.arrival_times[0], EventKind::Arrival, Some(i), 0);
    }
    if cfg.ttl.is_some() {
        e.push(cfg.ttl_sweep_interval, EventKind::TtlSweep, None, 0);
    }
    while let Some(q) = e.heap.pop() {
        e.now = q.ev.time;
        match q.ev.kind {
            EventKind::Arrival => {
                e.log(EventKind::Arrival, q.ev.session);
                e.on_arrival(q.ev.session.expect("arrival session"), q.turn)?;
            }
            EventKind::PrefillDone => e.on_prefill_done(q.turn as u64)?,
            EventKind::DecodeStep => {
                e.log(EventKind::DecodeStep, None);
                e.on_decode_step()?;
            }
            EventKind::PrefetchDone => {
                e.log(EventKind::PrefetchDone, q.ev.session);
                if let Some(s) = e.store.as_mut() {
                    s.complete_promotions(e.now);
                }
                e.prefetch_pass()?;
            }
            EventKind::EvictDone => e.log(EventKind::EvictDone, q.ev.session),
            EventKind::JobDone => {}
            EventKind::TtlSweep => {
                e.log(EventKind::TtlSweep, None);
                if let Some(s) = e.store.as_mut() {
                    e.stats.expirations += s.sweep_expired(e.now).len() as u64;
                }
                let pending = e.heap.iter().any(|q| q.ev.kind != EventKind::EvictDone && q.ev.kind != EventKind::PrefetchDone);
                if pending {
                    e.push(e.now + cfg.ttl_sweep_interval, EventKind::TtlSweep, None, 0);
                }
            }
        }
    }
    e.stats.wall_time = e.records.iter().map(|r| r.done).filter(|d| d.is_finite()).fold(0.0, f64::max);
    e.stats.final_fragmentation = e.store.as_ref().map_or(0, Store::internal_fragmentation);
    let unfinished = w
        .sessions
        .iter()
        .enumerate()
        .filter(|(i, s)| e.sessions[*i].next_turn < s.turns.len())
        .map(|(_, s)| s.id.clone())
        .collect();
    if let Some(s) = &e.store {
        s.check_invariants().map_err(|err| SimError::Store { time: e.now, session: "<final>".into(), source: err })?;
    }
    Ok(EventLog {
        mode: cfg.mode,
        policy: cfg.policy.kind,
        profile: cfg.profile.name.clone(),
        records: e.records,
        stats: e.stats,
        unfinished,
        events: e.events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_profile;
    use crate::trace::{Session, Turn};

    fn one_session(turns: &[(u32, u32)], gaps: f64) -> Workload {
        let s = Session {
            id: "a".into(),
            turns: turns.iter().map(|&(i, o)| Turn { new_input_tokens: i, output_tokens: o }).collect(),
            arrival_times: (0..turns.len()).map(|k| k as f64 * gaps).collect(),
        };
        Workload::from_sessions(vec![s])
    }

    fn cfg(profile: &str, mode: Mode) -> SimConfig {
        let mut c = SimConfig::new(builtin_profile(profile).unwrap(), mode);
        c.warmup_turns = 0;
        c
    }

    #[test]
    fn batching_prefers_prefill() {
        assert_eq!(continuous_batching_step(0, 4, 1), EngineAction::Prefill);
        assert_eq!(continuous_batching_step(3, 4, 2), EngineAction::Prefill);
        assert_eq!(continuous_batching_step(4, 4, 2), EngineAction::Decode);
        assert_eq!(continuous_batching_step(2, 4, 0), EngineAction::Decode);
        assert_eq!(continuous_batching_step(0, 4, 0), EngineAction::Idle);
    }

    #[test]
    fn overflow_keeps_the_later_half() {
        let p = builtin_profile("llama-13b").unwrap();
        let a = handle_overflow(4096, &p, Mode::CachedReuse).unwrap();
        assert_eq!((a.keep_from, a.keep_tokens, a.cache), (2048, 2048, CacheAction::Shrink));
        assert_eq!(handle_overflow(4095, &p, Mode::CachedReuse), None);
        assert_eq!(handle_overflow(5000, &p, Mode::TokenTruncationOverflow).unwrap().cache, CacheAction::Invalidate);
        assert_eq!(handle_overflow(5000, &p, Mode::NaiveKvTruncation).unwrap().cache, CacheAction::ShrinkStale);
        assert_eq!(handle_overflow(5000, &p, Mode::Recompute).unwrap().keep_tokens, 2500);
    }

    #[test]
    fn second_turn_ttft_matches_closed_forms() {
        let w = one_session(&[(500, 200), (100, 10)], 100.0);
        let c = cfg("llama-13b", Mode::CachedReuse);
        let log = run(&w, &c).unwrap();
        let r = &log.records[1];
        assert_eq!(r.hit_class, HitClass::MemoryHit);
        assert_eq!(r.hist_tokens, 700);
        let want = plan_preload_at(700, 100, &c.profile, c.tiers.pcie_bandwidth.0, 0, false).makespan;
        assert!((r.ttft_s - want).abs() < 1e-12, "{} vs {want}", r.ttft_s);

        let re = cfg("llama-13b", Mode::Recompute);
        let log = run(&w, &re).unwrap();
        assert_eq!(log.records[1].hit_class, HitClass::Miss);
        assert!((log.records[1].ttft_s - prefill_time(800, &re.profile)).abs() < 1e-12);
    }

    #[test]
    fn timeline_is_ordered_and_decode_steps_add_up() {
        let w = one_session(&[(300, 50), (40, 1), (80, 20)], 30.0);
        let log = run(&w, &cfg("llama-70b", Mode::CachedReuse)).unwrap();
        assert!(log.unfinished.is_empty());
        assert_eq!(log.stats.decode_steps, 49 + 19);
        for r in &log.records {
            assert!(r.arrival <= r.dispatch && r.dispatch < r.first_token && r.first_token <= r.done);
        }
        assert!(log.records[1].first_token == log.records[1].done, "one output token needs no decode step");
    }

    #[test]
    fn overflow_modes_differ_on_the_next_turn() {
        // the second turn pushes past the 2K window of the 65B profile
        let w = one_session(&[(1500, 300), (400, 50), (100, 20)], 200.0);
        let of = run(&w, &cfg("llama-65b", Mode::TokenTruncationOverflow)).unwrap();
        let cached = run(&w, &cfg("llama-65b", Mode::CachedReuse)).unwrap();
        let naive = run(&w, &cfg("llama-65b", Mode::NaiveKvTruncation)).unwrap();
        assert!(of.records[1].overflow);
        assert_eq!(of.records[1].hit_class, HitClass::Miss);
        assert_eq!(cached.records[1].hit_class, HitClass::MemoryHit);
        assert!(naive.records[1].stale && !cached.records[1].stale);
        assert!(naive.records[2].stale);
        for log in [&of, &cached, &naive] {
            assert!(log.records.iter().all(|r| r.hist_tokens + r.new_tokens < 2048));
        }
    }

    #[test]
    fn reuse_saves_gpu_time_and_runs_are_deterministic() {
        let spec = crate::trace::SyntheticSpec { sessions: 60, rate: 0.3, ..Default::default() };
        let w = crate::trace::generate(&spec, 3).unwrap();
        let re = run(&w, &cfg("llama-13b", Mode::Recompute)).unwrap();
        let a = run(&w, &cfg("llama-13b", Mode::CachedReuse)).unwrap();
        let b = run(&w, &cfg("llama-13b", Mode::CachedReuse)).unwrap();
        assert_eq!(serde_json::to_string(&a.records).unwrap(), serde_json::to_string(&b.records).unwrap());
        assert!(a.stats.busy_time < re.stats.busy_time);
        let longest = w.sessions.iter().flat_map(|s| &s.turns).map(|t| u64::from(t.output_tokens.saturating_sub(1))).max().unwrap();
        assert!(a.stats.decode_steps >= longest);
        assert_eq!(a.records.len(), w.total_turns());
        let (first, hits): (Vec<_>, Vec<_>) = a.records.iter().partition(|r| r.first_turn);
        assert!(first.iter().all(|r| r.hit_class == HitClass::Miss));
        // roomy default tiers: every later turn hits
        assert!(hits.iter().all(|r| r.hit_class.is_hit()));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let w = one_session(&[(10, 1)], 1.0);
        let mut c = cfg("llama-13b", Mode::CachedReuse);
        c.batch_size = 0;
        assert!(matches!(run(&w, &c), Err(SimError::Config(_))));
        let mut c = cfg("llama-13b", Mode::CachedReuse);
        c.ttl = Some(-1.0);
        assert!(c.validate().is_err());
    }
}
