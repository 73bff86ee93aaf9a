//! Placement policies over the job queue and the store.
//!
//! The scheduler-aware policy reads the waiting queue as a list of future
//! accesses. A look-ahead prefetch window of `L_pw` jobs pulls their items
//! from disk ahead of dispatch; a look-ahead eviction window protects items
//! whose jobs are queued and, when it must, demotes the one whose job is
//! nearest the window's tail. LRU and FIFO baselines ignore the queue.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::store::{Evictor, Movement, SessionId, Store, StoreError, Tier};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub session: SessionId,
    pub turn: u32,
    pub enqueue_time: f64,
}

/// FIFO queue of waiting jobs with O(1) position lookup by session.
#[derive(Debug, Clone, Default)]
pub struct JobQueue {
    entries: VecDeque<(u64, QueueEntry)>,
    seq_of: HashMap<SessionId, u64>,
    next_seq: u64,
}

impl JobQueue {
    pub fn new() -> JobQueue {
        JobQueue::default()
    }

    pub fn from_sessions(ids: &[u32]) -> JobQueue {
        let mut q = JobQueue::new();
        for &id in ids {
            q.push(QueueEntry { session: SessionId(id), turn: 0, enqueue_time: 0.0 });
        }
        q
    }

    /// Appends a job. A session may have only one waiting job; a duplicate
    /// push is ignored and reported as `false`.
    pub fn push(&mut self, e: QueueEntry) -> bool {
        if self.seq_of.contains_key(&e.session) {
            return false;
        }
        self.seq_of.insert(e.session, self.next_seq);
        self.entries.push_back((self.next_seq, e));
        self.next_seq += 1;
        true
    }

    pub fn pop(&mut self) -> Option<QueueEntry> {
        let (_, e) = self.entries.pop_front()?;
        self.seq_of.remove(&e.session);
        Some(e)
    }

    pub fn front(&self) -> Option<&QueueEntry> {
        self.entries.front().map(|(_, e)| e)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Zero-based distance from the head.
    pub fn position(&self, id: SessionId) -> Option<usize> {
        let seq = self.seq_of.get(&id)?;
        let head = self.entries.front()?.0;
        Some((seq - head) as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter().map(|(_, e)| e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    SchedulerAware,
    Lru,
    Fifo,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::SchedulerAware => "scheduler-aware",
            PolicyKind::Lru => "lru",
            PolicyKind::Fifo => "fifo",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "scheduler-aware" | "sa" | "scheduler_aware" => Ok(PolicyKind::SchedulerAware),
            "lru" => Ok(PolicyKind::Lru),
            "fifo" => Ok(PolicyKind::Fifo),
            other => Err(format!("unknown policy `{other}` (scheduler-aware, lru, fifo)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Fixed prefetch window; `None` derives `C_mem / S_kv_avg`.
    #[serde(default)]
    pub prefetch_window: Option<usize>,
    /// Fixed eviction window; `None` derives `(C_mem + C_disk) / S_kv_avg`.
    #[serde(default)]
    pub eviction_window: Option<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { kind: PolicyKind::SchedulerAware, prefetch_window: None, eviction_window: None }
    }
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> PolicyConfig {
        PolicyConfig { kind, ..PolicyConfig::default() }
    }

    /// `(prefetch, eviction)` windows in jobs for the store's current mean
    /// item size. With no size estimate yet, the windows are unbounded.
    pub fn windows(&self, s: &Store) -> (usize, usize) {
        let avg = s.avg_item_bytes();
        let c = s.config();
        let derive = |cap: u64| if avg == 0 { usize::MAX } else { (cap / avg) as usize };
        (
            self.prefetch_window.unwrap_or_else(|| derive(c.dram_capacity)),
            self.eviction_window.unwrap_or_else(|| derive(c.dram_capacity.saturating_add(c.disk_capacity))),
        )
    }
}

/// Disk-resident items among the first `L_pw` waiting jobs, in queue order,
/// capped by the memory still free (reserve included).
pub fn plan_prefetch(q: &JobQueue, s: &Store, cfg: &PolicyConfig) -> Vec<SessionId> {
    if cfg.kind != PolicyKind::SchedulerAware {
        return Vec::new();
    }
    let (window, _) = cfg.windows(s);
    let mut budget = s.mem_free();
    let mut out = Vec::new();
    for e in q.iter().take(window) {
        let Some(item) = s.get(e.session) else { continue };
        if item.tier != Tier::Disk {
            continue;
        }
        if item.charged > budget {
            break;
        }
        budget -= item.charged;
        out.push(e.session);
    }
    out
}

fn windowed_pos(q: &JobQueue, id: SessionId, window: usize) -> Option<usize> {
    q.position(id).filter(|&p| p < window)
}

fn pick(
    q: &JobQueue,
    s: &Store,
    cfg: &PolicyConfig,
    tier: Tier,
    exclude: &[SessionId],
) -> Result<SessionId, StoreError> {
    let (_, window) = cfg.windows(s);
    let candidates = s.items().filter(|i| i.tier == tier && !exclude.contains(&i.session));
    let chosen = match cfg.kind {
        PolicyKind::Lru => candidates.min_by(|a, b| {
            a.last_access.total_cmp(&b.last_access).then(b.charged.cmp(&a.charged)).then(a.session.cmp(&b.session))
        }),
        PolicyKind::Fifo => candidates.min_by(|a, b| {
            a.inserted_at.total_cmp(&b.inserted_at).then(b.charged.cmp(&a.charged)).then(a.session.cmp(&b.session))
        }),
        PolicyKind::SchedulerAware => {
            // Key: (windowed, -position) ascending means non-windowed first,
            // then the windowed item nearest the tail.
            candidates.min_by(|a, b| {
                let pa = windowed_pos(q, a.session, window);
                let pb = windowed_pos(q, b.session, window);
                match (pa, pb) {
                    (None, Some(_)) => std::cmp::Ordering::Less,
                    (Some(_), None) => std::cmp::Ordering::Greater,
                    (None, None) => a.inserted_at.total_cmp(&b.inserted_at),
                    (Some(x), Some(y)) => y.cmp(&x),
                }
                .then(b.charged.cmp(&a.charged))
                .then(a.session.cmp(&b.session))
            })
        }
    };
    chosen.map(|i| i.session).ok_or(StoreError::CapacityDeadlock(tier))
}

/// Memory item to demote next. In-flight promotions are only chosen when
/// nothing else is resident.
pub fn select_evict_to_disk(q: &JobQueue, s: &Store, cfg: &PolicyConfig) -> Result<SessionId, StoreError> {
    select_evict_to_disk_except(q, s, cfg, &[])
}

pub fn select_evict_to_disk_except(
    q: &JobQueue,
    s: &Store,
    cfg: &PolicyConfig,
    exclude: &[SessionId],
) -> Result<SessionId, StoreError> {
    let mut skip: Vec<SessionId> = exclude.to_vec();
    skip.extend(s.items().filter(|i| i.ready_at.is_some()).map(|i| i.session));
    pick(q, s, cfg, Tier::Memory, &skip).or_else(|_| pick(q, s, cfg, Tier::Memory, exclude))
}

/// Disk item to drop from the hierarchy.
pub fn select_evict_out(q: &JobQueue, s: &Store, cfg: &PolicyConfig) -> Result<SessionId, StoreError> {
    pick(q, s, cfg, Tier::Disk, &[])
}

/// [`Evictor`] that defers to the configured policy.
pub struct QueueEvictor<'a> {
    pub queue: &'a JobQueue,
    pub cfg: &'a PolicyConfig,
}

impl Evictor for QueueEvictor<'_> {
    fn evict_to_disk(&mut self, store: &Store) -> Result<SessionId, StoreError> {
        select_evict_to_disk(self.queue, store, self.cfg)
    }
    fn evict_out(&mut self, store: &Store) -> Result<SessionId, StoreError> {
        select_evict_out(self.queue, store, self.cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prefetch {
    pub session: SessionId,
    pub bytes: u64,
    pub ready_at: f64,
    /// Demotions and evictions performed to make room, in order.
    pub movements: Vec<Movement>,
}

/// First disk-resident item among the first `L_pw` waiting jobs.
fn next_disk_candidate(q: &JobQueue, s: &Store, cfg: &PolicyConfig) -> Option<SessionId> {
    let (window, _) = cfg.windows(s);
    q.iter().take(window).map(|e| e.session).find(|&id| s.get(id).is_some_and(|i| i.tier == Tier::Disk))
}

/// Runs one prefetch pass. For the earliest disk-resident job in the
/// prefetch window, victims are demoted until the promotion keeps memory
/// under the threshold, then the copy starts. The pass stops when making room
/// would demote an in-flight copy or an item whose job is due no later than
/// the candidate's.
pub fn apply_prefetch(
    q: &JobQueue,
    s: &mut Store,
    cfg: &PolicyConfig,
    now: f64,
    disk_bandwidth: f64,
) -> Result<Vec<Prefetch>, StoreError> {
    let mut done = Vec::new();
    if cfg.kind != PolicyKind::SchedulerAware {
        return Ok(done);
    }
    // one disk read stream: copies queue behind those already in flight
    let mut link_free = s.items().filter_map(|i| i.ready_at).fold(now, f64::max);
    while let Some(id) = next_disk_candidate(q, s, cfg) {
        let charged = s.get(id).map_or(0, |i| i.charged);
        if charged > s.config().dram_capacity {
            break;
        }
        let my_pos = q.position(id).unwrap_or(usize::MAX);
        // dry run of the demotions this promotion needs
        let threshold = s.mem_threshold();
        let mut excess = (s.mem_used() + charged).saturating_sub(threshold);
        let mut victims = Vec::new();
        let mut exclude = vec![id];
        while excess > 0 {
            let Ok(v) = select_evict_to_disk_except(q, s, cfg, &exclude) else {
                return Ok(done);
            };
            if s.get(v).is_some_and(|i| i.ready_at.is_some()) || q.position(v).is_some_and(|p| p <= my_pos) {
                return Ok(done);
            }
            let c = s.get(v).map_or(0, |i| i.charged);
            excess = excess.saturating_sub(c);
            victims.push(v);
            exclude.push(v);
        }
        let mut movements = Vec::new();
        let mut ev = QueueEvictor { queue: q, cfg };
        for v in victims {
            s.demote(v, &mut ev, &mut movements)?;
        }
        if plan_prefetch(q, s, cfg).first() != Some(&id) {
            // demoting freed memory but the candidate still does not fit
            break;
        }
        let bytes = s.get(id).map_or(0, |i| i.bytes);
        let ready_at = link_free + bytes as f64 / disk_bandwidth;
        link_free = ready_at;
        s.begin_promotion(id, ready_at)?;
        done.push(Prefetch { session: id, bytes, ready_at, movements });
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{FifoEvictor, StoreConfig};

    const GB: u64 = 1 << 30;

    fn store(mem: u64, disk: u64) -> Store {
        Store::new(StoreConfig {
            dram_capacity: mem,
            disk_capacity: disk,
            block_size: 1 << 20,
            kv_bytes_per_token: 1 << 20,
            ttl: None,
            decoupled: true,
            reserve_factor: 0.0,
            refresh_every: 1,
        })
    }

    #[test]
    fn queue_positions() {
        let mut q = JobQueue::from_sessions(&[5, 6, 7]);
        assert_eq!(q.position(SessionId(7)), Some(2));
        assert!(!q.push(QueueEntry { session: SessionId(6), turn: 1, enqueue_time: 0.0 }));
        assert_eq!(q.pop().unwrap().session, SessionId(5));
        assert_eq!(q.position(SessionId(7)), Some(1));
        assert_eq!(q.position(SessionId(5)), None);
    }

    #[test]
    fn empty_queue_prefetches_nothing() {
        let s = store(4 * GB, 4 * GB);
        assert!(plan_prefetch(&JobQueue::new(), &s, &PolicyConfig::default()).is_empty());
    }

    #[test]
    fn windowed_items_in_memory_need_no_prefetch() {
        let mut s = store(8 * GB, 8 * GB);
        for id in 1..=2 {
            s.save(SessionId(id), 1024, 0.0, &mut FifoEvictor).unwrap();
        }
        let q = JobQueue::from_sessions(&[1, 2]);
        assert!(plan_prefetch(&q, &s, &PolicyConfig::default()).is_empty());
    }

    #[test]
    fn single_unwindowed_item_is_the_victim() {
        let mut s = store(8 * GB, 8 * GB);
        s.save(SessionId(1), 1024, 0.0, &mut FifoEvictor).unwrap();
        let q = JobQueue::from_sessions(&[2, 3]);
        assert_eq!(select_evict_to_disk(&q, &s, &PolicyConfig::default()), Ok(SessionId(1)));
    }

    #[test]
    fn lru_picks_least_recent() {
        let mut s = store(8 * GB, 8 * GB);
        for (id, t) in [(1, 1.0), (2, 2.0), (3, 3.0)] {
            s.save(SessionId(id), 100, 0.0, &mut FifoEvictor).unwrap();
            s.touch(SessionId(id), t);
        }
        let cfg = PolicyConfig::new(PolicyKind::Lru);
        assert_eq!(select_evict_to_disk(&JobQueue::new(), &s, &cfg), Ok(SessionId(1)));
    }

    #[test]
    fn zero_window_degenerates_to_fifo() {
        let mut s = store(8 * GB, 8 * GB);
        for (id, t) in [(3, 0.0), (1, 1.0), (2, 2.0)] {
            s.save(SessionId(id), 100, t, &mut FifoEvictor).unwrap();
        }
        s.touch(SessionId(3), 9.0);
        let q = JobQueue::from_sessions(&[3, 1, 2]);
        let sa = PolicyConfig { kind: PolicyKind::SchedulerAware, prefetch_window: Some(0), eviction_window: Some(0) };
        let fifo = PolicyConfig::new(PolicyKind::Fifo);
        assert_eq!(select_evict_to_disk(&q, &s, &sa), select_evict_to_disk(&q, &s, &fifo));
        assert_eq!(select_evict_to_disk(&q, &s, &sa), Ok(SessionId(3)));
    }

    #[test]
    fn tail_rule_when_all_windowed() {
        let mut s = store(8 * GB, 8 * GB);
        for id in [1, 2, 3] {
            s.save(SessionId(id), 100, 0.0, &mut FifoEvictor).unwrap();
            s.move_item(SessionId(id), Tier::Disk).unwrap();
        }
        let q = JobQueue::from_sessions(&[2, 3, 1]);
        assert_eq!(select_evict_out(&q, &s, &PolicyConfig::default()), Ok(SessionId(1)));
    }

    #[test]
    fn nothing_to_evict_is_a_deadlock() {
        let s = store(GB, GB);
        assert_eq!(
            select_evict_out(&JobQueue::new(), &s, &PolicyConfig::default()),
            Err(StoreError::CapacityDeadlock(Tier::Disk))
        );
    }
}
