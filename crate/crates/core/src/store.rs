//! Two-tier session store: host memory over disk.
//!
//! One item holds all KV of one session and is the unit of placement, fetch
//! and eviction. Capacities are carved into fixed-size blocks and every item
//! is charged a whole number of blocks, so `mem_used`/`disk_used` count
//! charged bytes and the slack is reported as internal fragmentation.
//!
//! The store does not pick victims itself. Operations that need room take an
//! [`Evictor`], which the policy layer implements over the job queue.
//!
//! A promotion from disk (a prefetch) is a copy: the item is charged in memory
//! immediately, but its disk blocks stay allocated until the copy lands at
//! `ready_at`. A lookup before then is classed as a disk hit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u32);

impl std::fmt::Display for SessionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Memory,
    Disk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HitClass {
    MemoryHit,
    DiskHit,
    Miss,
}

impl HitClass {
    pub fn is_hit(self) -> bool {
        !matches!(self, HitClass::Miss)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HitClass::MemoryHit => "memory",
            HitClass::DiskHit => "disk",
            HitClass::Miss => "miss",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("session {0} has no stored item")]
    NotFound(SessionId),
    #[error("item of {bytes} bytes fits in no tier")]
    StoredNowhere { bytes: u64 },
    #[error("{tier:?} tier cannot take {needed} more bytes ({used}/{capacity} used)")]
    CapacityExceeded { tier: Tier, needed: u64, used: u64, capacity: u64 },
    #[error("no evictable item in {0:?}")]
    CapacityDeadlock(Tier),
    #[error("cannot keep {keep} of {tokens} tokens")]
    BadTruncation { keep: u64, tokens: u64 },
    #[error("corrupt store state: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub dram_capacity: u64,
    pub disk_capacity: u64,
    pub block_size: u64,
    pub kv_bytes_per_token: u64,
    /// Seconds since last access after which an item expires; `None` keeps forever.
    pub ttl: Option<f64>,
    /// Items are saved without positional encodings.
    pub decoupled: bool,
    /// Reserve = factor × mean item size, capped at a quarter of memory.
    pub reserve_factor: f64,
    /// Saves between refreshes of the mean-size estimate.
    pub refresh_every: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            dram_capacity: 128 << 30,
            disk_capacity: 10 << 40,
            block_size: 64 << 20,
            kv_bytes_per_token: 1 << 20,
            ttl: None,
            decoupled: true,
            reserve_factor: 2.0,
            refresh_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvItem {
    pub session: SessionId,
    pub tokens: u64,
    pub bytes: u64,
    /// Bytes charged against the tier: `bytes` rounded up to whole blocks.
    pub charged: u64,
    pub tier: Tier,
    pub decoupled: bool,
    /// Coupled item kept after a naive truncation; its keys carry old positions.
    #[serde(default)]
    pub stale: bool,
    pub last_access: f64,
    pub inserted_at: f64,
    pub ttl: Option<f64>,
    /// Time a disk-to-memory copy completes; disk blocks are held until then.
    #[serde(default)]
    pub ready_at: Option<f64>,
}

impl KvItem {
    pub fn expired(&self, now: f64) -> bool {
        self.ttl.is_some_and(|ttl| now - self.last_access > ttl)
    }

    pub fn in_flight(&self, now: f64) -> bool {
        self.ready_at.is_some_and(|r| r > now)
    }
}

/// One item moving between tiers (or out of the hierarchy when `to` is `None`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    pub session: SessionId,
    pub from: Tier,
    pub to: Option<Tier>,
    pub bytes: u64,
}

/// Victim selection, supplied by the policy layer.
pub trait Evictor {
    /// A memory-resident item to demote to disk.
    fn evict_to_disk(&mut self, store: &Store) -> Result<SessionId, StoreError>;
    /// A disk-resident item to drop from the hierarchy.
    fn evict_out(&mut self, store: &Store) -> Result<SessionId, StoreError>;
}

/// Oldest-inserted first in both tiers. Handy default for tests and tools.
pub struct FifoEvictor;

impl Evictor for FifoEvictor {
    fn evict_to_disk(&mut self, store: &Store) -> Result<SessionId, StoreError> {
        oldest_in(store, Tier::Memory)
    }
    fn evict_out(&mut self, store: &Store) -> Result<SessionId, StoreError> {
        oldest_in(store, Tier::Disk)
    }
}

fn oldest_in(store: &Store, tier: Tier) -> Result<SessionId, StoreError> {
    store
        .items()
        .filter(|i| i.tier == tier)
        .min_by(|a, b| a.inserted_at.total_cmp(&b.inserted_at).then(a.session.cmp(&b.session)))
        .map(|i| i.session)
        .ok_or(StoreError::CapacityDeadlock(tier))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaveReport {
    pub item: KvItem,
    pub movements: Vec<Movement>,
    /// Items removed by TTL during the save.
    pub expired: Vec<SessionId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TruncateOutcome {
    Shrunk(KvItem),
    Invalidated,
}

/// Serializable snapshot for debugging and golden tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    pub config: StoreConfig,
    pub items: Vec<KvItem>,
    pub mem_used: u64,
    pub disk_used: u64,
    pub mem_buffer_reserve: u64,
    pub avg_item_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct Store {
    cfg: StoreConfig,
    items: BTreeMap<SessionId, KvItem>,
    mem_used: u64,
    disk_used: u64,
    reserve: u64,
    avg_item: u64,
    saved_count: u64,
    saved_bytes: u128,
}

impl Store {
    pub fn new(cfg: StoreConfig) -> Store {
        Store {
            cfg,
            items: BTreeMap::new(),
            mem_used: 0,
            disk_used: 0,
            reserve: 0,
            avg_item: 0,
            saved_count: 0,
            saved_bytes: 0,
        }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn items(&self) -> impl Iterator<Item = &KvItem> {
        self.items.values()
    }

    pub fn get(&self, id: SessionId) -> Option<&KvItem> {
        self.items.get(&id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn mem_used(&self) -> u64 {
        self.mem_used
    }

    pub fn disk_used(&self) -> u64 {
        self.disk_used
    }

    pub fn mem_buffer_reserve(&self) -> u64 {
        self.reserve
    }

    /// Mean saved item size, as of the last refresh.
    pub fn avg_item_bytes(&self) -> u64 {
        self.avg_item
    }

    /// Memory occupancy above which demotions start.
    pub fn mem_threshold(&self) -> u64 {
        self.cfg.dram_capacity.saturating_sub(self.reserve)
    }

    pub fn mem_free(&self) -> u64 {
        self.cfg.dram_capacity.saturating_sub(self.mem_used)
    }

    pub fn disk_free(&self) -> u64 {
        self.cfg.disk_capacity.saturating_sub(self.disk_used)
    }

    /// Σ (charged − bytes) over resident items.
    pub fn internal_fragmentation(&self) -> u64 {
        self.items.values().map(|i| i.charged - i.bytes).sum()
    }

    pub fn charge(&self, bytes: u64) -> u64 {
        let b = self.cfg.block_size.max(1);
        bytes.div_ceil(b) * b
    }

    /// Overrides the reserve (tests and fixed-size setups).
    pub fn set_reserve(&mut self, reserve: u64) {
        self.reserve = reserve.min(self.cfg.dram_capacity);
    }

    fn note_saved(&mut self, bytes: u64) {
        self.saved_count += 1;
        self.saved_bytes += u128::from(bytes);
        let every = self.cfg.refresh_every.max(1);
        if self.saved_count == 1 || self.saved_count % every == 0 {
            self.avg_item = (self.saved_bytes / u128::from(self.saved_count)) as u64;
            let r = (self.cfg.reserve_factor * self.avg_item as f64) as u64;
            self.reserve = self.charge(r).min(self.cfg.dram_capacity / 4);
        }
    }

    fn release(&mut self, item: &KvItem) {
        match item.tier {
            Tier::Memory => {
                self.mem_used -= item.charged;
                if item.ready_at.is_some() {
                    self.disk_used -= item.charged;
                }
            }
            Tier::Disk => self.disk_used -= item.charged,
        }
    }

    pub fn remove(&mut self, id: SessionId) -> Option<KvItem> {
        let item = self.items.remove(&id)?;
        self.release(&item);
        Some(item)
    }

    /// Releases the disk copies of promotions that have landed by `now`.
    pub fn complete_promotions(&mut self, now: f64) {
        let done: Vec<SessionId> = self
            .items
            .values()
            .filter(|i| i.ready_at.is_some_and(|r| r <= now))
            .map(|i| i.session)
            .collect();
        for id in done {
            let item = self.items.get_mut(&id).expect("listed above");
            item.ready_at = None;
            self.disk_used -= item.charged;
        }
    }

    /// Removes every expired item.
    pub fn sweep_expired(&mut self, now: f64) -> Vec<SessionId> {
        let dead: Vec<SessionId> = self.items.values().filter(|i| i.expired(now)).map(|i| i.session).collect();
        for &id in &dead {
            self.remove(id);
        }
        dead
    }

    /// Classifies an access and refreshes `last_access` on a hit. Expired
    /// items are removed and reported as misses.
    pub fn lookup(&mut self, id: SessionId, now: f64) -> HitClass {
        self.complete_promotions(now);
        let Some(item) = self.items.get(&id) else {
            return HitClass::Miss;
        };
        if item.expired(now) {
            self.remove(id);
            return HitClass::Miss;
        }
        let class = match item.tier {
            Tier::Memory if item.in_flight(now) => HitClass::DiskHit,
            Tier::Memory => HitClass::MemoryHit,
            Tier::Disk => HitClass::DiskHit,
        };
        self.items.get_mut(&id).expect("present").last_access = now;
        class
    }

    /// Read-only classification (no expiry removal, no touch).
    pub fn peek(&self, id: SessionId, now: f64) -> HitClass {
        match self.items.get(&id) {
            None => HitClass::Miss,
            Some(i) if i.expired(now) => HitClass::Miss,
            Some(i) if i.tier == Tier::Memory && !i.in_flight(now) => HitClass::MemoryHit,
            Some(_) => HitClass::DiskHit,
        }
    }

    pub fn touch(&mut self, id: SessionId, now: f64) {
        if let Some(i) = self.items.get_mut(&id) {
            i.last_access = now;
        }
    }

    /// Saves (or replaces) a session's item in memory, demoting victims as
    /// needed. An item too large for the memory threshold goes to disk; one
    /// that fits nowhere is rejected and any previous item is dropped.
    pub fn save(
        &mut self,
        id: SessionId,
        tokens: u64,
        now: f64,
        evictor: &mut dyn Evictor,
    ) -> Result<SaveReport, StoreError> {
        let old = self.remove(id);
        let inserted_at = old.as_ref().map_or(now, |o| o.inserted_at);
        let bytes = tokens * self.cfg.kv_bytes_per_token;
        self.note_saved(bytes);
        let charged = self.charge(bytes);
        let threshold = self.mem_threshold();
        let (tier, limit) = if charged <= threshold {
            (Tier::Memory, threshold)
        } else if charged <= self.cfg.disk_capacity {
            (Tier::Disk, self.cfg.disk_capacity)
        } else if charged <= self.cfg.dram_capacity {
            (Tier::Memory, self.cfg.dram_capacity)
        } else {
            return Err(StoreError::StoredNowhere { bytes });
        };
        let mut report = SaveReport {
            item: KvItem {
                session: id,
                tokens,
                bytes,
                charged,
                tier,
                decoupled: self.cfg.decoupled,
                stale: false,
                last_access: now,
                inserted_at,
                ttl: self.cfg.ttl,
                ready_at: None,
            },
            movements: Vec::new(),
            expired: Vec::new(),
        };
        let used = |s: &Store| if tier == Tier::Memory { s.mem_used } else { s.disk_used };
        if used(self) + charged > limit {
            report.expired = self.sweep_expired(now);
        }
        match tier {
            Tier::Memory => {
                // The new item competes with the residents: the policy may
                // send it straight on to disk.
                self.mem_used += charged;
                self.items.insert(id, report.item.clone());
                while self.mem_used > limit {
                    let victim = evictor.evict_to_disk(self)?;
                    self.demote(victim, evictor, &mut report.movements)?;
                }
                if let Some(it) = self.items.get(&id) {
                    report.item = it.clone();
                }
            }
            Tier::Disk => {
                while self.disk_used + charged > limit {
                    let victim = evictor.evict_out(self)?;
                    self.evict_out(victim, &mut report.movements)?;
                }
                self.disk_used += charged;
                self.items.insert(id, report.item.clone());
            }
        }
        Ok(report)
    }

    /// Drops a disk item from the hierarchy.
    pub fn evict_out(&mut self, id: SessionId, log: &mut Vec<Movement>) -> Result<(), StoreError> {
        let item = self.items.get(&id).ok_or(StoreError::NotFound(id))?;
        if item.tier != Tier::Disk {
            return Err(StoreError::Corrupt(format!("evict-out victim {id} is not on disk")));
        }
        let item = self.remove(id).expect("present");
        log.push(Movement { session: id, from: Tier::Disk, to: None, bytes: item.bytes });
        Ok(())
    }

    /// Moves a memory item to disk, making disk room through the evictor.
    /// Items that cannot fit on disk at all are dropped instead.
    pub fn demote(&mut self, id: SessionId, evictor: &mut dyn Evictor, log: &mut Vec<Movement>) -> Result<(), StoreError> {
        let item = self.items.get(&id).ok_or(StoreError::NotFound(id))?.clone();
        if item.tier != Tier::Memory {
            return Err(StoreError::Corrupt(format!("demotion victim {id} is not in memory")));
        }
        if item.ready_at.is_some() {
            // Cancel an unfinished promotion: the disk copy is still there.
            let it = self.items.get_mut(&id).expect("present");
            it.tier = Tier::Disk;
            it.ready_at = None;
            self.mem_used -= item.charged;
            log.push(Movement { session: id, from: Tier::Memory, to: Some(Tier::Disk), bytes: 0 });
            return Ok(());
        }
        if item.charged > self.cfg.disk_capacity {
            self.remove(id);
            log.push(Movement { session: id, from: Tier::Memory, to: None, bytes: item.bytes });
            return Ok(());
        }
        while self.disk_used + item.charged > self.cfg.disk_capacity {
            match evictor.evict_out(self) {
                Ok(out) => self.evict_out(out, log)?,
                Err(StoreError::CapacityDeadlock(_)) => {
                    // disk is held by in-flight copies only
                    self.remove(id);
                    log.push(Movement { session: id, from: Tier::Memory, to: None, bytes: item.bytes });
                    return Ok(());
                }
                Err(e) => return Err(e),
            }
        }
        let it = self.items.get_mut(&id).expect("present");
        it.tier = Tier::Disk;
        self.mem_used -= item.charged;
        self.disk_used += item.charged;
        log.push(Movement { session: id, from: Tier::Memory, to: Some(Tier::Disk), bytes: item.bytes });
        Ok(())
    }

    /// Starts copying a disk item into memory; it becomes a memory hit at
    /// `ready_at`. The caller makes memory room first.
    pub fn begin_promotion(&mut self, id: SessionId, ready_at: f64) -> Result<u64, StoreError> {
        let item = self.items.get(&id).ok_or(StoreError::NotFound(id))?;
        if item.tier == Tier::Memory {
            return Ok(0);
        }
        let charged = item.charged;
        if self.mem_used + charged > self.cfg.dram_capacity {
            return Err(StoreError::CapacityExceeded {
                tier: Tier::Memory,
                needed: charged,
                used: self.mem_used,
                capacity: self.cfg.dram_capacity,
            });
        }
        let it = self.items.get_mut(&id).expect("present");
        it.tier = Tier::Memory;
        it.ready_at = Some(ready_at);
        self.mem_used += charged;
        Ok(it.bytes)
    }

    /// Moves an item between tiers immediately. Returns the bytes to charge
    /// against the disk link; moving to the current tier is free.
    pub fn move_item(&mut self, id: SessionId, to: Tier) -> Result<u64, StoreError> {
        let item = self.items.get(&id).ok_or(StoreError::NotFound(id))?.clone();
        if item.tier == to {
            return Ok(0);
        }
        let (used, cap) = match to {
            Tier::Memory => (self.mem_used, self.cfg.dram_capacity),
            Tier::Disk => (self.disk_used, self.cfg.disk_capacity),
        };
        // A pending promotion moved back to disk reuses its disk copy.
        let needs_room = !(to == Tier::Disk && item.ready_at.is_some());
        if needs_room && used + item.charged > cap {
            return Err(StoreError::CapacityExceeded { tier: to, needed: item.charged, used, capacity: cap });
        }
        self.release(&item);
        let it = self.items.get_mut(&id).expect("present");
        it.tier = to;
        it.ready_at = None;
        match to {
            Tier::Memory => self.mem_used += item.charged,
            Tier::Disk => self.disk_used += item.charged,
        }
        Ok(item.bytes)
    }

    fn resize(&mut self, id: SessionId, keep: u64, stale: bool) -> Result<KvItem, StoreError> {
        let item = self.items.get(&id).ok_or(StoreError::NotFound(id))?.clone();
        if keep > item.tokens {
            return Err(StoreError::BadTruncation { keep, tokens: item.tokens });
        }
        if keep == item.tokens {
            return Ok(item);
        }
        let bytes = keep * self.cfg.kv_bytes_per_token;
        let charged = self.charge(bytes);
        let freed = item.charged - charged;
        match item.tier {
            Tier::Memory => {
                self.mem_used -= freed;
                if item.ready_at.is_some() {
                    self.disk_used -= freed;
                }
            }
            Tier::Disk => self.disk_used -= freed,
        }
        let it = self.items.get_mut(&id).expect("present");
        it.tokens = keep;
        it.bytes = bytes;
        it.charged = charged;
        it.stale |= stale;
        Ok(it.clone())
    }

    /// Keeps the last `keep_tokens` tokens. A decoupled item shrinks and stays
    /// valid; a coupled item is invalidated because its keys embed positions
    /// that no longer hold.
    pub fn truncate_item(&mut self, id: SessionId, keep_tokens: u64) -> Result<TruncateOutcome, StoreError> {
        let item = self.items.get(&id).ok_or(StoreError::NotFound(id))?;
        if keep_tokens > item.tokens {
            return Err(StoreError::BadTruncation { keep: keep_tokens, tokens: item.tokens });
        }
        if item.decoupled || keep_tokens == item.tokens {
            return self.resize(id, keep_tokens, false).map(TruncateOutcome::Shrunk);
        }
        self.remove(id);
        Ok(TruncateOutcome::Invalidated)
    }

    /// Shrinks a coupled item in place, keeping its stale positions. This is
    /// the naive baseline: the cache stays "valid" for the store but is wrong.
    pub fn truncate_in_place(&mut self, id: SessionId, keep_tokens: u64) -> Result<KvItem, StoreError> {
        let decoupled = self.items.get(&id).ok_or(StoreError::NotFound(id))?.decoupled;
        self.resize(id, keep_tokens, !decoupled)
    }

    pub fn check_invariants(&self) -> Result<(), StoreError> {
        let mut mem = 0u64;
        let mut disk = 0u64;
        for (id, i) in &self.items {
            if *id != i.session {
                return Err(StoreError::Corrupt(format!("key {id} holds item for {}", i.session)));
            }
            if i.bytes != i.tokens * self.cfg.kv_bytes_per_token || i.charged != self.charge(i.bytes) {
                return Err(StoreError::Corrupt(format!("item {id} has inconsistent sizes")));
            }
            match i.tier {
                Tier::Memory => {
                    mem += i.charged;
                    if i.ready_at.is_some() {
                        disk += i.charged;
                    }
                }
                Tier::Disk => {
                    if i.ready_at.is_some() {
                        return Err(StoreError::Corrupt(format!("disk item {id} has a pending promotion")));
                    }
                    disk += i.charged;
                }
            }
        }
        if mem != self.mem_used || disk != self.disk_used {
            return Err(StoreError::Corrupt(format!(
                "counters {}/{} disagree with items {mem}/{disk}",
                self.mem_used, self.disk_used
            )));
        }
        if self.mem_used > self.cfg.dram_capacity || self.disk_used > self.cfg.disk_capacity {
            return Err(StoreError::Corrupt("tier over capacity".into()));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> StoreState {
        StoreState {
            config: self.cfg.clone(),
            items: self.items.values().cloned().collect(),
            mem_used: self.mem_used,
            disk_used: self.disk_used,
            mem_buffer_reserve: self.reserve,
            avg_item_bytes: self.avg_item,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("store state serializes")
    }

    /// Rebuilds a store from a dump, rejecting inconsistent state.
    pub fn from_state(state: StoreState) -> Result<Store, StoreError> {
        let mut items = BTreeMap::new();
        for i in state.items {
            if !(i.last_access.is_finite() && i.inserted_at.is_finite()) {
                return Err(StoreError::Corrupt(format!("item {} has non-finite times", i.session)));
            }
            if items.insert(i.session, i).is_some() {
                return Err(StoreError::Corrupt("duplicate session".into()));
            }
        }
        let store = Store {
            reserve: state.mem_buffer_reserve.min(state.config.dram_capacity),
            avg_item: state.avg_item_bytes,
            saved_count: 0,
            saved_bytes: 0,
            cfg: state.config,
            items,
            mem_used: state.mem_used,
            disk_used: state.disk_used,
        };
        store.check_invariants()?;
        Ok(store)
    }

    pub fn from_json(text: &str) -> Result<Store, StoreError> {
        let state: StoreState = serde_json::from_str(text).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        Store::from_state(state)
    }
}
