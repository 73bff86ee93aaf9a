//! Store and placement-policy invariants under random operation sequences.

use kvtier::policy::{apply_prefetch, plan_prefetch, JobQueue, PolicyConfig, PolicyKind, QueueEvictor};
use kvtier::store::{SessionId, Store, StoreConfig, Tier};
use proptest::prelude::*;

const BLOCK: u64 = 4096;

#[derive(Debug, Clone)]
enum Op {
    Save { id: u32, tokens: u64 },
    Lookup { id: u32 },
    Remove { id: u32 },
    Demote { id: u32 },
    Prefetch,
    Truncate { id: u32, keep_pct: u64 },
    Advance { dt: f64 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0u32..12, 1u64..64).prop_map(|(id, tokens)| Op::Save { id, tokens }),
        2 => (0u32..12).prop_map(|id| Op::Lookup { id }),
        1 => (0u32..12).prop_map(|id| Op::Remove { id }),
        1 => (0u32..12).prop_map(|id| Op::Demote { id }),
        1 => Just(Op::Prefetch),
        1 => (0u32..12, 0u64..=100).prop_map(|(id, keep_pct)| Op::Truncate { id, keep_pct }),
        1 => (0.0f64..30.0).prop_map(|dt| Op::Advance { dt }),
    ]
}

fn policy() -> impl Strategy<Value = PolicyConfig> {
    (
        prop_oneof![Just(PolicyKind::SchedulerAware), Just(PolicyKind::Lru), Just(PolicyKind::Fifo)],
        proptest::option::of(0usize..6),
        proptest::option::of(0usize..12),
    )
        .prop_map(|(kind, prefetch_window, eviction_window)| PolicyConfig { kind, prefetch_window, eviction_window })
}

fn store(mem_blocks: u64, disk_blocks: u64, ttl: Option<f64>, reserve_factor: f64) -> Store {
    Store::new(StoreConfig {
        dram_capacity: mem_blocks * BLOCK,
        disk_capacity: disk_blocks * BLOCK,
        block_size: BLOCK,
        kv_bytes_per_token: 1000,
        ttl,
        decoupled: true,
        reserve_factor,
        refresh_every: 3,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn capacities_and_accounting_hold(
        mem in 2u64..24,
        disk in 0u64..48,
        ttl in proptest::option::of(5.0f64..60.0),
        reserve in 0.0f64..2.0,
        cfg in policy(),
        queue in proptest::collection::vec(0u32..12, 0..10),
        ops in proptest::collection::vec(op(), 1..60),
    ) {
        let mut s = store(mem, disk, ttl, reserve);
        let q = JobQueue::from_sessions(&queue);
        let mut now = 0.0;
        for op in ops {
            match op {
                Op::Save { id, tokens } => {
                    let mut ev = QueueEvictor { queue: &q, cfg: &cfg };
                    let _ = s.save(SessionId(id), tokens, now, &mut ev);
                    prop_assert!(s.get(SessionId(id)).is_none_or(|i| i.tokens == tokens));
                }
                Op::Lookup { id } => {
                    let before = s.peek(SessionId(id), now);
                    let got = s.lookup(SessionId(id), now);
                    prop_assert_eq!(before.is_hit(), got.is_hit());
                }
                Op::Remove { id } => {
                    s.remove(SessionId(id));
                    prop_assert!(s.get(SessionId(id)).is_none());
                }
                Op::Demote { id } => {
                    let mut ev = QueueEvictor { queue: &q, cfg: &cfg };
                    let mut log = Vec::new();
                    if s.get(SessionId(id)).is_some_and(|i| i.tier == Tier::Memory && i.ready_at.is_none()) {
                        let _ = s.demote(SessionId(id), &mut ev, &mut log);
                    }
                }
                Op::Prefetch => {
                    let _ = apply_prefetch(&q, &mut s, &cfg, now, 1e6);
                }
                Op::Truncate { id, keep_pct } => {
                    if let Some(t) = s.get(SessionId(id)).map(|i| i.tokens) {
                        let _ = s.truncate_item(SessionId(id), t * keep_pct / 100);
                    }
                }
                Op::Advance { dt } => {
                    now += dt;
                    s.complete_promotions(now);
                }
            }
            prop_assert!(s.check_invariants().is_ok(), "{:?}", s.check_invariants());
            prop_assert!(s.mem_used() <= s.config().dram_capacity);
            prop_assert!(s.disk_used() <= s.config().disk_capacity);
            prop_assert!(s.items().all(|i| i.charged % BLOCK == 0 && i.charged >= i.bytes));
        }
        // snapshots survive a JSON round trip
        let back = Store::from_json(&s.to_json()).expect("dump reloads");
        prop_assert_eq!(back.snapshot(), s.snapshot());
    }

    #[test]
    fn expired_items_never_hit(ttl in 1.0f64..20.0, gap in 0.0f64..40.0) {
        let mut s = store(8, 8, Some(ttl), 0.0);
        let q = JobQueue::new();
        let cfg = PolicyConfig::default();
        s.save(SessionId(1), 3, 0.0, &mut QueueEvictor { queue: &q, cfg: &cfg }).unwrap();
        let hit = s.lookup(SessionId(1), gap).is_hit();
        prop_assert_eq!(hit, gap <= ttl);
    }

    #[test]
    fn prefetch_plan_stays_in_window_and_budget(
        cfg in policy(),
        queue in proptest::collection::vec(0u32..12, 0..12),
        on_disk in proptest::collection::vec(0u32..12, 0..8),
        in_mem in proptest::collection::vec(0u32..12, 0..4),
    ) {
        let mut s = store(6, 64, None, 0.0);
        let none = JobQueue::new();
        let fifo = PolicyConfig::new(PolicyKind::Fifo);
        for id in on_disk {
            let _ = s.save(SessionId(id), 4, 0.0, &mut QueueEvictor { queue: &none, cfg: &fifo });
            let _ = s.move_item(SessionId(id), Tier::Disk);
        }
        for id in in_mem {
            let _ = s.save(SessionId(id), 4, 0.0, &mut QueueEvictor { queue: &none, cfg: &fifo });
        }
        let q = JobQueue::from_sessions(&queue);
        let picks = plan_prefetch(&q, &s, &cfg);
        let (window, _) = cfg.windows(&s);
        let mut budget = s.mem_free();
        for id in &picks {
            let item = s.get(*id).unwrap();
            prop_assert_eq!(item.tier, Tier::Disk);
            prop_assert!(q.position(*id).unwrap() < window);
            prop_assert!(item.charged <= budget);
            budget -= item.charged;
        }
        if cfg.kind != PolicyKind::SchedulerAware {
            prop_assert!(picks.is_empty());
        }
    }
}
