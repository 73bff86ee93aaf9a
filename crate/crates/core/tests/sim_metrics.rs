//! Engine and metrics invariants on small random workloads.

use std::collections::HashMap;

use kvtier::metrics::{compute, PriceTable};
use kvtier::model::builtin_profile;
use kvtier::policy::{PolicyConfig, PolicyKind};
use kvtier::sim::{run, Mode, SimConfig};
use kvtier::store::HitClass;
use kvtier::trace::{generate, SyntheticSpec, ThinkDist, TokenDist, TurnDist};
use kvtier::units::{ByteSize, GIB, TIB};
use kvtier::Workload;
use proptest::prelude::*;

fn workload() -> impl Strategy<Value = Workload> {
    (3usize..30, 0.05f64..2.0, 1.0f64..60.0, 20.0f64..400.0, any::<u64>()).prop_map(
        |(sessions, rate, think, input_median, seed)| {
            let spec = SyntheticSpec {
                sessions,
                rate,
                turns: TurnDist::ShareGpt { single_turn: 0.2, extra_mean: 3.0, max_turns: 12 },
                tokens: TokenDist { input_median, ..TokenDist::default() },
                think: ThinkDist::Exponential { mean: think },
            };
            generate(&spec, seed).expect("valid spec")
        },
    )
}

fn config() -> impl Strategy<Value = SimConfig> {
    (
        prop::sample::select(vec!["llama-13b", "llama-65b", "llama-70b", "falcon-40b"]),
        prop::sample::select(Mode::ALL.to_vec()),
        prop::sample::select(vec![PolicyKind::SchedulerAware, PolicyKind::Lru, PolicyKind::Fifo]),
        1u64..32,
        0u64..128,
        1u32..32,
        0usize..10,
        proptest::option::of(10.0f64..600.0),
        any::<bool>(),
    )
        .prop_map(|(profile, mode, kind, dram_gib, disk_gib, batch, warmup, ttl, contention)| {
            let mut c = SimConfig::new(builtin_profile(profile).unwrap(), mode);
            c.policy = PolicyConfig::new(kind);
            c.tiers.dram_capacity = ByteSize(dram_gib * GIB);
            c.tiers.disk_capacity = ByteSize(disk_gib * GIB);
            c.tiers.hbm_cache = ByteSize(dram_gib * GIB / 4);
            c.batch_size = batch;
            c.warmup_turns = warmup;
            c.ttl = ttl;
            c.link_contention = contention;
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_turn_completes_in_order(w in workload(), cfg in config()) {
        let log = run(&w, &cfg).expect("simulation runs");
        prop_assert!(log.unfinished.is_empty());
        prop_assert_eq!(log.records.len(), w.total_turns());
        let mut last_done: HashMap<&str, (usize, f64)> = HashMap::new();
        let mut recs: Vec<_> = log.records.iter().collect();
        recs.sort_by(|a, b| a.session.cmp(&b.session).then(a.turn.cmp(&b.turn)));
        for r in recs {
            prop_assert!(r.arrival <= r.dispatch && r.dispatch <= r.first_token && r.first_token <= r.done, "{r:?}");
            prop_assert!(r.ttft_s >= 0.0 && r.stall_s >= 0.0 && r.stall_s <= r.ttft_s + 1e-12);
            if r.first_turn {
                prop_assert_eq!(r.hit_class, HitClass::Miss);
                prop_assert_eq!(r.hist_tokens, 0);
            }
            if cfg.mode == Mode::Recompute {
                prop_assert!(!r.hit_class.is_hit());
                prop_assert_eq!(r.bytes_loaded, 0);
            }
            prop_assert!(r.prompt_tokens() <= u64::from(cfg.profile.context_window));
            if let Some(&(turn, done)) = last_done.get(r.session.as_str()) {
                prop_assert_eq!(r.turn, turn + 1);
                prop_assert!(r.arrival >= done);
            }
            last_done.insert(&r.session, (r.turn, r.done));
        }
        prop_assert!(log.stats.busy_time <= log.stats.wall_time + 1e-9);
    }

    #[test]
    fn metrics_are_consistent(w in workload(), cfg in config()) {
        let log = run(&w, &cfg).expect("simulation runs");
        let Ok(m) = compute(&log, &cfg, &PriceTable::default()) else {
            // warm-up swallowed every turn
            prop_assert!(log.records.iter().all(|r| !r.warm));
            return Ok(());
        };
        prop_assert!(m.mem_hits + m.disk_hits <= m.reuse_turns);
        if m.reuse_turns > 0 {
            let rate = (m.mem_hits + m.disk_hits) as f64 / m.reuse_turns as f64;
            prop_assert!((m.overall_hit_rate - rate).abs() < 1e-12);
            prop_assert!((m.overall_hit_rate - m.mem_hit_rate - m.disk_hit_rate).abs() < 1e-12);
        }
        prop_assert!(m.p50_ttft <= m.p99_ttft);
        prop_assert!(m.mean_ttft <= m.mean_arrival_to_first_token + 1e-9);
        prop_assert!((m.cost_breakdown.total() - m.cost_usd).abs() <= 1e-9 * m.cost_usd.max(1.0));
        prop_assert!((0.0..=1.0).contains(&m.storage_cost_share));
        if cfg.mode == Mode::Recompute {
            prop_assert_eq!(m.storage_cost_share, 0.0);
        }
    }

    #[test]
    fn runs_are_deterministic(w in workload(), cfg in config()) {
        let a = run(&w, &cfg).expect("simulation runs");
        let b = run(&w, &cfg).expect("simulation runs");
        prop_assert_eq!(a.records, b.records);
    }

    #[test]
    fn roomy_tiers_hit_every_reuse_turn(w in workload(), profile in prop::sample::select(vec!["llama-13b", "llama-70b"])) {
        let mut cfg = SimConfig::new(builtin_profile(profile).unwrap(), Mode::CachedReuse);
        cfg.tiers.dram_capacity = ByteSize(4 * TIB);
        cfg.warmup_turns = 0;
        let log = run(&w, &cfg).expect("simulation runs");
        for r in log.records.iter().filter(|r| !r.first_turn) {
            prop_assert_eq!(r.hit_class, HitClass::MemoryHit);
        }
    }
}
