//! Closed-form checks for the overlap planner, trace round trips and unit parsing.

use kvtier::model::{builtin_profile, kv_size, prefill_time, preload_buffer_size, TierConfig};
use kvtier::overlap::{plan_async_save_batched, plan_preload, plan_sequential_load, plan_sync_save};
use kvtier::trace::{generate, parse_trace_str, to_jsonl, trace_stats, ArrivalModel, SyntheticSpec};
use kvtier::units::{format_bytes, parse_bytes, ByteSize, GIB, KIB, MIB, TIB};
use proptest::prelude::*;

fn profile() -> impl Strategy<Value = kvtier::ModelProfile> {
    prop::sample::select(vec!["llama-13b", "llama-65b", "llama-70b", "falcon-40b", "mistral-7b"])
        .prop_map(|n| builtin_profile(n).unwrap())
}

proptest! {
    #[test]
    fn preload_makespan_is_bounded(p in profile(), hist in 0u64..8192, new in 1u64..2048, buf_pct in 0u64..=150) {
        let t = TierConfig::default();
        let need = preload_buffer_size(hist, new, &p, &t);
        let buf = need * buf_pct / 100;
        let tl = plan_preload(hist, new, &p, &t, buf, true);
        let compute = prefill_time(new, &p);
        let load = kv_size(hist, &p) as f64 / t.pcie_bandwidth.0;
        let seq = plan_sequential_load(hist, new, &p, t.pcie_bandwidth.0);
        prop_assert!(tl.streams_ordered());
        prop_assert!((tl.compute_total() - compute).abs() <= 1e-9 * compute.max(1e-9));
        prop_assert!(tl.makespan + 1e-12 >= compute);
        prop_assert!(tl.makespan <= seq.makespan + 1e-12);
        prop_assert!((tl.makespan - compute - tl.stall_total).abs() <= 1e-9);
        // never better than the lower bound set by the unbuffered bytes
        let unbuffered = (kv_size(hist, &p) as f64 - buf as f64).max(0.0) / t.pcie_bandwidth.0;
        prop_assert!(tl.makespan + 1e-9 >= unbuffered.min(load));
        if buf >= need {
            prop_assert_eq!(tl.stall_total, 0.0);
        }
    }

    #[test]
    fn more_buffer_never_hurts(p in profile(), hist in 0u64..8192, new in 1u64..512, a in 0u64..(4 * GIB), b in 0u64..(4 * GIB)) {
        let t = TierConfig::default();
        let (lo, hi) = (a.min(b), a.max(b));
        let small = plan_preload(hist, new, &p, &t, lo, true);
        let big = plan_preload(hist, new, &p, &t, hi, true);
        prop_assert!(big.makespan <= small.makespan + 1e-12);
    }

    #[test]
    fn async_save_sits_between_compute_and_sync(
        p in profile(),
        prompt in 1u64..4096,
        steps in 0u32..64,
        per_step in 1u64..32,
        buffer in prop_oneof![Just(0u64), 0u64..(8 * GIB)],
    ) {
        let bw = TierConfig::default().pcie_bandwidth.0;
        let compute = prefill_time(prompt, &p) + f64::from(steps) * p.decode_seconds_per_step;
        let overlapped = plan_async_save_batched(prompt, steps, per_step, &p, bw, buffer);
        let sync = plan_sync_save(prompt, steps, per_step, &p, bw);
        prop_assert!(overlapped.makespan + 1e-12 >= compute);
        prop_assert!(overlapped.makespan <= sync.makespan + 1e-9);
        prop_assert!(overlapped.streams_ordered());
        let saved: f64 = overlapped.save_total() * bw;
        let produced = kv_size(prompt + u64::from(steps) * per_step, &p) as f64;
        prop_assert!((saved - produced).abs() <= 1e-6 * produced.max(1.0));
    }

    #[test]
    fn jsonl_round_trip_keeps_tokens(sessions in 1usize..40, seed in any::<u64>()) {
        let w = generate(&SyntheticSpec { sessions, ..SyntheticSpec::default() }, seed).unwrap();
        let back = parse_trace_str(&to_jsonl(&w), &ArrivalModel::default()).unwrap();
        prop_assert_eq!(back.sessions.len(), w.sessions.len());
        for (a, b) in w.sessions.iter().zip(&back.sessions) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(&a.turns, &b.turns);
        }
        prop_assert_eq!(trace_stats(&back).turns, trace_stats(&w).turns);
    }

    #[test]
    fn synthetic_arrivals_are_ordered(sessions in 1usize..60, seed in any::<u64>()) {
        let w = generate(&SyntheticSpec { sessions, ..SyntheticSpec::default() }, seed).unwrap();
        prop_assert_eq!(w.merged_arrivals.len(), w.total_turns());
        prop_assert!(w.merged_arrivals.windows(2).all(|x| x[0].time <= x[1].time));
        for s in &w.sessions {
            prop_assert_eq!(s.turns.len(), s.arrival_times.len());
            prop_assert!(s.arrival_times.windows(2).all(|x| x[0] <= x[1]));
        }
    }

    #[test]
    fn formatted_sizes_parse_back(bytes in any::<u64>().prop_map(|b| b >> 12)) {
        let unit = [TIB, GIB, MIB, KIB, 1].into_iter().find(|&u| bytes >= u).unwrap_or(1);
        let back = parse_bytes(&format_bytes(bytes)).unwrap();
        // three decimals of the chosen unit
        prop_assert!(back.abs_diff(bytes) <= unit / 2000 + 1, "{bytes} -> {} -> {back}", format_bytes(bytes));
    }

    #[test]
    fn byte_sizes_deserialize_from_both_forms(bytes in any::<u32>()) {
        let n: ByteSize = serde_json::from_str(&bytes.to_string()).unwrap();
        prop_assert_eq!(n.0, u64::from(bytes));
        let s: ByteSize = serde_json::from_str(&format!("\"{bytes}B\"")).unwrap();
        prop_assert_eq!(s.0, u64::from(bytes));
    }
}

#[test]
fn bad_sizes_are_rejected() {
    for bad in ["", "GB", "12 parsecs", "-3GB", "1e400GB", "nan"] {
        assert!(parse_bytes(bad).is_err(), "{bad}");
    }
}
