#![no_main]

use kvtier::trace::{parse_trace_str, to_jsonl, ArrivalModel};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(w) = parse_trace_str(text, &ArrivalModel::default()) else { return };
    // whatever parses must survive a round trip unchanged
    let back = parse_trace_str(&to_jsonl(&w), &ArrivalModel::default()).expect("re-parse");
    assert_eq!(back.sessions.len(), w.sessions.len());
    for (a, b) in w.sessions.iter().zip(&back.sessions) {
        assert_eq!(a.turns, b.turns);
    }
});
