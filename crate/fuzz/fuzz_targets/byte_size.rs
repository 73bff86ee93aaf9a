#![no_main]

use kvtier::units::{format_bytes, parse_bandwidth, parse_bytes};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(b) = parse_bytes(text) {
        let again = parse_bytes(&format_bytes(b)).expect("formatted size parses");
        assert!(again.abs_diff(b) <= b / 1000 + 1);
    }
    if let Ok(bw) = parse_bandwidth(text) {
        assert!(bw > 0.0 && bw.is_finite());
    }
});
