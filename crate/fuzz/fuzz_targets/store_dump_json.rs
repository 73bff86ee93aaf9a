#![no_main]

use kvtier::store::Store;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(store) = Store::from_json(text) else { return };
    // loading validates; an accepted dump is consistent and stable
    store.check_invariants().expect("loaded store is consistent");
    let again = Store::from_json(&store.to_json()).expect("dump reloads");
    assert_eq!(again.snapshot(), store.snapshot());
});
