#![no_main]

use kvtier::experiment::{ConfigFile, ExperimentSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ConfigFile::parse(text) else { return };
    let Ok(spec) = cfg.resolve() else { return };
    // a resolved spec is valid and its snapshot reloads to the same hash
    let back = ExperimentSpec::from_toml(&spec.to_toml()).expect("snapshot reloads");
    assert_eq!(back.hash(), spec.hash());
});
