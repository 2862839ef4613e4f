#![no_main]

use leo_ta::harness::config::{emit_config, parse_config};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(text) {
        let again = parse_config(&emit_config(&cfg)).expect("emitted config must parse");
        assert_eq!(again, cfg);
    }
});
