#![no_main]

use libfuzzer_sys::fuzz_target;
use slabfpp::config::EdgeConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = EdgeConfig::parse_snapshot(data) {
        // Accepted snapshots are canonical.
        assert_eq!(cfg.to_snapshot(), data);
    }
});
