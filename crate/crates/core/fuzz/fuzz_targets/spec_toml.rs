#![no_main]

use libfuzzer_sys::fuzz_target;
use slabfpp::harness::ExperimentSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = ExperimentSpec::from_toml(text, None) {
            let _ = spec.hash();
        }
    }
});
