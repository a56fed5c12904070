#![no_main]

use libfuzzer_sys::fuzz_target;
use slabfpp::critical::PcEstimate;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(est) = PcEstimate::from_json(text) {
        let again = PcEstimate::from_json(&est.to_json()).unwrap();
        assert_eq!(again.to_json(), est.to_json());
    }
});
