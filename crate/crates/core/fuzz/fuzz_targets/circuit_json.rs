#![no_main]

use libfuzzer_sys::fuzz_target;
use slabfpp::circuits::Circuit;
use slabfpp::lattice::SlabLattice;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for k in [0, 1] {
        let lat = SlabLattice::new(4, k).unwrap();
        if let Ok(c) = Circuit::from_json(&lat, text) {
            let again = Circuit::from_json(&lat, &c.to_json()).unwrap();
            assert_eq!(again, c);
        }
    }
});
