#![no_main]

use dataforge::rvq::Codebooks;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cb) = Codebooks::from_bytes(data) {
        assert_eq!(cb.to_bytes(), data);
    }
});
