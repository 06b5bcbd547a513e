#![no_main]

use dataforge::mix::SchedulerState;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(mut s) = SchedulerState::from_json(text) {
        for _ in 0..64 {
            s.next_source();
        }
    }
});
