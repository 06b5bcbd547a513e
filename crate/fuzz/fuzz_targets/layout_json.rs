#![no_main]

use dataforge::VocabLayout;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(layout) = VocabLayout::from_json(text) {
        assert_eq!(VocabLayout::from_json(&layout.to_json()).unwrap(), layout);
    }
});
