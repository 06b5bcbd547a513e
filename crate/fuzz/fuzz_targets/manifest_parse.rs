#![no_main]

use dataforge::manifest::{filter, parse_manifest, FilterConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_manifest(text) {
        for e in &entries {
            let _ = filter(e, &FilterConfig::default());
        }
    }
});
