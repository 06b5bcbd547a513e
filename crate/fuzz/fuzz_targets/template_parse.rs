#![no_main]

use dataforge::templates::{Template, TemplateSet};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = Template::parse(text) {
        assert_eq!(t.source(), text);
    }
    let _ = TemplateSet::from_json(text);
});
