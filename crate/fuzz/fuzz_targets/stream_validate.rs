#![no_main]

use dataforge::grammar::{validate_stream, GrammarOptions, StreamValidator};
use dataforge::VocabLayout;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let layout = VocabLayout::build(258).unwrap();
    let Some((&flag, rest)) = data.split_first() else { return };
    let opts = GrammarOptions { alternating_speech: flag & 1 == 1 };
    let ids: Vec<u32> = rest.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32 % 12_560).collect();
    let batch = validate_stream(&ids, &layout, opts);
    let mut v = StreamValidator::new(&layout, opts);
    for &id in &ids {
        v.push(id);
    }
    assert_eq!(v.finish(), batch);
});
