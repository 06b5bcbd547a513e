#![no_main]

use dataforge::pipeline::detokenize;
use dataforge::text::ByteTokenizer;
use dataforge::VocabLayout;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let layout = VocabLayout::build(258).unwrap();
    let ids: Vec<u32> = data.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32 % 12_560).collect();
    let _ = detokenize(&ids, &layout, &ByteTokenizer);
});
