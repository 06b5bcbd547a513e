#![no_main]

use dataforge::shard::{decode_shard, encode_shard};
use dataforge::VocabLayout;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let layout = VocabLayout::build(258).unwrap();
    if let Ok(shard) = decode_shard(data, &layout) {
        let bytes = encode_shard(&shard.records, shard.window, &layout).unwrap();
        assert_eq!(decode_shard(&bytes, &layout).unwrap(), shard);
    }
});
