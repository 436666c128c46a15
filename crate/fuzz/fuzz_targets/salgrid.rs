#![no_main]

use libfuzzer_sys::fuzz_target;
use mammoclip::saliency::{decode_grid, encode_grid};

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = decode_grid(data) {
        assert_eq!(decode_grid(&encode_grid(&g)).expect("round trip"), g);
    }
});
