#![no_main]

use libfuzzer_sys::fuzz_target;
use mammoclip::image_io::decode_png;
use mammoclip::pipeline::prepare_image;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = decode_png(data) {
        if g.height() * g.width() <= 1 << 20 {
            let _ = prepare_image(&g);
        }
    }
});
