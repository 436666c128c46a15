#![no_main]

use libfuzzer_sys::fuzz_target;
use mammoclip::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        let bytes = c.to_bytes().expect("loaded checkpoint serializes");
        let again = Checkpoint::from_bytes(&bytes).expect("round trip");
        assert_eq!(again.to_bytes().expect("serializes"), bytes);
    }
});
