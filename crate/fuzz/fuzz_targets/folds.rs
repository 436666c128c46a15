#![no_main]

use libfuzzer_sys::fuzz_target;
use mammoclip::curation::FoldAssignment;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(f) = FoldAssignment::from_json(text) {
        let _ = FoldAssignment::from_json(&f.to_json()).expect("serialized folds parse");
    }
});
