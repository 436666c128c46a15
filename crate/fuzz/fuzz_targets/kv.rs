#![no_main]

use libfuzzer_sys::fuzz_target;
use mammoclip::kv::KvFile;
use mammoclip::training::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KvFile::parse(text) {
        let again = KvFile::parse(&kv.to_string()).expect("printed kv parses");
        assert!(again.entries().eq(kv.entries()));
        let _ = TrainConfig::from_kv(&kv);
    }
});
