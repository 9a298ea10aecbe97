#![no_main]

use cbmlab::dataset::Metadata;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = Metadata::from_json(text);
    }
});
