#![no_main]

use cbmlab::dataset::{parse_csv, Metadata};
use libfuzzer_sys::fuzz_target;

// The first line, when it parses, is used as the metadata sidecar.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (head, body) = text.split_once('\n').unwrap_or(("", text));
    let meta = Metadata::from_json(head).ok();
    if let Ok(ds) = parse_csv(body, meta.as_ref()) {
        assert!(ds.validate().is_ok());
    }
    let _ = parse_csv(text, None);
});
