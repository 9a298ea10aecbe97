#![no_main]

use cbmlab::intervene::parse_budgets;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&k, rest)) = data.split_first() else { return };
    if let Ok(text) = std::str::from_utf8(rest) {
        if let Ok(b) = parse_budgets(text, usize::from(k)) {
            assert!(b.iter().all(|&x| x <= usize::from(k)));
        }
    }
});
