#![no_main]

use cbmlab::model::CbmModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = CbmModel::from_json(text) {
        let again = CbmModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(model, again);
    }
});
