//! TOML model-config ingestion must never panic; accepted models must
//! agree with their JSON round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mfg_lqg::model::{load_model, serialize_model, ConfigFormat};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = load_model(text, ConfigFormat::Toml) {
        let reloaded = load_model(&serialize_model(&spec), ConfigFormat::Json)
            .expect("accepted model must re-load as JSON");
        assert_eq!(spec, reloaded);
    }
});
