#![no_main]

use libfuzzer_sys::fuzz_target;
use smoothlab::experiments::RunManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = RunManifest::parse(text) {
        let _ = RunManifest::parse(&m.to_text());
    }
});
