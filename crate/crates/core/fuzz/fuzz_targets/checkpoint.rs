#![no_main]

use libfuzzer_sys::fuzz_target;
use smoothlab::network::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = decode_checkpoint(data) {
        let again = decode_checkpoint(&encode_checkpoint(&net)).expect("re-encoded checkpoint decodes");
        assert_eq!(again.step, net.step);
        assert_eq!(again.specs(), net.specs());
    }
});
