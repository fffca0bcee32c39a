#![no_main]
use libfuzzer_sys::fuzz_target;

use picpq::container::{decode_state, decode_weights, encode_weights};

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = decode_weights(data) {
        // the format has one encoding per value, NaN payloads included
        let bytes = encode_weights(&entries).expect("decoded entries re-encode");
        assert_eq!(bytes, data);
    }
    let _ = decode_state(data);
});
