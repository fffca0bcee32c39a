#![no_main]
use libfuzzer_sys::fuzz_target;

use picpq::evosearch::{history_from_jsonl, history_to_jsonl};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = history_from_jsonl(text) {
        let again = history_from_jsonl(&history_to_jsonl(&records)).expect("history round-trips");
        assert_eq!(again.len(), records.len());
    }
});
