#![no_main]
use libfuzzer_sys::fuzz_target;

use picpq::picplan::{importance, AbVector};
use picpq::rankfp::FilterPropertyTable;
use picpq::spec::desk_network;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(table) = FilterPropertyTable::from_json(text) else { return };
    let spec = desk_network(3);
    if table.check(&spec).is_ok() {
        let _ = table.range();
        let _ = importance(&table, &AbVector::identity(&spec));
    }
});
