#![no_main]
use libfuzzer_sys::fuzz_target;

use picpq::picplan::{default_floors, derive_masks, importance, AbVector, Currency};
use picpq::quantize::default_schedule;
use picpq::rankfp::FilterPropertyTable;
use picpq::spec::desk_network;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(ab) = AbVector::from_json(text) else { return };
    let spec = desk_network(3);
    if ab.check(&spec).is_err() {
        return;
    }
    let fp = FilterPropertyTable {
        values: spec
            .prunable_ids()
            .into_iter()
            .map(|id| (id, (0..spec.layer(id).unwrap().out_units().unwrap()).map(|i| (i % 7) as f64).collect()))
            .collect(),
        sample_count: 1,
        tolerance: 1e-6,
    };
    if let Ok(imp) = importance(&fp, &ab) {
        let schedule = default_schedule(&spec, 8, 2).unwrap();
        let _ = derive_masks(&imp, &spec, &schedule, 10.0, &default_floors(&spec), Currency::Joint);
    }
});
