#![no_main]
use libfuzzer_sys::fuzz_target;

use picpq::cost::model_cost;
use picpq::picplan::CompressionPlan;
use picpq::spec::desk_network;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let spec = desk_network(3);
    if let Ok(plan) = CompressionPlan::from_json(text, &spec) {
        let _ = model_cost(&spec, &plan);
        let again = CompressionPlan::from_json(&plan.to_json(), &spec).expect("plan round-trips");
        assert_eq!(again, plan);
    }
});
