#![no_main]
use libfuzzer_sys::fuzz_target;

use picpq::cost::baseline_bops;
use picpq::picplan::CompressionPlan;
use picpq::spec::NetworkSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = NetworkSpec::from_json(text) else { return };
    if spec.validate().is_ok() {
        let _ = spec.topology();
        let _ = baseline_bops(&spec);
        let _ = CompressionPlan::identity(&spec);
    }
});
