#![no_main]
use libfuzzer_sys::fuzz_target;

use picpq::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = PipelineConfig::from_json(text, std::path::Path::new("/fuzz")) {
        let _ = config.validate();
        let _ = config.effective_search();
    }
});
