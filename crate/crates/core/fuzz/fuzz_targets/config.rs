#![no_main]

use chunkserve::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::parse(text, "fuzz", None) {
        let again = ExperimentConfig::parse(&cfg.to_config_string(), "fuzz", None).expect("serialized config reparses");
        assert_eq!(cfg, again);
    }
});
