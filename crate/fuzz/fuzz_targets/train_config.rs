#![no_main]

use libfuzzer_sys::fuzz_target;
use molekit::potential::PotentialModel;
use molekit::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = toml::from_str::<TrainConfig>(text) else { return };
    // A config that validates must build a model without panicking.
    if cfg.validate().is_ok() {
        let _ = PotentialModel::new(cfg.model, cfg.seed);
    }
});
