#![no_main]

use libfuzzer_sys::fuzz_target;
use molekit::data::SamplingPlan;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = text.parse::<SamplingPlan>() {
        assert!(plan.total() > 0);
        assert!(plan.ratios.iter().all(|(_, r)| *r > 0));
    }
});
