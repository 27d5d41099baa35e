#![no_main]

use libfuzzer_sys::fuzz_target;
use molekit::systems::ElementTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = ElementTable::from_toml(text) {
        assert!(table.entries.values().all(|e| e.hof.is_finite()));
    }
});
