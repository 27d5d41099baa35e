#![no_main]

use libfuzzer_sys::fuzz_target;
use molekit::systems::{parse_systems, TaskRegistry};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let registry = TaskRegistry::new(["lj-a", "lj-b", "morse"]);
    if let Ok(systems) = parse_systems(text, &registry) {
        assert!(systems.iter().all(|s| registry.contains(&s.task)));
    }
});
