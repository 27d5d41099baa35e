#![no_main]

use libfuzzer_sys::fuzz_target;
use molekit::systems::{decode_system, encode_system};

// Anything that decodes must survive an encode/decode roundtrip unchanged.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(sys) = decode_system(text, 1) {
        let again = decode_system(&encode_system(&sys), 1).expect("encoded system decodes");
        assert_eq!(again, sys);
    }
});
