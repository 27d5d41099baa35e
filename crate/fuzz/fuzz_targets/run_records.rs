#![no_main]

use libfuzzer_sys::fuzz_target;
use molekit::scaling::parse_records;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = parse_records(data) {
        for (i, r) in records.iter().enumerate() {
            r.validate(i + 2).expect("parsed records are valid");
        }
    }
});
