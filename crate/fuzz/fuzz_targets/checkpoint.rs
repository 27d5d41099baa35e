#![no_main]

use libfuzzer_sys::fuzz_target;
use molekit::checkpoint::Checkpoint;

// Decoding is a fixed point: a decoded checkpoint re-encodes to bytes that
// decode to the same value.
fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode();
        assert_eq!(Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes"), ckpt);
    }
});
