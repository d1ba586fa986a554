#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ckpt) = hetmoe::checkpoint::Checkpoint::parse(text) {
            // accepted checkpoints must also serialize back without panicking
            let _ = ckpt.to_json();
        }
    }
});
