#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // must reject or accept without panicking
        let _ = hetmoe::config::parse_config(text);
    }
});
