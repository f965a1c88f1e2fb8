#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::cli::parse_rpe_dump;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_rpe_dump(text);
});
