#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::sampler::Sidecar;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = Sidecar::parse(text);
});
