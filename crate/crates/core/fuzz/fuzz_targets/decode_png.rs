#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::image::decode_png;

fuzz_target!(|data: &[u8]| {
    let _ = decode_png(data);
});
