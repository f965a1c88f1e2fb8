#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::image::decode_pnm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pnm(data) {
        assert_eq!(img.data().len(), img.height() * img.width() * img.channels());
    }
});
