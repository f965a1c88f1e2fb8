#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::position::CropRegion;
use outpaint_core::sampler::{Placement, Trajectory};
use outpaint_core::trainer::CropMode;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(r) = s.parse::<CropRegion>() {
        assert_eq!(r.to_string().parse::<CropRegion>().unwrap(), r);
    }
    if let Ok(p) = s.parse::<Placement>() {
        assert_eq!(p.to_string().parse::<Placement>().unwrap(), p);
    }
    let _ = s.parse::<Trajectory>();
    let _ = s.parse::<CropMode>();
});
