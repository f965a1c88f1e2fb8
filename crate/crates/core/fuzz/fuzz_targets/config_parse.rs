#![no_main]

use libfuzzer_sys::fuzz_target;
use outpaint_core::config::KvMap;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KvMap::parse(text) {
        // rendering is canonical
        let again = KvMap::parse(&kv.render()).expect("rendered config parses");
        assert_eq!(again.render(), kv.render());
    }
});
