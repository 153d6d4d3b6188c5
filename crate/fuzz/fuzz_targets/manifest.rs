#![no_main]

use ccfg_core::grid::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = Manifest::parse(text) {
            // anything accepted must survive a round trip
            let again = Manifest::parse(&m.to_toml().expect("serializes")).expect("reparses");
            assert_eq!(again, m);
        }
    }
});
