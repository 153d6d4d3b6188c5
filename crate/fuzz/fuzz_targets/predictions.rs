#![no_main]

use ccfg_cli::io::PredictionFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(f) = PredictionFile::parse(text) {
        assert_eq!(PredictionFile::parse(&f.to_text()).expect("reparses"), f);
    }
});
