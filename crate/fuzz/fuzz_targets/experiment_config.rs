#![no_main]

use ccfg_cli::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = ExperimentConfig::parse(text) {
        let again = ExperimentConfig::parse(&c.to_toml().expect("serializes")).expect("reparses");
        assert_eq!(again, c);
    }
});
