#![no_main]

use ccfg_core::testbed::GaussianConditionalModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = GaussianConditionalModel::from_toml(text) {
        let _ = m.posterior(m.full_mask());
    }
});
