#![no_main]

use ccfg_core::guidance::{parse_mask, SubsetWeights};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(w) = SubsetWeights::from_toml(text) {
        let sum: f64 = w.weights().iter().sum();
        assert!((sum - w.total()).abs() <= 1e-6 * w.total().max(1.0));
        let again = SubsetWeights::from_toml(&w.to_toml().expect("serializes")).expect("reparses");
        assert_eq!(again.subsets(), w.subsets());
    }
    for k in [1, 3, 8] {
        let _ = parse_mask(text, k);
    }
});
