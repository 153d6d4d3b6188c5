#![no_main]

//! Input: a little-endian u32 manifest length, the manifest text, then the
//! payload bytes.

use ccfg_core::grid::{check_payload_header, decode_record, Manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let n = u32::from_le_bytes([data[0], data[1], data[2], data[3]]) as usize;
    let rest = &data[4..];
    if n > rest.len() {
        return;
    }
    let (text, payload) = rest.split_at(n);
    let Ok(text) = std::str::from_utf8(text) else { return };
    let Ok(manifest) = Manifest::parse(text) else { return };
    if check_payload_header(payload).is_err() {
        return;
    }
    for i in 0..manifest.records.len().min(64) {
        let _ = decode_record(payload, &manifest, i);
    }
});
