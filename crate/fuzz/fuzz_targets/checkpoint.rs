#![no_main]

//! Input: a little-endian u32 header length, the header text, then the
//! parameter payload.

use ccfg_core::denoiser::decode_checkpoint;
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
    let (header, payload) = rest.split_at(n);
    let Ok(header) = std::str::from_utf8(header) else { return };
    let _ = decode_checkpoint(header, payload);
});
