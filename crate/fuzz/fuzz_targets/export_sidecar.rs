//! Input: sidecar JSON, a NUL byte, then the little-endian float32 payload.
#![no_main]

use libfuzzer_sys::fuzz_target;
use mgmrn::binio::decode_f32;
use mgmrn::export::{ArraySidecar, MapsSidecar};

fuzz_target!(|data: &[u8]| {
    let (head, payload) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    if let Ok(side) = ArraySidecar::parse(head) {
        if payload.len() == side.num_values().saturating_mul(4) {
            let values = decode_f32(payload).expect("payload of the declared size decodes");
            assert_eq!(values.len(), side.num_values());
        }
    }
    let _ = MapsSidecar::parse(head);
});
