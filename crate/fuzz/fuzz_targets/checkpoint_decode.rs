#![no_main]

use libfuzzer_sys::fuzz_target;
use mgmrn::trainer::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        // A decoded checkpoint must re-encode and rebuild without panicking.
        if let Ok(bytes) = ckpt.encode() {
            let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
            let _ = again.into_state();
        }
    }
});
