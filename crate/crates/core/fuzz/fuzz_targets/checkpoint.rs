#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = relcon::tensor::Checkpoint::from_bytes(data) {
        let _ = relcon::training::load_model(&ck);
        let _ = relcon::training::Trainer::restore(&ck);
    }
});
