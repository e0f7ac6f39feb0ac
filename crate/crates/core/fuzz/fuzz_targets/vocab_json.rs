#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(v) = relcon::corpus::vocab::Vocab::from_json(text) {
            // A vocabulary that loads must survive a round trip.
            let again = relcon::corpus::vocab::Vocab::from_json(&v.to_json().unwrap()).unwrap();
            assert_eq!(v, again);
        }
    }
});
