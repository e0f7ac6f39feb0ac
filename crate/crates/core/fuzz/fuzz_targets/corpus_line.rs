#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = relcon::corpus::instance::parse_corpus_line(text, 1);
        let _ = relcon::corpus::instance::parse_corpus(text);
    }
});
