#![no_main]

use decoupled_distill::io::bank;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(b) = bank::parse(text) {
        let again = bank::parse(&bank::format(&b)).expect("formatted bank parses");
        assert_eq!(again.names(), b.names());
    }
});
