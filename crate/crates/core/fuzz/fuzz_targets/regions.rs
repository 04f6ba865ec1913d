#![no_main]

use decoupled_distill::io::regions;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = regions::parse(text) {
        assert_eq!(regions::parse(&regions::format(&r)).expect("formatted regions parse"), r);
    }
});
