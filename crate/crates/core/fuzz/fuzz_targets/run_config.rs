#![no_main]

use decoupled_distill::io::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        if cfg.validate().is_ok() {
            let again = RunConfig::parse(&cfg.to_text()).expect("rendered config parses");
            assert_eq!(again.to_text(), cfg.to_text());
        }
    }
});
