#![no_main]

use decoupled_distill::io::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(enc) = checkpoint::decode(data) {
        let bytes = checkpoint::encode(&enc);
        let again = checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(checkpoint::encode(&again), bytes);
    }
});
