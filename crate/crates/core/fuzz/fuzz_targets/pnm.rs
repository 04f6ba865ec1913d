#![no_main]

use decoupled_distill::io::pnm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = pnm::decode_pgm(data) {
        assert_eq!(pnm::decode_pgm(&pnm::encode_pgm(&img)).unwrap(), img);
    }
    if let Ok(img) = pnm::decode_ppm(data) {
        let again = pnm::decode_ppm(&pnm::encode_ppm(&img)).unwrap();
        assert_eq!((again.height, again.width), (img.height, img.width));
    }
});
