#![no_main]

use flow2flow::data::io::{decode_ppm, encode_ppm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_ppm(data) {
        let again = decode_ppm(&encode_ppm(&img).expect("decoded images encode"))
            .expect("re-encoded image decodes");
        assert_eq!(img, again);
    }
});
