#![no_main]

use flow2flow::data::io::{decode_png, encode_png};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png(data) {
        let again = decode_png(&encode_png(&img).expect("decoded images encode"))
            .expect("re-encoded image decodes");
        assert_eq!(img, again);
    }
});
