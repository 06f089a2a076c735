#![no_main]

use flow2flow::data::RawBundle;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(b) = RawBundle::parse(data) {
        b.into_dataset().expect("validated bundles convert");
    }
});
