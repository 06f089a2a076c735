#![no_main]

use flow2flow::config::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Config::parse(data) {
        let _ = c.validate();
    }
});
