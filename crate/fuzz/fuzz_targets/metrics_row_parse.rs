#![no_main]

use flow2flow::trainer::MetricsRow;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        let _ = MetricsRow::parse_csv(line);
    }
});
