#![no_main]

use flow2flow::reid::{evaluate, FeatureSet};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = FeatureSet::parse(data) {
        if let Ok(r) = evaluate(&set.query, &set.gallery) {
            assert!((0.0..=1.0).contains(&r.rank1) && (0.0..=1.0).contains(&r.map));
        }
    }
});
