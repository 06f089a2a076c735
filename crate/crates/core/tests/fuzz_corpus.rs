//! Replays the fuzz seed corpus through the same entry points the fuzz
//! targets exercise. Every seed is a well-formed input except where noted.

use std::path::PathBuf;

use flow2flow::checkpoint::Checkpoint;
use flow2flow::config::Config;
use flow2flow::data::io::{decode_png, decode_ppm};
use flow2flow::data::{Manifest, RawBundle};
use flow2flow::reid::{evaluate, FeatureSet};
use flow2flow::trainer::MetricsRow;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn image_seeds_decode() {
    for (name, bytes) in seeds("ppm_decode") {
        decode_ppm(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("png_decode") {
        let img = decode_png(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(img.shape()[0], 3);
    }
}

#[test]
fn checkpoint_seeds() {
    for (name, bytes) in seeds("checkpoint_load") {
        let parsed = Checkpoint::from_bytes(&bytes);
        // `head.bin` is a bare header without payload or digest.
        assert_eq!(parsed.is_ok(), name != "head.bin", "{name}");
        if let Ok(ck) = parsed {
            assert!(ck.restore().is_err(), "{name} lacks model tensors");
        }
    }
}

#[test]
fn text_seeds_parse() {
    for (name, bytes) in seeds("config_parse") {
        Config::parse(&bytes)
            .and_then(|c| c.validate())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("manifest_parse") {
        Manifest::parse(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("features_parse") {
        let set = FeatureSet::parse(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        evaluate(&set.query, &set.gallery).unwrap();
    }
    for (name, bytes) in seeds("raw_bundle_parse") {
        RawBundle::parse(&bytes)
            .and_then(RawBundle::into_dataset)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("metrics_row_parse") {
        let line = String::from_utf8(bytes).unwrap();
        let row = MetricsRow::parse_csv(line.trim_end()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(row.to_csv(), line.trim_end());
    }
}

#[test]
fn mutated_seeds_never_panic() {
    for target in [
        "ppm_decode",
        "png_decode",
        "checkpoint_load",
        "manifest_parse",
        "raw_bundle_parse",
    ] {
        for (_, bytes) in seeds(target) {
            for cut in (0..bytes.len()).step_by(bytes.len().div_ceil(64).max(1)) {
                let mut b = bytes[..cut].to_vec();
                let _ = decode_ppm(&b);
                let _ = decode_png(&b);
                let _ = Checkpoint::from_bytes(&b);
                let _ = Manifest::parse(&b);
                let _ = RawBundle::parse(&b);
                if let Some(x) = b.get_mut(cut / 2) {
                    *x ^= 0x5a;
                }
                let _ = decode_ppm(&b);
                let _ = decode_png(&b);
                let _ = Checkpoint::from_bytes(&b);
            }
        }
    }
}
