//! Replays the fuzz corpus seeds through the properties the fuzz targets
//! assert, so they run on the stable toolchain too.

use std::fs;
use std::path::PathBuf;

use xdecomp::dataset::DatasetConfig;
use xdecomp::formats::{
    decode_checkpoint, decode_pgm, decode_tensor, decode_volume, encode_checkpoint, encode_tensor, encode_volume,
};
use xdecomp::model::NetworkConfig;
use xdecomp::projection::TrajectoryConfig;
use xdecomp::trainer::TrainConfig;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn xdv1_seeds() {
    let mut decoded = 0;
    for (name, data) in seeds("xdv1") {
        if let Ok(v) = decode_volume(&data) {
            assert_eq!(encode_volume(&v).unwrap(), data, "{name}");
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn xdt1_seeds() {
    let mut decoded = 0;
    for (name, data) in seeds("xdt1") {
        if let Ok(t) = decode_tensor(&data) {
            assert_eq!(encode_tensor(&t).unwrap(), data, "{name}");
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn xdc1_seeds() {
    for (name, data) in seeds("xdc1") {
        match decode_checkpoint(&data) {
            Ok(m) => assert_eq!(decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap(), m, "{name}"),
            Err(e) => assert!(name.contains("version"), "{name}: {e}"),
        }
    }
}

#[test]
fn pgm_seeds() {
    let mut decoded = 0;
    for (name, data) in seeds("pgm") {
        if let Ok(p) = decode_pgm(&data) {
            assert_eq!(p.samples.len(), p.width * p.height, "{name}");
            assert!(p.samples.iter().all(|&s| s <= p.maxval), "{name}");
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn config_seeds_parse() {
    for (name, data) in seeds("configs") {
        let parsed = serde_json::from_slice::<TrainConfig>(&data).map(|c| c.validate().is_ok()).unwrap_or(false)
            || serde_json::from_slice::<NetworkConfig>(&data).map(|c| c.validate().is_ok()).unwrap_or(false)
            || serde_json::from_slice::<TrajectoryConfig>(&data).map(|c| c.poses().is_ok()).unwrap_or(false)
            || serde_json::from_slice::<DatasetConfig>(&data).is_ok();
        assert!(parsed, "{name} is not a valid config of any kind");
    }
}
