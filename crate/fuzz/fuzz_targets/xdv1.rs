#![no_main]

use libfuzzer_sys::fuzz_target;
use xdecomp::formats::{decode_volume, encode_volume};

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = decode_volume(data) {
        assert_eq!(encode_volume(&v).unwrap(), data);
    }
});
