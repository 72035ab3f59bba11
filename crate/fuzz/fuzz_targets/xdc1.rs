#![no_main]

use libfuzzer_sys::fuzz_target;
use xdecomp::formats::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_checkpoint(data) {
        let again = encode_checkpoint(&m).unwrap();
        assert_eq!(decode_checkpoint(&again).unwrap(), m);
    }
});
