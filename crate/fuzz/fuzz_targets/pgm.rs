#![no_main]

use libfuzzer_sys::fuzz_target;
use xdecomp::formats::{decode_pgm, image_from_pgm, PgmSidecar};
use xdecomp::projection::Label;

fuzz_target!(|data: &[u8]| {
    if let Ok(pgm) = decode_pgm(data) {
        assert_eq!(pgm.samples.len(), pgm.width * pgm.height);
        assert!(pgm.samples.iter().all(|&s| s <= pgm.maxval));
        let sidecar = PgmSidecar { min: 0.0, max: 1.0, pose: None };
        let img = image_from_pgm(&pgm, &sidecar, Label::Total).unwrap();
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
