#![no_main]

use libfuzzer_sys::fuzz_target;
use xdecomp::dataset::DatasetConfig;
use xdecomp::model::NetworkConfig;
use xdecomp::projection::TrajectoryConfig;
use xdecomp::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = serde_json::from_slice::<TrainConfig>(data) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_slice::<NetworkConfig>(data) {
        if c.validate().is_ok() {
            let _ = c.param_shapes();
        }
    }
    if let Ok(c) = serde_json::from_slice::<TrajectoryConfig>(data) {
        if c.n_cranial.saturating_mul(c.n_lateral) <= 4096 {
            let _ = c.poses();
        }
    }
    if let Ok(c) = serde_json::from_slice::<DatasetConfig>(data) {
        for p in &c.phantoms {
            let _ = p.validate();
        }
    }
});
