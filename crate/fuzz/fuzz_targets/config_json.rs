#![no_main]

use cavseg_cli::{ExperimentConfig, PhantomGenConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<ExperimentConfig>(data) {
        let _ = cfg.model.validate();
        let _ = cfg.sampler.validate();
        let _ = cfg.train.validate();
        if cfg.model.validate().is_ok() {
            let _ = cfg.inference.validate(cfg.model.size_divisor());
        }
    }
    if let Ok(cfg) = serde_json::from_slice::<PhantomGenConfig>(data) {
        let _ = cfg.phantom.validate();
    }
});
