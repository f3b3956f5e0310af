#![no_main]

use libfuzzer_sys::fuzz_target;
use streamtrain::nn::Mlp;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = Mlp::from_checkpoint(data) {
        assert_eq!(model.to_checkpoint(), data);
    }
});
