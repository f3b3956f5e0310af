#![no_main]

use libfuzzer_sys::fuzz_target;
use streamtrain::lorenz::Standardization;

fuzz_target!(|data: &[u8]| {
    if let Ok(stats) = Standardization::from_bytes(data) {
        assert_eq!(Standardization::parse(&stats.to_csv()).unwrap(), stats);
    }
});
