#![no_main]

use libfuzzer_sys::fuzz_target;
use streamtrain::datasets::OfflineDataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = OfflineDataset::from_cache_bytes(data) {
        assert_eq!(ds.to_cache_bytes(), data);
    }
});
