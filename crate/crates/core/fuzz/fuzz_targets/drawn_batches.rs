#![no_main]

use libfuzzer_sys::fuzz_target;
use streamtrain::trainer::{read_drawn_csv, TrainingLog};

fuzz_target!(|data: &[u8]| {
    if let Ok(batches) = read_drawn_csv(data) {
        let log = TrainingLog {
            drawn: batches.clone(),
            ..TrainingLog::default()
        };
        let mut out = Vec::new();
        log.write_drawn_csv(&mut out).unwrap();
        let again = read_drawn_csv(out.as_slice()).unwrap();
        assert_eq!(again.len(), batches.len());
    }
});
