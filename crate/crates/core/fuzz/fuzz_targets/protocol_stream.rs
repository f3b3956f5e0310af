#![no_main]

use libfuzzer_sys::fuzz_target;
use streamtrain::protocol::{decode_stream, encode, pair_steps, read_frame};

fuzz_target!(|data: &[u8]| {
    let mut reader = data;
    while let Ok(Some(_)) = read_frame(&mut reader) {}
    if let Ok(msgs) = decode_stream(data) {
        let again: Vec<u8> = msgs.iter().flat_map(encode).collect();
        assert_eq!(decode_stream(&again).unwrap(), msgs);
        let _ = pair_steps(msgs);
    }
});
