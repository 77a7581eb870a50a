#![no_main]
use libfuzzer_sys::fuzz_target;
use sha2::{Digest, Sha256};
use trapforge::electrostatics::cache::{decode, encode};

fuzz_target!(|data: &[u8]| {
    let _ = decode(data);

    // Seal the input with a valid digest so the record parser is reached.
    let mut sealed = data.to_vec();
    sealed.extend_from_slice(&Sha256::digest(data));
    if let Ok(contents) = decode(&sealed) {
        let bytes = encode(&contents);
        let again = decode(&bytes).expect("encoded contents decode");
        assert_eq!(encode(&again), bytes);
    }
});
