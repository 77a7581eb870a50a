#![no_main]
use libfuzzer_sys::fuzz_target;
use trapforge::geometry::{build_symmetric_trap, TrapParams};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(params) = TrapParams::from_json(text) {
        // accepted parameters must always build
        if params.n_segments_per_side <= 64 {
            build_symmetric_trap(&params).expect("validated params build");
        }
    }
});
