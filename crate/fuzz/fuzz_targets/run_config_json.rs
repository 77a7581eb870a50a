#![no_main]
use std::path::Path;

use libfuzzer_sys::fuzz_target;
use trapforge_cli::config::parse_config;

fuzz_target!(|data: &[u8]| {
    let _ = parse_config(Path::new("fuzz.json"), data);
});
