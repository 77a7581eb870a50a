#![no_main]
use libfuzzer_sys::fuzz_target;
use trapforge::voltage_solver::VoltageSet;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = VoltageSet::from_json(text) {
        let encoded = serde_json::to_string(&set).expect("sets serialize");
        assert_eq!(VoltageSet::from_json(&encoded).expect("re-encoded set parses"), set);
    }
});
