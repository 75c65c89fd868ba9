#![no_main]

use libfuzzer_sys::fuzz_target;
use mvumi::policy::PolicyParams;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = PolicyParams::from_bytes(data) {
        assert_eq!(params.to_bytes(), data);
    }
});
