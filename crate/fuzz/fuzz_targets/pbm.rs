#![no_main]

use libfuzzer_sys::fuzz_target;
use mvumi::pnm::{decode_pbm, encode_pbm};

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = decode_pbm(data) {
        assert_eq!(decode_pbm(&encode_pbm(&mask)).expect("canonical PBM decodes"), mask);
    }
});
