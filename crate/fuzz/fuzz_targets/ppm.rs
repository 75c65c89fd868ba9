#![no_main]

use libfuzzer_sys::fuzz_target;
use mvumi::pnm::{decode_ppm, encode_ppm};
use mvumi::types::ViewRole;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = decode_ppm(data, 0, ViewRole::ThirdHuman) {
        // Anything that decodes re-encodes to a canonical file that decodes identically.
        let again = decode_ppm(&encode_ppm(&frame), 0, ViewRole::ThirdHuman).expect("canonical PPM decodes");
        assert_eq!(again, frame);
    }
});
