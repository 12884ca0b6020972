#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenskill::demofile::decode_demo_file;

fuzz_target!(|data: &[u8]| {
    let _ = decode_demo_file(data);
});
