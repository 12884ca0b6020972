#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenskill::report::RunManifest;

fuzz_target!(|data: &[u8]| {
    let _ = RunManifest::decode(data);
});
