#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenskill::config::parse_order;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(order) = parse_order(text) {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert!(sorted.iter().enumerate().all(|(i, &t)| i == t));
        }
    }
});
