#![no_main]

libfuzzer_sys::fuzz_target!(|data: &[u8]| dreamview_fuzz::config(data));
