#![no_main]

use libfuzzer_sys::fuzz_target;
use sqgan_core::bitstream::{deserialize, serialize};

fuzz_target!(|data: &[u8]| {
    if let Ok((ix, is, header)) = deserialize(data) {
        let again = serialize(&ix, &is, &header).unwrap();
        assert_eq!(deserialize(&again).unwrap(), (ix, is, header));
    }
});
