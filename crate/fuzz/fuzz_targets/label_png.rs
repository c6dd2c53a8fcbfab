#![no_main]

use libfuzzer_sys::fuzz_target;
use sqgan_core::semantic_map::LabelMap;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = LabelMap::decode_png(data) {
        assert_eq!(map.labels().len(), map.height() * map.width());
    }
});
