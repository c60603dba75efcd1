#![no_main]

use cavseg::evalstat::{parse_metrics_csv, write_metrics_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_metrics_csv(text) {
        let written = write_metrics_csv(&records);
        let back = parse_metrics_csv(&written).expect("written metrics parse");
        assert_eq!(write_metrics_csv(&back), written);
    }
});
