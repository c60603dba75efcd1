#![no_main]

use cavseg::pipeline::Checkpoint;
use libfuzzer_sys::fuzz_target;

// input layout: JSON metadata, a NUL byte, then the parameter blob
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(json) = std::str::from_utf8(&data[..split]) else { return };
    let blob = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(ckpt) = Checkpoint::decode(json, blob) {
        let (json2, blob2) = ckpt.encode();
        let again = Checkpoint::decode(&json2, &blob2).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), (json2, blob2));
    }
});
