#![no_main]

use cavseg::volgrid::nifti::{decode_nifti, encode_nifti};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(vol) = decode_nifti(data) else { return };
    // whatever decodes must survive a float32 round trip unchanged
    let bytes = encode_nifti(&vol).expect("decoded volume re-encodes");
    let back = decode_nifti(&bytes).expect("encoded volume decodes");
    assert_eq!(back.dims(), vol.dims());
    assert!(back.values().iter().zip(vol.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
});
