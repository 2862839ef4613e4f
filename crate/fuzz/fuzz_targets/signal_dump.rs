#![no_main]

//! Input layout: sidecar header text, a NUL byte, then the binary payload.

use leo_ta::io::{decode_signal, emit_signal_header, encode_signal, parse_signal_header};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let (head, payload) = (&data[..split], data.get(split + 1..).unwrap_or(&[]));
    let Ok(text) = std::str::from_utf8(head) else { return };
    let Ok(header) = parse_signal_header(text) else { return };
    assert_eq!(parse_signal_header(&emit_signal_header(&header)).expect("emitted header must parse"), header);
    if let Ok(sig) = decode_signal(&header, payload) {
        let (h, bytes) = encode_signal(&sig);
        assert_eq!(h, header);
        assert_eq!(bytes, payload);
    }
});
