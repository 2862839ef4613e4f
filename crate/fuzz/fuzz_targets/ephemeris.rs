#![no_main]

use leo_ta::io::{read_ephemeris, write_ephemeris};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(sats) = read_ephemeris(data) {
        let mut buf = Vec::new();
        write_ephemeris(&mut buf, &sats).expect("write to memory");
        assert_eq!(read_ephemeris(buf.as_slice()).expect("written table must parse"), sats);
    }
});
