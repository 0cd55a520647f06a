//! Content hashing. Output files are identified by MD5 throughout, so the
//! digest lives next to the bytes wherever file content is handled.

use md5::{Digest, Md5};

/// MD5 of `data` as 32 lowercase hex characters.
pub fn md5_hex(data: &[u8]) -> String {
    let digest = Md5::digest(data);
    let mut out = String::with_capacity(32);
    for byte in digest {
        use std::fmt::Write;
        write!(out, "{byte:02x}").expect("writing to a String cannot fail");
    }
    out
}
