use md5::{Digest, Md5};

/// Scramble a user seed: first 8 bytes of MD5 over its decimal digits, read
/// as a little-endian integer.
pub fn mix_seed(seed: u64) -> u64 {
    let digest = Md5::digest(seed.to_string().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("md5 is 16 bytes"))
}
