//! Block hashing and the proof-of-work nonce search.

use sha2::{Digest, Sha256};

use super::LedgerError;

pub const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

/// Highest difficulty accepted by configuration.
pub const MAX_DIFFICULTY: u32 = 6;

fn header_prefix(index: u64, timestamp_ms: u64, payload_b64: &str, prev_hash: &str) -> Sha256 {
    let mut h = Sha256::new();
    h.update(index.to_string().as_bytes());
    h.update(b"|");
    h.update(timestamp_ms.to_string().as_bytes());
    h.update(b"|");
    h.update(payload_b64.as_bytes());
    h.update(b"|");
    h.update(prev_hash.as_bytes());
    h.update(b"|");
    h
}

/// SHA-256 over `<index>|<timestamp_ms>|<payload_b64>|<prev_hash>|<nonce>`,
/// rendered as 64 lowercase hex characters.
pub fn compute_hash(index: u64, timestamp_ms: u64, payload_b64: &str, prev_hash: &str, nonce: u64) -> String {
    let mut h = header_prefix(index, timestamp_ms, payload_b64, prev_hash);
    h.update(nonce.to_string().as_bytes());
    hex::encode(h.finalize())
}

/// Number of leading `'0'` hex digits in a raw digest.
pub fn leading_zero_nibbles(digest: &[u8]) -> u32 {
    let mut n = 0;
    for byte in digest {
        if *byte == 0 {
            n += 2;
            continue;
        }
        if byte >> 4 == 0 {
            n += 1;
        }
        break;
    }
    n
}

pub fn meets_difficulty(hash_hex: &str, difficulty: u32) -> bool {
    hash_hex.len() >= difficulty as usize && hash_hex.bytes().take(difficulty as usize).all(|c| c == b'0')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mined {
    pub nonce: u64,
    pub hash: String,
    pub attempts: u64,
}

/// Scans nonces upward from 0 and returns the first whose hash carries at
/// least `difficulty` leading zero hex digits.
///
/// The header prefix is absorbed once and the hasher state cloned per nonce,
/// so each attempt costs only the final block compressions.
pub fn mine(
    index: u64,
    timestamp_ms: u64,
    payload_b64: &str,
    prev_hash: &str,
    difficulty: u32,
    max_attempts: Option<u64>,
) -> Result<Mined, LedgerError> {
    let prefix = header_prefix(index, timestamp_ms, payload_b64, prev_hash);
    let cap = max_attempts.unwrap_or(u64::MAX);
    let mut buf = itoa_buf();
    for nonce in 0..cap {
        let mut h = prefix.clone();
        h.update(fmt_u64(nonce, &mut buf));
        let digest = h.finalize();
        if leading_zero_nibbles(digest.as_slice()) >= difficulty {
            return Ok(Mined {
                nonce,
                hash: hex::encode(digest),
                attempts: nonce + 1,
            });
        }
    }
    Err(LedgerError::MiningExhausted { attempts: cap })
}

fn itoa_buf() -> [u8; 20] {
    [0; 20]
}

fn fmt_u64(mut v: u64, buf: &mut [u8; 20]) -> &[u8] {
    let mut i = buf.len();
    loop {
        i -= 1;
        buf[i] = b'0' + (v % 10) as u8;
        v /= 10;
        if v == 0 {
            break;
        }
    }
    &buf[i..]
}

#[cfg(test)]
mod tests {
    use super::*;

    // sha256sum over the exact string "0|0||" + 64*'0' + "|0" (coreutils and
    // Python hashlib agree).
    const GENESIS_HEADER_DIGEST: &str = "fa39680f82b19516988469b266ecc02061b88932fabecaffb3a0d2f4b1cb1d63";

    #[test]
    fn digest_matches_independent_tool() {
        assert_eq!(compute_hash(0, 0, "", ZERO_HASH, 0), GENESIS_HEADER_DIGEST);
    }

    #[test]
    fn nonce_and_payload_change_digest() {
        let a = compute_hash(0, 0, "", ZERO_HASH, 0);
        assert_ne!(a, compute_hash(0, 0, "", ZERO_HASH, 1));
        assert_ne!(
            compute_hash(3, 9, "aGVsbG8=", ZERO_HASH, 0),
            compute_hash(3, 9, "aGVsbG9=", ZERO_HASH, 0)
        );
        assert_eq!(a.len(), 64);
        assert!(a.bytes().all(|c| c.is_ascii_digit() || (b'a'..=b'f').contains(&c)));
    }

    #[test]
    fn difficulty_zero_takes_nonce_zero() {
        let m = mine(1, 5, "eA==", ZERO_HASH, 0, None).unwrap();
        assert_eq!(m.nonce, 0);
        assert_eq!(m.hash, compute_hash(1, 5, "eA==", ZERO_HASH, 0));
    }

    #[test]
    fn mined_nonce_matches_linear_scan() {
        for d in 1..=2 {
            let oracle = (0u64..)
                .find(|n| meets_difficulty(&compute_hash(7, 1234, "cGF5bG9hZA==", ZERO_HASH, *n), d))
                .unwrap();
            let m = mine(7, 1234, "cGF5bG9hZA==", ZERO_HASH, d, None).unwrap();
            assert_eq!(m.nonce, oracle);
            assert!(meets_difficulty(&m.hash, d));
        }
    }

    #[test]
    fn attempt_cap_exhausts() {
        let r = mine(7, 1234, "x", ZERO_HASH, 6, Some(10));
        assert!(matches!(r, Err(LedgerError::MiningExhausted { attempts: 10 })));
    }

    #[test]
    fn nibble_count() {
        assert_eq!(leading_zero_nibbles(&[0x00, 0x0f, 0xff]), 3);
        assert_eq!(leading_zero_nibbles(&[0x10]), 0);
        assert_eq!(leading_zero_nibbles(&[0x00, 0x00]), 4);
        let mut b = [0u8; 20];
        assert_eq!(fmt_u64(0, &mut b), b"0");
        assert_eq!(fmt_u64(18446744073709551615, &mut b), b"18446744073709551615");
    }
}
