//! Data-container encryption. Each master owns one archive key; objects are
//! sealed with ChaCha20-Poly1305 under a fresh random nonce and kept as
//! Base64 of `nonce || ciphertext || tag`.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ring::aead::{Aad, LessSafeKey, Nonce, UnboundKey, CHACHA20_POLY1305, NONCE_LEN};
use ring::rand::{SecureRandom, SystemRandom};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed sealed object")]
    Malformed,
    #[error("authentication failed")]
    Authentication,
    #[error("random source unavailable")]
    Rng,
}

#[derive(Clone)]
pub struct ArchiveKey {
    raw: [u8; 32],
}

impl std::fmt::Debug for ArchiveKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ArchiveKey(..)")
    }
}

impl ArchiveKey {
    pub fn generate() -> Result<Self, CryptoError> {
        let mut raw = [0u8; 32];
        SystemRandom::new().fill(&mut raw).map_err(|_| CryptoError::Rng)?;
        Ok(Self { raw })
    }

    pub fn to_b64(&self) -> String {
        B64.encode(self.raw)
    }

    pub fn from_b64(s: &str) -> Result<Self, CryptoError> {
        let bytes = B64.decode(s).map_err(|_| CryptoError::Malformed)?;
        let raw: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::Malformed)?;
        Ok(Self { raw })
    }

    fn aead(&self) -> LessSafeKey {
        LessSafeKey::new(UnboundKey::new(&CHACHA20_POLY1305, &self.raw).expect("32-byte key"))
    }

    /// `context` is bound as associated data; opening under a different
    /// context fails authentication.
    pub fn seal(&self, plaintext: &[u8], context: &[u8]) -> Result<String, CryptoError> {
        let mut nonce = [0u8; NONCE_LEN];
        SystemRandom::new().fill(&mut nonce).map_err(|_| CryptoError::Rng)?;
        let mut buf = plaintext.to_vec();
        self.aead()
            .seal_in_place_append_tag(Nonce::assume_unique_for_key(nonce), Aad::from(context), &mut buf)
            .map_err(|_| CryptoError::Authentication)?;
        let mut out = Vec::with_capacity(NONCE_LEN + buf.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&buf);
        Ok(B64.encode(out))
    }

    pub fn open(&self, sealed_b64: &str, context: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let bytes = B64.decode(sealed_b64).map_err(|_| CryptoError::Malformed)?;
        if bytes.len() < NONCE_LEN + CHACHA20_POLY1305.tag_len() {
            return Err(CryptoError::Malformed);
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let nonce = Nonce::try_assume_unique_for_key(nonce).map_err(|_| CryptoError::Malformed)?;
        let mut buf = rest.to_vec();
        let plain = self
            .aead()
            .open_in_place(nonce, Aad::from(context), &mut buf)
            .map_err(|_| CryptoError::Authentication)?;
        Ok(plain.to_vec())
    }
}
