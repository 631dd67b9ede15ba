//! Per-block Ed25519 keys. A fresh pair is generated for every block and the
//! private half is dropped once the block hash is signed.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ring::rand::SystemRandom;
use ring::signature::{Ed25519KeyPair, KeyPair, UnparsedPublicKey, ED25519};

use super::LedgerError;

pub struct BlockSigner {
    pair: Ed25519KeyPair,
}

impl BlockSigner {
    pub fn generate() -> Result<Self, LedgerError> {
        let rng = SystemRandom::new();
        let pkcs8 = Ed25519KeyPair::generate_pkcs8(&rng).map_err(|_| LedgerError::KeyGeneration)?;
        let pair = Ed25519KeyPair::from_pkcs8(pkcs8.as_ref()).map_err(|_| LedgerError::KeyGeneration)?;
        Ok(Self { pair })
    }

    pub fn public_key_b64(&self) -> String {
        B64.encode(self.pair.public_key().as_ref())
    }

    /// Signs the raw 32 digest bytes behind a hex hash.
    pub fn sign_hash(&self, hash_hex: &str) -> Result<String, LedgerError> {
        let digest = hex::decode(hash_hex).map_err(|_| LedgerError::MalformedHash)?;
        Ok(B64.encode(self.pair.sign(&digest).as_ref()))
    }
}

pub fn verify_hash_signature(pub_key_b64: &str, hash_hex: &str, signature_b64: &str) -> bool {
    let (Ok(pk), Ok(sig), Ok(digest)) = (
        B64.decode(pub_key_b64),
        B64.decode(signature_b64),
        hex::decode(hash_hex),
    ) else {
        return false;
    };
    UnparsedPublicKey::new(&ED25519, pk).verify(&digest, &sig).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_and_verify() {
        let s = BlockSigner::generate().unwrap();
        let h = "ab".repeat(32);
        let sig = s.sign_hash(&h).unwrap();
        assert!(verify_hash_signature(&s.public_key_b64(), &h, &sig));
        assert!(!verify_hash_signature(&s.public_key_b64(), &"ac".repeat(32), &sig));
        let other = BlockSigner::generate().unwrap();
        assert!(!verify_hash_signature(&other.public_key_b64(), &h, &sig));
        assert!(!verify_hash_signature("!!", &h, &sig));
    }
}
