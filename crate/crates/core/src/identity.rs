//! Node identity: an Ed25519 keypair stored encrypted under a passphrase.
//!
//! Key file layout:
//!
//! ```text
//! "CAFSKEY1" ‖ salt:16 ‖ nonce:12 ‖ ChaCha20-Poly1305(seed:32)
//! ```
//!
//! The cipher key is Argon2id(passphrase, salt).

use std::fs;
use std::io;
use std::path::Path;

use argon2::Argon2;
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::dht::NodeId;

const MAGIC: &[u8; 8] = b"CAFSKEY1";
const SALT_LEN: usize = 16;
const NONCE_LEN: usize = 12;
const KEY_FILE_LEN: usize = 8 + SALT_LEN + NONCE_LEN + 32 + 16;

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("wrong passphrase or corrupted key file")]
    BadPassphrase,
    #[error("not a key file")]
    Malformed,
    #[error("key file I/O failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone)]
pub struct NodeIdentity {
    signing: SigningKey,
    node_id: NodeId,
}

impl std::fmt::Debug for NodeIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeIdentity")
            .field("node_id", &self.node_id)
            .finish_non_exhaustive()
    }
}

impl NodeIdentity {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_seed(SigningKey::generate(rng).to_bytes())
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(&seed);
        let node_id = NodeId::from_public_key(signing.verifying_key().as_bytes());
        Self { signing, node_id }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    /// Base58 of the node id; used as the ledger `author`.
    pub fn fingerprint(&self) -> String {
        bs58::encode(self.node_id.as_bytes()).into_string()
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; 64] {
        self.signing.sign(msg).to_bytes()
    }

    pub fn encrypt<R: RngCore + CryptoRng>(&self, passphrase: &str, rng: &mut R) -> Vec<u8> {
        let mut salt = [0u8; SALT_LEN];
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut salt);
        rng.fill_bytes(&mut nonce);
        let cipher = cipher_for(passphrase, &salt);
        let sealed = cipher
            .encrypt(Nonce::from_slice(&nonce), self.signing.to_bytes().as_slice())
            .expect("encrypting 32 bytes cannot fail");
        let mut out = Vec::with_capacity(KEY_FILE_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&salt);
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&sealed);
        out
    }

    pub fn decrypt(raw: &[u8], passphrase: &str) -> Result<Self, IdentityError> {
        if raw.len() != KEY_FILE_LEN || &raw[..8] != MAGIC {
            return Err(IdentityError::Malformed);
        }
        let salt = &raw[8..8 + SALT_LEN];
        let nonce = &raw[8 + SALT_LEN..8 + SALT_LEN + NONCE_LEN];
        let sealed = &raw[8 + SALT_LEN + NONCE_LEN..];
        let seed = cipher_for(passphrase, salt)
            .decrypt(Nonce::from_slice(nonce), sealed)
            .map_err(|_| IdentityError::BadPassphrase)?;
        let seed: [u8; 32] = seed.try_into().map_err(|_| IdentityError::Malformed)?;
        Ok(Self::from_seed(seed))
    }

    pub fn save<R: RngCore + CryptoRng>(
        &self,
        path: &Path,
        passphrase: &str,
        rng: &mut R,
    ) -> Result<(), IdentityError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.encrypt(passphrase, rng))?;
        Ok(())
    }

    pub fn load(path: &Path, passphrase: &str) -> Result<Self, IdentityError> {
        Self::decrypt(&fs::read(path)?, passphrase)
    }
}

fn cipher_for(passphrase: &str, salt: &[u8]) -> ChaCha20Poly1305 {
    let mut key = [0u8; 32];
    Argon2::default()
        .hash_password_into(passphrase.as_bytes(), salt, &mut key)
        .expect("argon2 parameters are valid");
    ChaCha20Poly1305::new(Key::from_slice(&key))
}

/// Verifies an Ed25519 signature by raw public key bytes.
pub fn verify_signature(public_key: &[u8; 32], msg: &[u8], signature: &[u8; 64]) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(public_key) else {
        return false;
    };
    key.verify(msg, &Signature::from_bytes(signature)).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn node_id_is_hash_of_public_key() {
        let id = NodeIdentity::from_seed([7; 32]);
        assert_eq!(id.node_id().0, crate::cid::sha256(&id.public_key()));
    }

    #[test]
    fn key_file_round_trip_and_wrong_passphrase() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let id = NodeIdentity::generate(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("node.key");
        id.save(&path, "correct horse", &mut rng).unwrap();
        let again = NodeIdentity::load(&path, "correct horse").unwrap();
        assert_eq!(again.node_id(), id.node_id());
        assert!(matches!(
            NodeIdentity::load(&path, "wrong"),
            Err(IdentityError::BadPassphrase)
        ));
        std::fs::write(&path, b"junk").unwrap();
        assert!(matches!(
            NodeIdentity::load(&path, "correct horse"),
            Err(IdentityError::Malformed)
        ));
    }

    #[test]
    fn signatures_verify() {
        let id = NodeIdentity::from_seed([3; 32]);
        let sig = id.sign(b"msg");
        assert!(verify_signature(&id.public_key(), b"msg", &sig));
        assert!(!verify_signature(&id.public_key(), b"msh", &sig));
    }
}
