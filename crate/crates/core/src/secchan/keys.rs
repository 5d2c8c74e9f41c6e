use std::fmt;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes128Gcm, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use sha2::Sha256;
use subtle::ConstantTimeEq;

use super::SecError;

pub const TAG_LEN: usize = 16;

const INFO_CLIENT_TO_SERVER: &[u8] = b"gridfs v1 client->server";
const INFO_SERVER_TO_CLIENT: &[u8] = b"gridfs v1 server->client";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

/// Directional AES-128-GCM keys with implicit 64-bit sequence counters.
///
/// The nonce for message `n` is `0u32 || n` (big-endian). Counters only move
/// forward, so a replayed or reordered frame fails authentication.
#[derive(Clone)]
pub struct ChannelKeys {
    send_key: [u8; 16],
    recv_key: [u8; 16],
    send_counter: u64,
    recv_counter: u64,
    send_cipher: Aes128Gcm,
    recv_cipher: Aes128Gcm,
}

impl fmt::Debug for ChannelKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChannelKeys")
            .field("send_counter", &self.send_counter)
            .field("recv_counter", &self.recv_counter)
            .finish_non_exhaustive()
    }
}

/// HKDF-SHA256 with salt `client_nonce || server_nonce` and the psk as input
/// key material; one 16-byte key per direction.
pub fn derive_keys(psk: &[u8], client_nonce: &[u8; 16], server_nonce: &[u8; 16], role: Role) -> ChannelKeys {
    let mut salt = [0u8; 32];
    salt[..16].copy_from_slice(client_nonce);
    salt[16..].copy_from_slice(server_nonce);
    let hk = Hkdf::<Sha256>::new(Some(&salt), psk);
    let mut c2s = [0u8; 16];
    let mut s2c = [0u8; 16];
    hk.expand(INFO_CLIENT_TO_SERVER, &mut c2s).expect("16 bytes is a valid HKDF length");
    hk.expand(INFO_SERVER_TO_CLIENT, &mut s2c).expect("16 bytes is a valid HKDF length");
    let (send_key, recv_key) = match role {
        Role::Client => (c2s, s2c),
        Role::Server => (s2c, c2s),
    };
    ChannelKeys::new(send_key, recv_key)
}

impl ChannelKeys {
    pub fn new(send_key: [u8; 16], recv_key: [u8; 16]) -> Self {
        ChannelKeys {
            send_key,
            recv_key,
            send_counter: 0,
            recv_counter: 0,
            send_cipher: Aes128Gcm::new(&send_key.into()),
            recv_cipher: Aes128Gcm::new(&recv_key.into()),
        }
    }

    pub fn send_key(&self) -> &[u8; 16] {
        &self.send_key
    }

    pub fn recv_key(&self) -> &[u8; 16] {
        &self.recv_key
    }

    pub fn send_counter(&self) -> u64 {
        self.send_counter
    }

    pub fn recv_counter(&self) -> u64 {
        self.recv_counter
    }

    fn nonce(counter: u64) -> [u8; 12] {
        let mut nonce = [0u8; 12];
        nonce[4..].copy_from_slice(&counter.to_be_bytes());
        nonce
    }

    /// Encrypts and authenticates `plaintext`; output is ciphertext || tag.
    pub fn seal(&mut self, plaintext: &[u8]) -> Result<Vec<u8>, SecError> {
        if self.send_counter == u64::MAX {
            return Err(SecError::CounterExhausted);
        }
        let nonce = Self::nonce(self.send_counter);
        let sealed = self
            .send_cipher
            .encrypt(Nonce::from_slice(&nonce), plaintext)
            .map_err(|_| SecError::IntegrityFailure)?;
        self.send_counter += 1;
        Ok(sealed)
    }

    pub fn open(&mut self, sealed: &[u8]) -> Result<Vec<u8>, SecError> {
        if self.recv_counter == u64::MAX {
            return Err(SecError::CounterExhausted);
        }
        if sealed.len() < TAG_LEN {
            return Err(SecError::IntegrityFailure);
        }
        let nonce = Self::nonce(self.recv_counter);
        let plain = self
            .recv_cipher
            .decrypt(Nonce::from_slice(&nonce), sealed)
            .map_err(|_| SecError::IntegrityFailure)?;
        self.recv_counter += 1;
        Ok(plain)
    }

    #[cfg(test)]
    pub(crate) fn force_counters(&mut self, send: u64, recv: u64) {
        self.send_counter = send;
        self.recv_counter = recv;
    }
}

type HmacSha256 = Hmac<Sha256>;

/// `HMAC-SHA256(psk, client_nonce || server_nonce || username)`.
pub fn compute_proof(psk: &[u8], client_nonce: &[u8; 16], server_nonce: &[u8; 16], username: &str) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(psk).expect("HMAC accepts any key length");
    mac.update(client_nonce);
    mac.update(server_nonce);
    mac.update(username.as_bytes());
    mac.finalize().into_bytes().into()
}

pub fn proofs_equal(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && bool::from(a.ct_eq(b))
}
