//! Cipher registry: CBC mode with PKCS#7 padding over AES-128 and two-key
//! triple DES. New algorithms plug in by implementing [`CipherSuite`].

use std::marker::PhantomData;

use cbc::cipher::block_padding::Pkcs7;
use cbc::cipher::generic_array::GenericArray;
use cbc::cipher::{BlockCipher, BlockDecryptMut, BlockEncryptMut, KeyInit, KeyIvInit};

use super::CryptError;

/// An incremental encrypt or decrypt pass.
pub trait BlockStream: Send {
    fn update(&mut self, input: &[u8], out: &mut Vec<u8>);
    /// Emits the padded final block (encrypt) or checks and strips the
    /// padding (decrypt).
    fn finish(&mut self, out: &mut Vec<u8>) -> Result<(), CryptError>;
}

pub trait CipherSuite: Sync {
    fn id(&self) -> u8;
    fn name(&self) -> &'static str;
    fn key_len(&self) -> usize;
    fn iv_len(&self) -> usize;
    fn block_len(&self) -> usize;
    fn encryptor(&self, key: &[u8], iv: &[u8]) -> Box<dyn BlockStream>;
    fn decryptor(&self, key: &[u8], iv: &[u8]) -> Box<dyn BlockStream>;
    /// One-shot forms, kept separate from the streaming path.
    fn encrypt_padded(&self, key: &[u8], iv: &[u8], data: &[u8]) -> Vec<u8>;
    fn decrypt_padded(&self, key: &[u8], iv: &[u8], data: &[u8]) -> Result<Vec<u8>, CryptError>;
}

struct CbcSuite<C> {
    id: u8,
    name: &'static str,
    iv_len: usize,
    cipher: PhantomData<fn() -> C>,
}

struct CbcEncrypt<C: BlockEncryptMut + BlockCipher> {
    inner: cbc::Encryptor<C>,
    pending: Vec<u8>,
}

struct CbcDecrypt<C: BlockDecryptMut + BlockCipher> {
    inner: cbc::Decryptor<C>,
    pending: Vec<u8>,
}

impl<C> BlockStream for CbcEncrypt<C>
where
    C: BlockEncryptMut + BlockCipher + Send,
{
    fn update(&mut self, input: &[u8], out: &mut Vec<u8>) {
        let bs = C::block_size();
        self.pending.extend_from_slice(input);
        let full = self.pending.len() / bs * bs;
        for block in self.pending[..full].chunks_exact_mut(bs) {
            self.inner.encrypt_block_mut(GenericArray::from_mut_slice(block));
        }
        out.extend_from_slice(&self.pending[..full]);
        self.pending.drain(..full);
    }

    fn finish(&mut self, out: &mut Vec<u8>) -> Result<(), CryptError> {
        let bs = C::block_size();
        let pad = bs - self.pending.len() % bs;
        self.pending.resize(self.pending.len() + pad, pad as u8);
        let tail = std::mem::take(&mut self.pending);
        self.update(&tail, out);
        Ok(())
    }
}

impl<C> BlockStream for CbcDecrypt<C>
where
    C: BlockDecryptMut + BlockCipher + Send,
{
    fn update(&mut self, input: &[u8], out: &mut Vec<u8>) {
        let bs = C::block_size();
        self.pending.extend_from_slice(input);
        // The last whole block may carry padding; hold it until finish.
        let keep = match self.pending.len() % bs {
            0 => bs.min(self.pending.len()),
            r => r,
        };
        let ready = self.pending.len() - keep;
        for block in self.pending[..ready].chunks_exact_mut(bs) {
            self.inner.decrypt_block_mut(GenericArray::from_mut_slice(block));
        }
        out.extend_from_slice(&self.pending[..ready]);
        self.pending.drain(..ready);
    }

    fn finish(&mut self, out: &mut Vec<u8>) -> Result<(), CryptError> {
        let bs = C::block_size();
        if self.pending.len() != bs {
            return Err(CryptError::BadPadding(None));
        }
        self.inner.decrypt_block_mut(GenericArray::from_mut_slice(&mut self.pending));
        let pad = usize::from(self.pending[bs - 1]);
        if pad == 0 || pad > bs || self.pending[bs - pad..].iter().any(|&b| usize::from(b) != pad) {
            return Err(CryptError::BadPadding(None));
        }
        out.extend_from_slice(&self.pending[..bs - pad]);
        self.pending.clear();
        Ok(())
    }
}

impl<C> CipherSuite for CbcSuite<C>
where
    C: BlockCipher + BlockEncryptMut + BlockDecryptMut + KeyInit + Send + 'static,
{
    fn id(&self) -> u8 {
        self.id
    }

    fn name(&self) -> &'static str {
        self.name
    }

    fn key_len(&self) -> usize {
        C::key_size()
    }

    fn iv_len(&self) -> usize {
        self.iv_len
    }

    fn block_len(&self) -> usize {
        C::block_size()
    }

    fn encryptor(&self, key: &[u8], iv: &[u8]) -> Box<dyn BlockStream> {
        Box::new(CbcEncrypt {
            inner: cbc::Encryptor::<C>::new_from_slices(key, iv).expect("params validated"),
            pending: Vec::new(),
        })
    }

    fn decryptor(&self, key: &[u8], iv: &[u8]) -> Box<dyn BlockStream> {
        Box::new(CbcDecrypt {
            inner: cbc::Decryptor::<C>::new_from_slices(key, iv).expect("params validated"),
            pending: Vec::new(),
        })
    }

    fn encrypt_padded(&self, key: &[u8], iv: &[u8], data: &[u8]) -> Vec<u8> {
        cbc::Encryptor::<C>::new_from_slices(key, iv)
            .expect("params validated")
            .encrypt_padded_vec_mut::<Pkcs7>(data)
    }

    fn decrypt_padded(&self, key: &[u8], iv: &[u8], data: &[u8]) -> Result<Vec<u8>, CryptError> {
        cbc::Decryptor::<C>::new_from_slices(key, iv)
            .expect("params validated")
            .decrypt_padded_vec_mut::<Pkcs7>(data)
            .map_err(|_| CryptError::BadPadding(None))
    }
}

static AES128: CbcSuite<aes::Aes128> = CbcSuite {
    id: 1,
    name: "aes128",
    iv_len: 16,
    cipher: PhantomData,
};

/// Two-key triple DES: K1 ‖ K2 with K3 = K1.
static TDES: CbcSuite<des::TdesEde2> = CbcSuite {
    id: 2,
    name: "tdes",
    iv_len: 8,
    cipher: PhantomData,
};

static REGISTRY: [&dyn CipherSuite; 2] = [&AES128, &TDES];

pub fn suites() -> impl Iterator<Item = &'static dyn CipherSuite> {
    REGISTRY.iter().copied()
}

pub fn suite_by_id(id: u8) -> Option<&'static dyn CipherSuite> {
    suites().find(|s| s.id() == id)
}

pub fn suite_by_name(name: &str) -> Option<&'static dyn CipherSuite> {
    suites().find(|s| s.name().eq_ignore_ascii_case(name))
}

/// Algorithm plus key and IV. One parameter set covers every block of a
/// file; CBC with a shared IV is deterministic, which is what makes the
/// distributed output comparable to a sequential run. It also means equal
/// leading plaintext in two blocks shows as equal leading ciphertext.
#[derive(Clone, PartialEq, Eq)]
pub struct CipherParams {
    cipher: u8,
    key: Vec<u8>,
    iv: Vec<u8>,
}

impl std::fmt::Debug for CipherParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CipherParams").field("cipher", &self.suite().name()).finish_non_exhaustive()
    }
}

impl CipherParams {
    pub fn new(cipher: &str, key: &[u8], iv: &[u8]) -> Result<Self, CryptError> {
        let suite = suite_by_name(cipher).ok_or_else(|| CryptError::BadParams(format!("unknown cipher {cipher:?}")))?;
        Self::with_id(suite.id(), key, iv)
    }

    pub fn with_id(id: u8, key: &[u8], iv: &[u8]) -> Result<Self, CryptError> {
        let suite = suite_by_id(id).ok_or_else(|| CryptError::BadParams(format!("unknown cipher id {id}")))?;
        if key.len() != suite.key_len() {
            return Err(CryptError::BadParams(format!("{} needs a {}-byte key", suite.name(), suite.key_len())));
        }
        if iv.len() != suite.iv_len() {
            return Err(CryptError::BadParams(format!("{} needs a {}-byte IV", suite.name(), suite.iv_len())));
        }
        Ok(CipherParams {
            cipher: id,
            key: key.to_vec(),
            iv: iv.to_vec(),
        })
    }

    pub fn suite(&self) -> &'static dyn CipherSuite {
        suite_by_id(self.cipher).expect("validated at construction")
    }

    pub fn cipher_id(&self) -> u8 {
        self.cipher
    }

    pub fn key(&self) -> &[u8] {
        &self.key
    }

    pub fn iv(&self) -> &[u8] {
        &self.iv
    }

    pub fn encryptor(&self) -> Box<dyn BlockStream> {
        self.suite().encryptor(&self.key, &self.iv)
    }

    pub fn decryptor(&self) -> Box<dyn BlockStream> {
        self.suite().decryptor(&self.key, &self.iv)
    }

    /// Ciphertext length for `plain` bytes.
    pub fn cipher_len(&self, plain: u64) -> u64 {
        let bs = self.suite().block_len() as u64;
        (plain / bs + 1) * bs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn h(s: &str) -> Vec<u8> {
        hex::decode(s).unwrap()
    }

    #[test]
    fn aes_cbc_vector() {
        // SP 800-38A F.2.1 first block, plus the PKCS#7 padding block.
        let p = CipherParams::new("aes128", &h("2b7e151628aed2a6abf7158809cf4f3c"), &h("000102030405060708090a0b0c0d0e0f")).unwrap();
        let ct = p.suite().encrypt_padded(p.key(), p.iv(), &h("6bc1bee22e409f96e93d7e117393172a"));
        assert_eq!(hex::encode(ct), "7649abac8119b246cee98e9b12e9197d8964e0b149c10b7b682e6e39aaeb731c");
    }

    #[test]
    fn tdes_two_key_vector() {
        let p = CipherParams::new("tdes", &h("0123456789abcdeffedcba9876543210"), &h("1234567890abcdef")).unwrap();
        let ct = p.suite().encrypt_padded(p.key(), p.iv(), b"The quick brown fox jumps");
        assert_eq!(
            hex::encode(ct),
            "c90ebacc272c238c7ae45e5e2e41d2607279f6da65693c7acf06d620c35931bd"
        );
    }

    #[test]
    fn bad_params() {
        assert!(CipherParams::new("rc2", &[0; 16], &[0; 16]).is_err());
        assert!(CipherParams::new("aes128", &[0; 15], &[0; 16]).is_err());
        assert!(CipherParams::new("tdes", &[0; 16], &[0; 16]).is_err());
        assert!(CipherParams::new("TDES", &[0; 16], &[0; 8]).is_ok());
    }

    fn run(stream: &mut dyn BlockStream, data: &[u8], cuts: &[usize]) -> Result<Vec<u8>, CryptError> {
        let mut out = Vec::new();
        let mut last = 0;
        for &c in cuts.iter().filter(|&&c| c <= data.len()) {
            let c = c.max(last);
            stream.update(&data[last..c], &mut out);
            last = c;
        }
        stream.update(&data[last..], &mut out);
        stream.finish(&mut out)?;
        Ok(out)
    }

    proptest! {
        #[test]
        fn streaming_matches_one_shot(
            data in proptest::collection::vec(any::<u8>(), 0..300),
            mut cuts in proptest::collection::vec(0usize..300, 0..6),
            tdes in any::<bool>(),
        ) {
            cuts.sort();
            let p = if tdes {
                CipherParams::new("tdes", &[7; 16], &[1; 8]).unwrap()
            } else {
                CipherParams::new("aes128", &[7; 16], &[1; 16]).unwrap()
            };
            let one_shot = p.suite().encrypt_padded(p.key(), p.iv(), &data);
            let streamed = run(p.encryptor().as_mut(), &data, &cuts).unwrap();
            prop_assert_eq!(&streamed, &one_shot);
            prop_assert_eq!(streamed.len() as u64, p.cipher_len(data.len() as u64));
            let back = run(p.decryptor().as_mut(), &streamed, &cuts).unwrap();
            prop_assert_eq!(&back, &data);
            prop_assert_eq!(p.suite().decrypt_padded(p.key(), p.iv(), &streamed).unwrap(), data);
        }
    }

    #[test]
    fn decrypt_rejects_bad_lengths_and_padding() {
        let p = CipherParams::new("aes128", &[1; 16], &[2; 16]).unwrap();
        assert!(run(p.decryptor().as_mut(), &[0; 15], &[]).is_err());
        assert!(run(p.decryptor().as_mut(), &[], &[]).is_err());
        let mut ct = p.suite().encrypt_padded(p.key(), p.iv(), b"hello");
        let n = ct.len();
        ct[n - 1] ^= 1;
        assert!(run(p.decryptor().as_mut(), &ct, &[]).is_err());
    }
}
