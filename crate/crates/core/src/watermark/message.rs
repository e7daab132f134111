use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// A `T`-bit watermark payload. Bits pack into bytes most significant bit
/// first; the last byte is zero-padded.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::config("a message needs at least one bit"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::input("message bits must be 0 or 1"));
        }
        Ok(Message { bits })
    }

    /// The all-ones message.
    pub fn ones(len: usize) -> Result<Self> {
        Self::from_bits(alloc::vec![1; len])
    }

    pub fn random(len: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(0x006d_7367);
        Self::from_bits((0..len).map(|_| rng.random::<bool>() as u8).collect())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_packed(bytes, bytes.len() * 8)
    }

    /// The first `len` bits of `bytes`.
    pub fn from_packed(bytes: &[u8], len: usize) -> Result<Self> {
        if len > bytes.len() * 8 {
            return Err(Error::input(format!(
                "{} bytes cannot hold {len} bits",
                bytes.len()
            )));
        }
        let bits = (0..len)
            .map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1)
            .collect();
        Self::from_bits(bits)
    }

    pub fn from_hex(hex_str: &str, len: usize) -> Result<Self> {
        let bytes = hex::decode(hex_str.trim())
            .map_err(|e| Error::input(format!("bad message hex: {e}")))?;
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::input(format!(
                "{} hex bytes do not match a bit length of {len}",
                bytes.len()
            )));
        }
        Self::from_packed(&bytes, len)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = alloc::vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            out[i / 8] |= b << (7 - i % 8);
        }
        out
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Fraction of zero bits.
    pub fn zero_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b == 0).count() as f64 / self.len() as f64
    }
}
