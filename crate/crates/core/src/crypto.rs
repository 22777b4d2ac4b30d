//! Hashing, recoverable signatures and address derivation.
//!
//! Every signed field of the protocol is a secp256k1 ECDSA signature over a
//! Keccak-256 digest, serialized as `r ‖ s ‖ v` (65 bytes) so the verifier can
//! recover the signer address from `(digest, signature)` alone.

use core::fmt;

use k256::ecdsa::{RecoveryId, Signature as EcdsaSignature, SigningKey, VerifyingKey};
use rand_core::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha3::{Digest as _, Keccak256};

pub const DIGEST_LEN: usize = 32;
pub const ADDRESS_LEN: usize = 20;
pub const SIGNATURE_LEN: usize = 65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("malformed signature")]
    MalformedSignature,
}

macro_rules! hex_bytes {
    ($name:ident, $len:expr) => {
        impl $name {
            pub const fn from_bytes(bytes: [u8; $len]) -> Self {
                Self(bytes)
            }

            pub fn from_slice(bytes: &[u8]) -> Option<Self> {
                <[u8; $len]>::try_from(bytes).ok().map(Self)
            }

            pub const fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }
        }

        impl AsRef<[u8]> for $name {
            fn as_ref(&self) -> &[u8] {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("0x")?;
                for b in self.0.iter() {
                    write!(f, "{b:02x}")?;
                }
                Ok(())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self)
            }
        }

        impl core::str::FromStr for $name {
            type Err = hex::FromHexError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let s = s.strip_prefix("0x").unwrap_or(s);
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out)?;
                Ok(Self(out))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = <alloc::borrow::Cow<'de, str>>::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

/// 32-byte Keccak-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest([u8; DIGEST_LEN]);
hex_bytes!(Digest, DIGEST_LEN);

/// Last 20 bytes of the digest of the uncompressed public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address([u8; ADDRESS_LEN]);
hex_bytes!(Address, ADDRESS_LEN);

/// `r ‖ s ‖ v` recoverable signature.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature([u8; SIGNATURE_LEN]);
hex_bytes!(Signature, SIGNATURE_LEN);

impl Signature {
    /// The all-zero signature, used as the "no state" marker when a channel
    /// is closed before any payment was signed.
    pub const EMPTY: Signature = Signature([0u8; SIGNATURE_LEN]);

    pub fn is_empty(&self) -> bool {
        *self == Self::EMPTY
    }

    pub fn recovery_tag(&self) -> u8 {
        self.0[64]
    }
}

impl Default for Signature {
    fn default() -> Self {
        Self::EMPTY
    }
}

/// A secp256k1 signing key. Never zero.
#[derive(Clone)]
pub struct PrivateKey {
    inner: SigningKey,
    address: Address,
}

impl PrivateKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        // A uniformly random scalar is rejected only if it is zero or
        // exceeds the group order, both with negligible probability.
        loop {
            let mut bytes = [0u8; 32];
            rng.fill_bytes(&mut bytes);
            if let Some(key) = Self::from_bytes(&bytes) {
                return key;
            }
        }
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Option<Self> {
        let inner = SigningKey::from_bytes(bytes.into()).ok()?;
        let address = derive_address(inner.verifying_key());
        Some(Self { inner, address })
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.inner.to_bytes().into()
    }

    pub fn address(&self) -> Address {
        self.address
    }

    /// SEC1 uncompressed public key (65 bytes).
    pub fn public_key(&self) -> [u8; 65] {
        let point = self.inner.verifying_key().to_encoded_point(false);
        let mut out = [0u8; 65];
        out.copy_from_slice(point.as_bytes());
        out
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivateKey").field("address", &self.address).finish_non_exhaustive()
    }
}

/// Deterministic key generation from a 64-bit seed.
pub fn keygen(seed: u64) -> (PrivateKey, Address) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let key = PrivateKey::generate(&mut rng);
    let address = key.address();
    (key, address)
}

pub fn digest(data: &[u8]) -> Digest {
    Digest(Keccak256::digest(data).into())
}

/// Digest of the concatenation of `parts`, without materializing it.
pub fn digest_concat(parts: &[&[u8]]) -> Digest {
    let mut hasher = Keccak256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

fn derive_address(key: &VerifyingKey) -> Address {
    let point = key.to_encoded_point(false);
    let hash = digest(&point.as_bytes()[1..]);
    let mut out = [0u8; ADDRESS_LEN];
    out.copy_from_slice(&hash.0[DIGEST_LEN - ADDRESS_LEN..]);
    Address(out)
}

pub fn address_of_public_key(sec1: &[u8]) -> Option<Address> {
    VerifyingKey::from_sec1_bytes(sec1).ok().map(|k| derive_address(&k))
}

pub fn sign(d: &Digest, sk: &PrivateKey) -> Signature {
    let (sig, recid) = sk
        .inner
        .sign_prehash_recoverable(&d.0)
        .expect("32-byte prehash is always accepted");
    let mut out = [0u8; SIGNATURE_LEN];
    out[..64].copy_from_slice(&sig.to_bytes());
    out[64] = recid.to_byte();
    Signature(out)
}

pub fn recover(d: &Digest, sig: &Signature) -> Result<Address, CryptoError> {
    let recid = RecoveryId::from_byte(sig.0[64]).ok_or(CryptoError::MalformedSignature)?;
    let core = EcdsaSignature::from_slice(&sig.0[..64]).map_err(|_| CryptoError::MalformedSignature)?;
    let key = VerifyingKey::recover_from_prehash(&d.0, &core, recid)
        .map_err(|_| CryptoError::MalformedSignature)?;
    Ok(derive_address(&key))
}

/// `true` iff `sig` over `d` recovers to `signer`.
pub fn verify(d: &Digest, sig: &Signature, signer: &Address) -> bool {
    recover(d, sig).map(|a| a == *signer).unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn keygen_is_deterministic() {
        let (k1, a1) = keygen(7);
        let (k2, a2) = keygen(7);
        assert_eq!(k1.to_bytes(), k2.to_bytes());
        assert_eq!(a1, a2);
        assert_ne!(keygen(1).1, keygen(2).1);
        assert_eq!(address_of_public_key(&k1.public_key()), Some(a1));
    }

    #[test]
    fn digest_golden_and_length_sensitive() {
        assert_eq!(
            digest(b"").to_string(),
            "0xc5d2460186f7233c927e7db2dcc703c0e500b653ca82273b7bfad8045d85a470"
        );
        assert_ne!(digest(b""), digest(&[0u8]));
        assert_eq!(digest(b"ab"), digest_concat(&[b"a", b"b"]));
    }

    #[test]
    fn sign_recover_round_trip() {
        let (sk, addr) = keygen(11);
        let (sk2, addr2) = keygen(12);
        let d = digest(b"payload");
        let sig = sign(&d, &sk);
        assert_eq!(recover(&d, &sig), Ok(addr));
        assert_ne!(recover(&digest(b"other"), &sig).ok(), Some(addr));
        let sig2 = sign(&d, &sk2);
        assert_eq!(recover(&d, &sig2), Ok(addr2));
        assert_ne!(addr, addr2);
    }

    #[test]
    fn bad_recovery_tag_is_malformed() {
        let (sk, _) = keygen(3);
        let d = digest(b"x");
        let mut sig = sign(&d, &sk);
        sig.0[64] = 9;
        assert_eq!(recover(&d, &sig), Err(CryptoError::MalformedSignature));
        assert_eq!(recover(&d, &Signature::EMPTY), Err(CryptoError::MalformedSignature));
    }

    #[test]
    fn hex_round_trip() {
        let (_, addr) = keygen(5);
        let parsed: Address = addr.to_string().parse().unwrap();
        assert_eq!(parsed, addr);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn single_bit_flip_breaks_recovery(seed in 1u64..50, msg in any::<[u8; 16]>(), bit in 0usize..(8 * (32 + 65))) {
            let (sk, addr) = keygen(seed);
            let mut d = digest(&msg);
            let mut sig = sign(&d, &sk);
            if bit < 256 {
                d.0[bit / 8] ^= 1 << (bit % 8);
            } else {
                let b = bit - 256;
                sig.0[b / 8] ^= 1 << (b % 8);
            }
            prop_assert_ne!(recover(&d, &sig).ok(), Some(addr));
        }
    }
}
