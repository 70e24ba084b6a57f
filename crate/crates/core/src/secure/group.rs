use std::fmt;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SecureError;

/// 256-bit safe prime `p = 2q + 1`; `p = 3 mod 8`, so 2 is a quadratic
/// non-residue and generates the full group of order `p - 1`.
const SAFE_PRIME_256: &str = "95555555555555555555555555555555555555555555555555555555555579f3";

/// RFC 3526 group 14 (2048-bit MODP). Its generator 2 spans the
/// prime-order subgroup of size `(p - 1) / 2`.
const MODP_2048: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74",
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437",
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05",
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB",
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718",
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

/// Cyclic group `Z_p^*` with generator `g` used for pairwise key agreement.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupParams {
    p: BigUint,
    g: BigUint,
}

impl fmt::Debug for GroupParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupParams {{ p: {} bits, g: {} }}", self.p.bits(), self.g)
    }
}

/// Named group selection used in configuration files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupChoice {
    SafePrime256,
    Modp2048,
    /// Small prime for tests; only accepted with the test-mode flag.
    Test { p: u64, g: u64 },
}

impl GroupParams {
    pub fn safe_prime_256() -> Self {
        Self {
            p: BigUint::parse_bytes(SAFE_PRIME_256.as_bytes(), 16).expect("valid hex"),
            g: BigUint::from(2u32),
        }
    }

    pub fn modp_2048() -> Self {
        Self {
            p: BigUint::parse_bytes(MODP_2048.as_bytes(), 16).expect("valid hex"),
            g: BigUint::from(2u32),
        }
    }

    /// Arbitrary group; anything below 256 bits needs `test_mode`.
    pub fn new(p: BigUint, g: BigUint, test_mode: bool) -> Result<Self, SecureError> {
        if p < BigUint::from(5u32) {
            return Err(SecureError::DegenerateGroup(format!("modulus {p} is below 5")));
        }
        if !test_mode && p.bits() < 256 {
            return Err(SecureError::DegenerateGroup(format!(
                "{}-bit modulus requires test mode",
                p.bits()
            )));
        }
        if g < BigUint::from(2u32) || g >= p {
            return Err(SecureError::DegenerateGroup(format!("generator {g} outside [2, p-1]")));
        }
        Ok(Self { p, g })
    }

    pub fn from_choice(choice: &GroupChoice, test_mode: bool) -> Result<Self, SecureError> {
        match choice {
            GroupChoice::SafePrime256 => Ok(Self::safe_prime_256()),
            GroupChoice::Modp2048 => Ok(Self::modp_2048()),
            GroupChoice::Test { p, g } => Self::new(BigUint::from(*p), BigUint::from(*g), test_mode),
        }
    }

    pub fn modulus(&self) -> &BigUint {
        &self.p
    }

    pub fn generator(&self) -> &BigUint {
        &self.g
    }

    pub fn pow(&self, base: &BigUint, exp: &BigUint) -> BigUint {
        base.modpow(exp, &self.p)
    }
}

/// Private exponent `s` and public element `g^s mod p`.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    secret: BigUint,
    public: BigUint,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn from_secret(group: &GroupParams, secret: BigUint) -> Result<Self, SecureError> {
        let upper = group.modulus() - 2u32;
        if secret < BigUint::from(1u32) || secret > upper {
            return Err(SecureError::KeyOutOfRange("secret key outside [1, p-2]".into()));
        }
        let public = group.pow(group.generator(), &secret);
        Ok(Self { secret, public })
    }

    pub fn secret(&self) -> &BigUint {
        &self.secret
    }

    pub fn public(&self) -> &BigUint {
        &self.public
    }
}

/// Samples a secret uniformly from `[1, p-2]` with a ChaCha20 stream
/// seeded by `seed` (rejection sampling on the bit length of `p`).
pub fn keygen(group: &GroupParams, seed: u64) -> Result<KeyPair, SecureError> {
    let p = group.modulus();
    if p < &BigUint::from(5u32) {
        return Err(SecureError::DegenerateGroup(format!("modulus {p} is below 5")));
    }
    let bits = p.bits() as usize;
    let nbytes = bits.div_ceil(8);
    let excess = nbytes * 8 - bits;
    let upper = p - 2u32;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut buf = vec![0u8; nbytes];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xffu8 >> excess;
        let candidate = BigUint::from_bytes_be(&buf);
        if candidate >= BigUint::from(1u32) && candidate <= upper {
            return KeyPair::from_secret(group, candidate);
        }
    }
}

/// SHA-256 of the shared group element; identical on both ends of a pair.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SharedSecret(pub [u8; 32]);

impl fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SharedSecret({:02x}{:02x}..)", self.0[0], self.0[1])
    }
}

impl SharedSecret {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

/// Hash of a group element over its minimal big-endian encoding.
pub fn hash_element(element: &BigUint) -> SharedSecret {
    SharedSecret(Sha256::digest(element.to_bytes_be()).into())
}

/// `H(pk_peer ^ sk_own mod p)`.
pub fn derive_shared(
    sk_own: &BigUint,
    pk_peer: &BigUint,
    group: &GroupParams,
) -> Result<SharedSecret, SecureError> {
    let p = group.modulus();
    if pk_peer < &BigUint::from(2u32) || pk_peer >= p {
        return Err(SecureError::KeyOutOfRange(format!(
            "peer public key outside [2, p-1] for a {}-bit group",
            p.bits()
        )));
    }
    Ok(hash_element(&group.pow(pk_peer, sk_own)))
}
