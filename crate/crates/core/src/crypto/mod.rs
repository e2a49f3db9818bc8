//! Cryptographic primitives and the IKEv2-style key schedule.
//!
//! Default suite: AES-128-CCM with an 8-byte tag and a 12-byte nonce built as
//! `salt(4) | iv(8)`, HMAC-SHA-256 as PRF, ECDH on P-256 and ECDSA P-256
//! signatures. The [`Suite`] trait lets the group and AEAD be swapped; the
//! free functions in this module use [`DefaultSuite`].

pub mod cert;

use ccm::aead::generic_array::GenericArray;
use ccm::aead::{Aead, KeyInit, Payload};
use ccm::consts::{U12, U8};
use hmac::{Hmac, Mac};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use p256::elliptic_curve::sec1::ToEncodedPoint;
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use thiserror::Error;

pub use cert::{issue_certificate, verify_certificate, CertificateAuthority};

pub const PRF_LEN: usize = 32;
pub const AEAD_KEY_LEN: usize = 16;
pub const AEAD_SALT_LEN: usize = 4;
pub const AEAD_TAG_LEN: usize = 8;
pub const IV_LEN: usize = 8;
/// Uncompressed SEC1 point length for P-256.
pub const DH_PUBLIC_LEN: usize = 65;
pub const SIGNATURE_LEN: usize = 64;
pub const PRF_PLUS_MAX: usize = 255 * PRF_LEN;

/// Bytes of keying material for one AEAD key: key then salt.
pub const AEAD_KEYMAT_LEN: usize = AEAD_KEY_LEN + AEAD_SALT_LEN;

type Ccm8 = ccm::Ccm<aes::Aes128, U8, U12>;
type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("AEAD authentication failed")]
    AuthFail,
    #[error("requested {0} bytes of prf+ output, at most {PRF_PLUS_MAX} available")]
    LengthOverflow(usize),
    #[error("invalid group element")]
    InvalidElement,
    #[error("invalid key length {0}")]
    InvalidKeyLength(usize),
    #[error("nonce length {0} outside 16..=32")]
    NonceLength(usize),
    #[error("certificate rejected: {0}")]
    Certificate(String),
}

/// AEAD key plus the implicit 4-byte nonce prefix.
#[derive(Clone, PartialEq, Eq)]
pub struct AeadKey {
    key: [u8; AEAD_KEY_LEN],
    salt: [u8; AEAD_SALT_LEN],
}

impl std::fmt::Debug for AeadKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AeadKey(..)")
    }
}

impl AeadKey {
    pub fn new(key: [u8; AEAD_KEY_LEN], salt: [u8; AEAD_SALT_LEN]) -> Self {
        AeadKey { key, salt }
    }

    /// Builds a key from `key(16) | salt(4)` keying material.
    pub fn from_keymat(b: &[u8]) -> Result<Self, CryptoError> {
        if b.len() != AEAD_KEYMAT_LEN {
            return Err(CryptoError::InvalidKeyLength(b.len()));
        }
        let mut key = [0u8; AEAD_KEY_LEN];
        let mut salt = [0u8; AEAD_SALT_LEN];
        key.copy_from_slice(&b[..AEAD_KEY_LEN]);
        salt.copy_from_slice(&b[AEAD_KEY_LEN..]);
        Ok(AeadKey { key, salt })
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut m = [0u8; AEAD_KEYMAT_LEN];
        rng.fill_bytes(&mut m);
        AeadKey::from_keymat(&m).expect("fixed length")
    }

    pub fn key(&self) -> &[u8; AEAD_KEY_LEN] {
        &self.key
    }

    pub fn salt(&self) -> &[u8; AEAD_SALT_LEN] {
        &self.salt
    }

    pub fn to_keymat(&self) -> [u8; AEAD_KEYMAT_LEN] {
        let mut m = [0u8; AEAD_KEYMAT_LEN];
        m[..AEAD_KEY_LEN].copy_from_slice(&self.key);
        m[AEAD_KEY_LEN..].copy_from_slice(&self.salt);
        m
    }

    fn nonce(&self, iv8: &[u8; IV_LEN]) -> [u8; 12] {
        let mut n = [0u8; 12];
        n[..4].copy_from_slice(&self.salt);
        n[4..].copy_from_slice(iv8);
        n
    }
}

/// Ephemeral DH key pair. The scalar never leaves this struct.
#[derive(Clone)]
pub struct DhKeyPair {
    secret: p256::NonZeroScalar,
    public: [u8; DH_PUBLIC_LEN],
}

impl std::fmt::Debug for DhKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DhKeyPair")
            .field("public", &hex_prefix(&self.public))
            .finish_non_exhaustive()
    }
}

impl DhKeyPair {
    pub fn public_element(&self) -> &[u8; DH_PUBLIC_LEN] {
        &self.public
    }

    #[cfg(test)]
    pub(crate) fn secret_bytes(&self) -> Vec<u8> {
        self.secret.to_bytes().to_vec()
    }
}

/// Long-term signing key with its raw (SEC1 uncompressed) public key.
#[derive(Clone)]
pub struct SignKeyPair {
    signing: SigningKey,
    public: Vec<u8>,
}

impl std::fmt::Debug for SignKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SignKeyPair")
            .field("public", &hex_prefix(&self.public))
            .finish_non_exhaustive()
    }
}

impl SignKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_signing_key(SigningKey::random(rng))
    }

    pub fn from_signing_key(signing: SigningKey) -> Self {
        let public = signing
            .verifying_key()
            .to_encoded_point(false)
            .as_bytes()
            .to_vec();
        SignKeyPair { signing, public }
    }

    pub fn public(&self) -> &[u8] {
        &self.public
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.signing
    }
}

fn hex_prefix(b: &[u8]) -> String {
    b.iter().take(6).map(|x| format!("{x:02x}")).collect::<String>() + ".."
}

/// The IKE SA key schedule, sliced from one prf+ stream in the order
/// d, ai, ar, ei, er, pi, pr.
#[derive(Clone, PartialEq, Eq)]
pub struct KeySchedule {
    pub sk_d: [u8; PRF_LEN],
    pub sk_ai: [u8; PRF_LEN],
    pub sk_ar: [u8; PRF_LEN],
    pub sk_ei: AeadKey,
    pub sk_er: AeadKey,
    pub sk_pi: [u8; PRF_LEN],
    pub sk_pr: [u8; PRF_LEN],
}

impl std::fmt::Debug for KeySchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("KeySchedule(..)")
    }
}

/// Total prf+ output consumed by [`derive_schedule`].
pub const SCHEDULE_LEN: usize = 5 * PRF_LEN + 2 * AEAD_KEYMAT_LEN;

/// Keys for the SA pair: SA-C protects Client to RS, SA-RS the reverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaKeyPair {
    pub sa_c: AeadKey,
    pub sa_rs: AeadKey,
}

/// Child key material length: two AEAD keys with salts.
pub const CHILD_KEYMAT_LEN: usize = 2 * AEAD_KEYMAT_LEN;

impl SaKeyPair {
    /// Slices `[0,16)` key + `[16,20)` salt for SA-C and `[20,36)` + `[36,40)`
    /// for SA-RS.
    pub fn from_keymat(keymat: &[u8]) -> Result<Self, CryptoError> {
        if keymat.len() != CHILD_KEYMAT_LEN {
            return Err(CryptoError::InvalidKeyLength(keymat.len()));
        }
        Ok(SaKeyPair {
            sa_c: AeadKey::from_keymat(&keymat[..AEAD_KEYMAT_LEN])?,
            sa_rs: AeadKey::from_keymat(&keymat[AEAD_KEYMAT_LEN..])?,
        })
    }
}

/// Swappable group and AEAD provider.
pub trait Suite: Send + Sync {
    fn dh_generate(&self, rng: &mut dyn RngCryptoCore) -> DhKeyPair;
    fn dh_shared(&self, own: &DhKeyPair, peer_public: &[u8]) -> Result<[u8; 32], CryptoError>;
    fn seal(&self, k: &AeadKey, iv8: &[u8; IV_LEN], aad: &[u8], pt: &[u8]) -> Vec<u8>;
    fn open(&self, k: &AeadKey, iv8: &[u8; IV_LEN], aad: &[u8], ct: &[u8]) -> Result<Vec<u8>, CryptoError>;
}

/// Object-safe combination of `RngCore + CryptoRng`.
pub trait RngCryptoCore: RngCore + CryptoRng {}
impl<T: RngCore + CryptoRng> RngCryptoCore for T {}

/// P-256 ECDH with AES-128-CCM-8.
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultSuite;

impl Suite for DefaultSuite {
    fn dh_generate(&self, mut rng: &mut dyn RngCryptoCore) -> DhKeyPair {
        let secret = p256::NonZeroScalar::random(&mut rng);
        let point = p256::PublicKey::from_secret_scalar(&secret).to_encoded_point(false);
        let mut public = [0u8; DH_PUBLIC_LEN];
        public.copy_from_slice(point.as_bytes());
        DhKeyPair { secret, public }
    }

    fn dh_shared(&self, own: &DhKeyPair, peer_public: &[u8]) -> Result<[u8; 32], CryptoError> {
        // Only uncompressed points are accepted; the identity has no SEC1
        // uncompressed form and off-curve points fail decoding.
        if peer_public.len() != DH_PUBLIC_LEN || peer_public[0] != 0x04 {
            return Err(CryptoError::InvalidElement);
        }
        let peer =
            p256::PublicKey::from_sec1_bytes(peer_public).map_err(|_| CryptoError::InvalidElement)?;
        let shared = p256::ecdh::diffie_hellman(&own.secret, peer.as_affine());
        let mut out = [0u8; 32];
        out.copy_from_slice(shared.raw_secret_bytes());
        Ok(out)
    }

    fn seal(&self, k: &AeadKey, iv8: &[u8; IV_LEN], aad: &[u8], pt: &[u8]) -> Vec<u8> {
        let cipher = Ccm8::new(GenericArray::from_slice(&k.key));
        let nonce = k.nonce(iv8);
        cipher
            .encrypt(GenericArray::from_slice(&nonce), Payload { msg: pt, aad })
            .expect("CCM with a 3-byte length field accepts messages below 16 MiB")
    }

    fn open(&self, k: &AeadKey, iv8: &[u8; IV_LEN], aad: &[u8], ct: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ct.len() < AEAD_TAG_LEN {
            return Err(CryptoError::AuthFail);
        }
        let cipher = Ccm8::new(GenericArray::from_slice(&k.key));
        let nonce = k.nonce(iv8);
        cipher
            .decrypt(GenericArray::from_slice(&nonce), Payload { msg: ct, aad })
            .map_err(|_| CryptoError::AuthFail)
    }
}

pub static DEFAULT_SUITE: DefaultSuite = DefaultSuite;

/// HMAC-SHA-256.
pub fn prf(key: &[u8], data: &[u8]) -> [u8; PRF_LEN] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

/// `T1 | T2 | ...` truncated to `n`, with `T1 = prf(K, S | 0x01)` and
/// `Ti = prf(K, T(i-1) | S | i)`.
pub fn prf_plus(key: &[u8], seed: &[u8], n: usize) -> Result<Vec<u8>, CryptoError> {
    if n > PRF_PLUS_MAX {
        return Err(CryptoError::LengthOverflow(n));
    }
    let mut out = Vec::with_capacity(n + PRF_LEN);
    let mut prev: Vec<u8> = Vec::new();
    let mut counter: u8 = 1;
    while out.len() < n {
        let mut block_input = Vec::with_capacity(prev.len() + seed.len() + 1);
        block_input.extend_from_slice(&prev);
        block_input.extend_from_slice(seed);
        block_input.push(counter);
        let t = prf(key, &block_input);
        out.extend_from_slice(&t);
        prev = t.to_vec();
        counter = counter.wrapping_add(1);
    }
    out.truncate(n);
    Ok(out)
}

pub fn aead_seal(k: &AeadKey, iv8: &[u8; IV_LEN], aad: &[u8], pt: &[u8]) -> Vec<u8> {
    DEFAULT_SUITE.seal(k, iv8, aad, pt)
}

pub fn aead_open(k: &AeadKey, iv8: &[u8; IV_LEN], aad: &[u8], ct: &[u8]) -> Result<Vec<u8>, CryptoError> {
    DEFAULT_SUITE.open(k, iv8, aad, ct)
}

pub fn dh_generate<R: RngCore + CryptoRng>(rng: &mut R) -> DhKeyPair {
    DEFAULT_SUITE.dh_generate(rng)
}

pub fn dh_shared(own: &DhKeyPair, peer_public: &[u8]) -> Result<[u8; 32], CryptoError> {
    DEFAULT_SUITE.dh_shared(own, peer_public)
}

/// SKEYSEED = prf(Ni | Nr, shared); the schedule is
/// `prf+(SKEYSEED, Ni | Nr | SPIi | SPIr)` sliced in fixed order.
pub fn derive_schedule(
    shared: &[u8],
    nonce_i: &[u8],
    nonce_r: &[u8],
    spi_i: &[u8; 8],
    spi_r: &[u8; 8],
) -> Result<KeySchedule, CryptoError> {
    for n in [nonce_i, nonce_r] {
        if !(16..=32).contains(&n.len()) {
            return Err(CryptoError::NonceLength(n.len()));
        }
    }
    let mut nonces = Vec::with_capacity(nonce_i.len() + nonce_r.len());
    nonces.extend_from_slice(nonce_i);
    nonces.extend_from_slice(nonce_r);
    let skeyseed = prf(&nonces, shared);
    let mut seed = nonces;
    seed.extend_from_slice(spi_i);
    seed.extend_from_slice(spi_r);
    let stream = prf_plus(&skeyseed, &seed, SCHEDULE_LEN)?;

    let mut pos = 0;
    let mut take32 = || {
        let mut out = [0u8; PRF_LEN];
        out.copy_from_slice(&stream[pos..pos + PRF_LEN]);
        pos += PRF_LEN;
        out
    };
    let sk_d = take32();
    let sk_ai = take32();
    let sk_ar = take32();
    let base = 3 * PRF_LEN;
    let sk_ei = AeadKey::from_keymat(&stream[base..base + AEAD_KEYMAT_LEN])?;
    let sk_er = AeadKey::from_keymat(&stream[base + AEAD_KEYMAT_LEN..base + 2 * AEAD_KEYMAT_LEN])?;
    let tail = base + 2 * AEAD_KEYMAT_LEN;
    let mut sk_pi = [0u8; PRF_LEN];
    let mut sk_pr = [0u8; PRF_LEN];
    sk_pi.copy_from_slice(&stream[tail..tail + PRF_LEN]);
    sk_pr.copy_from_slice(&stream[tail + PRF_LEN..tail + 2 * PRF_LEN]);
    Ok(KeySchedule {
        sk_d,
        sk_ai,
        sk_ar,
        sk_ei,
        sk_er,
        sk_pi,
        sk_pr,
    })
}

/// ECDSA P-256 over SHA-256; 64-byte `r | s` signature.
pub fn sign(key: &SignKeyPair, m: &[u8]) -> Vec<u8> {
    let sig: Signature = key.signing.sign(m);
    sig.to_bytes().to_vec()
}

/// Never errors: any decoding problem yields `false`.
pub fn verify(public: &[u8], m: &[u8], sig: &[u8]) -> bool {
    let Ok(vk) = VerifyingKey::from_sec1_bytes(public) else {
        return false;
    };
    let Ok(sig) = Signature::from_slice(sig) else {
        return false;
    };
    vk.verify(m, &sig).is_ok()
}

/// Checks that `b` is a valid uncompressed P-256 point.
pub fn is_valid_public_key(b: &[u8]) -> bool {
    b.len() == DH_PUBLIC_LEN && b[0] == 0x04 && p256::PublicKey::from_sec1_bytes(b).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn prf_is_deterministic_and_sensitive() {
        let a = prf(b"key", b"data");
        assert_eq!(a, prf(b"key", b"data"));
        assert_ne!(a, prf(b"key", b"datb"));
    }

    #[test]
    fn prf_plus_edge_cases() {
        assert!(prf_plus(b"k", b"s", 0).unwrap().is_empty());
        let one = prf_plus(b"k", b"s", 32).unwrap();
        assert_eq!(one, prf(b"k", b"s\x01").to_vec());
        assert!(prf_plus(b"k", b"s", PRF_PLUS_MAX).is_ok());
        assert_eq!(
            prf_plus(b"k", b"s", PRF_PLUS_MAX + 1),
            Err(CryptoError::LengthOverflow(PRF_PLUS_MAX + 1))
        );
    }

    #[test]
    fn aead_round_trip_and_tamper() {
        let k = AeadKey::random(&mut rng(1));
        let iv = [1u8; 8];
        let ct = aead_seal(&k, &iv, b"aad", b"");
        assert_eq!(ct.len(), AEAD_TAG_LEN);
        assert_eq!(aead_open(&k, &iv, b"aad", &ct).unwrap(), b"");

        let ct = aead_seal(&k, &iv, b"aad", b"hello");
        assert_eq!(ct.len(), 5 + AEAD_TAG_LEN);
        let mut bad = ct.clone();
        bad[0] ^= 1;
        assert_eq!(aead_open(&k, &iv, b"aad", &bad), Err(CryptoError::AuthFail));
        assert_eq!(aead_open(&k, &iv, b"aae", &ct), Err(CryptoError::AuthFail));
        assert_eq!(aead_open(&k, &[2u8; 8], b"aad", &ct), Err(CryptoError::AuthFail));
        assert_eq!(aead_open(&k, &iv, b"aad", &ct[..4]), Err(CryptoError::AuthFail));
    }

    #[test]
    fn dh_agrees_and_rejects_bad_points() {
        let mut r = rng(2);
        let a = dh_generate(&mut r);
        let b = dh_generate(&mut r);
        assert_eq!(
            dh_shared(&a, b.public_element()).unwrap(),
            dh_shared(&b, a.public_element()).unwrap()
        );
        assert_eq!(dh_shared(&a, &[0u8]), Err(CryptoError::InvalidElement));
        assert_eq!(dh_shared(&a, &[0u8; 65]), Err(CryptoError::InvalidElement));
        let mut off_curve = *b.public_element();
        off_curve[64] ^= 1;
        assert_eq!(dh_shared(&a, &off_curve), Err(CryptoError::InvalidElement));
    }

    #[test]
    fn sign_verify() {
        let mut r = rng(3);
        let k = SignKeyPair::generate(&mut r);
        let other = SignKeyPair::generate(&mut r);
        let sig = sign(&k, b"msg");
        assert_eq!(sig.len(), SIGNATURE_LEN);
        assert!(verify(k.public(), b"msg", &sig));
        assert!(!verify(k.public(), b"msh", &sig));
        assert!(!verify(other.public(), b"msg", &sig));
        assert!(!verify(b"junk", b"msg", &sig));
        assert!(!verify(k.public(), b"msg", b"short"));
    }

    #[test]
    fn schedule_slices_prf_plus_stream() {
        let ni = [1u8; 16];
        let nr = [2u8; 16];
        let spi_i = [3u8; 8];
        let spi_r = [4u8; 8];
        let s = derive_schedule(b"shared", &ni, &nr, &spi_i, &spi_r).unwrap();
        let nonces = [ni.as_slice(), nr.as_slice()].concat();
        let skeyseed = prf(&nonces, b"shared");
        let seed = [nonces.as_slice(), &spi_i, &spi_r].concat();
        let stream = prf_plus(&skeyseed, &seed, SCHEDULE_LEN).unwrap();
        assert_eq!(&s.sk_d[..], &stream[..32]);
        assert_eq!(&s.sk_ai[..], &stream[32..64]);
        assert_eq!(&s.sk_ar[..], &stream[64..96]);
        assert_eq!(&s.sk_ei.to_keymat()[..], &stream[96..116]);
        assert_eq!(&s.sk_er.to_keymat()[..], &stream[116..136]);
        assert_eq!(&s.sk_pi[..], &stream[136..168]);
        assert_eq!(&s.sk_pr[..], &stream[168..200]);
    }

    #[test]
    fn schedule_rejects_short_nonce() {
        assert_eq!(
            derive_schedule(b"x", &[0; 8], &[0; 16], &[1; 8], &[1; 8]),
            Err(CryptoError::NonceLength(8))
        );
    }

    #[test]
    fn sa_keypair_slicing() {
        let km: Vec<u8> = (0u8..40).collect();
        let p = SaKeyPair::from_keymat(&km).unwrap();
        assert_eq!(p.sa_c.key()[..], km[0..16]);
        assert_eq!(p.sa_c.salt()[..], km[16..20]);
        assert_eq!(p.sa_rs.key()[..], km[20..36]);
        assert_eq!(p.sa_rs.salt()[..], km[36..40]);
        assert!(SaKeyPair::from_keymat(&km[..39]).is_err());
    }
}
