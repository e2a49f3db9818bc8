//! X.509 certificates for certificate-based public keys.
//!
//! A root authority certifies issuing authorities, which sign end-entity
//! certificates binding a P-256 public key to an identity. Chains travel
//! leaf first and are checked up to a pinned root key.

use std::str::FromStr;
use std::time::Duration;

use p256::ecdsa::signature::Verifier;
use p256::ecdsa::{DerSignature, Signature, VerifyingKey};
use p256::pkcs8::EncodePublicKey;
use x509_cert::builder::{Builder, CertificateBuilder, Profile};
use x509_cert::der::asn1::UtcTime;
use x509_cert::der::{Decode, Encode};
use x509_cert::ext::pkix::BasicConstraints;
use x509_cert::name::Name;
use x509_cert::serial_number::SerialNumber;
use x509_cert::spki::SubjectPublicKeyInfoOwned;
use x509_cert::time::{Time, Validity};
use x509_cert::Certificate;

use super::{CryptoError, SignKeyPair};

/// Longest chain accepted, leaf included.
pub const MAX_CHAIN_LEN: usize = 4;
const BASIC_CONSTRAINTS_OID: &str = "2.5.29.19";

fn cert_err(e: impl std::fmt::Display) -> CryptoError {
    CryptoError::Certificate(e.to_string())
}

/// Signer of certificates. A root has no certificate of its own.
#[derive(Debug, Clone)]
pub struct CertificateAuthority {
    pub name: String,
    pub key: SignKeyPair,
    /// Own certificate, issued by the parent authority.
    pub certificate: Option<Vec<u8>>,
}

impl CertificateAuthority {
    /// A root authority; relying parties pin its public key.
    pub fn new(name: impl Into<String>, key: SignKeyPair) -> Self {
        CertificateAuthority {
            name: name.into(),
            key,
            certificate: None,
        }
    }

    pub fn public(&self) -> &[u8] {
        self.key.public()
    }

    /// End-entity certificate for `subject`.
    pub fn issue(
        &self,
        subject: &str,
        subject_public: &[u8],
        serial: u32,
        not_before: u64,
        not_after: u64,
    ) -> Result<Vec<u8>, CryptoError> {
        issue_certificate(self, subject, subject_public, serial, not_before, not_after)
    }

    /// Certifies a subordinate authority that may only issue end-entity
    /// certificates.
    pub fn issue_authority(
        &self,
        name: &str,
        key: SignKeyPair,
        serial: u32,
        not_before: u64,
        not_after: u64,
    ) -> Result<CertificateAuthority, CryptoError> {
        let profile = Profile::SubCA {
            issuer: self.dn()?,
            path_len_constraint: Some(0),
        };
        let der = build(self, profile, name, key.public(), serial, not_before, not_after)?;
        Ok(CertificateAuthority {
            name: name.into(),
            key,
            certificate: Some(der),
        })
    }

    /// `leaf` followed by the certificates up to, not including, the root.
    pub fn chain(&self, leaf: Vec<u8>) -> Vec<Vec<u8>> {
        std::iter::once(leaf).chain(self.certificate.clone()).collect()
    }

    fn dn(&self) -> Result<Name, CryptoError> {
        Name::from_str(&format!("CN={}", self.name)).map_err(cert_err)
    }
}

fn utc(unix: u64) -> Result<Time, CryptoError> {
    Ok(Time::UtcTime(
        UtcTime::from_unix_duration(Duration::from_secs(unix)).map_err(cert_err)?,
    ))
}

fn build(
    ca: &CertificateAuthority,
    profile: Profile,
    subject: &str,
    subject_public: &[u8],
    serial: u32,
    not_before: u64,
    not_after: u64,
) -> Result<Vec<u8>, CryptoError> {
    let vk = VerifyingKey::from_sec1_bytes(subject_public).map_err(cert_err)?;
    let spki_der = vk.to_public_key_der().map_err(cert_err)?;
    let spki = SubjectPublicKeyInfoOwned::try_from(spki_der.as_bytes()).map_err(cert_err)?;
    let subject_name = Name::from_str(&format!("CN={subject}")).map_err(cert_err)?;
    let validity = Validity {
        not_before: utc(not_before)?,
        not_after: utc(not_after)?,
    };
    let builder = CertificateBuilder::new(
        profile,
        SerialNumber::from(serial),
        validity,
        subject_name,
        spki,
        ca.key.signing_key(),
    )
    .map_err(cert_err)?;
    let cert = builder.build::<DerSignature>().map_err(cert_err)?;
    cert.to_der().map_err(cert_err)
}

pub fn issue_certificate(
    ca: &CertificateAuthority,
    subject: &str,
    subject_public: &[u8],
    serial: u32,
    not_before: u64,
    not_after: u64,
) -> Result<Vec<u8>, CryptoError> {
    let profile = Profile::Leaf {
        issuer: ca.dn()?,
        enable_key_agreement: false,
        enable_key_encipherment: false,
    };
    build(ca, profile, subject, subject_public, serial, not_before, not_after)
}

fn subject_key(cert: &Certificate) -> Result<Vec<u8>, CryptoError> {
    let raw = cert
        .tbs_certificate
        .subject_public_key_info
        .subject_public_key
        .raw_bytes()
        .to_vec();
    if !super::is_valid_public_key(&raw) {
        return Err(CryptoError::Certificate("subject key is not a P-256 point".into()));
    }
    Ok(raw)
}

/// Extracts the subject public key (SEC1 uncompressed) without verifying.
pub fn certificate_public_key(der: &[u8]) -> Result<Vec<u8>, CryptoError> {
    subject_key(&Certificate::from_der(der).map_err(cert_err)?)
}

fn common_name(name: &Name) -> Option<String> {
    let s = name.to_string();
    s.strip_prefix("CN=").map(str::to_owned)
}

fn is_authority(cert: &Certificate) -> bool {
    cert.tbs_certificate
        .extensions
        .iter()
        .flatten()
        .filter(|e| e.extn_id.to_string() == BASIC_CONSTRAINTS_OID)
        .any(|e| BasicConstraints::from_der(e.extn_value.as_bytes()).is_ok_and(|bc| bc.ca))
}

/// Signature by `issuer_public` and validity at `now`.
fn check_link(cert: &Certificate, issuer_public: &[u8], now: u64) -> Result<(), CryptoError> {
    let tbs = cert.tbs_certificate.to_der().map_err(cert_err)?;
    let sig_bytes = cert
        .signature
        .as_bytes()
        .ok_or_else(|| CryptoError::Certificate("signature has unused bits".into()))?;
    let sig = DerSignature::from_bytes(sig_bytes).map_err(cert_err)?;
    let sig: Signature = sig.try_into().map_err(cert_err)?;
    let issuer = VerifyingKey::from_sec1_bytes(issuer_public).map_err(cert_err)?;
    issuer
        .verify(&tbs, &sig)
        .map_err(|_| CryptoError::Certificate("bad issuer signature".into()))?;
    let validity = &cert.tbs_certificate.validity;
    let nb = validity.not_before.to_unix_duration().as_secs();
    let na = validity.not_after.to_unix_duration().as_secs();
    if now < nb || now >= na {
        return Err(CryptoError::Certificate("outside validity period".into()));
    }
    Ok(())
}

fn check_subject(cert: &Certificate, expected: Option<&str>) -> Result<(), CryptoError> {
    if let Some(expected) = expected {
        let cn = common_name(&cert.tbs_certificate.subject);
        if cn.as_deref() != Some(expected) {
            return Err(CryptoError::Certificate(format!(
                "subject {cn:?} does not match {expected:?}"
            )));
        }
    }
    Ok(())
}

/// Verifies one certificate directly against its issuer's key, plus the
/// subject name (when given) and validity at `now`. Returns the certified
/// public key.
pub fn verify_certificate(
    der: &[u8],
    issuer_public: &[u8],
    expected_subject: Option<&str>,
    now: u64,
) -> Result<Vec<u8>, CryptoError> {
    let cert = Certificate::from_der(der).map_err(cert_err)?;
    check_link(&cert, issuer_public, now)?;
    check_subject(&cert, expected_subject)?;
    subject_key(&cert)
}

/// Verifies a leaf-first chain up to the pinned `root_public` key. Every
/// certificate above the leaf must be an authority and name the issuer of
/// the one below it. Returns the leaf's public key.
pub fn verify_chain(
    chain: &[Vec<u8>],
    root_public: &[u8],
    expected_subject: Option<&str>,
    now: u64,
) -> Result<Vec<u8>, CryptoError> {
    if chain.is_empty() || chain.len() > MAX_CHAIN_LEN {
        return Err(CryptoError::Certificate("chain length out of range".into()));
    }
    let certs = chain
        .iter()
        .map(|d| Certificate::from_der(d).map_err(cert_err))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, cert) in certs.iter().enumerate() {
        match certs.get(i + 1) {
            Some(parent) => {
                if !is_authority(parent) {
                    return Err(CryptoError::Certificate("intermediate is not an authority".into()));
                }
                if cert.tbs_certificate.issuer != parent.tbs_certificate.subject {
                    return Err(CryptoError::Certificate("issuer name mismatch".into()));
                }
                check_link(cert, &subject_key(parent)?, now)?;
            }
            None => check_link(cert, root_public, now)?,
        }
    }
    check_subject(&certs[0], expected_subject)?;
    if certs.len() > 1 && is_authority(&certs[0]) {
        return Err(CryptoError::Certificate("leaf is an authority".into()));
    }
    subject_key(&certs[0])
}
