//! Keyed-hash signatures for deployable filter and action specs.
//!
//! A spec is signed over its canonical JSON serialization (struct field
//! order, no whitespace) with HMAC-SHA256 under a shared trust key. The
//! signature travels hex-encoded next to the spec.

use hmac::{Hmac, Mac};
use serde::Serialize;
use sha2::Sha256;

use crate::error::{Error, Result};

type HmacSha256 = Hmac<Sha256>;

#[derive(Clone)]
pub struct TrustKey(Vec<u8>);

impl std::fmt::Debug for TrustKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TrustKey(..)")
    }
}

impl TrustKey {
    pub fn new(secret: impl AsRef<[u8]>) -> Self {
        Self(secret.as_ref().to_vec())
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("hmac accepts keys of any length")
    }

    pub fn sign_bytes(&self, bytes: &[u8]) -> String {
        let mut mac = self.mac();
        mac.update(bytes);
        hex::encode(mac.finalize().into_bytes())
    }

    pub fn verify_bytes(&self, bytes: &[u8], signature: &str) -> bool {
        let Ok(raw) = hex::decode(signature) else {
            return false;
        };
        let mut mac = self.mac();
        mac.update(bytes);
        mac.verify_slice(&raw).is_ok()
    }

    pub fn sign<T: Serialize>(&self, spec: &T) -> String {
        self.sign_bytes(&canonical_bytes(spec))
    }

    pub fn verify<T: Serialize>(&self, spec: &T, signature: &str) -> bool {
        self.verify_bytes(&canonical_bytes(spec), signature)
    }

    /// Like [`verify`](Self::verify) but returns a `BadSignature` error
    /// naming `what`.
    pub fn check<T: Serialize>(&self, what: &str, spec: &T, signature: &str) -> Result<()> {
        if self.verify(spec, signature) {
            Ok(())
        } else {
            Err(Error::BadSignature(what.to_string()))
        }
    }
}

pub fn canonical_bytes<T: Serialize>(spec: &T) -> Vec<u8> {
    serde_json::to_vec(spec).expect("spec types serialize infallibly")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predicate::PredicateSpec;

    #[test]
    fn sign_and_verify() {
        let key = TrustKey::new("s3cret");
        let spec = PredicateSpec::default().param("net_out.*");
        let sig = key.sign(&spec);
        assert!(key.verify(&spec, &sig));
        assert!(!TrustKey::new("other").verify(&spec, &sig));
        assert!(!key.verify(&spec.clone().param("net_in.*"), &sig));
        assert!(!key.verify(&spec, "not-hex"));
    }
}
