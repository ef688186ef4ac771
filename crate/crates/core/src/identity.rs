//! Actors, certificates and the CBDC-side wallet registry.
//!
//! A single root [`Role::CentralAuthority`] issues certificates to every
//! institutional actor. Banks act as sub-issuers for wallet certificates
//! (buyers, merchants, couriers). A buyer's on-chain identity is the
//! pseudonym derived from its wallet key, never its platform user id; the
//! link between the two lives only in [`WalletRegistry`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{Digest, KeyPair, PublicKey, Signature};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("{issuer} ({role:?}) may not issue {requested:?} certificates")]
    UnauthorizedIssuer { issuer: ActorId, role: Role, requested: Role },
    #[error("user already holds a wallet at bank {0}")]
    DuplicateRegistration(ActorId),
    #[error("{0} is not a known bank")]
    UnknownBank(ActorId),
    #[error("certificate for {0} does not verify against the authority set")]
    UntrustedCertificate(ActorId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Buyer,
    Merchant,
    Courier,
    Bank,
    Platform,
    OrderingNode,
    CentralAuthority,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Buyer => 0,
            Role::Merchant => 1,
            Role::Courier => 2,
            Role::Bank => 3,
            Role::Platform => 4,
            Role::OrderingNode => 5,
            Role::CentralAuthority => 6,
        }
    }

    fn from_code(code: u8) -> Result<Self, DecodeError> {
        Ok(match code {
            0 => Role::Buyer,
            1 => Role::Merchant,
            2 => Role::Courier,
            3 => Role::Bank,
            4 => Role::Platform,
            5 => Role::OrderingNode,
            6 => Role::CentralAuthority,
            tag => return Err(DecodeError::InvalidTag { what: "role", tag }),
        })
    }

    /// Whether an issuer holding `self` may certify `subject`.
    pub fn may_issue(self, subject: Role) -> bool {
        match self {
            Role::CentralAuthority => true,
            Role::Bank => matches!(subject, Role::Buyer | Role::Merchant | Role::Courier),
            _ => false,
        }
    }
}

impl Canonical for Role {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.code());
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Role::from_code(dec.u8()?)
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActorId(pub String);

impl ActorId {
    pub fn new(id: impl Into<String>) -> Self {
        ActorId(id.into())
    }

    /// Pseudonymous actor id for a wallet holder.
    pub fn for_wallet(wallet: &WalletId) -> Self {
        ActorId(format!("w-{}", wallet.to_hex()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Canonical for ActorId {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(ActorId(dec.string()?))
    }
}

/// CBDC wallet identifier: the first 20 bytes of SHA-256 over the wallet's
/// public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WalletId(pub [u8; 20]);

impl WalletId {
    pub fn from_public_key(pk: &PublicKey) -> Self {
        let d = Digest::of(&pk.0);
        let mut out = [0u8; 20];
        out.copy_from_slice(&d.0[..20]);
        WalletId(out)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for WalletId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WalletId({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for WalletId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Canonical for WalletId {
    fn encode(&self, enc: &mut Encoder) {
        enc.raw(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(WalletId(dec.array()?))
    }
}

impl Serialize for WalletId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for WalletId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(s).map_err(serde::de::Error::custom)?;
        Ok(WalletId(bytes.try_into().map_err(|_| serde::de::Error::custom("expected 20 bytes"))?))
    }
}

/// Role-bound credential. Layout (canonical): `subject_id` (str),
/// `role` (u8), `public_key` (32 bytes), `issuer_id` (str),
/// `issuer_signature` (64 bytes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject_id: ActorId,
    pub role: Role,
    pub public_key: PublicKey,
    pub issuer_id: ActorId,
    pub issuer_signature: Signature,
}

impl Certificate {
    /// Bytes covered by `issuer_signature`.
    pub fn signed_bytes(subject_id: &ActorId, role: Role, public_key: &PublicKey) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/cert/v1").item(subject_id).item(&role).item(public_key);
        enc.finish()
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.to_canonical_bytes())
    }

    /// Wallet controlled by the certificate's key.
    pub fn wallet_id(&self) -> WalletId {
        WalletId::from_public_key(&self.public_key)
    }

    /// Checks `payload` was signed by the certificate's subject.
    pub fn verify_signature(&self, payload: &[u8], sig: &Signature) -> bool {
        self.public_key.verify(payload, sig)
    }
}

impl Canonical for Certificate {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.subject_id)
            .item(&self.role)
            .item(&self.public_key)
            .item(&self.issuer_id)
            .item(&self.issuer_signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Certificate {
            subject_id: dec.item()?,
            role: dec.item()?,
            public_key: dec.item()?,
            issuer_id: dec.item()?,
            issuer_signature: dec.item()?,
        })
    }
}

/// An actor that can sign: key pair plus its own certificate.
#[derive(Debug, Clone)]
pub struct Credential {
    pub keys: KeyPair,
    pub cert: Certificate,
}

impl Credential {
    pub fn id(&self) -> &ActorId {
        &self.cert.subject_id
    }

    pub fn role(&self) -> Role {
        self.cert.role
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        self.keys.sign(msg)
    }

    pub fn wallet_id(&self) -> WalletId {
        self.cert.wallet_id()
    }

    /// Self-signed root credential.
    pub fn new_root(id: ActorId, keys: KeyPair) -> Self {
        let pk = keys.public_key();
        let sig = keys.sign(&Certificate::signed_bytes(&id, Role::CentralAuthority, &pk));
        let cert = Certificate {
            subject_id: id.clone(),
            role: Role::CentralAuthority,
            public_key: pk,
            issuer_id: id,
            issuer_signature: sig,
        };
        Credential { keys, cert }
    }

    /// Issue a certificate and bundle it with the subject's keys.
    pub fn issue(&self, subject_id: ActorId, role: Role, subject_keys: KeyPair) -> Result<Credential, IdentityError> {
        let cert = issue_certificate(self, subject_keys.public_key(), subject_id, role)?;
        Ok(Credential { keys: subject_keys, cert })
    }
}

pub fn issue_certificate(
    authority: &Credential,
    subject_public_key: PublicKey,
    subject_id: ActorId,
    role: Role,
) -> Result<Certificate, IdentityError> {
    if !authority.role().may_issue(role) {
        return Err(IdentityError::UnauthorizedIssuer {
            issuer: authority.id().clone(),
            role: authority.role(),
            requested: role,
        });
    }
    let sig = authority.sign(&Certificate::signed_bytes(&subject_id, role, &subject_public_key));
    Ok(Certificate {
        subject_id,
        role,
        public_key: subject_public_key,
        issuer_id: authority.id().clone(),
        issuer_signature: sig,
    })
}

/// Signature check against a single issuer key. Returns false on any
/// failure.
pub fn verify_certificate(cert: &Certificate, authority_public_key: &PublicKey) -> bool {
    authority_public_key.verify(
        &Certificate::signed_bytes(&cert.subject_id, cert.role, &cert.public_key),
        &cert.issuer_signature,
    )
}

/// Trust store: the root certificate plus the bank sub-issuers it certified.
#[derive(Debug, Clone)]
pub struct AuthoritySet {
    root: Certificate,
    banks: BTreeMap<ActorId, Certificate>,
}

impl AuthoritySet {
    pub fn new(root: Certificate) -> Self {
        AuthoritySet { root, banks: BTreeMap::new() }
    }

    pub fn root(&self) -> &Certificate {
        &self.root
    }

    pub fn add_bank(&mut self, cert: Certificate) -> Result<(), IdentityError> {
        if cert.role != Role::Bank || cert.issuer_id != self.root.subject_id || !verify_certificate(&cert, &self.root.public_key) {
            return Err(IdentityError::UntrustedCertificate(cert.subject_id));
        }
        self.banks.insert(cert.subject_id.clone(), cert);
        Ok(())
    }

    pub fn bank(&self, id: &ActorId) -> Option<&Certificate> {
        self.banks.get(id)
    }

    pub fn banks(&self) -> impl Iterator<Item = &Certificate> {
        self.banks.values()
    }

    /// Full chain check: the issuer must be the root or a certified bank,
    /// the issuer's role must allow the subject's role, and the signature
    /// must verify.
    pub fn verify(&self, cert: &Certificate) -> bool {
        if cert.issuer_id == self.root.subject_id {
            if cert.role == Role::CentralAuthority && cert != &self.root {
                return false;
            }
            return verify_certificate(cert, &self.root.public_key);
        }
        match self.banks.get(&cert.issuer_id) {
            Some(bank) => Role::Bank.may_issue(cert.role) && verify_certificate(cert, &bank.public_key),
            None => false,
        }
    }
}

/// Stored only on the CBDC side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalletBinding {
    pub platform_user_id: String,
    pub wallet_id: WalletId,
    pub registered_bank: ActorId,
    pub public_key: PublicKey,
}

#[derive(Default)]
struct RegistryInner {
    by_user: BTreeMap<(ActorId, String), WalletId>,
    by_wallet: BTreeMap<WalletId, WalletBinding>,
}

/// The CBDC gateway's user ↔ wallet indirection table.
pub struct WalletRegistry {
    authorities: AuthoritySet,
    inner: RwLock<RegistryInner>,
}

impl WalletRegistry {
    pub fn new(authorities: AuthoritySet) -> Self {
        WalletRegistry { authorities, inner: RwLock::default() }
    }

    pub fn authorities(&self) -> &AuthoritySet {
        &self.authorities
    }

    pub fn register_wallet(&self, user_id: &str, bank_id: &ActorId, public_key: PublicKey) -> Result<WalletBinding, IdentityError> {
        if self.authorities.bank(bank_id).is_none() {
            return Err(IdentityError::UnknownBank(bank_id.clone()));
        }
        let wallet_id = WalletId::from_public_key(&public_key);
        let mut inner = self.inner.write().unwrap();
        let key = (bank_id.clone(), user_id.to_owned());
        if inner.by_user.contains_key(&key) || inner.by_wallet.contains_key(&wallet_id) {
            return Err(IdentityError::DuplicateRegistration(bank_id.clone()));
        }
        let binding = WalletBinding {
            platform_user_id: user_id.to_owned(),
            wallet_id,
            registered_bank: bank_id.clone(),
            public_key,
        };
        inner.by_user.insert(key, wallet_id);
        inner.by_wallet.insert(wallet_id, binding.clone());
        Ok(binding)
    }

    pub fn binding(&self, wallet: &WalletId) -> Option<WalletBinding> {
        self.inner.read().unwrap().by_wallet.get(wallet).cloned()
    }

    pub fn wallet_of(&self, bank_id: &ActorId, user_id: &str) -> Option<WalletId> {
        self.inner.read().unwrap().by_user.get(&(bank_id.clone(), user_id.to_owned())).copied()
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().by_wallet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
