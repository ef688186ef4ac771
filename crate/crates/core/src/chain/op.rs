use std::fmt;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::contract::{
    BuyerDecision, ContractUpdate, DeliveryAttestation, DisputeOpening, DisputeResolution, Endorsement, TransactionProposal,
    TxId,
};
use crate::crypto::{Digest, Signature};
use crate::identity::{ActorId, Certificate, Credential};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum OpKind {
    SubmitProposal,
    SubmitEndorsement,
    CourierAttest,
    BuyerConfirm,
    DisputeOpen,
    DisputeResolve,
    ContractUpdate,
}

impl OpKind {
    pub fn code(self) -> u8 {
        match self {
            OpKind::SubmitProposal => 0,
            OpKind::SubmitEndorsement => 1,
            OpKind::CourierAttest => 2,
            OpKind::BuyerConfirm => 3,
            OpKind::DisputeOpen => 4,
            OpKind::DisputeResolve => 5,
            OpKind::ContractUpdate => 6,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Typed payload. The wire form is the kind's code followed by the
/// payload's canonical bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpBody {
    Proposal(TransactionProposal),
    Endorsement(Endorsement),
    CourierAttest(DeliveryAttestation),
    BuyerConfirm(BuyerDecision),
    DisputeOpen(DisputeOpening),
    DisputeResolve(DisputeResolution),
    ContractUpdate(ContractUpdate),
}

impl OpBody {
    pub fn kind(&self) -> OpKind {
        match self {
            OpBody::Proposal(_) => OpKind::SubmitProposal,
            OpBody::Endorsement(_) => OpKind::SubmitEndorsement,
            OpBody::CourierAttest(_) => OpKind::CourierAttest,
            OpBody::BuyerConfirm(_) => OpKind::BuyerConfirm,
            OpBody::DisputeOpen(_) => OpKind::DisputeOpen,
            OpBody::DisputeResolve(_) => OpKind::DisputeResolve,
            OpBody::ContractUpdate(_) => OpKind::ContractUpdate,
        }
    }

    /// The transaction the payload itself names. Contract updates carry no
    /// inner id.
    pub fn tx_id(&self) -> Option<&TxId> {
        match self {
            OpBody::Proposal(p) => Some(&p.tx_id),
            OpBody::Endorsement(e) => Some(&e.tx_id),
            OpBody::CourierAttest(a) => Some(&a.tx_id),
            OpBody::BuyerConfirm(d) => Some(&d.tx_id),
            OpBody::DisputeOpen(o) => Some(&o.tx_id),
            OpBody::DisputeResolve(r) => Some(&r.tx_id),
            OpBody::ContractUpdate(_) => None,
        }
    }

    pub fn payload_bytes(&self) -> Vec<u8> {
        match self {
            OpBody::Proposal(p) => p.to_canonical_bytes(),
            OpBody::Endorsement(e) => e.to_canonical_bytes(),
            OpBody::CourierAttest(a) => a.to_canonical_bytes(),
            OpBody::BuyerConfirm(d) => d.to_canonical_bytes(),
            OpBody::DisputeOpen(o) => o.to_canonical_bytes(),
            OpBody::DisputeResolve(r) => r.to_canonical_bytes(),
            OpBody::ContractUpdate(u) => u.to_canonical_bytes(),
        }
    }

    pub fn parse(kind_code: u8, payload: &[u8]) -> Result<OpBody, DecodeError> {
        Ok(match kind_code {
            0 => OpBody::Proposal(Canonical::from_canonical_bytes(payload)?),
            1 => OpBody::Endorsement(Canonical::from_canonical_bytes(payload)?),
            2 => OpBody::CourierAttest(Canonical::from_canonical_bytes(payload)?),
            3 => OpBody::BuyerConfirm(Canonical::from_canonical_bytes(payload)?),
            4 => OpBody::DisputeOpen(Canonical::from_canonical_bytes(payload)?),
            5 => OpBody::DisputeResolve(Canonical::from_canonical_bytes(payload)?),
            6 => OpBody::ContractUpdate(Canonical::from_canonical_bytes(payload)?),
            tag => return Err(DecodeError::InvalidTag { what: "OpKind", tag }),
        })
    }

    /// Signatures the validating peer checks inside the payload, on top of
    /// the op signature and the submitter certificate.
    pub fn inner_signature_count(&self) -> u32 {
        match self {
            // buyer signature + bank signature on the payment token
            OpBody::Proposal(_) => 2,
            // endorser signature + endorser certificate
            OpBody::Endorsement(_) => 2,
            OpBody::CourierAttest(_) => 1,
            OpBody::BuyerConfirm(_) => 1,
            // two bank-signed deposit receipts
            OpBody::DisputeOpen(_) => 2,
            OpBody::DisputeResolve(_) => 1,
            OpBody::ContractUpdate(ContractUpdate::SettlementRecorded { proof: Some(_), .. }) => 1,
            OpBody::ContractUpdate(_) => 0,
        }
    }
}

/// A signed chain operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainOp {
    pub tx_id: TxId,
    pub body: OpBody,
    pub submitter_cert: Certificate,
    pub signature: Signature,
}

/// Exactly-once key: `(op_kind, tx_id, submitter)`.
pub type DedupKey = (OpKind, TxId, ActorId);

impl ChainOp {
    pub fn new(tx_id: TxId, body: OpBody, submitter: &Credential) -> Self {
        let signature = submitter.sign(&Self::signed_bytes(body.kind(), &tx_id, &body.payload_bytes()));
        ChainOp { tx_id, body, submitter_cert: submitter.cert.clone(), signature }
    }

    pub fn signed_bytes(kind: OpKind, tx_id: &TxId, payload: &[u8]) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/op/v1").u8(kind.code()).item(tx_id).bytes(payload);
        enc.finish()
    }

    pub fn kind(&self) -> OpKind {
        self.body.kind()
    }

    pub fn submitter(&self) -> &ActorId {
        &self.submitter_cert.subject_id
    }

    pub fn verify_signature(&self) -> bool {
        let msg = Self::signed_bytes(self.kind(), &self.tx_id, &self.body.payload_bytes());
        self.submitter_cert.verify_signature(&msg, &self.signature)
    }

    pub fn dedup_key(&self) -> DedupKey {
        (self.kind(), self.tx_id.clone(), self.submitter().clone())
    }

    /// Same-tick ordering key: `(tx_id, op_kind, submitter_id)`.
    pub fn tie_key(&self) -> (TxId, OpKind, ActorId) {
        (self.tx_id.clone(), self.kind(), self.submitter().clone())
    }

    pub fn digest(&self) -> Digest {
        Digest::tagged("escrowpay/op-digest/v1", &[&self.to_canonical_bytes()])
    }
}

impl Canonical for ChainOp {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.kind().code())
            .item(&self.tx_id)
            .bytes(&self.body.payload_bytes())
            .item(&self.submitter_cert)
            .item(&self.signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let kind = dec.u8()?;
        let tx_id = dec.item()?;
        let payload = dec.bytes()?;
        let body = OpBody::parse(kind, &payload)?;
        Ok(ChainOp { tx_id, body, submitter_cert: dec.item()?, signature: dec.item()? })
    }
}
