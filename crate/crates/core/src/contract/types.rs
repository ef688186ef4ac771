use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{Digest, Signature};
use crate::identity::{ActorId, Certificate, Credential, WalletId};
use crate::ledger::{DepositReceipt, PaymentToken};

pub type Amount = u64;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxId(pub String);

impl TxId {
    pub fn new(id: impl Into<String>) -> Self {
        TxId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Canonical for TxId {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(TxId(dec.string()?))
    }
}

macro_rules! canonical_enum {
    ($ty:ident { $($variant:ident = $code:expr),+ $(,)? }) => {
        impl $ty {
            pub fn code(self) -> u8 {
                match self { $($ty::$variant => $code),+ }
            }
        }

        impl Canonical for $ty {
            fn encode(&self, enc: &mut Encoder) {
                enc.u8(self.code());
            }
            fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
                match dec.u8()? {
                    $($code => Ok($ty::$variant),)+
                    tag => Err(DecodeError::InvalidTag { what: stringify!($ty), tag }),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ContractState {
    Proposed,
    Endorsing,
    Locked,
    Delivered,
    Disputed,
    Confirmed,
    Settled,
    Rejected,
    Refunded,
}

canonical_enum!(ContractState {
    Proposed = 0,
    Endorsing = 1,
    Locked = 2,
    Delivered = 3,
    Disputed = 4,
    Confirmed = 5,
    Settled = 6,
    Rejected = 7,
    Refunded = 8,
});

impl ContractState {
    pub fn is_absorbing(self) -> bool {
        matches!(self, ContractState::Settled | ContractState::Refunded)
    }

    /// Endorsements are accepted while the proposal is open.
    pub fn accepts_endorsements(self) -> bool {
        matches!(self, ContractState::Proposed | ContractState::Endorsing)
    }

    /// The legal transition relation.
    pub fn can_transition_to(self, next: ContractState) -> bool {
        use ContractState::*;
        matches!(
            (self, next),
            (Proposed, Endorsing)
                | (Endorsing, Locked)
                | (Endorsing, Rejected)
                | (Locked, Delivered)
                | (Delivered, Confirmed)
                | (Delivered, Disputed)
                | (Disputed, Confirmed)
                | (Disputed, Refunded)
                | (Confirmed, Settled)
                | (Rejected, Refunded)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ContractState::Proposed => "Proposed",
            ContractState::Endorsing => "Endorsing",
            ContractState::Locked => "Locked",
            ContractState::Delivered => "Delivered",
            ContractState::Disputed => "Disputed",
            ContractState::Confirmed => "Confirmed",
            ContractState::Settled => "Settled",
            ContractState::Rejected => "Rejected",
            ContractState::Refunded => "Refunded",
        }
    }
}

/// The capacity in which an endorser signs. A bank holding both buyer and
/// merchant accounts endorses once, covering both capacities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Capacity {
    BuyerBank,
    MerchantBank,
    Merchant,
    Platform,
}

canonical_enum!(Capacity { BuyerBank = 0, MerchantBank = 1, Merchant = 2, Platform = 3 });

impl Capacity {
    pub const ALL: [Capacity; 4] = [Capacity::BuyerBank, Capacity::MerchantBank, Capacity::Merchant, Capacity::Platform];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Approve,
    Reject,
}

canonical_enum!(Verdict { Approve = 0, Reject = 1 });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Confirmed,
    Null,
}

canonical_enum!(Decision { Confirmed = 0, Null = 1 });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    Buyer,
    Courier,
}

canonical_enum!(Party { Buyer = 0, Courier = 1 });

/// Commission as parts-per-million of the price.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommissionRate(u32);

impl CommissionRate {
    pub const SCALE: u32 = 1_000_000;

    pub fn from_ppm(ppm: u32) -> Option<Self> {
        (ppm < Self::SCALE).then_some(CommissionRate(ppm))
    }

    /// Rates in `[0, 1)`, rounded to the nearest ppm.
    pub fn from_fraction(rate: f64) -> Option<Self> {
        if !(0.0..1.0).contains(&rate) {
            return None;
        }
        Self::from_ppm((rate * Self::SCALE as f64).round() as u32)
    }

    pub fn ppm(self) -> u32 {
        self.0
    }

    pub fn as_fraction(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }

    /// `(merchant_amount, platform_amount)`; the platform's commission is
    /// floored and the merchant receives the rest.
    pub fn split(self, price: Amount) -> (Amount, Amount) {
        let commission = (price as u128 * self.0 as u128 / Self::SCALE as u128) as Amount;
        (price - commission, commission)
    }
}

impl Default for CommissionRate {
    fn default() -> Self {
        CommissionRate(50_000)
    }
}

/// Dispute payout for a deposit `d` paid by each side:
/// `(winner_amount, platform_amount) = (d + ⌊d/2⌋, d − ⌊d/2⌋)`.
pub fn dispute_payout(deposit: Amount) -> (Amount, Amount) {
    let half = deposit / 2;
    (deposit + half, deposit - half)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransactionProposal {
    pub tx_id: TxId,
    pub product_id: String,
    pub price: Amount,
    pub merchant_id: ActorId,
    pub merchant_wallet: WalletId,
    pub merchant_bank: ActorId,
    pub buyer_wallet: WalletId,
    pub buyer_bank: ActorId,
    pub platform_id: ActorId,
    pub platform_wallet: WalletId,
    pub payment_token: PaymentToken,
    pub buyer_signature: Signature,
}

impl TransactionProposal {
    /// Bytes covered by `buyer_signature`: every field before it.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/proposal/v1");
        self.encode_unsigned(&mut enc);
        enc.finish()
    }

    fn encode_unsigned(&self, enc: &mut Encoder) {
        enc.item(&self.tx_id)
            .str(&self.product_id)
            .u64(self.price)
            .item(&self.merchant_id)
            .item(&self.merchant_wallet)
            .item(&self.merchant_bank)
            .item(&self.buyer_wallet)
            .item(&self.buyer_bank)
            .item(&self.platform_id)
            .item(&self.platform_wallet)
            .item(&self.payment_token);
    }

    /// Fills `buyer_signature` using the buyer's credential.
    pub fn sign(mut self, buyer: &Credential) -> Self {
        self.buyer_signature = buyer.sign(&self.signed_bytes());
        self
    }

    pub fn digest(&self) -> Digest {
        Digest::tagged("escrowpay/proposal-digest/v1", &[&self.to_canonical_bytes()])
    }

    /// Required endorsers keyed by capacity. When both parties bank at the
    /// same institution the map has four entries but three distinct actors.
    pub fn required_endorsers(&self) -> BTreeMap<Capacity, ActorId> {
        BTreeMap::from([
            (Capacity::BuyerBank, self.buyer_bank.clone()),
            (Capacity::MerchantBank, self.merchant_bank.clone()),
            (Capacity::Merchant, self.merchant_id.clone()),
            (Capacity::Platform, self.platform_id.clone()),
        ])
    }
}

impl Canonical for TransactionProposal {
    fn encode(&self, enc: &mut Encoder) {
        self.encode_unsigned(enc);
        enc.item(&self.buyer_signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(TransactionProposal {
            tx_id: dec.item()?,
            product_id: dec.string()?,
            price: dec.u64()?,
            merchant_id: dec.item()?,
            merchant_wallet: dec.item()?,
            merchant_bank: dec.item()?,
            buyer_wallet: dec.item()?,
            buyer_bank: dec.item()?,
            platform_id: dec.item()?,
            platform_wallet: dec.item()?,
            payment_token: dec.item()?,
            buyer_signature: dec.item()?,
        })
    }
}

/// Endorsement request broadcast when a proposal is accepted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndorsementRequest {
    pub tx_id: TxId,
    pub proposal_digest: Digest,
    pub required_endorsers: BTreeMap<Capacity, ActorId>,
}

impl EndorsementRequest {
    /// Distinct actors that must vote.
    pub fn distinct_endorsers(&self) -> Vec<ActorId> {
        let mut v: Vec<ActorId> = self.required_endorsers.values().cloned().collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn capacities_of(&self, actor: &ActorId) -> Vec<Capacity> {
        self.required_endorsers.iter().filter(|(_, a)| *a == actor).map(|(c, _)| *c).collect()
    }
}

impl Canonical for EndorsementRequest {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.tx_id).item(&self.proposal_digest).u32(self.required_endorsers.len() as u32);
        for (cap, actor) in &self.required_endorsers {
            enc.item(cap).item(actor);
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tx_id = dec.item()?;
        let proposal_digest = dec.item()?;
        let n = dec.u32()?;
        let mut required_endorsers = BTreeMap::new();
        for _ in 0..n {
            let cap = dec.item()?;
            required_endorsers.insert(cap, dec.item()?);
        }
        Ok(EndorsementRequest { tx_id, proposal_digest, required_endorsers })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endorsement {
    pub tx_id: TxId,
    pub capacities: Vec<Capacity>,
    pub verdict: Verdict,
    pub proposal_digest: Digest,
    pub endorser_cert: Certificate,
    pub signature: Signature,
}

impl Endorsement {
    pub fn signed_bytes(tx_id: &TxId, capacities: &[Capacity], verdict: Verdict, digest: &Digest) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/endorsement/v1").item(tx_id).seq(capacities.iter()).item(&verdict).item(digest);
        enc.finish()
    }

    pub fn sign(endorser: &Credential, tx_id: TxId, capacities: Vec<Capacity>, verdict: Verdict, proposal_digest: Digest) -> Self {
        let signature = endorser.sign(&Self::signed_bytes(&tx_id, &capacities, verdict, &proposal_digest));
        Endorsement { tx_id, capacities, verdict, proposal_digest, endorser_cert: endorser.cert.clone(), signature }
    }

    pub fn verifies(&self) -> bool {
        self.endorser_cert.verify_signature(
            &Self::signed_bytes(&self.tx_id, &self.capacities, self.verdict, &self.proposal_digest),
            &self.signature,
        )
    }
}

impl Canonical for Endorsement {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.tx_id)
            .seq(self.capacities.iter())
            .item(&self.verdict)
            .item(&self.proposal_digest)
            .item(&self.endorser_cert)
            .item(&self.signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Endorsement {
            tx_id: dec.item()?,
            capacities: dec.seq()?,
            verdict: dec.item()?,
            proposal_digest: dec.item()?,
            endorser_cert: dec.item()?,
            signature: dec.item()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryAttestation {
    pub tx_id: TxId,
    pub proposal_digest: Digest,
    pub courier_signature: Signature,
}

impl DeliveryAttestation {
    pub fn signed_bytes(tx_id: &TxId, digest: &Digest) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/delivery/v1").item(tx_id).item(digest);
        enc.finish()
    }

    pub fn sign(courier: &Credential, tx_id: TxId, proposal_digest: Digest) -> Self {
        let courier_signature = courier.sign(&Self::signed_bytes(&tx_id, &proposal_digest));
        DeliveryAttestation { tx_id, proposal_digest, courier_signature }
    }
}

impl Canonical for DeliveryAttestation {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.tx_id).item(&self.proposal_digest).item(&self.courier_signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(DeliveryAttestation { tx_id: dec.item()?, proposal_digest: dec.item()?, courier_signature: dec.item()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuyerDecision {
    pub tx_id: TxId,
    pub decision: Decision,
    pub buyer_signature: Signature,
}

impl BuyerDecision {
    pub fn signed_bytes(tx_id: &TxId, decision: Decision) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/buyer-decision/v1").item(tx_id).item(&decision);
        enc.finish()
    }

    pub fn sign(buyer: &Credential, tx_id: TxId, decision: Decision) -> Self {
        let buyer_signature = buyer.sign(&Self::signed_bytes(&tx_id, decision));
        BuyerDecision { tx_id, decision, buyer_signature }
    }
}

impl Canonical for BuyerDecision {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.tx_id).item(&self.decision).item(&self.buyer_signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(BuyerDecision { tx_id: dec.item()?, decision: dec.item()?, buyer_signature: dec.item()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisputeOpening {
    pub tx_id: TxId,
    pub buyer_deposit: Option<DepositReceipt>,
    pub courier_deposit: Option<DepositReceipt>,
}

impl Canonical for DisputeOpening {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.tx_id).option(self.buyer_deposit.as_ref()).option(self.courier_deposit.as_ref());
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(DisputeOpening { tx_id: dec.item()?, buyer_deposit: dec.option()?, courier_deposit: dec.option()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisputeResolution {
    pub tx_id: TxId,
    pub winner: Party,
    pub platform_signature: Signature,
}

impl DisputeResolution {
    pub fn signed_bytes(tx_id: &TxId, winner: Party) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/dispute-resolution/v1").item(tx_id).item(&winner);
        enc.finish()
    }

    pub fn sign(platform: &Credential, tx_id: TxId, winner: Party) -> Self {
        let platform_signature = platform.sign(&Self::signed_bytes(&tx_id, winner));
        DisputeResolution { tx_id, winner, platform_signature }
    }
}

impl Canonical for DisputeResolution {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.tx_id).item(&self.winner).item(&self.platform_signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(DisputeResolution { tx_id: dec.item()?, winner: dec.item()?, platform_signature: dec.item()? })
    }
}

/// Bookkeeping updates posted by the platform or the settling bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContractUpdate {
    /// Closes an endorsement round whose deadline has passed.
    ExpireEndorsements,
    /// The settling bank reports the release. In proof mode `proof` carries
    /// the full canonical settlement proof.
    SettlementRecorded { proof_id: Digest, proof: Option<Vec<u8>> },
    RefundRecorded { refund_id: Digest },
}

impl Canonical for ContractUpdate {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            ContractUpdate::ExpireEndorsements => {
                enc.u8(0);
            }
            ContractUpdate::SettlementRecorded { proof_id, proof } => {
                enc.u8(1).item(proof_id).option(proof.as_ref());
            }
            ContractUpdate::RefundRecorded { refund_id } => {
                enc.u8(2).item(refund_id);
            }
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(ContractUpdate::ExpireEndorsements),
            1 => Ok(ContractUpdate::SettlementRecorded { proof_id: dec.item()?, proof: dec.option()? }),
            2 => Ok(ContractUpdate::RefundRecorded { refund_id: dec.item()? }),
            tag => Err(DecodeError::InvalidTag { what: "ContractUpdate", tag }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementInstruction {
    pub merchant_wallet: WalletId,
    pub merchant_amount: Amount,
    pub platform_wallet: WalletId,
    pub platform_amount: Amount,
}

impl SettlementInstruction {
    pub fn total(&self) -> Amount {
        self.merchant_amount + self.platform_amount
    }

    /// `(wallet, amount)` pairs in canonical order: merchant, platform.
    pub fn beneficiaries(&self) -> Vec<(WalletId, Amount)> {
        vec![(self.merchant_wallet, self.merchant_amount), (self.platform_wallet, self.platform_amount)]
    }
}

impl Canonical for SettlementInstruction {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.merchant_wallet)
            .u64(self.merchant_amount)
            .item(&self.platform_wallet)
            .u64(self.platform_amount);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(SettlementInstruction {
            merchant_wallet: dec.item()?,
            merchant_amount: dec.u64()?,
            platform_wallet: dec.item()?,
            platform_amount: dec.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefundInstruction {
    pub buyer_wallet: WalletId,
    pub amount: Amount,
}

impl Canonical for RefundInstruction {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.buyer_wallet).u64(self.amount);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(RefundInstruction { buyer_wallet: dec.item()?, amount: dec.u64()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisputePayoutInstruction {
    pub winner: Party,
    pub winner_wallet: WalletId,
    pub winner_amount: Amount,
    pub platform_wallet: WalletId,
    pub platform_amount: Amount,
    pub buyer_lock: Digest,
    pub courier_lock: Digest,
}

impl Canonical for DisputePayoutInstruction {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.winner)
            .item(&self.winner_wallet)
            .u64(self.winner_amount)
            .item(&self.platform_wallet)
            .u64(self.platform_amount)
            .item(&self.buyer_lock)
            .item(&self.courier_lock);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(DisputePayoutInstruction {
            winner: dec.item()?,
            winner_wallet: dec.item()?,
            winner_amount: dec.u64()?,
            platform_wallet: dec.item()?,
            platform_amount: dec.u64()?,
            buyer_lock: dec.item()?,
            courier_lock: dec.item()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisputeCase {
    pub tx_id: TxId,
    pub buyer_deposit: DepositReceipt,
    pub courier_deposit: DepositReceipt,
    pub winner: Option<Party>,
    /// `(winner_amount, platform_amount)` once resolved.
    pub payout: Option<(Amount, Amount)>,
    pub platform_resolution_signature: Option<Signature>,
}

impl DisputeCase {
    pub fn deposit(&self) -> Amount {
        self.buyer_deposit.amount
    }
}

impl Canonical for DisputeCase {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.tx_id).item(&self.buyer_deposit).item(&self.courier_deposit).option(self.winner.as_ref());
        match self.payout {
            None => enc.u8(0),
            Some((w, p)) => enc.u8(1).u64(w).u64(p),
        };
        enc.option(self.platform_resolution_signature.as_ref());
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tx_id = dec.item()?;
        let buyer_deposit = dec.item()?;
        let courier_deposit = dec.item()?;
        let winner = dec.option()?;
        let payout = match dec.u8()? {
            0 => None,
            1 => Some((dec.u64()?, dec.u64()?)),
            tag => return Err(DecodeError::InvalidTag { what: "payout", tag }),
        };
        Ok(DisputeCase {
            tx_id,
            buyer_deposit,
            courier_deposit,
            winner,
            payout,
            platform_resolution_signature: dec.option()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CourierRecord {
    pub courier_id: ActorId,
    pub courier_wallet: WalletId,
    pub attestation: DeliveryAttestation,
}

impl Canonical for CourierRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.courier_id).item(&self.courier_wallet).item(&self.attestation);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(CourierRecord { courier_id: dec.item()?, courier_wallet: dec.item()?, attestation: dec.item()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuyerConfirmation {
    NotRequested,
    Pending,
    Confirmed(Signature),
    Null(Signature),
}

impl BuyerConfirmation {
    pub fn label(&self) -> &'static str {
        match self {
            BuyerConfirmation::NotRequested => "NotRequested",
            BuyerConfirmation::Pending => "Pending",
            BuyerConfirmation::Confirmed(_) => "Confirmed",
            BuyerConfirmation::Null(_) => "Null",
        }
    }
}

impl Canonical for BuyerConfirmation {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            BuyerConfirmation::NotRequested => enc.u8(0),
            BuyerConfirmation::Pending => enc.u8(1),
            BuyerConfirmation::Confirmed(s) => enc.u8(2).item(s),
            BuyerConfirmation::Null(s) => enc.u8(3).item(s),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(match dec.u8()? {
            0 => BuyerConfirmation::NotRequested,
            1 => BuyerConfirmation::Pending,
            2 => BuyerConfirmation::Confirmed(dec.item()?),
            3 => BuyerConfirmation::Null(dec.item()?),
            tag => return Err(DecodeError::InvalidTag { what: "BuyerConfirmation", tag }),
        })
    }
}

/// Side effects of an applied operation, consumed by the settlement bridge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    EndorsementRequested(EndorsementRequest),
    /// All endorsements approved; the escrow must be (and stay) locked.
    LockFunds { amount: Amount },
    Settle(SettlementInstruction),
    Refund(RefundInstruction),
    DepositsDemanded { amount: Amount },
    DisputePayout(DisputePayoutInstruction),
}

impl Canonical for Effect {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Effect::EndorsementRequested(r) => enc.u8(0).item(r),
            Effect::LockFunds { amount } => enc.u8(1).u64(*amount),
            Effect::Settle(s) => enc.u8(2).item(s),
            Effect::Refund(r) => enc.u8(3).item(r),
            Effect::DepositsDemanded { amount } => enc.u8(4).u64(*amount),
            Effect::DisputePayout(p) => enc.u8(5).item(p),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(match dec.u8()? {
            0 => Effect::EndorsementRequested(dec.item()?),
            1 => Effect::LockFunds { amount: dec.u64()? },
            2 => Effect::Settle(dec.item()?),
            3 => Effect::Refund(dec.item()?),
            4 => Effect::DepositsDemanded { amount: dec.u64()? },
            5 => Effect::DisputePayout(dec.item()?),
            tag => return Err(DecodeError::InvalidTag { what: "Effect", tag }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SettlementRecord {
    pub proof_id: Digest,
    /// Digest of the uploaded proof, when one was uploaded.
    pub proof_digest: Option<Digest>,
}

impl Canonical for SettlementRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.proof_id).option(self.proof_digest.as_ref());
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(SettlementRecord { proof_id: dec.item()?, proof_digest: dec.option()? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn five_percent_of_one_hundred() {
        assert_eq!(CommissionRate::default().split(100), (95, 5));
    }

    #[test]
    fn payout_examples() {
        assert_eq!(dispute_payout(100), (150, 50));
        assert_eq!(dispute_payout(101), (151, 51));
        assert_eq!(dispute_payout(1), (1, 1));
    }

    #[test]
    fn commission_rate_bounds() {
        assert!(CommissionRate::from_fraction(1.0).is_none());
        assert!(CommissionRate::from_fraction(-0.01).is_none());
        assert_eq!(CommissionRate::from_fraction(0.05).unwrap().ppm(), 50_000);
        assert_eq!(CommissionRate::from_fraction(0.0).unwrap().split(77), (77, 0));
    }

    #[test]
    fn absorbing_states_have_no_exit() {
        use ContractState::*;
        let all = [Proposed, Endorsing, Locked, Delivered, Disputed, Confirmed, Settled, Rejected, Refunded];
        for from in [Settled, Refunded] {
            assert!(all.iter().all(|to| !from.can_transition_to(*to)));
        }
    }

    proptest! {
        #[test]
        fn payout_conserves(p in 1u64..=1_000_000) {
            let (w, pl) = dispute_payout(p);
            prop_assert_eq!(w + pl, 2 * p);
            prop_assert_eq!(w, p + p / 2);
        }

        #[test]
        fn settlement_split_conserves(p in 1u64..=u32::MAX as u64, ppm in 0u32..CommissionRate::SCALE) {
            let (m, c) = CommissionRate::from_ppm(ppm).unwrap().split(p);
            prop_assert_eq!(m + c, p);
            // floor of the exact rational commission
            prop_assert_eq!(c as u128, p as u128 * ppm as u128 / 1_000_000);
        }
    }
}
