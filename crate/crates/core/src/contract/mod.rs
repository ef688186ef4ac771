//! Per-transaction escrow state machine.
//!
//! Every contract is a pure fold over the committed chain operations for its
//! `tx_id`. [`transition`] never fails: an operation that is illegal in the
//! current state leaves the contract untouched and comes back as
//! [`OpResult::Rejected`].
//!
//! ```text
//! Proposed → Endorsing → Locked → Delivered → Confirmed → Settled
//!                 │                    │           ▲
//!                 ▼                    ▼           │
//!             Rejected            Disputed ────────┘
//!                 │                    │
//!                 ▼                    ▼
//!             Refunded ◄───────────────┘
//! ```

mod types;

pub use types::*;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::chain::{ChainOp, OpBody};
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::Digest;
use crate::identity::{ActorId, AuthoritySet, Certificate, Role};
use crate::ledger::{DepositReceipt, SettlementProof};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContractError {
    #[error("transaction id already in use")]
    DuplicateTxId,
    #[error("invalid signature")]
    InvalidSignature,
    #[error("price must be positive")]
    NonPositivePrice,
    #[error("{0} is not a required endorser")]
    NotRequiredEndorser(ActorId),
    #[error("{0} already endorsed")]
    AlreadyEndorsed(ActorId),
    #[error("operation not allowed in state {0:?}")]
    WrongPhase(ContractState),
    #[error("signer role not allowed for this operation")]
    WrongRole,
    #[error("deposit of {got} does not match price {expected}")]
    DepositMismatch { expected: Amount, got: Amount },
    #[error("missing dispute deposit")]
    MissingDeposit,
    #[error("invalid deposit receipt: {0}")]
    InvalidDeposit(&'static str),
    #[error("certificate does not verify against the authority set")]
    UntrustedCertificate,
    #[error("no contract for this transaction")]
    UnknownContract,
    #[error("malformed proposal: {0}")]
    InvalidProposal(&'static str),
    #[error("endorsement deadline not reached")]
    DeadlineNotReached,
    #[error("settlement proof rejected: {0}")]
    InvalidProof(&'static str),
    #[error("operation tx_id does not match payload")]
    TxIdMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractConfig {
    pub commission: CommissionRate,
    pub endorsement_timeout_ms: u64,
    /// When set, `SettlementRecorded` must carry a verifying settlement proof.
    pub require_settlement_proof: bool,
}

impl Default for ContractConfig {
    fn default() -> Self {
        ContractConfig {
            commission: CommissionRate::default(),
            endorsement_timeout_ms: 30_000,
            require_settlement_proof: false,
        }
    }
}

/// Everything a transition may consult besides the contract itself.
#[derive(Clone, Copy)]
pub struct ContractEnv<'a> {
    pub config: &'a ContractConfig,
    pub authorities: &'a AuthoritySet,
    /// Timestamp of the block the operation is committed in.
    pub block_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EscrowContract {
    pub proposal: TransactionProposal,
    pub proposal_digest: Digest,
    pub state: ContractState,
    pub required: BTreeMap<Capacity, ActorId>,
    pub endorsements: BTreeMap<ActorId, Endorsement>,
    pub proposed_at_ms: u64,
    pub courier: Option<CourierRecord>,
    pub buyer_confirmation: BuyerConfirmation,
    pub dispute: Option<DisputeCase>,
    pub settlement_instruction: Option<SettlementInstruction>,
    pub refund_instruction: Option<RefundInstruction>,
    pub settlement_record: Option<SettlementRecord>,
    pub refund_record: Option<Digest>,
}

fn trusted(cert: &Certificate, env: &ContractEnv<'_>) -> Result<(), ContractError> {
    if env.authorities.verify(cert) {
        Ok(())
    } else {
        Err(ContractError::UntrustedCertificate)
    }
}

impl EscrowContract {
    /// Accepts a buyer's proposal. The contract is created `Proposed` and
    /// moves to `Endorsing` as the endorsement request goes out.
    pub fn propose(
        proposal: TransactionProposal,
        submitter: &Certificate,
        env: &ContractEnv<'_>,
    ) -> Result<(EscrowContract, EndorsementRequest), ContractError> {
        if submitter.role != Role::Buyer {
            return Err(ContractError::WrongRole);
        }
        trusted(submitter, env)?;
        if submitter.wallet_id() != proposal.buyer_wallet || submitter.issuer_id != proposal.buyer_bank {
            return Err(ContractError::InvalidProposal("buyer certificate does not match buyer wallet"));
        }
        if !submitter.verify_signature(&proposal.signed_bytes(), &proposal.buyer_signature) {
            return Err(ContractError::InvalidSignature);
        }
        if proposal.price == 0 {
            return Err(ContractError::NonPositivePrice);
        }
        if proposal.payment_token.tx_id != proposal.tx_id || proposal.payment_token.amount != proposal.price {
            return Err(ContractError::InvalidProposal("payment token does not cover this transaction"));
        }
        let token_bank = env.authorities.bank(&proposal.buyer_bank).ok_or(ContractError::InvalidProposal("unknown buyer bank"))?;
        if proposal.payment_token.bank_id != proposal.buyer_bank || !proposal.payment_token.verify(&token_bank.public_key) {
            return Err(ContractError::InvalidProposal("payment token signature"));
        }

        let proposal_digest = proposal.digest();
        let required = proposal.required_endorsers();
        let request = EndorsementRequest {
            tx_id: proposal.tx_id.clone(),
            proposal_digest,
            required_endorsers: required.clone(),
        };
        let mut contract = EscrowContract {
            proposal,
            proposal_digest,
            state: ContractState::Proposed,
            required,
            endorsements: BTreeMap::new(),
            proposed_at_ms: env.block_time_ms,
            courier: None,
            buyer_confirmation: BuyerConfirmation::NotRequested,
            dispute: None,
            settlement_instruction: None,
            refund_instruction: None,
            settlement_record: None,
            refund_record: None,
        };
        contract.state = ContractState::Endorsing;
        Ok((contract, request))
    }

    pub fn tx_id(&self) -> &TxId {
        &self.proposal.tx_id
    }

    pub fn price(&self) -> Amount {
        self.proposal.price
    }

    pub fn endorsement_request(&self) -> EndorsementRequest {
        EndorsementRequest {
            tx_id: self.tx_id().clone(),
            proposal_digest: self.proposal_digest,
            required_endorsers: self.required.clone(),
        }
    }

    fn require_state(&self, expected: ContractState) -> Result<(), ContractError> {
        if self.state == expected {
            Ok(())
        } else {
            Err(ContractError::WrongPhase(self.state))
        }
    }

    fn require_platform(&self, signer: &Certificate, env: &ContractEnv<'_>) -> Result<(), ContractError> {
        if signer.role != Role::Platform || signer.subject_id != self.proposal.platform_id {
            return Err(ContractError::WrongRole);
        }
        trusted(signer, env)
    }

    fn require_settling_bank(&self, signer: &Certificate, env: &ContractEnv<'_>) -> Result<(), ContractError> {
        if signer.role != Role::Bank || signer.subject_id != self.proposal.buyer_bank {
            return Err(ContractError::WrongRole);
        }
        trusted(signer, env)
    }

    fn refund(&mut self) -> Effect {
        let instruction = RefundInstruction { buyer_wallet: self.proposal.buyer_wallet, amount: self.price() };
        self.refund_instruction = Some(instruction.clone());
        Effect::Refund(instruction)
    }

    fn settle(&mut self, env: &ContractEnv<'_>) -> Effect {
        let (merchant_amount, platform_amount) = env.config.commission.split(self.price());
        let instruction = SettlementInstruction {
            merchant_wallet: self.proposal.merchant_wallet,
            merchant_amount,
            platform_wallet: self.proposal.platform_wallet,
            platform_amount,
        };
        self.settlement_instruction = Some(instruction.clone());
        Effect::Settle(instruction)
    }

    pub fn record_endorsement(
        &mut self,
        e: &Endorsement,
        env: &ContractEnv<'_>,
    ) -> Result<Vec<Effect>, ContractError> {
        if !self.state.accepts_endorsements() {
            return Err(ContractError::WrongPhase(self.state));
        }
        if &e.tx_id != self.tx_id() {
            return Err(ContractError::TxIdMismatch);
        }
        let endorser = &e.endorser_cert.subject_id;
        let owed: Vec<Capacity> = self.required.iter().filter(|(_, a)| *a == endorser).map(|(c, _)| *c).collect();
        if owed.is_empty() {
            return Err(ContractError::NotRequiredEndorser(endorser.clone()));
        }
        if self.endorsements.contains_key(endorser) {
            return Err(ContractError::AlreadyEndorsed(endorser.clone()));
        }
        let mut claimed = e.capacities.clone();
        claimed.sort();
        if claimed != owed {
            return Err(ContractError::NotRequiredEndorser(endorser.clone()));
        }
        let role_ok = owed.iter().all(|c| match c {
            Capacity::BuyerBank | Capacity::MerchantBank => e.endorser_cert.role == Role::Bank,
            Capacity::Merchant => e.endorser_cert.role == Role::Merchant,
            Capacity::Platform => e.endorser_cert.role == Role::Platform,
        });
        if !role_ok {
            return Err(ContractError::WrongRole);
        }
        trusted(&e.endorser_cert, env)?;
        if !e.verifies() {
            return Err(ContractError::InvalidSignature);
        }

        self.endorsements.insert(endorser.clone(), e.clone());
        if self.state == ContractState::Proposed {
            self.state = ContractState::Endorsing;
        }

        let voters = self.endorsement_request().distinct_endorsers();
        if !voters.iter().all(|v| self.endorsements.contains_key(v)) {
            return Ok(vec![]);
        }
        let unanimous = self
            .endorsements
            .values()
            .all(|e| e.verdict == Verdict::Approve && e.proposal_digest == self.proposal_digest);
        if unanimous {
            self.state = ContractState::Locked;
            Ok(vec![Effect::LockFunds { amount: self.price() }])
        } else {
            self.state = ContractState::Rejected;
            Ok(vec![self.refund()])
        }
    }

    /// Closes an endorsement round that outlived its deadline.
    pub fn expire_endorsements(&mut self, env: &ContractEnv<'_>) -> Result<Vec<Effect>, ContractError> {
        if !self.state.accepts_endorsements() {
            return Err(ContractError::WrongPhase(self.state));
        }
        if env.block_time_ms < self.proposed_at_ms.saturating_add(env.config.endorsement_timeout_ms) {
            return Err(ContractError::DeadlineNotReached);
        }
        self.state = ContractState::Rejected;
        Ok(vec![self.refund()])
    }

    pub fn courier_attest(
        &mut self,
        attestation: &DeliveryAttestation,
        courier: &Certificate,
        env: &ContractEnv<'_>,
    ) -> Result<Vec<Effect>, ContractError> {
        self.require_state(ContractState::Locked)?;
        if courier.role != Role::Courier {
            return Err(ContractError::WrongRole);
        }
        trusted(courier, env)?;
        if &attestation.tx_id != self.tx_id() {
            return Err(ContractError::TxIdMismatch);
        }
        let msg = DeliveryAttestation::signed_bytes(self.tx_id(), &self.proposal_digest);
        if attestation.proposal_digest != self.proposal_digest || !courier.verify_signature(&msg, &attestation.courier_signature) {
            return Err(ContractError::InvalidSignature);
        }
        self.courier = Some(CourierRecord {
            courier_id: courier.subject_id.clone(),
            courier_wallet: courier.wallet_id(),
            attestation: attestation.clone(),
        });
        self.buyer_confirmation = BuyerConfirmation::Pending;
        self.state = ContractState::Delivered;
        Ok(vec![])
    }

    pub fn buyer_confirm(
        &mut self,
        decision: &BuyerDecision,
        buyer: &Certificate,
        env: &ContractEnv<'_>,
    ) -> Result<Vec<Effect>, ContractError> {
        self.require_state(ContractState::Delivered)?;
        if buyer.role != Role::Buyer || buyer.wallet_id() != self.proposal.buyer_wallet {
            return Err(ContractError::WrongRole);
        }
        trusted(buyer, env)?;
        if &decision.tx_id != self.tx_id() {
            return Err(ContractError::TxIdMismatch);
        }
        let msg = BuyerDecision::signed_bytes(self.tx_id(), decision.decision);
        if !buyer.verify_signature(&msg, &decision.buyer_signature) {
            return Err(ContractError::InvalidSignature);
        }
        match decision.decision {
            Decision::Confirmed => {
                self.buyer_confirmation = BuyerConfirmation::Confirmed(decision.buyer_signature);
                self.state = ContractState::Confirmed;
                Ok(vec![self.settle(env)])
            }
            Decision::Null => {
                self.buyer_confirmation = BuyerConfirmation::Null(decision.buyer_signature);
                self.state = ContractState::Disputed;
                Ok(vec![Effect::DepositsDemanded { amount: self.price() }])
            }
        }
    }

    fn check_deposit(&self, receipt: &DepositReceipt, expected_wallet: &crate::identity::WalletId, env: &ContractEnv<'_>) -> Result<(), ContractError> {
        if receipt.amount != self.price() {
            return Err(ContractError::DepositMismatch { expected: self.price(), got: receipt.amount });
        }
        if &receipt.tx_id != self.tx_id() {
            return Err(ContractError::InvalidDeposit("receipt is for another transaction"));
        }
        if &receipt.depositor_wallet != expected_wallet {
            return Err(ContractError::InvalidDeposit("receipt funded by the wrong wallet"));
        }
        let bank = env.authorities.bank(&receipt.bank_id).ok_or(ContractError::InvalidDeposit("unknown bank"))?;
        if !receipt.verify(&bank.public_key) {
            return Err(ContractError::InvalidDeposit("bank signature"));
        }
        Ok(())
    }

    pub fn open_dispute(
        &mut self,
        opening: &DisputeOpening,
        signer: &Certificate,
        env: &ContractEnv<'_>,
    ) -> Result<Vec<Effect>, ContractError> {
        self.require_state(ContractState::Disputed)?;
        if self.dispute.is_some() {
            return Err(ContractError::WrongPhase(self.state));
        }
        self.require_platform(signer, env)?;
        let (Some(buyer_deposit), Some(courier_deposit)) = (&opening.buyer_deposit, &opening.courier_deposit) else {
            return Err(ContractError::MissingDeposit);
        };
        let courier_wallet = self.courier.as_ref().map(|c| c.courier_wallet).ok_or(ContractError::WrongPhase(self.state))?;
        self.check_deposit(buyer_deposit, &self.proposal.buyer_wallet, env)?;
        self.check_deposit(courier_deposit, &courier_wallet, env)?;
        self.dispute = Some(DisputeCase {
            tx_id: self.tx_id().clone(),
            buyer_deposit: buyer_deposit.clone(),
            courier_deposit: courier_deposit.clone(),
            winner: None,
            payout: None,
            platform_resolution_signature: None,
        });
        Ok(vec![])
    }

    pub fn resolve_dispute(
        &mut self,
        resolution: &DisputeResolution,
        signer: &Certificate,
        env: &ContractEnv<'_>,
    ) -> Result<Vec<Effect>, ContractError> {
        self.require_state(ContractState::Disputed)?;
        let open = matches!(&self.dispute, Some(d) if d.winner.is_none());
        if !open {
            return Err(ContractError::WrongPhase(self.state));
        }
        self.require_platform(signer, env)?;
        let msg = DisputeResolution::signed_bytes(self.tx_id(), resolution.winner);
        if &resolution.tx_id != self.tx_id() || !signer.verify_signature(&msg, &resolution.platform_signature) {
            return Err(ContractError::InvalidSignature);
        }

        let dispute = self.dispute.as_mut().expect("checked above");
        let (winner_amount, platform_amount) = dispute_payout(dispute.deposit());
        dispute.winner = Some(resolution.winner);
        dispute.payout = Some((winner_amount, platform_amount));
        dispute.platform_resolution_signature = Some(resolution.platform_signature);
        let winner_wallet = match resolution.winner {
            Party::Buyer => dispute.buyer_deposit.depositor_wallet,
            Party::Courier => dispute.courier_deposit.depositor_wallet,
        };
        let payout = Effect::DisputePayout(DisputePayoutInstruction {
            winner: resolution.winner,
            winner_wallet,
            winner_amount,
            platform_wallet: self.proposal.platform_wallet,
            platform_amount,
            buyer_lock: dispute.buyer_deposit.lock_id,
            courier_lock: dispute.courier_deposit.lock_id,
        });

        match resolution.winner {
            Party::Courier => {
                self.state = ContractState::Confirmed;
                Ok(vec![payout, self.settle(env)])
            }
            Party::Buyer => {
                self.state = ContractState::Refunded;
                Ok(vec![payout, self.refund()])
            }
        }
    }

    pub fn record_settlement(
        &mut self,
        proof_id: &Digest,
        proof: Option<&[u8]>,
        bank: &Certificate,
        env: &ContractEnv<'_>,
    ) -> Result<Vec<Effect>, ContractError> {
        self.require_state(ContractState::Confirmed)?;
        self.require_settling_bank(bank, env)?;
        let proof_digest = match proof {
            Some(bytes) => {
                let parsed = SettlementProof::from_canonical_bytes(bytes).map_err(|_| ContractError::InvalidProof("malformed"))?;
                if parsed.proof_id != *proof_id || &parsed.tx_id != self.tx_id() {
                    return Err(ContractError::InvalidProof("proof is for another settlement"));
                }
                if parsed.bank_id != bank.subject_id || !parsed.verify_signature(&bank.public_key) {
                    return Err(ContractError::InvalidProof("bank signature"));
                }
                let instruction = self.settlement_instruction.as_ref().expect("Confirmed implies an instruction");
                if !parsed.outputs_match(instruction) {
                    return Err(ContractError::InvalidProof("outputs differ from the settlement instruction"));
                }
                Some(Digest::of(bytes))
            }
            None if env.config.require_settlement_proof => return Err(ContractError::InvalidProof("proof required")),
            None => None,
        };
        self.settlement_record = Some(SettlementRecord { proof_id: *proof_id, proof_digest });
        self.state = ContractState::Settled;
        Ok(vec![])
    }

    pub fn record_refund(&mut self, refund_id: &Digest, bank: &Certificate, env: &ContractEnv<'_>) -> Result<Vec<Effect>, ContractError> {
        self.require_state(ContractState::Rejected)?;
        self.require_settling_bank(bank, env)?;
        self.refund_record = Some(*refund_id);
        self.state = ContractState::Refunded;
        Ok(vec![])
    }

    /// Structured-text audit record. One `key: value` line per field, in
    /// this fixed order: tx_id, state, product_id, price, merchant_id,
    /// merchant_wallet, merchant_bank, buyer_wallet, buyer_bank,
    /// platform_id, platform_wallet, proposal_digest, proposed_at_ms,
    /// endorsements (one `endorsement:` line per endorser), courier,
    /// buyer_confirmation, dispute, settlement, refund, settlement_record,
    /// refund_record. Absent values print as `-`.
    pub fn to_audit_record(&self) -> String {
        let p = &self.proposal;
        let mut out = String::new();
        let _ = writeln!(out, "tx_id: {}", p.tx_id);
        let _ = writeln!(out, "state: {}", self.state.as_str());
        let _ = writeln!(out, "product_id: {}", p.product_id);
        let _ = writeln!(out, "price: {}", p.price);
        let _ = writeln!(out, "merchant_id: {}", p.merchant_id);
        let _ = writeln!(out, "merchant_wallet: {}", p.merchant_wallet);
        let _ = writeln!(out, "merchant_bank: {}", p.merchant_bank);
        let _ = writeln!(out, "buyer_wallet: {}", p.buyer_wallet);
        let _ = writeln!(out, "buyer_bank: {}", p.buyer_bank);
        let _ = writeln!(out, "platform_id: {}", p.platform_id);
        let _ = writeln!(out, "platform_wallet: {}", p.platform_wallet);
        let _ = writeln!(out, "proposal_digest: {}", self.proposal_digest);
        let _ = writeln!(out, "proposed_at_ms: {}", self.proposed_at_ms);
        for (actor, e) in &self.endorsements {
            let caps: Vec<String> = e.capacities.iter().map(|c| format!("{c:?}")).collect();
            let _ = writeln!(
                out,
                "endorsement: {actor} [{}] {:?} digest_match={}",
                caps.join(","),
                e.verdict,
                e.proposal_digest == self.proposal_digest
            );
        }
        let _ = writeln!(out, "courier: {}", self.courier.as_ref().map_or("-".into(), |c| c.courier_id.to_string()));
        let _ = writeln!(out, "buyer_confirmation: {}", self.buyer_confirmation.label());
        match &self.dispute {
            None => {
                let _ = writeln!(out, "dispute: -");
            }
            Some(d) => {
                let winner = d.winner.map_or("-".to_string(), |w| format!("{w:?}"));
                let payout = d.payout.map_or("-".to_string(), |(w, p)| format!("{w}/{p}"));
                let _ = writeln!(out, "dispute: deposit={} winner={winner} payout={payout}", d.deposit());
            }
        }
        match &self.settlement_instruction {
            None => {
                let _ = writeln!(out, "settlement: -");
            }
            Some(s) => {
                let _ = writeln!(
                    out,
                    "settlement: merchant {}={} platform {}={}",
                    s.merchant_wallet, s.merchant_amount, s.platform_wallet, s.platform_amount
                );
            }
        }
        let _ = writeln!(
            out,
            "refund: {}",
            self.refund_instruction.as_ref().map_or("-".into(), |r| format!("{}={}", r.buyer_wallet, r.amount))
        );
        let _ = writeln!(
            out,
            "settlement_record: {}",
            self.settlement_record.as_ref().map_or("-".into(), |r| r.proof_id.to_hex())
        );
        let _ = writeln!(out, "refund_record: {}", self.refund_record.map_or("-".into(), |d| d.to_hex()));
        out
    }
}

impl Canonical for EscrowContract {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.proposal).item(&self.proposal_digest).item(&self.state).u32(self.required.len() as u32);
        for (c, a) in &self.required {
            enc.item(c).item(a);
        }
        enc.u32(self.endorsements.len() as u32);
        for (a, e) in &self.endorsements {
            enc.item(a).item(e);
        }
        enc.u64(self.proposed_at_ms)
            .option(self.courier.as_ref())
            .item(&self.buyer_confirmation)
            .option(self.dispute.as_ref())
            .option(self.settlement_instruction.as_ref())
            .option(self.refund_instruction.as_ref())
            .option(self.settlement_record.as_ref())
            .option(self.refund_record.as_ref());
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let proposal = dec.item()?;
        let proposal_digest = dec.item()?;
        let state = dec.item()?;
        let mut required = BTreeMap::new();
        for _ in 0..dec.u32()? {
            let c = dec.item()?;
            required.insert(c, dec.item()?);
        }
        let mut endorsements = BTreeMap::new();
        for _ in 0..dec.u32()? {
            let a = dec.item()?;
            endorsements.insert(a, dec.item()?);
        }
        Ok(EscrowContract {
            proposal,
            proposal_digest,
            state,
            required,
            endorsements,
            proposed_at_ms: dec.u64()?,
            courier: dec.option()?,
            buyer_confirmation: dec.item()?,
            dispute: dec.option()?,
            settlement_instruction: dec.option()?,
            refund_instruction: dec.option()?,
            settlement_record: dec.option()?,
            refund_record: dec.option()?,
        })
    }
}

/// Outcome of folding one committed operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpResult {
    Applied {
        /// State before the op; `None` when the op created the contract.
        from: Option<ContractState>,
        state: ContractState,
        effects: Vec<Effect>,
    },
    Rejected {
        reason: String,
    },
}

impl OpResult {
    pub fn is_applied(&self) -> bool {
        matches!(self, OpResult::Applied { .. })
    }

    pub fn state(&self) -> Option<ContractState> {
        match self {
            OpResult::Applied { state, .. } => Some(*state),
            OpResult::Rejected { .. } => None,
        }
    }

    pub fn effects(&self) -> &[Effect] {
        match self {
            OpResult::Applied { effects, .. } => effects,
            OpResult::Rejected { .. } => &[],
        }
    }
}

impl Canonical for OpResult {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            OpResult::Applied { from, state, effects } => {
                enc.u8(0).option(from.as_ref()).item(state).seq(effects.iter());
            }
            OpResult::Rejected { reason } => {
                enc.u8(1).str(reason);
            }
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(OpResult::Applied { from: dec.option()?, state: dec.item()?, effects: dec.seq()? }),
            1 => Ok(OpResult::Rejected { reason: dec.string()? }),
            tag => Err(DecodeError::InvalidTag { what: "OpResult", tag }),
        }
    }
}

fn apply(contract: Option<&EscrowContract>, op: &ChainOp, env: &ContractEnv<'_>) -> Result<(EscrowContract, Vec<Effect>), ContractError> {
    if op.body.tx_id().is_some_and(|t| t != &op.tx_id) {
        return Err(ContractError::TxIdMismatch);
    }
    if let OpBody::Proposal(p) = &op.body {
        if contract.is_some() {
            return Err(ContractError::DuplicateTxId);
        }
        let (c, request) = EscrowContract::propose(p.clone(), &op.submitter_cert, env)?;
        return Ok((c, vec![Effect::EndorsementRequested(request)]));
    }

    let mut next = contract.cloned().ok_or(ContractError::UnknownContract)?;
    let effects = match &op.body {
        OpBody::Proposal(_) => unreachable!(),
        OpBody::Endorsement(e) => {
            if e.endorser_cert != op.submitter_cert {
                return Err(ContractError::WrongRole);
            }
            next.record_endorsement(e, env)?
        }
        OpBody::CourierAttest(a) => next.courier_attest(a, &op.submitter_cert, env)?,
        OpBody::BuyerConfirm(d) => next.buyer_confirm(d, &op.submitter_cert, env)?,
        OpBody::DisputeOpen(o) => next.open_dispute(o, &op.submitter_cert, env)?,
        OpBody::DisputeResolve(r) => next.resolve_dispute(r, &op.submitter_cert, env)?,
        OpBody::ContractUpdate(u) => match u {
            ContractUpdate::ExpireEndorsements => {
                let signer = &op.submitter_cert;
                let allowed = (signer.role == Role::Platform && signer.subject_id == next.proposal.platform_id)
                    || next.required.values().any(|a| a == &signer.subject_id)
                    || signer.wallet_id() == next.proposal.buyer_wallet;
                if !allowed {
                    return Err(ContractError::WrongRole);
                }
                next.expire_endorsements(env)?
            }
            ContractUpdate::SettlementRecorded { proof_id, proof } => {
                next.record_settlement(proof_id, proof.as_deref(), &op.submitter_cert, env)?
            }
            ContractUpdate::RefundRecorded { refund_id } => next.record_refund(refund_id, &op.submitter_cert, env)?,
        },
    };
    Ok((next, effects))
}

/// Pure state fold used by the chain at commit time and by replay.
pub fn transition(contract: Option<&EscrowContract>, op: &ChainOp, env: &ContractEnv<'_>) -> (Option<EscrowContract>, OpResult) {
    let from = contract.map(|c| c.state);
    match apply(contract, op, env) {
        Ok((next, effects)) => {
            let state = next.state;
            (Some(next), OpResult::Applied { from, state, effects })
        }
        Err(e) => (contract.cloned(), OpResult::Rejected { reason: e.to_string() }),
    }
}

#[cfg(test)]
mod tests;
