//! Off-chain CBDC ledger.
//!
//! Money lives in notes spread over shards. Every mutation is a two-phase
//! note rewrite recorded in an append-only journal. Escrow and deposit
//! locks are notes owned by a lock id; the holding bank's key alone cannot
//! move them, only a committed chain op that mandates the movement can.

mod audit;
mod note;
mod records;

pub use audit::{trace_journal, verify_settlement_offline, FlowEdge, FlowNode, FundFlow};
pub use note::{FundNote, LockId, NoteId, NoteStore, Owner};
pub use records::{DepositReceipt, EntryKind, JournalEntry, PaymentToken, PayoutRecord, RefundRecord, SettlementProof};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::chain::{ChainProof, HeaderStore, OpBody};
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::contract::{Amount, Decision, DisputePayoutInstruction, Effect, Party, RefundInstruction, SettlementInstruction, TxId};
use crate::crypto::{Digest, KeyPair, PublicKey, Signature};
use crate::identity::{ActorId, AuthoritySet, Certificate, Credential, Role, WalletId, WalletRegistry};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("only the central authority may mint")]
    UnauthorizedMint,
    #[error("amounts must be positive")]
    NonPositiveAmount,
    #[error("unknown note {0}")]
    UnknownNote(NoteId),
    #[error("note {0} already held or spent")]
    DoubleSpend(NoteId),
    #[error("note {0} is not owned by the signer")]
    NotOwner(NoteId),
    #[error("inputs {inputs} != outputs {outputs}")]
    ValueMismatch { inputs: Amount, outputs: Amount },
    #[error("signature does not verify")]
    InvalidSignature,
    #[error("request already executed")]
    Replayed,
    #[error("wallet is not registered")]
    UnknownWallet,
    #[error("insufficient funds: have {available}, need {needed}")]
    InsufficientFunds { available: Amount, needed: Amount },
    #[error("a lock already exists for this transaction and wallet")]
    DuplicateLock,
    #[error("unknown lock {0}")]
    UnknownLock(LockId),
    #[error("lock already consumed")]
    LockConsumed,
    #[error("release attempted without chain proof")]
    UnauthorizedRelease,
    #[error("chain proof rejected: {0}")]
    InvalidChainProof(&'static str),
    #[error("caller is not authorized")]
    Unauthorized,
    #[error("no record for {0}")]
    NotFound(TxId),
    #[error("request does not match the operation")]
    WrongRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerConfig {
    pub shards: usize,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig { shards: 2 }
    }
}

/// Spend of explicit input notes, signed by their owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferIntent {
    pub inputs: Vec<NoteId>,
    pub outputs: Vec<(WalletId, Amount)>,
    pub signer: PublicKey,
    pub signature: Signature,
}

impl TransferIntent {
    pub fn signed_bytes(inputs: &[NoteId], outputs: &[(WalletId, Amount)]) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/transfer/v1").seq(inputs.iter()).u32(outputs.len() as u32);
        for (w, a) in outputs {
            enc.item(w).u64(*a);
        }
        enc.finish()
    }

    pub fn new(inputs: Vec<NoteId>, outputs: Vec<(WalletId, Amount)>, keys: &KeyPair) -> Self {
        let signature = keys.sign(&Self::signed_bytes(&inputs, &outputs));
        TransferIntent { inputs, outputs, signer: keys.public_key(), signature }
    }

    pub fn id(&self) -> Digest {
        Digest::tagged("escrowpay/intent/v1", &[&Self::signed_bytes(&self.inputs, &self.outputs), &self.signature.0])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpendAction {
    Transfer { to: WalletId, amount: Amount },
    LockEscrow { tx_id: TxId, amount: Amount },
    LockDeposit { tx_id: TxId, amount: Amount },
    Redeem { amount: Amount },
}

impl SpendAction {
    pub fn amount(&self) -> Amount {
        match self {
            SpendAction::Transfer { amount, .. }
            | SpendAction::LockEscrow { amount, .. }
            | SpendAction::LockDeposit { amount, .. }
            | SpendAction::Redeem { amount } => *amount,
        }
    }
}

impl Canonical for SpendAction {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            SpendAction::Transfer { to, amount } => enc.u8(0).item(to).u64(*amount),
            SpendAction::LockEscrow { tx_id, amount } => enc.u8(1).item(tx_id).u64(*amount),
            SpendAction::LockDeposit { tx_id, amount } => enc.u8(2).item(tx_id).u64(*amount),
            SpendAction::Redeem { amount } => enc.u8(3).u64(*amount),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(match dec.u8()? {
            0 => SpendAction::Transfer { to: dec.item()?, amount: dec.u64()? },
            1 => SpendAction::LockEscrow { tx_id: dec.item()?, amount: dec.u64()? },
            2 => SpendAction::LockDeposit { tx_id: dec.item()?, amount: dec.u64()? },
            3 => SpendAction::Redeem { amount: dec.u64()? },
            tag => return Err(DecodeError::InvalidTag { what: "SpendAction", tag }),
        })
    }
}

/// A wallet owner's signed instruction; the ledger picks the input notes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedSpend {
    pub wallet: WalletId,
    pub action: SpendAction,
    pub nonce: u64,
    pub signature: Signature,
}

impl SignedSpend {
    pub fn signed_bytes(wallet: &WalletId, action: &SpendAction, nonce: u64) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/spend/v1").item(wallet).item(action).u64(nonce);
        enc.finish()
    }

    pub fn new(action: SpendAction, nonce: u64, keys: &KeyPair) -> Self {
        let wallet = WalletId::from_public_key(&keys.public_key());
        let signature = keys.sign(&Self::signed_bytes(&wallet, &action, nonce));
        SignedSpend { wallet, action, nonce, signature }
    }

    fn digest(&self) -> Digest {
        Digest::tagged("escrowpay/spend-id/v1", &[&Self::signed_bytes(&self.wallet, &self.action, self.nonce)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LockKind {
    Escrow,
    Deposit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockStatus {
    Live,
    Released(Digest),
    Refunded(Digest),
    PaidOut(Digest),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EscrowLock {
    pub lock_id: LockId,
    pub tx_id: TxId,
    pub kind: LockKind,
    pub amount: Amount,
    pub funded_from: WalletId,
    pub bank_id: ActorId,
    pub note_id: NoteId,
    pub status: LockStatus,
}

impl EscrowLock {
    pub fn id_for(tx_id: &TxId, kind: LockKind, wallet: &WalletId) -> LockId {
        Digest::tagged("escrowpay/lock/v1", &[&tx_id.to_canonical_bytes(), &[kind as u8], &wallet.0])
    }

    pub fn is_live(&self) -> bool {
        self.status == LockStatus::Live
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompensationRecord {
    pub tx_id: TxId,
    pub bank_id: ActorId,
    pub merchant_wallet: WalletId,
    pub amount: Amount,
    pub journal_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RedeemRecord {
    pub wallet: WalletId,
    pub amount: Amount,
    pub journal_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HistoryEntry {
    pub seq: u64,
    pub kind: EntryKind,
    pub tx_id: Option<TxId>,
    pub credit: Amount,
    pub debit: Amount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenInfo {
    pub amount: Amount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConservationReport {
    pub spendable: Amount,
    pub escrow_locked: Amount,
    pub deposits_locked: Amount,
    pub minted: Amount,
    pub redeemed: Amount,
    /// Live lock amounts in the lock registry agree with lock-owned notes.
    pub registry_agrees: bool,
}

impl ConservationReport {
    pub fn holds(&self) -> bool {
        self.registry_agrees
            && self.spendable as u128 + self.escrow_locked as u128 + self.deposits_locked as u128 + self.redeemed as u128
                == self.minted as u128
    }
}

#[derive(Debug, Default)]
struct Supply {
    minted: Amount,
    redeemed: Amount,
}

pub struct Ledger {
    authorities: AuthoritySet,
    registry: Arc<WalletRegistry>,
    bank_keys: HashMap<ActorId, Credential>,
    notes: NoteStore,
    locks: Mutex<BTreeMap<LockId, EscrowLock>>,
    journal: Mutex<Vec<JournalEntry>>,
    supply: Mutex<Supply>,
    executed: Mutex<HashSet<Digest>>,
    proofs: Mutex<BTreeMap<TxId, SettlementProof>>,
    refunds: Mutex<BTreeMap<TxId, RefundRecord>>,
    payouts: Mutex<BTreeMap<TxId, PayoutRecord>>,
    compensations: Mutex<BTreeMap<TxId, CompensationRecord>>,
    headers: HeaderStore,
}

impl Ledger {
    /// `bank_keys` are the signing credentials of the banks operating the
    /// ledger; each must chain to `authorities`.
    pub fn new(config: LedgerConfig, registry: Arc<WalletRegistry>, bank_keys: Vec<Credential>) -> Self {
        let authorities = registry.authorities().clone();
        for b in &bank_keys {
            assert!(b.role() == Role::Bank && authorities.verify(&b.cert), "bank credential must chain to the authority");
        }
        Ledger {
            authorities,
            registry,
            bank_keys: bank_keys.into_iter().map(|c| (c.id().clone(), c)).collect(),
            notes: NoteStore::new(config.shards),
            locks: Mutex::default(),
            journal: Mutex::default(),
            supply: Mutex::default(),
            executed: Mutex::default(),
            proofs: Mutex::default(),
            refunds: Mutex::default(),
            payouts: Mutex::default(),
            compensations: Mutex::default(),
            headers: HeaderStore::new(),
        }
    }

    pub fn headers(&self) -> &HeaderStore {
        &self.headers
    }

    pub fn registry(&self) -> &WalletRegistry {
        &self.registry
    }

    pub fn authorities(&self) -> &AuthoritySet {
        &self.authorities
    }

    pub fn shard_count(&self) -> usize {
        self.notes.shard_count()
    }

    fn record(
        &self,
        kind: EntryKind,
        tx_id: Option<TxId>,
        reference: Digest,
        inputs: Vec<FundNote>,
        outputs: Vec<FundNote>,
        minted: Amount,
        redeemed: Amount,
    ) -> u64 {
        let mut journal = self.journal.lock().unwrap();
        let seq = journal.len() as u64;
        journal.push(JournalEntry { seq, kind, tx_id, reference, inputs, outputs, minted, redeemed });
        seq
    }

    pub fn mint(&self, authority: &Credential, wallet: WalletId, amount: Amount) -> Result<FundNote, LedgerError> {
        if authority.role() != Role::CentralAuthority || &authority.cert != self.authorities.root() {
            return Err(LedgerError::UnauthorizedMint);
        }
        if amount == 0 {
            return Err(LedgerError::NonPositiveAmount);
        }
        // The supply lock orders mints so note origins are sequential.
        let mut supply = self.supply.lock().unwrap();
        let origin = Digest::tagged("escrowpay/mint/v1", &[&self.journal.lock().unwrap().len().to_be_bytes()]);
        let note = FundNote::new(&origin, 0, amount, Owner::Wallet(wallet));
        self.notes.insert(note.clone());
        supply.minted += amount;
        self.record(EntryKind::Mint, None, origin, vec![], vec![note.clone()], amount, 0);
        Ok(note)
    }

    /// Two-phase transfer of explicit notes.
    pub fn transfer_2pc(&self, intent: &TransferIntent) -> Result<Vec<FundNote>, LedgerError> {
        if !intent.signer.verify(&TransferIntent::signed_bytes(&intent.inputs, &intent.outputs), &intent.signature) {
            return Err(LedgerError::InvalidSignature);
        }
        let owner = Owner::Wallet(WalletId::from_public_key(&intent.signer));
        let id = intent.id();
        let outputs: Vec<FundNote> =
            intent.outputs.iter().enumerate().map(|(i, (w, a))| FundNote::new(&id, i as u32, *a, Owner::Wallet(*w))).collect();
        let inputs = self.notes.commit(&intent.inputs, |o| *o == owner, &outputs)?;
        self.record(EntryKind::Transfer, None, id, inputs, outputs.clone(), 0, 0);
        Ok(outputs)
    }

    fn authorize(&self, spend: &SignedSpend) -> Result<ActorId, LedgerError> {
        let binding = self.registry.binding(&spend.wallet).ok_or(LedgerError::UnknownWallet)?;
        if !binding.public_key.verify(&SignedSpend::signed_bytes(&spend.wallet, &spend.action, spend.nonce), &spend.signature) {
            return Err(LedgerError::InvalidSignature);
        }
        if spend.action.amount() == 0 {
            return Err(LedgerError::NonPositiveAmount);
        }
        if !self.executed.lock().unwrap().insert(spend.digest()) {
            return Err(LedgerError::Replayed);
        }
        Ok(binding.registered_bank)
    }

    fn forget(&self, spend: &SignedSpend) {
        self.executed.lock().unwrap().remove(&spend.digest());
    }

    /// Selects the wallet's notes in id order until `amount` is covered and
    /// rewrites them into `outputs` plus change.
    fn spend_from(
        &self,
        wallet: WalletId,
        amount: Amount,
        origin: &Digest,
        outputs: Vec<(Owner, Amount)>,
    ) -> Result<(Vec<FundNote>, Vec<FundNote>), LedgerError> {
        self.spend_burning(wallet, amount, origin, outputs, 0)
    }

    fn spend_burning(
        &self,
        wallet: WalletId,
        amount: Amount,
        origin: &Digest,
        mut outputs: Vec<(Owner, Amount)>,
        burned: Amount,
    ) -> Result<(Vec<FundNote>, Vec<FundNote>), LedgerError> {
        let owner = Owner::Wallet(wallet);
        let mut selected = Vec::new();
        let mut covered: Amount = 0;
        for n in self.notes.notes_of(&owner) {
            if covered >= amount {
                break;
            }
            covered += n.amount;
            selected.push(n.note_id);
        }
        if covered < amount {
            return Err(LedgerError::InsufficientFunds { available: covered, needed: amount });
        }
        if covered > amount {
            outputs.push((owner, covered - amount));
        }
        let outs: Vec<FundNote> =
            outputs.iter().enumerate().map(|(i, (o, a))| FundNote::new(origin, i as u32, *a, *o)).collect();
        let ins = self.notes.commit_burning(&selected, |o| *o == owner, &outs, burned)?;
        Ok((ins, outs))
    }

    fn with_spend<T>(&self, spend: &SignedSpend, f: impl FnOnce(ActorId) -> Result<T, LedgerError>) -> Result<T, LedgerError> {
        let bank = self.authorize(spend)?;
        let out = f(bank);
        if out.is_err() {
            self.forget(spend);
        }
        out
    }

    pub fn transfer(&self, spend: &SignedSpend) -> Result<Vec<FundNote>, LedgerError> {
        let SpendAction::Transfer { to, amount } = spend.action else {
            return Err(LedgerError::WrongRequest);
        };
        self.with_spend(spend, |_| {
            let origin = spend.digest();
            let (ins, outs) = self.spend_from(spend.wallet, amount, &origin, vec![(Owner::Wallet(to), amount)])?;
            self.record(EntryKind::Transfer, None, origin, ins, outs.clone(), 0, 0);
            Ok(outs)
        })
    }

    fn bank_key(&self, bank: &ActorId) -> Result<&Credential, LedgerError> {
        self.bank_keys.get(bank).ok_or(LedgerError::Unauthorized)
    }

    fn open_lock(&self, spend: &SignedSpend, kind: LockKind, tx_id: &TxId, amount: Amount, bank: ActorId) -> Result<EscrowLock, LedgerError> {
        self.bank_key(&bank)?;
        let lock_id = EscrowLock::id_for(tx_id, kind, &spend.wallet);
        let mut locks = self.locks.lock().unwrap();
        if locks.contains_key(&lock_id) {
            return Err(LedgerError::DuplicateLock);
        }
        let (ins, outs) = self.spend_from(spend.wallet, amount, &lock_id, vec![(Owner::Lock(lock_id), amount)])?;
        let lock = EscrowLock {
            lock_id,
            tx_id: tx_id.clone(),
            kind,
            amount,
            funded_from: spend.wallet,
            bank_id: bank,
            note_id: outs[0].note_id,
            status: LockStatus::Live,
        };
        locks.insert(lock_id, lock.clone());
        let entry = match kind {
            LockKind::Escrow => EntryKind::Lock,
            LockKind::Deposit => EntryKind::Deposit,
        };
        self.record(entry, Some(tx_id.clone()), lock_id, ins, outs, 0, 0);
        Ok(lock)
    }

    /// Moves `amount` from the buyer's wallet into an escrow lock and
    /// returns the bank-signed payment token.
    pub fn lock_escrow(&self, spend: &SignedSpend) -> Result<(EscrowLock, PaymentToken), LedgerError> {
        let SpendAction::LockEscrow { tx_id, amount } = &spend.action else {
            return Err(LedgerError::WrongRequest);
        };
        self.with_spend(spend, |bank| {
            let lock = self.open_lock(spend, LockKind::Escrow, tx_id, *amount, bank)?;
            let signer = self.bank_key(&lock.bank_id)?;
            let token = PaymentToken {
                tx_id: tx_id.clone(),
                amount: *amount,
                lock_id: lock.lock_id,
                bank_id: lock.bank_id.clone(),
                bank_signature: signer.sign(&PaymentToken::signed_bytes(tx_id, *amount, &lock.lock_id, &lock.bank_id)),
            };
            Ok((lock, token))
        })
    }

    pub fn lock_deposit(&self, spend: &SignedSpend) -> Result<(EscrowLock, DepositReceipt), LedgerError> {
        let SpendAction::LockDeposit { tx_id, amount } = &spend.action else {
            return Err(LedgerError::WrongRequest);
        };
        self.with_spend(spend, |bank| {
            let lock = self.open_lock(spend, LockKind::Deposit, tx_id, *amount, bank)?;
            let signer = self.bank_key(&lock.bank_id)?;
            let msg = DepositReceipt::signed_bytes(tx_id, &lock.lock_id, *amount, &spend.wallet, &lock.bank_id);
            let receipt = DepositReceipt {
                tx_id: tx_id.clone(),
                lock_id: lock.lock_id,
                amount: *amount,
                depositor_wallet: spend.wallet,
                bank_id: lock.bank_id.clone(),
                bank_signature: signer.sign(&msg),
            };
            Ok((lock, receipt))
        })
    }

    pub fn redeem(&self, spend: &SignedSpend) -> Result<RedeemRecord, LedgerError> {
        let SpendAction::Redeem { amount } = spend.action else {
            return Err(LedgerError::WrongRequest);
        };
        self.with_spend(spend, |_| {
            let origin = spend.digest();
            let mut supply = self.supply.lock().unwrap();
            let (ins, outs) = self.spend_burning(spend.wallet, amount, &origin, vec![], amount)?;
            supply.redeemed += amount;
            let journal_seq = self.record(EntryKind::Redeem, None, origin, ins, outs, 0, amount);
            Ok(RedeemRecord { wallet: spend.wallet, amount, journal_seq })
        })
    }

    /// Checks the token's bank signature and that it names a live escrow
    /// lock of the stated amount.
    pub fn verify_token(&self, token: &PaymentToken) -> Result<TokenInfo, LedgerError> {
        let bank = self.authorities.bank(&token.bank_id).ok_or(LedgerError::Unauthorized)?;
        if !token.verify(&bank.public_key) {
            return Err(LedgerError::InvalidSignature);
        }
        let locks = self.locks.lock().unwrap();
        let lock = locks.get(&token.lock_id).ok_or(LedgerError::UnknownLock(token.lock_id))?;
        if lock.kind != LockKind::Escrow || lock.tx_id != token.tx_id || lock.amount != token.amount || lock.bank_id != token.bank_id {
            return Err(LedgerError::InvalidSignature);
        }
        Ok(TokenInfo { amount: token.amount })
    }

    fn require_holder(&self, caller: &Certificate, lock: &EscrowLock) -> Result<(), LedgerError> {
        if caller.role != Role::Bank || caller.subject_id != lock.bank_id || !self.authorities.verify(caller) {
            return Err(LedgerError::Unauthorized);
        }
        Ok(())
    }

    fn check_chain_proof(&self, proof: &ChainProof, tx_id: &TxId) -> Result<(), LedgerError> {
        proof.verify(&self.headers).map_err(|_| LedgerError::InvalidChainProof("not in a known block"))?;
        if &proof.op.tx_id != tx_id {
            return Err(LedgerError::InvalidChainProof("proof is for another transaction"));
        }
        if !proof.op.verify_signature() {
            return Err(LedgerError::InvalidChainProof("op signature"));
        }
        Ok(())
    }

    fn settle_mandate(proof: &ChainProof) -> Result<&SettlementInstruction, LedgerError> {
        let releasing = match &proof.op.body {
            OpBody::BuyerConfirm(d) => d.decision == Decision::Confirmed,
            OpBody::DisputeResolve(r) => r.winner == Party::Courier,
            _ => false,
        };
        let instruction = proof.result.effects().iter().find_map(|e| match e {
            Effect::Settle(s) => Some(s),
            _ => None,
        });
        match instruction {
            Some(s) if releasing => Ok(s),
            _ => Err(LedgerError::InvalidChainProof("op does not mandate a release")),
        }
    }

    fn refund_mandate(proof: &ChainProof) -> Result<&RefundInstruction, LedgerError> {
        proof
            .result
            .effects()
            .iter()
            .find_map(|e| match e {
                Effect::Refund(r) => Some(r),
                _ => None,
            })
            .ok_or(LedgerError::InvalidChainProof("op does not mandate a refund"))
    }

    fn payout_mandate(proof: &ChainProof) -> Result<&DisputePayoutInstruction, LedgerError> {
        if !matches!(proof.op.body, OpBody::DisputeResolve(_)) {
            return Err(LedgerError::InvalidChainProof("op is not a dispute resolution"));
        }
        proof
            .result
            .effects()
            .iter()
            .find_map(|e| match e {
                Effect::DisputePayout(p) => Some(p),
                _ => None,
            })
            .ok_or(LedgerError::InvalidChainProof("op does not mandate a payout"))
    }

    fn live_lock<'a>(locks: &'a BTreeMap<LockId, EscrowLock>, lock_id: &LockId, kind: LockKind) -> Result<&'a EscrowLock, LedgerError> {
        let lock = locks.get(lock_id).ok_or(LedgerError::UnknownLock(*lock_id))?;
        if lock.kind != kind {
            return Err(LedgerError::InvalidChainProof("wrong lock kind"));
        }
        if !lock.is_live() {
            return Err(LedgerError::LockConsumed);
        }
        Ok(lock)
    }

    /// Releases an escrow lock to `beneficiaries`. Requires a committed
    /// chain op for the lock's transaction that mandates settlement; the
    /// beneficiaries must be wallets named by that mandate and must sum to
    /// the locked amount.
    pub fn release_escrow(
        &self,
        caller: &Certificate,
        lock_id: &LockId,
        chain_proof: Option<&ChainProof>,
        beneficiaries: &[(WalletId, Amount)],
    ) -> Result<SettlementProof, LedgerError> {
        self.release_inner(caller, lock_id, chain_proof, beneficiaries, |instruction| {
            vec![instruction.merchant_wallet, instruction.platform_wallet]
        })
    }

    fn release_inner(
        &self,
        caller: &Certificate,
        lock_id: &LockId,
        chain_proof: Option<&ChainProof>,
        beneficiaries: &[(WalletId, Amount)],
        allowed: impl Fn(&SettlementInstruction) -> Vec<WalletId>,
    ) -> Result<SettlementProof, LedgerError> {
        let mut locks = self.locks.lock().unwrap();
        let lock = Self::live_lock(&locks, lock_id, LockKind::Escrow)?.clone();
        self.require_holder(caller, &lock)?;
        let proof = chain_proof.ok_or(LedgerError::UnauthorizedRelease)?;
        self.check_chain_proof(proof, &lock.tx_id)?;
        let instruction = Self::settle_mandate(proof)?;
        let allowed = allowed(instruction);
        if beneficiaries.iter().any(|(w, _)| !allowed.contains(w)) {
            return Err(LedgerError::InvalidChainProof("beneficiary not named by the settlement instruction"));
        }
        let total: u128 = beneficiaries.iter().map(|(_, a)| *a as u128).sum();
        if total != lock.amount as u128 {
            return Err(LedgerError::ValueMismatch { inputs: lock.amount, outputs: total as u64 });
        }

        let signer = self.bank_key(&lock.bank_id)?;
        let height = proof.height();
        let template: Vec<FundNote> = beneficiaries
            .iter()
            .filter(|(_, a)| *a > 0)
            .enumerate()
            .map(|(i, (w, a))| FundNote::new(lock_id, i as u32, *a, Owner::Wallet(*w)))
            .collect();
        // Output ids are bound to the proof id, which itself covers the
        // provisional outputs.
        let proof_id = SettlementProof::compute_id(&lock.tx_id, lock_id, &template, height, proof, &lock.bank_id);
        let outputs: Vec<FundNote> =
            template.iter().enumerate().map(|(i, n)| FundNote::new(&proof_id, i as u32, n.amount, n.owner)).collect();
        let inputs = self.notes.commit(&[lock.note_id], |o| *o == Owner::Lock(*lock_id), &outputs)?;

        let mut settlement = SettlementProof {
            proof_id,
            tx_id: lock.tx_id.clone(),
            lock_id: *lock_id,
            outputs: outputs.clone(),
            block_height: height,
            chain_proof: proof.clone(),
            bank_id: lock.bank_id.clone(),
            bank_signature: Signature([0; 64]),
        };
        settlement.bank_signature = signer.sign(&settlement.signed_bytes());
        locks.get_mut(lock_id).expect("present").status = LockStatus::Released(proof_id);
        self.record(EntryKind::Release, Some(lock.tx_id.clone()), proof_id, inputs, outputs, 0, 0);
        self.proofs.lock().unwrap().insert(lock.tx_id.clone(), settlement.clone());
        Ok(settlement)
    }

    /// Returns an escrow lock to its funding wallet. Requires a committed
    /// chain op mandating the refund.
    pub fn refund_escrow(&self, caller: &Certificate, lock_id: &LockId, chain_proof: Option<&ChainProof>) -> Result<RefundRecord, LedgerError> {
        let mut locks = self.locks.lock().unwrap();
        let lock = Self::live_lock(&locks, lock_id, LockKind::Escrow)?.clone();
        self.require_holder(caller, &lock)?;
        let proof = chain_proof.ok_or(LedgerError::UnauthorizedRelease)?;
        self.check_chain_proof(proof, &lock.tx_id)?;
        let instruction = Self::refund_mandate(proof)?;
        if instruction.buyer_wallet != lock.funded_from || instruction.amount != lock.amount {
            return Err(LedgerError::InvalidChainProof("refund instruction does not match the lock"));
        }
        let refund_id = Digest::tagged("escrowpay/refund-id/v1", &[&lock_id.0, &proof.block_hash.0, &proof.op_index.to_be_bytes()]);
        let output = FundNote::new(&refund_id, 0, lock.amount, Owner::Wallet(lock.funded_from));
        let inputs = self.notes.commit(&[lock.note_id], |o| *o == Owner::Lock(*lock_id), std::slice::from_ref(&output))?;
        let mut record = RefundRecord {
            refund_id,
            tx_id: lock.tx_id.clone(),
            lock_id: *lock_id,
            wallet: lock.funded_from,
            amount: lock.amount,
            block_height: proof.height(),
            bank_id: lock.bank_id.clone(),
            bank_signature: Signature([0; 64]),
        };
        record.bank_signature = self.bank_key(&lock.bank_id)?.sign(&record.signed_bytes());
        locks.get_mut(lock_id).expect("present").status = LockStatus::Refunded(refund_id);
        self.record(EntryKind::Refund, Some(lock.tx_id.clone()), refund_id, inputs, vec![output], 0, 0);
        self.refunds.lock().unwrap().insert(lock.tx_id.clone(), record.clone());
        Ok(record)
    }

    /// Consumes both dispute deposits per a committed resolution.
    pub fn pay_dispute(&self, caller: &Certificate, chain_proof: Option<&ChainProof>) -> Result<PayoutRecord, LedgerError> {
        let proof = chain_proof.ok_or(LedgerError::UnauthorizedRelease)?;
        let mut locks = self.locks.lock().unwrap();
        let instruction = Self::payout_mandate(proof)?;
        let buyer_lock = Self::live_lock(&locks, &instruction.buyer_lock, LockKind::Deposit)?.clone();
        let courier_lock = Self::live_lock(&locks, &instruction.courier_lock, LockKind::Deposit)?.clone();
        self.require_holder(caller, &buyer_lock)?;
        self.check_chain_proof(proof, &buyer_lock.tx_id)?;
        if courier_lock.tx_id != buyer_lock.tx_id {
            return Err(LedgerError::InvalidChainProof("deposits belong to different transactions"));
        }
        let tx_id = buyer_lock.tx_id.clone();
        let payout_id = Digest::tagged("escrowpay/payout-id/v1", &[&proof.block_hash.0, &proof.op_index.to_be_bytes()]);
        let outputs: Vec<FundNote> = [
            (instruction.winner_wallet, instruction.winner_amount),
            (instruction.platform_wallet, instruction.platform_amount),
        ]
        .into_iter()
        .filter(|(_, a)| *a > 0)
        .enumerate()
        .map(|(i, (w, a))| FundNote::new(&payout_id, i as u32, a, Owner::Wallet(w)))
        .collect();
        let (bl, cl) = (buyer_lock.lock_id, courier_lock.lock_id);
        let inputs = self.notes.commit(&[buyer_lock.note_id, courier_lock.note_id], |o| *o == Owner::Lock(bl) || *o == Owner::Lock(cl), &outputs)?;
        for id in [bl, cl] {
            locks.get_mut(&id).expect("present").status = LockStatus::PaidOut(payout_id);
        }
        self.record(EntryKind::Payout, Some(tx_id.clone()), payout_id, inputs, outputs.clone(), 0, 0);
        let record = PayoutRecord { payout_id, tx_id: tx_id.clone(), outputs, block_height: proof.height() };
        self.payouts.lock().unwrap().insert(tx_id, record.clone());
        Ok(record)
    }

    /// Pays `amount` from the bank's own wallet to the merchant. At most
    /// once per transaction.
    pub fn compensate(&self, bank: &ActorId, tx_id: &TxId, merchant_wallet: WalletId, amount: Amount) -> Result<CompensationRecord, LedgerError> {
        let signer = self.bank_key(bank)?;
        let mut comps = self.compensations.lock().unwrap();
        if let Some(existing) = comps.get(tx_id) {
            return Ok(existing.clone());
        }
        let origin = Digest::tagged("escrowpay/compensation/v1", &[&tx_id.to_canonical_bytes(), &bank.to_canonical_bytes()]);
        let (ins, outs) = self.spend_from(signer.wallet_id(), amount, &origin, vec![(Owner::Wallet(merchant_wallet), amount)])?;
        let journal_seq = self.record(EntryKind::Compensation, Some(tx_id.clone()), origin, ins, outs, 0, 0);
        let record = CompensationRecord { tx_id: tx_id.clone(), bank_id: bank.clone(), merchant_wallet, amount, journal_seq };
        comps.insert(tx_id.clone(), record.clone());
        Ok(record)
    }

    /// After compensating a merchant, the bank releases the still-locked
    /// escrow with the merchant's share redirected to its own wallet.
    pub fn recover_compensated(&self, caller: &Certificate, lock_id: &LockId, chain_proof: &ChainProof) -> Result<SettlementProof, LedgerError> {
        let tx_id = self.lock(lock_id).ok_or(LedgerError::UnknownLock(*lock_id))?.tx_id;
        let comp = self.compensation(&tx_id).ok_or(LedgerError::NotFound(tx_id))?;
        let instruction = Self::settle_mandate(chain_proof)?.clone();
        if comp.amount != instruction.merchant_amount || comp.merchant_wallet != instruction.merchant_wallet || comp.bank_id != caller.subject_id {
            return Err(LedgerError::InvalidChainProof("compensation does not cover the merchant share"));
        }
        let bank_wallet = caller.wallet_id();
        let beneficiaries = [(bank_wallet, instruction.merchant_amount), (instruction.platform_wallet, instruction.platform_amount)];
        self.release_inner(caller, lock_id, Some(chain_proof), &beneficiaries, move |i| vec![bank_wallet, i.platform_wallet])
    }

    /// Checks a settlement proof's signature, chain inclusion, outputs
    /// against the cited instruction, and the journal.
    pub fn verify_settlement_proof(&self, proof: &SettlementProof) -> bool {
        let journal = self.journal.lock().unwrap();
        verify_settlement_offline(proof, &journal, &self.headers, &self.authorities)
    }

    pub fn settlement_proof(&self, tx_id: &TxId) -> Option<SettlementProof> {
        self.proofs.lock().unwrap().get(tx_id).cloned()
    }

    pub fn refund_record(&self, tx_id: &TxId) -> Option<RefundRecord> {
        self.refunds.lock().unwrap().get(tx_id).cloned()
    }

    pub fn payout_record(&self, tx_id: &TxId) -> Option<PayoutRecord> {
        self.payouts.lock().unwrap().get(tx_id).cloned()
    }

    pub fn compensation(&self, tx_id: &TxId) -> Option<CompensationRecord> {
        self.compensations.lock().unwrap().get(tx_id).cloned()
    }

    pub fn compensations(&self) -> Vec<CompensationRecord> {
        self.compensations.lock().unwrap().values().cloned().collect()
    }

    pub fn lock(&self, lock_id: &LockId) -> Option<EscrowLock> {
        self.locks.lock().unwrap().get(lock_id).cloned()
    }

    pub fn locks(&self) -> Vec<EscrowLock> {
        self.locks.lock().unwrap().values().cloned().collect()
    }

    fn may_view(&self, caller: &Certificate, wallet: &WalletId) -> bool {
        if !self.authorities.verify(caller) {
            return false;
        }
        if &caller.wallet_id() == wallet {
            return true;
        }
        caller.role == Role::Bank && self.registry.binding(wallet).is_some_and(|b| b.registered_bank == caller.subject_id)
    }

    pub fn query_balance(&self, caller: &Certificate, wallet: &WalletId) -> Result<Amount, LedgerError> {
        if !self.may_view(caller, wallet) {
            return Err(LedgerError::Unauthorized);
        }
        Ok(self.notes.balance_of(&Owner::Wallet(*wallet)))
    }

    pub fn query_history(&self, caller: &Certificate, wallet: &WalletId) -> Result<Vec<HistoryEntry>, LedgerError> {
        if !self.may_view(caller, wallet) {
            return Err(LedgerError::Unauthorized);
        }
        let me = Owner::Wallet(*wallet);
        let sum = |notes: &[FundNote]| notes.iter().filter(|n| n.owner == me).map(|n| n.amount).sum::<Amount>();
        Ok(self
            .journal
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.touches(wallet))
            .map(|e| HistoryEntry { seq: e.seq, kind: e.kind, tx_id: e.tx_id.clone(), credit: sum(&e.outputs), debit: sum(&e.inputs) })
            .collect())
    }

    /// Spendable balance per wallet, bypassing the privacy gate. For audits.
    pub fn audit_balances(&self) -> BTreeMap<WalletId, Amount> {
        self.notes
            .totals()
            .into_iter()
            .filter_map(|(o, a)| match o {
                Owner::Wallet(w) => Some((w, a)),
                Owner::Lock(_) => None,
            })
            .collect()
    }

    pub fn audit_balance(&self, wallet: &WalletId) -> Amount {
        self.notes.balance_of(&Owner::Wallet(*wallet))
    }

    pub fn conservation(&self) -> ConservationReport {
        let locks = self.locks.lock().unwrap();
        let supply = self.supply.lock().unwrap();
        let mut report = ConservationReport { minted: supply.minted, redeemed: supply.redeemed, ..Default::default() };
        let mut by_lock: BTreeMap<LockId, Amount> = BTreeMap::new();
        for (owner, amount) in self.notes.totals() {
            match owner {
                Owner::Wallet(_) => report.spendable += amount,
                Owner::Lock(id) => {
                    by_lock.insert(id, amount);
                    match locks.get(&id).map(|l| l.kind) {
                        Some(LockKind::Escrow) => report.escrow_locked += amount,
                        Some(LockKind::Deposit) => report.deposits_locked += amount,
                        None => return report,
                    }
                }
            }
        }
        let live: BTreeMap<LockId, Amount> = locks.values().filter(|l| l.is_live()).map(|l| (l.lock_id, l.amount)).collect();
        report.registry_agrees = live == by_lock;
        report
    }

    pub fn journal(&self) -> Vec<JournalEntry> {
        self.journal.lock().unwrap().clone()
    }

    pub fn trace(&self, tx_id: &TxId) -> Result<FundFlow, LedgerError> {
        let journal = self.journal.lock().unwrap();
        trace_journal(&journal, tx_id).ok_or_else(|| LedgerError::NotFound(tx_id.clone()))
    }
}
