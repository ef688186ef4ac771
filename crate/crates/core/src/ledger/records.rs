use serde::Serialize;

use crate::chain::ChainProof;
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::contract::{Amount, Effect, SettlementInstruction, TxId};
use crate::crypto::{Digest, PublicKey, Signature};
use crate::identity::{ActorId, WalletId};

use super::note::{FundNote, LockId, Owner};

/// Bank-signed proof that `amount` is locked for `tx_id`. Carries no buyer
/// identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaymentToken {
    pub tx_id: TxId,
    pub amount: Amount,
    pub lock_id: LockId,
    pub bank_id: ActorId,
    pub bank_signature: Signature,
}

impl PaymentToken {
    pub fn signed_bytes(tx_id: &TxId, amount: Amount, lock_id: &LockId, bank_id: &ActorId) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/token/v1").item(tx_id).u64(amount).item(lock_id).item(bank_id);
        enc.finish()
    }

    pub fn verify(&self, bank_key: &PublicKey) -> bool {
        bank_key.verify(&Self::signed_bytes(&self.tx_id, self.amount, &self.lock_id, &self.bank_id), &self.bank_signature)
    }
}

impl Canonical for PaymentToken {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.tx_id).u64(self.amount).item(&self.lock_id).item(&self.bank_id).item(&self.bank_signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(PaymentToken {
            tx_id: dec.item()?,
            amount: dec.u64()?,
            lock_id: dec.item()?,
            bank_id: dec.item()?,
            bank_signature: dec.item()?,
        })
    }
}

/// Bank-signed receipt for a dispute deposit lock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepositReceipt {
    pub tx_id: TxId,
    pub lock_id: LockId,
    pub amount: Amount,
    pub depositor_wallet: WalletId,
    pub bank_id: ActorId,
    pub bank_signature: Signature,
}

impl DepositReceipt {
    pub fn signed_bytes(tx_id: &TxId, lock_id: &LockId, amount: Amount, wallet: &WalletId, bank_id: &ActorId) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/deposit/v1").item(tx_id).item(lock_id).u64(amount).item(wallet).item(bank_id);
        enc.finish()
    }

    pub fn verify(&self, bank_key: &PublicKey) -> bool {
        let msg = Self::signed_bytes(&self.tx_id, &self.lock_id, self.amount, &self.depositor_wallet, &self.bank_id);
        bank_key.verify(&msg, &self.bank_signature)
    }
}

impl Canonical for DepositReceipt {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.tx_id)
            .item(&self.lock_id)
            .u64(self.amount)
            .item(&self.depositor_wallet)
            .item(&self.bank_id)
            .item(&self.bank_signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(DepositReceipt {
            tx_id: dec.item()?,
            lock_id: dec.item()?,
            amount: dec.u64()?,
            depositor_wallet: dec.item()?,
            bank_id: dec.item()?,
            bank_signature: dec.item()?,
        })
    }
}

/// Self-contained settlement record. Verifies offline against the ledger
/// journal and the chain's block headers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SettlementProof {
    pub proof_id: Digest,
    pub tx_id: TxId,
    pub lock_id: LockId,
    pub outputs: Vec<FundNote>,
    pub block_height: u64,
    pub chain_proof: ChainProof,
    pub bank_id: ActorId,
    pub bank_signature: Signature,
}

impl SettlementProof {
    fn encode_body(enc: &mut Encoder, tx_id: &TxId, lock_id: &LockId, outputs: &[FundNote], height: u64, chain_proof: &ChainProof, bank_id: &ActorId) {
        enc.item(tx_id).item(lock_id).seq(outputs.iter()).u64(height).item(chain_proof).item(bank_id);
    }

    pub fn compute_id(
        tx_id: &TxId,
        lock_id: &LockId,
        outputs: &[FundNote],
        height: u64,
        chain_proof: &ChainProof,
        bank_id: &ActorId,
    ) -> Digest {
        let mut enc = Encoder::new();
        Self::encode_body(&mut enc, tx_id, lock_id, outputs, height, chain_proof, bank_id);
        Digest::tagged("escrowpay/settlement-id/v1", &[&enc.finish()])
    }

    /// Bytes covered by the bank signature: every field before it.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/settlement/v1").item(&self.proof_id);
        Self::encode_body(&mut enc, &self.tx_id, &self.lock_id, &self.outputs, self.block_height, &self.chain_proof, &self.bank_id);
        enc.finish()
    }

    pub fn verify_signature(&self, bank_key: &PublicKey) -> bool {
        bank_key.verify(&self.signed_bytes(), &self.bank_signature)
    }

    /// `(wallet, amount)` per output note.
    pub fn credited(&self) -> Vec<(WalletId, Amount)> {
        self.outputs
            .iter()
            .filter_map(|n| match n.owner {
                Owner::Wallet(w) => Some((w, n.amount)),
                Owner::Lock(_) => None,
            })
            .collect()
    }

    pub fn total(&self) -> Amount {
        self.outputs.iter().map(|n| n.amount).sum()
    }

    /// Whether the credited outputs are exactly the instruction's non-zero
    /// beneficiaries, in order.
    pub fn outputs_match(&self, instruction: &SettlementInstruction) -> bool {
        let expected: Vec<(WalletId, Amount)> = instruction.beneficiaries().into_iter().filter(|(_, a)| *a > 0).collect();
        self.outputs.len() == expected.len() && self.credited() == expected
    }

    /// The settlement instruction the cited chain op produced, if any.
    pub fn cited_instruction(&self) -> Option<&SettlementInstruction> {
        self.chain_proof.result.effects().iter().find_map(|e| match e {
            Effect::Settle(s) => Some(s),
            _ => None,
        })
    }
}

impl Canonical for SettlementProof {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.proof_id);
        Self::encode_body(enc, &self.tx_id, &self.lock_id, &self.outputs, self.block_height, &self.chain_proof, &self.bank_id);
        enc.item(&self.bank_signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(SettlementProof {
            proof_id: dec.item()?,
            tx_id: dec.item()?,
            lock_id: dec.item()?,
            outputs: dec.seq()?,
            block_height: dec.u64()?,
            chain_proof: dec.item()?,
            bank_id: dec.item()?,
            bank_signature: dec.item()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefundRecord {
    pub refund_id: Digest,
    pub tx_id: TxId,
    pub lock_id: LockId,
    pub wallet: WalletId,
    pub amount: Amount,
    pub block_height: u64,
    pub bank_id: ActorId,
    pub bank_signature: Signature,
}

impl RefundRecord {
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str("escrowpay/refund/v1")
            .item(&self.refund_id)
            .item(&self.tx_id)
            .item(&self.lock_id)
            .item(&self.wallet)
            .u64(self.amount)
            .u64(self.block_height)
            .item(&self.bank_id);
        enc.finish()
    }

    pub fn verify(&self, bank_key: &PublicKey) -> bool {
        bank_key.verify(&self.signed_bytes(), &self.bank_signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayoutRecord {
    pub payout_id: Digest,
    pub tx_id: TxId,
    pub outputs: Vec<FundNote>,
    pub block_height: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EntryKind {
    Mint,
    Transfer,
    Lock,
    Deposit,
    Release,
    Refund,
    Payout,
    Compensation,
    Redeem,
}

impl EntryKind {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(code: u8) -> Result<Self, DecodeError> {
        use EntryKind::*;
        [Mint, Transfer, Lock, Deposit, Release, Refund, Payout, Compensation, Redeem]
            .get(code as usize)
            .copied()
            .ok_or(DecodeError::InvalidTag { what: "EntryKind", tag: code })
    }
}

/// One append-only journal record. Every kind is a note rewrite: inputs
/// are destroyed and outputs created, with `minted`/`redeemed` closing
/// the supply account.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalEntry {
    pub seq: u64,
    pub kind: EntryKind,
    pub tx_id: Option<TxId>,
    /// Intent, lock, proof, refund or payout id, depending on `kind`.
    pub reference: Digest,
    pub inputs: Vec<FundNote>,
    pub outputs: Vec<FundNote>,
    pub minted: Amount,
    pub redeemed: Amount,
}

impl JournalEntry {
    pub fn balanced(&self) -> bool {
        let ins: u128 = self.inputs.iter().map(|n| n.amount as u128).sum::<u128>() + self.minted as u128;
        let outs: u128 = self.outputs.iter().map(|n| n.amount as u128).sum::<u128>() + self.redeemed as u128;
        ins == outs
    }

    pub fn touches(&self, wallet: &WalletId) -> bool {
        self.inputs.iter().chain(&self.outputs).any(|n| n.owner == Owner::Wallet(*wallet))
    }
}

impl Canonical for JournalEntry {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.seq)
            .u8(self.kind.code())
            .option(self.tx_id.as_ref())
            .item(&self.reference)
            .seq(self.inputs.iter())
            .seq(self.outputs.iter())
            .u64(self.minted)
            .u64(self.redeemed);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(JournalEntry {
            seq: dec.u64()?,
            kind: EntryKind::from_code(dec.u8()?)?,
            tx_id: dec.option()?,
            reference: dec.item()?,
            inputs: dec.seq()?,
            outputs: dec.seq()?,
            minted: dec.u64()?,
            redeemed: dec.u64()?,
        })
    }
}
