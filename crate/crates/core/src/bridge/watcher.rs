use std::collections::BTreeMap;
use std::sync::mpsc::Receiver;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainOp, ChainProof, CommitEvent, OpBody};
use crate::codec::Canonical;
use crate::contract::{Amount, ContractState, ContractUpdate, Effect, EscrowContract, SettlementInstruction, TxId};
use crate::crypto::Digest;
use crate::identity::{ActorId, Certificate, Credential, Role, WalletId};
use crate::ledger::{Ledger, LedgerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Action {
    Lock,
    Release,
    Refund,
    DisputePayout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum TaskStatus {
    Pending,
    Done,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Trigger {
    pub height: u64,
    pub op_index: u32,
    pub op_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SettlementTask {
    pub tx_id: TxId,
    pub action: Action,
    pub trigger: Trigger,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultMode {
    SkipTx,
    WrongAmount,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub mode: FaultMode,
    /// `None` matches the next release this watcher performs.
    pub target: Option<TxId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChallengeOutcome {
    ProofSupplied(Digest),
    Compensated(Amount),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChallengeCase {
    pub tx_id: TxId,
    pub merchant_id: ActorId,
    pub outcome: ChallengeOutcome,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChallengeError {
    #[error("contract is {0:?}, not yet confirmable")]
    WrongPhase(ContractState),
    #[error("caller is not the payee merchant")]
    NotPayee,
    #[error("this bank does not settle the transaction")]
    NotSettlingBank,
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Consumes commit events for one bank and moves money on the ledger
/// exactly as the committed effects instruct.
pub struct SettlementWatcher {
    bank: Credential,
    ledger: Arc<Ledger>,
    proof_mode: bool,
    checkpoint: Option<(u64, u32)>,
    tasks: BTreeMap<(TxId, Action), SettlementTask>,
    release_triggers: BTreeMap<TxId, ChainProof>,
    faults: Vec<Fault>,
    faulted: BTreeMap<TxId, FaultMode>,
    challenges: BTreeMap<TxId, ChallengeCase>,
    outbox: Vec<ChainOp>,
}

impl SettlementWatcher {
    /// With `proof_mode`, every settlement report carries the full proof.
    pub fn new(bank: Credential, ledger: Arc<Ledger>, proof_mode: bool) -> Self {
        assert_eq!(bank.role(), Role::Bank);
        SettlementWatcher {
            bank,
            ledger,
            proof_mode,
            checkpoint: None,
            tasks: BTreeMap::new(),
            release_triggers: BTreeMap::new(),
            faults: Vec::new(),
            faulted: BTreeMap::new(),
            challenges: BTreeMap::new(),
            outbox: Vec::new(),
        }
    }

    pub fn bank_id(&self) -> &ActorId {
        self.bank.id()
    }

    /// Last processed `(height, op_index)`.
    pub fn checkpoint(&self) -> Option<(u64, u32)> {
        self.checkpoint
    }

    /// Height to resume a commit replay from after a restart.
    pub fn resume_height(&self) -> u64 {
        self.checkpoint.map_or(0, |(h, _)| h)
    }

    /// Drops the checkpoint so a replayed stream is filtered by idempotency
    /// keys alone.
    pub fn forget_checkpoint(&mut self) {
        self.checkpoint = None;
    }

    pub fn inject_settlement_fault(&mut self, mode: FaultMode, target: Option<TxId>) {
        self.faults.push(Fault { mode, target });
    }

    pub fn faulted(&self) -> &BTreeMap<TxId, FaultMode> {
        &self.faulted
    }

    pub fn tasks(&self) -> impl Iterator<Item = &SettlementTask> {
        self.tasks.values()
    }

    pub fn task(&self, tx_id: &TxId, action: Action) -> Option<&SettlementTask> {
        self.tasks.get(&(tx_id.clone(), action))
    }

    pub fn challenges(&self) -> impl Iterator<Item = &ChallengeCase> {
        self.challenges.values()
    }

    /// Chain ops this bank wants submitted, oldest first.
    pub fn drain_outbox(&mut self) -> Vec<ChainOp> {
        std::mem::take(&mut self.outbox)
    }

    /// Processes every event currently available on `rx`.
    pub fn poll(&mut self, rx: &Receiver<CommitEvent>) -> Vec<SettlementTask> {
        rx.try_iter().flat_map(|e| self.process(&e)).collect()
    }

    pub fn process(&mut self, event: &CommitEvent) -> Vec<SettlementTask> {
        let proof = &event.proof;
        let _ = self.ledger.headers().append(&proof.header);
        let pos = (proof.height(), proof.op_index);
        if self.checkpoint.is_some_and(|cp| pos <= cp) {
            return vec![];
        }
        self.checkpoint = Some(pos);

        let Some(contract) = &event.contract else { return vec![] };
        if &contract.proposal.buyer_bank != self.bank.id() || !proof.result.is_applied() {
            return vec![];
        }
        let mut touched = Vec::new();
        for effect in proof.result.effects() {
            let action = match effect {
                Effect::LockFunds { .. } => Action::Lock,
                Effect::Settle(_) => Action::Release,
                Effect::Refund(_) => Action::Refund,
                Effect::DisputePayout(_) => Action::DisputePayout,
                Effect::EndorsementRequested(_) | Effect::DepositsDemanded { .. } => continue,
            };
            let key = (contract.tx_id().clone(), action);
            if self.tasks.contains_key(&key) {
                continue;
            }
            let status = match self.execute(action, effect, contract, proof) {
                Ok(()) => TaskStatus::Done,
                Err(reason) => TaskStatus::Failed(reason),
            };
            let task = SettlementTask {
                tx_id: key.0.clone(),
                action,
                trigger: Trigger { height: proof.height(), op_index: proof.op_index, op_digest: proof.op.digest() },
                status,
            };
            self.tasks.insert(key, task.clone());
            touched.push(task);
        }
        touched
    }

    fn take_fault(&mut self, tx_id: &TxId) -> Option<FaultMode> {
        let idx = self.faults.iter().position(|f| f.target.as_ref().is_none_or(|t| t == tx_id))?;
        let mode = self.faults.remove(idx).mode;
        self.faulted.insert(tx_id.clone(), mode);
        Some(mode)
    }

    fn post(&mut self, tx_id: &TxId, update: ContractUpdate) {
        self.outbox.push(ChainOp::new(tx_id.clone(), OpBody::ContractUpdate(update), &self.bank));
    }

    fn execute(&mut self, action: Action, effect: &Effect, contract: &EscrowContract, proof: &ChainProof) -> Result<(), String> {
        let tx_id = contract.tx_id();
        let lock_id = contract.proposal.payment_token.lock_id;
        let cert = self.bank.cert.clone();
        match (action, effect) {
            (Action::Lock, _) => match self.ledger.lock(&lock_id) {
                Some(l) if l.is_live() && &l.tx_id == tx_id && l.amount == contract.price() => Ok(()),
                Some(_) => Err("escrow lock does not match the contract".into()),
                None => Err("escrow lock missing".into()),
            },
            (Action::Release, Effect::Settle(instruction)) => {
                self.release_triggers.insert(tx_id.clone(), proof.clone());
                let beneficiaries = match self.take_fault(tx_id) {
                    Some(FaultMode::SkipTx) => return Err("release skipped by injected fault".into()),
                    Some(FaultMode::WrongAmount) => stale_split(instruction),
                    None => instruction.beneficiaries(),
                };
                let settlement =
                    self.ledger.release_escrow(&cert, &lock_id, Some(proof), &beneficiaries).map_err(|e| e.to_string())?;
                let bytes = self.proof_mode.then(|| settlement.to_canonical_bytes());
                self.post(tx_id, ContractUpdate::SettlementRecorded { proof_id: settlement.proof_id, proof: bytes });
                Ok(())
            }
            (Action::Refund, Effect::Refund(_)) => {
                let record = self.ledger.refund_escrow(&cert, &lock_id, Some(proof)).map_err(|e| e.to_string())?;
                if proof.result.state() == Some(ContractState::Rejected) {
                    self.post(tx_id, ContractUpdate::RefundRecorded { refund_id: record.refund_id });
                }
                Ok(())
            }
            (Action::DisputePayout, Effect::DisputePayout(_)) => {
                self.ledger.pay_dispute(&cert, Some(proof)).map(|_| ()).map_err(|e| e.to_string())
            }
            _ => Err("effect does not match action".into()),
        }
    }

    /// Merchant challenge: supply a verifying settlement proof, or
    /// compensate the merchant's entitlement from the bank's own wallet.
    pub fn challenge(&mut self, contract: &EscrowContract, merchant: &Certificate) -> Result<ChallengeCase, ChallengeError> {
        let p = &contract.proposal;
        if &p.buyer_bank != self.bank.id() {
            return Err(ChallengeError::NotSettlingBank);
        }
        if !matches!(contract.state, ContractState::Confirmed | ContractState::Settled) {
            return Err(ChallengeError::WrongPhase(contract.state));
        }
        let payee = merchant.role == Role::Merchant
            && merchant.subject_id == p.merchant_id
            && merchant.wallet_id() == p.merchant_wallet
            && self.ledger.authorities().verify(merchant);
        if !payee {
            return Err(ChallengeError::NotPayee);
        }
        let tx_id = contract.tx_id();
        if let Some(case) = self.challenges.get(tx_id) {
            return Ok(case.clone());
        }

        let supplied = self.ledger.settlement_proof(tx_id).filter(|sp| self.ledger.verify_settlement_proof(sp));
        let outcome = match supplied {
            Some(sp) => ChallengeOutcome::ProofSupplied(sp.proof_id),
            None => {
                let instruction = contract.settlement_instruction.as_ref().expect("confirmed contracts carry an instruction");
                let record = self.ledger.compensate(self.bank.id(), tx_id, p.merchant_wallet, instruction.merchant_amount)?;
                self.recover(contract)?;
                ChallengeOutcome::Compensated(record.amount)
            }
        };
        let case = ChallengeCase { tx_id: tx_id.clone(), merchant_id: merchant.subject_id.clone(), outcome };
        self.challenges.insert(tx_id.clone(), case.clone());
        Ok(case)
    }

    /// Releases an escrow that was never settled, reimbursing the bank for
    /// the compensation it paid.
    fn recover(&mut self, contract: &EscrowContract) -> Result<(), LedgerError> {
        let lock_id = contract.proposal.payment_token.lock_id;
        let live = self.ledger.lock(&lock_id).is_some_and(|l| l.is_live());
        let Some(trigger) = self.release_triggers.get(contract.tx_id()).cloned() else { return Ok(()) };
        if !live {
            return Ok(());
        }
        let settlement = self.ledger.recover_compensated(&self.bank.cert, &lock_id, &trigger)?;
        if contract.state == ContractState::Confirmed {
            self.post(contract.tx_id(), ContractUpdate::SettlementRecorded { proof_id: settlement.proof_id, proof: None });
        }
        Ok(())
    }
}

/// The split a bank working from an outdated commission table would pay:
/// a slice of the merchant share moved to the platform.
fn stale_split(instruction: &SettlementInstruction) -> Vec<(WalletId, Amount)> {
    let (m, p) = (instruction.merchant_amount, instruction.platform_amount);
    let shift = (m / 20).max(1).min(m);
    let (m, p) = (m - shift, p + shift);
    vec![(instruction.merchant_wallet, m), (instruction.platform_wallet, p)]
}
