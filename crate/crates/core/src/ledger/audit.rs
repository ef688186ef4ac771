use std::collections::{BTreeSet, HashMap};

use crate::chain::HeaderStore;
use crate::contract::{Amount, SettlementInstruction, TxId};
use crate::identity::{AuthoritySet, WalletId};

use super::note::{FundNote, LockId, NoteId, Owner};
use super::records::{EntryKind, JournalEntry, SettlementProof};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlowNode {
    /// Mint entries the locked funds descend from.
    Mint { entries: Vec<u64> },
    Wallet(WalletId),
    Lock(LockId),
    /// Final recipients of the lock; the buyer alone for a refund.
    Outputs(Vec<(WalletId, Amount)>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowEdge {
    pub from: usize,
    pub to: usize,
    pub amount: Amount,
    pub journal_seqs: Vec<u64>,
}

/// Fund flow of one transaction's escrow: mint, buyer, lock, outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FundFlow {
    pub tx_id: TxId,
    pub amount: Amount,
    pub nodes: Vec<FlowNode>,
    pub edges: Vec<FlowEdge>,
    /// `Release` or `Refund` once the lock is consumed.
    pub closed_by: Option<EntryKind>,
}

impl FundFlow {
    /// Inflow equals outflow at every interior node, and the outputs node
    /// receives exactly what it lists.
    pub fn conserves(&self) -> bool {
        for i in 1..self.nodes.len() {
            let inflow: Amount = self.edges.iter().filter(|e| e.to == i).map(|e| e.amount).sum();
            let outflow: Amount = self.edges.iter().filter(|e| e.from == i).map(|e| e.amount).sum();
            let ok = match &self.nodes[i] {
                FlowNode::Outputs(outs) => inflow == outs.iter().map(|(_, a)| a).sum::<Amount>(),
                _ if i + 1 == self.nodes.len() => inflow == self.amount,
                _ => inflow == outflow,
            };
            if !ok {
                return false;
            }
        }
        true
    }
}

fn creators(journal: &[JournalEntry]) -> HashMap<NoteId, usize> {
    journal.iter().enumerate().flat_map(|(i, e)| e.outputs.iter().map(move |n| (n.note_id, i))).collect()
}

/// Walks input notes back to the mint entries that created their value.
fn mint_ancestry(journal: &[JournalEntry], creators: &HashMap<NoteId, usize>, start: &[FundNote]) -> Vec<u64> {
    let mut mints = BTreeSet::new();
    let mut seen = BTreeSet::new();
    let mut stack: Vec<NoteId> = start.iter().map(|n| n.note_id).collect();
    while let Some(id) = stack.pop() {
        let Some(&idx) = creators.get(&id) else { continue };
        if !seen.insert(idx) {
            continue;
        }
        let entry = &journal[idx];
        if entry.kind == EntryKind::Mint {
            mints.insert(entry.seq);
        }
        stack.extend(entry.inputs.iter().map(|n| n.note_id));
    }
    mints.into_iter().collect()
}

pub fn trace_journal(journal: &[JournalEntry], tx_id: &TxId) -> Option<FundFlow> {
    let lock_entry = journal.iter().find(|e| e.kind == EntryKind::Lock && e.tx_id.as_ref() == Some(tx_id))?;
    let lock_id = lock_entry.reference;
    let lock_note = lock_entry.outputs.iter().find(|n| n.owner == Owner::Lock(lock_id))?;
    let buyer = lock_entry.inputs.iter().find_map(|n| match n.owner {
        Owner::Wallet(w) => Some(w),
        Owner::Lock(_) => None,
    })?;
    let amount = lock_note.amount;
    let creators = creators(journal);
    let mints = mint_ancestry(journal, &creators, &lock_entry.inputs);

    let mut nodes = vec![FlowNode::Mint { entries: mints.clone() }, FlowNode::Wallet(buyer), FlowNode::Lock(lock_id)];
    let mut edges = vec![
        FlowEdge { from: 0, to: 1, amount, journal_seqs: mints },
        FlowEdge { from: 1, to: 2, amount, journal_seqs: vec![lock_entry.seq] },
    ];
    let closing = journal
        .iter()
        .find(|e| matches!(e.kind, EntryKind::Release | EntryKind::Refund) && e.inputs.iter().any(|n| n.note_id == lock_note.note_id));
    if let Some(close) = closing {
        let outs: Vec<(WalletId, Amount)> = close
            .outputs
            .iter()
            .filter_map(|n| match n.owner {
                Owner::Wallet(w) => Some((w, n.amount)),
                Owner::Lock(_) => None,
            })
            .collect();
        nodes.push(FlowNode::Outputs(outs));
        edges.push(FlowEdge { from: 2, to: 3, amount, journal_seqs: vec![close.seq] });
    }
    Some(FundFlow { tx_id: tx_id.clone(), amount, nodes, edges, closed_by: closing.map(|e| e.kind) })
}

/// A release whose merchant share went to the bank is valid only if the
/// journal shows that bank already paid the merchant that share.
fn recovers_compensation(proof: &SettlementProof, instruction: &SettlementInstruction, journal: &[JournalEntry], bank_wallet: &WalletId) -> bool {
    let expected: Vec<(WalletId, Amount)> = [(*bank_wallet, instruction.merchant_amount), (instruction.platform_wallet, instruction.platform_amount)]
        .into_iter()
        .filter(|(_, a)| *a > 0)
        .collect();
    if proof.outputs.len() != expected.len() || proof.credited() != expected {
        return false;
    }
    journal.iter().any(|e| {
        e.kind == EntryKind::Compensation
            && e.tx_id.as_ref() == Some(&proof.tx_id)
            && e.inputs.iter().all(|n| n.owner == Owner::Wallet(*bank_wallet))
            && e.outputs.iter().any(|n| n.owner == Owner::Wallet(instruction.merchant_wallet) && n.amount == instruction.merchant_amount)
    })
}

/// Verifies a settlement proof using only the journal, block headers and
/// the bank's certificate.
pub fn verify_settlement_offline(proof: &SettlementProof, journal: &[JournalEntry], headers: &HeaderStore, authorities: &AuthoritySet) -> bool {
    let Some(bank) = authorities.bank(&proof.bank_id) else {
        return false;
    };
    if !proof.verify_signature(&bank.public_key) {
        return false;
    }

    let template: Vec<FundNote> =
        proof.outputs.iter().enumerate().map(|(i, n)| FundNote::new(&proof.lock_id, i as u32, n.amount, n.owner)).collect();
    let id = SettlementProof::compute_id(&proof.tx_id, &proof.lock_id, &template, proof.block_height, &proof.chain_proof, &proof.bank_id);
    let ids_ok = id == proof.proof_id
        && proof
            .outputs
            .iter()
            .enumerate()
            .all(|(i, n)| FundNote::new(&proof.proof_id, i as u32, n.amount, n.owner) == *n);
    if !ids_ok {
        return false;
    }

    let cp = &proof.chain_proof;
    if cp.verify(headers).is_err() || cp.op.tx_id != proof.tx_id || cp.height() != proof.block_height {
        return false;
    }
    match proof.cited_instruction() {
        Some(instruction) if proof.outputs_match(instruction) => {}
        Some(instruction) if recovers_compensation(proof, instruction, journal, &bank.wallet_id()) => {}
        _ => return false,
    }

    let Some(lock_note) = journal
        .iter()
        .filter(|e| e.kind == EntryKind::Lock && e.tx_id.as_ref() == Some(&proof.tx_id) && e.reference == proof.lock_id)
        .find_map(|e| e.outputs.iter().find(|n| n.owner == Owner::Lock(proof.lock_id)))
    else {
        return false;
    };
    journal.iter().any(|e| {
        e.kind == EntryKind::Release
            && e.reference == proof.proof_id
            && e.tx_id.as_ref() == Some(&proof.tx_id)
            && e.inputs.as_slice() == std::slice::from_ref(lock_note)
            && e.outputs == proof.outputs
    }) && proof.total() == lock_note.amount
}
