//! Post-run invariant suites.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bridge::{ChallengeOutcome, FaultMode};
use crate::chain::log::{decode_log, encode_log};
use crate::chain::WorldState;
use crate::codec::Canonical;
use crate::contract::{ContractState, Effect, EscrowContract, TxId, Verdict};
use crate::ledger::{EntryKind, LedgerError, LockKind, LockStatus};

use super::engine::RunOutput;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl InvariantCheck {
    fn new(name: &str, failures: Vec<String>, ok_detail: String) -> Self {
        let passed = failures.is_empty();
        let detail = if passed {
            ok_detail
        } else {
            let shown: Vec<&str> = failures.iter().take(5).map(String::as_str).collect();
            format!("{} failure(s): {}", failures.len(), shown.join("; "))
        };
        InvariantCheck { name: name.to_owned(), passed, detail }
    }
}

pub const SUITES: [&str; 10] = [
    "conservation",
    "escrow_safety",
    "endorsement_completeness",
    "settlement_proofs",
    "onchain_offchain_agreement",
    "replay_determinism",
    "completion",
    "privacy",
    "idempotent_settlement",
    "challenge_soundness",
];

pub fn audit(out: &mut RunOutput) -> Vec<InvariantCheck> {
    vec![
        conservation(out),
        escrow_safety(out),
        endorsement_completeness(out),
        settlement_proofs(out),
        agreement(out),
        replay_determinism(out),
        completion(out),
        privacy(out),
        idempotent_settlement(out),
        challenge_soundness(out),
    ]
}

fn contracts(out: &RunOutput) -> impl Iterator<Item = (&TxId, &EscrowContract)> {
    out.intents.iter().filter_map(|i| out.chain.query_state(&i.tx_id).ok().map(|c| (&i.tx_id, c)))
}

fn faulted(out: &RunOutput) -> BTreeMap<TxId, FaultMode> {
    out.watchers.iter().flat_map(|w| w.faulted().clone()).collect()
}

fn conservation(out: &RunOutput) -> InvariantCheck {
    let report = out.deployment.ledger.conservation();
    let mut failures: Vec<String> = out.conservation_failures.iter().map(|h| format!("after block {h}")).collect();
    if !report.holds() {
        failures.push(format!("final: {report:?}"));
    }
    let detail = format!(
        "{} blocks checked; minted {} = spendable {} + escrow {} + deposits {} + redeemed {}",
        out.chain.blocks().len(),
        report.minted,
        report.spendable,
        report.escrow_locked,
        report.deposits_locked,
        report.redeemed
    );
    InvariantCheck::new("conservation", failures, detail)
}

/// Locked funds move only as committed chain ops mandate.
fn escrow_safety(out: &RunOutput) -> InvariantCheck {
    let ledger = &out.deployment.ledger;
    let mut failures = Vec::new();
    for (tx, c) in contracts(out) {
        let lock_id = c.proposal.payment_token.lock_id;
        let Some(lock) = ledger.lock(&lock_id) else {
            failures.push(format!("{tx}: escrow lock missing"));
            continue;
        };
        if lock.amount != c.price() || lock.kind != LockKind::Escrow {
            failures.push(format!("{tx}: lock does not match price"));
        }
        match (c.state, lock.status) {
            (ContractState::Settled, LockStatus::Released(_)) | (ContractState::Refunded, LockStatus::Refunded(_)) => {}
            (s, LockStatus::Live) if !s.is_absorbing() && s != ContractState::Confirmed => {}
            (ContractState::Confirmed, LockStatus::Live | LockStatus::Released(_)) => {}
            (s, st) => failures.push(format!("{tx}: contract {s:?} with lock {st:?}")),
        }
        if let LockStatus::Released(_) = lock.status {
            let Some(sp) = ledger.settlement_proof(tx) else {
                failures.push(format!("{tx}: release without a settlement record"));
                continue;
            };
            let mandated = sp.chain_proof.verify(ledger.headers()).is_ok()
                && &sp.chain_proof.op.tx_id == tx
                && sp.chain_proof.result.effects().iter().any(|e| matches!(e, Effect::Settle(_)));
            if !mandated || sp.total() != lock.amount {
                failures.push(format!("{tx}: release not backed by a committed settle mandate"));
            }
        }
    }
    for lock in ledger.locks().iter().filter(|l| l.kind == LockKind::Deposit) {
        let resolved = out
            .chain
            .query_state(&lock.tx_id)
            .is_ok_and(|c| c.dispute.as_ref().is_some_and(|d| d.winner.is_some()));
        match lock.status {
            LockStatus::PaidOut(_) if resolved => {}
            LockStatus::Live if !resolved => {}
            st => failures.push(format!("{}: deposit {st:?} with dispute resolved={resolved}", lock.tx_id)),
        }
    }
    let n = ledger.locks().len();
    InvariantCheck::new("escrow_safety", failures, format!("{n} locks consistent with contract states"))
}

/// Funds lock iff every required endorser approved the same digest; every
/// other round ends in exactly one refund.
fn endorsement_completeness(out: &RunOutput) -> InvariantCheck {
    let ledger = &out.deployment.ledger;
    let journal = ledger.journal();
    let mut refunds: BTreeMap<&TxId, usize> = BTreeMap::new();
    for e in journal.iter().filter(|e| e.kind == EntryKind::Refund) {
        if let Some(tx) = &e.tx_id {
            *refunds.entry(tx).or_default() += 1;
        }
    }
    let mut failures = Vec::new();
    let (mut locked, mut rejected) = (0, 0);
    for (tx, c) in contracts(out) {
        let distinct: BTreeSet<_> = c.required.values().collect();
        let unanimous = distinct.iter().all(|a| {
            c.endorsements
                .get(*a)
                .is_some_and(|e| e.verdict == Verdict::Approve && e.proposal_digest == c.proposal_digest)
        });
        let reached_lock = match c.state {
            ContractState::Proposed | ContractState::Endorsing | ContractState::Rejected => false,
            ContractState::Refunded => c.dispute.is_some(),
            _ => true,
        };
        if reached_lock != unanimous {
            failures.push(format!("{tx}: reached_lock={reached_lock} unanimous={unanimous}"));
        }
        if reached_lock {
            locked += 1;
        } else if !c.state.accepts_endorsements() {
            rejected += 1;
            let count = refunds.get(tx).copied().unwrap_or(0);
            if count != 1 {
                failures.push(format!("{tx}: {count} refunds after a failed endorsement round"));
            }
        }
    }
    InvariantCheck::new("endorsement_completeness", failures, format!("{locked} locked, {rejected} refunded after endorsement"))
}

/// Every honest settlement carries a proof that verifies offline.
fn settlement_proofs(out: &RunOutput) -> InvariantCheck {
    let ledger = &out.deployment.ledger;
    let faulted = faulted(out);
    let mut failures = Vec::new();
    let mut verified = 0;
    for (tx, c) in contracts(out) {
        if c.state != ContractState::Settled || faulted.contains_key(tx) {
            continue;
        }
        match ledger.settlement_proof(tx) {
            Some(sp) if ledger.verify_settlement_proof(&sp) => verified += 1,
            Some(_) => failures.push(format!("{tx}: proof does not verify")),
            None => failures.push(format!("{tx}: no proof")),
        }
    }
    InvariantCheck::new("settlement_proofs", failures, format!("{verified} proofs verified offline"))
}

fn agreement(out: &RunOutput) -> InvariantCheck {
    let ledger = &out.deployment.ledger;
    let mut failures = Vec::new();
    for (tx, c) in contracts(out) {
        match c.state {
            ContractState::Settled => {
                let on_chain = c.settlement_record.as_ref().map(|r| r.proof_id);
                let off_chain = ledger.settlement_proof(tx).map(|p| p.proof_id);
                if on_chain.is_none() || on_chain != off_chain {
                    failures.push(format!("{tx}: settlement record {on_chain:?} vs ledger {off_chain:?}"));
                }
            }
            ContractState::Refunded => {
                let off_chain = ledger.refund_record(tx).map(|r| r.refund_id);
                let ok = match c.refund_record {
                    Some(id) => off_chain == Some(id),
                    None => c.dispute.is_some() && off_chain.is_some(),
                };
                if !ok {
                    failures.push(format!("{tx}: refund record disagrees with the ledger"));
                }
            }
            _ => {}
        }
    }
    InvariantCheck::new("onchain_offchain_agreement", failures, "absorbing states match ledger records".into())
}

fn replay_determinism(out: &RunOutput) -> InvariantCheck {
    let chain = &out.chain;
    let mut failures = Vec::new();
    match WorldState::replay(chain.blocks(), chain.config().batch_size, chain.contract_config(), chain.authorities()) {
        Ok(world) if world.to_canonical_bytes() == chain.world().to_canonical_bytes() => {}
        Ok(_) => failures.push("replayed world state differs".to_owned()),
        Err(e) => failures.push(format!("replay failed: {e}")),
    }
    match decode_log(&encode_log(chain.blocks())) {
        Ok(blocks) if blocks == chain.blocks() => {}
        Ok(_) => failures.push("block log round trip differs".to_owned()),
        Err(e) => failures.push(format!("block log round trip: {e}")),
    }
    InvariantCheck::new("replay_determinism", failures, format!("world digest {}", chain.world().digest().to_hex()))
}

fn completion(out: &RunOutput) -> InvariantCheck {
    let mut failures: Vec<String> = out.purchase_errors.iter().map(|(tx, e)| format!("{tx}: {e}")).collect();
    for it in &out.intents {
        match out.chain.query_state(&it.tx_id) {
            Ok(c) if c.state.is_absorbing() => {}
            Ok(c) => failures.push(format!("{}: stuck in {:?}", it.tx_id, c.state)),
            Err(_) => failures.push(format!("{}: never proposed", it.tx_id)),
        }
    }
    InvariantCheck::new("completion", failures, format!("{} transactions absorbed", out.intents.len()))
}

/// No buyer account name reaches the chain, and the platform cannot read
/// buyer balances.
fn privacy(out: &RunOutput) -> InvariantCheck {
    let dep = &out.deployment;
    let log = encode_log(out.chain.blocks());
    let mut failures = Vec::new();
    for b in &dep.buyers {
        let needle = b.user_id.as_bytes();
        if log.windows(needle.len()).any(|w| w == needle) {
            failures.push(format!("{} appears in the block log", b.user_id));
        }
        let balance = dep.ledger.query_balance(&dep.platform.cert, &b.cred.wallet_id());
        let history = dep.ledger.query_history(&dep.platform.cert, &b.cred.wallet_id());
        if balance != Err(LedgerError::Unauthorized) || history != Err(LedgerError::Unauthorized) {
            failures.push(format!("platform read wallet {}", b.cred.wallet_id()));
        }
    }
    InvariantCheck::new("privacy", failures, format!("{} buyers checked against {} log bytes", dep.buyers.len(), log.len()))
}

/// Re-delivering the whole commit stream moves no money.
fn idempotent_settlement(out: &mut RunOutput) -> InvariantCheck {
    let ledger = &out.deployment.ledger;
    let balances = ledger.audit_balances();
    let journal_len = ledger.journal().len();
    let events = out.chain.replay_commits(0);
    let mut failures = Vec::new();
    for w in &mut out.watchers {
        w.forget_checkpoint();
        for e in &events {
            w.process(e);
        }
        let extra = w.drain_outbox();
        if !extra.is_empty() {
            failures.push(format!("{} re-posted {} ops", w.bank_id(), extra.len()));
        }
    }
    if ledger.audit_balances() != balances {
        failures.push("balances changed on redelivery".to_owned());
    }
    let after = ledger.journal().len();
    if after != journal_len {
        failures.push(format!("journal grew from {journal_len} to {after}"));
    }
    InvariantCheck::new("idempotent_settlement", failures, format!("{} events redelivered", events.len()))
}

/// Compensation happens exactly for the faulted settlements, for exactly
/// the merchant's entitlement.
fn challenge_soundness(out: &RunOutput) -> InvariantCheck {
    let faulted = faulted(out);
    let mut failures: Vec<String> = out.challenge_errors.iter().map(|(tx, e)| format!("{tx}: {e}")).collect();
    let mut compensated = BTreeSet::new();
    for case in &out.challenges {
        if let ChallengeOutcome::Compensated(amount) = case.outcome {
            compensated.insert(case.tx_id.clone());
            let entitled = out
                .chain
                .query_state(&case.tx_id)
                .ok()
                .and_then(|c| c.settlement_instruction.as_ref().map(|i| i.merchant_amount));
            if entitled != Some(amount) {
                failures.push(format!("{}: compensated {amount}, entitled {entitled:?}", case.tx_id));
            }
        }
    }
    let expected: BTreeSet<TxId> = faulted
        .iter()
        .filter(|(_, m)| out.config.challenge_all || **m == FaultMode::SkipTx)
        .map(|(t, _)| t.clone())
        .collect();
    let missed: Vec<_> = expected.difference(&compensated).collect();
    let false_hits: Vec<_> = compensated.iter().filter(|t| !faulted.contains_key(*t)).collect();
    if !missed.is_empty() {
        failures.push(format!("faults not compensated: {missed:?}"));
    }
    if !false_hits.is_empty() {
        failures.push(format!("false compensations: {false_hits:?}"));
    }
    let detail = format!("{} challenges, {} compensated, {} faults injected", out.challenges.len(), compensated.len(), faulted.len());
    InvariantCheck::new("challenge_soundness", failures, detail)
}
