#![allow(dead_code)]

use std::sync::mpsc::Receiver;

use escrowpay::bridge::SettlementWatcher;
use escrowpay::chain::{Chain, ChainConfig, ChainOp, CommitEvent, OpBody};
use escrowpay::contract::{
    Amount, ContractConfig, ContractState, Decision, EndorsementRequest, EscrowContract, Party, TxId, Verdict,
};
use escrowpay::sim::{Deployment, DeploymentParams, PurchaseIntent};

pub const FLOAT: Amount = 10_000_000;

/// One deployment, one chain, one watcher per bank, stepped by hand.
pub struct Net {
    pub dep: Deployment,
    pub chain: Chain,
    pub watchers: Vec<SettlementWatcher>,
    rxs: Vec<Receiver<CommitEvent>>,
    pub now_ms: u64,
}

impl Net {
    pub fn new(params: DeploymentParams, proof_mode: bool) -> Self {
        Self::with_config(params, ChainConfig::default(), ContractConfig { require_settlement_proof: proof_mode, ..Default::default() })
    }

    pub fn with_config(params: DeploymentParams, chain: ChainConfig, contract: ContractConfig) -> Self {
        let dep = Deployment::new(params).unwrap();
        for b in &dep.buyers {
            dep.fund(b.cred.wallet_id(), FLOAT).unwrap();
        }
        for c in dep.couriers.iter().chain(&dep.banks) {
            dep.fund(c.wallet_id(), FLOAT).unwrap();
        }
        let proof_mode = contract.require_settlement_proof;
        let mut chain = dep.chain(chain, contract);
        let watchers = dep.watchers(proof_mode);
        let rxs = watchers.iter().map(|_| chain.subscribe_commits()).collect();
        Net { dep, chain, watchers, rxs, now_ms: 0 }
    }

    pub fn submit(&mut self, op: ChainOp) {
        self.chain.submit(op, self.now_ms).expect("op admitted");
    }

    /// Cuts blocks and lets watchers react until nothing is left to do.
    pub fn settle(&mut self) {
        loop {
            let mut follow_ups = Vec::new();
            for (w, rx) in self.watchers.iter_mut().zip(&self.rxs) {
                w.poll(rx);
                follow_ups.extend(w.drain_outbox());
            }
            self.chain.submit_batch(follow_ups, self.now_ms);
            if self.chain.mempool_len() == 0 {
                break;
            }
            self.now_ms += 10;
            self.chain.flush(self.now_ms);
        }
    }

    pub fn run(&mut self, op: ChainOp) {
        self.submit(op);
        self.settle();
    }

    pub fn contract(&self, tx: &TxId) -> &EscrowContract {
        self.chain.query_state(tx).unwrap()
    }

    pub fn state(&self, tx: &TxId) -> ContractState {
        self.contract(tx).state
    }

    pub fn intent(&self, tx: &str, buyer: usize, merchant: usize, price: Amount) -> PurchaseIntent {
        PurchaseIntent { index: 0, tx_id: TxId::new(tx), buyer, merchant, courier: 0, product_id: "sku-1".into(), price }
    }

    pub fn propose(&mut self, intent: &PurchaseIntent) -> EndorsementRequest {
        let op = self.dep.purchase(intent).unwrap();
        self.run(op);
        self.contract(&intent.tx_id).endorsement_request()
    }

    pub fn endorse_all(&mut self, tx: &TxId, verdict: Verdict) {
        let req = self.contract(tx).endorsement_request();
        for a in req.distinct_endorsers() {
            let op = self.dep.endorse_op(&req, &a, verdict).unwrap();
            self.submit(op);
        }
        self.settle();
    }

    /// Proposal, endorsements, delivery, and the buyer's decision.
    pub fn sale(&mut self, intent: &PurchaseIntent, decision: Decision) {
        self.propose(intent);
        self.endorse_all(&intent.tx_id, Verdict::Approve);
        assert_eq!(self.state(&intent.tx_id), ContractState::Locked);
        let digest = self.contract(&intent.tx_id).proposal_digest;
        self.run(self.dep.attest_op(intent.courier, &intent.tx_id, digest));
        self.run(self.dep.decision_op(intent.buyer, &intent.tx_id, decision));
    }

    pub fn dispute(&mut self, intent: &PurchaseIntent, winner: Party) {
        self.sale(intent, Decision::Null);
        let tx = &intent.tx_id;
        let buyer = self.dep.buyers[intent.buyer].cred.clone();
        let courier = self.dep.couriers[intent.courier].clone();
        let b = self.dep.pay_deposit(&buyer, tx, intent.price).unwrap();
        let c = self.dep.pay_deposit(&courier, tx, intent.price).unwrap();
        self.run(self.dep.dispute_open_op(tx, b, c));
        self.run(self.dep.dispute_resolve_op(tx, winner));
    }

    pub fn expire(&mut self, tx: &TxId) {
        self.now_ms += self.chain.contract_config().endorsement_timeout_ms + 1;
        self.run(self.dep.expire_op(tx));
    }

    pub fn lock_of(&self, tx: &TxId) -> escrowpay::ledger::LockId {
        self.contract(tx).proposal.payment_token.lock_id
    }

    /// Proof of the most recent committed op on `tx` of the given kind.
    pub fn proof_of(&self, tx: &TxId, pick: impl Fn(&OpBody) -> bool) -> escrowpay::chain::ChainProof {
        for block in self.chain.blocks().iter().rev() {
            for (i, op) in block.ops.iter().enumerate().rev() {
                if &op.tx_id == tx && pick(&op.body) && block.results[i].is_applied() {
                    return block.inclusion_proof(i);
                }
            }
        }
        panic!("no matching op for {tx}");
    }
}
