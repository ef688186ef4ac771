use proptest::prelude::*;

use super::*;
use crate::chain::ChainOp;
use crate::crypto::KeyPair;
use crate::identity::{Credential, Role};
use crate::ledger::DepositReceipt;
use crate::sim::{Deployment, DeploymentParams, PurchaseIntent};

struct Harness {
    dep: Deployment,
    config: ContractConfig,
    contract: Option<EscrowContract>,
    now_ms: u64,
}

impl Harness {
    fn new() -> Self {
        let dep = Deployment::new(DeploymentParams::default()).unwrap();
        for b in &dep.buyers {
            dep.fund(b.cred.wallet_id(), 1_000_000).unwrap();
        }
        for c in &dep.couriers {
            dep.fund(c.wallet_id(), 1_000_000).unwrap();
        }
        Harness { dep, config: ContractConfig::default(), contract: None, now_ms: 1_000 }
    }

    /// Buyer 0 banks at bank-0; merchant 1 at bank-1; merchant 0 shares bank-0.
    fn intent(&self, tx: &str, buyer: usize, merchant: usize, price: Amount) -> PurchaseIntent {
        PurchaseIntent { index: 0, tx_id: TxId::new(tx), buyer, merchant, courier: 0, product_id: "sku".into(), price }
    }

    fn apply(&mut self, op: &ChainOp) -> OpResult {
        let env = ContractEnv { config: &self.config, authorities: &self.dep.authorities, block_time_ms: self.now_ms };
        let (next, result) = transition(self.contract.as_ref(), op, &env);
        self.contract = next;
        result
    }

    fn c(&self) -> &EscrowContract {
        self.contract.as_ref().unwrap()
    }

    fn propose(&mut self, tx: &str, buyer: usize, merchant: usize, price: Amount) -> OpResult {
        let op = self.dep.purchase(&self.intent(tx, buyer, merchant, price)).unwrap();
        self.apply(&op)
    }

    fn endorse_all(&mut self, verdict: Verdict) -> Vec<OpResult> {
        let req = self.c().endorsement_request();
        req.distinct_endorsers()
            .iter()
            .map(|a| {
                let op = self.dep.endorse_op(&req, a, verdict).unwrap();
                self.apply(&op)
            })
            .collect()
    }

    fn locked(tx: &str, price: Amount) -> Self {
        let mut h = Harness::new();
        assert!(h.propose(tx, 0, 1, price).is_applied());
        h.endorse_all(Verdict::Approve);
        assert_eq!(h.c().state, ContractState::Locked);
        h
    }

    fn delivered(tx: &str, price: Amount) -> Self {
        let mut h = Self::locked(tx, price);
        let op = h.dep.attest_op(0, &TxId::new(tx), h.c().proposal_digest);
        assert!(h.apply(&op).is_applied());
        h
    }

    fn disputed(tx: &str, price: Amount) -> (Self, DepositReceipt, DepositReceipt) {
        let mut h = Self::delivered(tx, price);
        let tx_id = TxId::new(tx);
        let r = h.apply(&h.dep.decision_op(0, &tx_id, Decision::Null));
        assert_eq!(r.effects(), &[Effect::DepositsDemanded { amount: price }]);
        let b = h.dep.pay_deposit(&h.dep.buyers[0].cred.clone(), &tx_id, price).unwrap();
        let c = h.dep.pay_deposit(&h.dep.couriers[0].clone(), &tx_id, price).unwrap();
        (h, b, c)
    }

    fn bank_update(&self, bank: usize, tx: &str, update: ContractUpdate) -> ChainOp {
        ChainOp::new(TxId::new(tx), OpBody::ContractUpdate(update), &self.dep.banks[bank])
    }
}

fn rejected(r: &OpResult) -> &str {
    match r {
        OpResult::Rejected { reason } => reason,
        OpResult::Applied { .. } => panic!("expected rejection, got {r:?}"),
    }
}

#[test]
fn proposal_opens_endorsement_round() {
    let mut h = Harness::new();
    let r = h.propose("t1", 0, 1, 500);
    assert_eq!(r.state(), Some(ContractState::Endorsing));
    let [Effect::EndorsementRequested(req)] = r.effects() else { panic!("{r:?}") };
    assert_eq!(req.required_endorsers.len(), 4);
    assert_eq!(req.distinct_endorsers().len(), 4);
    assert_eq!(req.proposal_digest, h.c().proposal_digest);
    assert_eq!(h.c().proposed_at_ms, 1_000);
}

#[test]
fn happy_path_reaches_settled() {
    let mut h = Harness::locked("t1", 1_000);
    let tx = TxId::new("t1");
    let results = h.endorse_all(Verdict::Approve);
    assert!(results.iter().all(|r| !r.is_applied()), "late endorsements must be rejected");

    let attest = h.dep.attest_op(0, &tx, h.c().proposal_digest);
    assert_eq!(h.apply(&attest).state(), Some(ContractState::Delivered));
    assert_eq!(h.c().buyer_confirmation, BuyerConfirmation::Pending);

    let r = h.apply(&h.dep.decision_op(0, &tx, Decision::Confirmed));
    assert_eq!(r.state(), Some(ContractState::Confirmed));
    let [Effect::Settle(s)] = r.effects() else { panic!("{r:?}") };
    assert_eq!((s.merchant_amount, s.platform_amount), (950, 50));
    assert_eq!(s.merchant_wallet, h.dep.merchants[1].wallet_id());
    assert_eq!(s.platform_wallet, h.dep.platform.wallet_id());

    let r = h.apply(&h.bank_update(0, "t1", ContractUpdate::SettlementRecorded { proof_id: Digest::of(b"p"), proof: None }));
    assert_eq!(r.state(), Some(ContractState::Settled));
    assert!(h.c().state.is_absorbing());
}

#[test]
fn shared_bank_endorses_once_for_both_capacities() {
    let mut h = Harness::new();
    h.propose("t1", 0, 0, 300);
    let req = h.c().endorsement_request();
    let voters = req.distinct_endorsers();
    assert_eq!(voters.len(), 3);
    assert_eq!(req.capacities_of(h.dep.banks[0].id()), vec![Capacity::BuyerBank, Capacity::MerchantBank]);
    let results = h.endorse_all(Verdict::Approve);
    assert_eq!(results.last().unwrap().effects(), &[Effect::LockFunds { amount: 300 }]);
}

#[test]
fn any_rejection_refunds_once_round_completes() {
    let mut h = Harness::new();
    h.propose("t1", 0, 1, 300);
    let req = h.c().endorsement_request();
    let voters = req.distinct_endorsers();
    for (i, a) in voters.iter().enumerate() {
        let verdict = if i == 1 { Verdict::Reject } else { Verdict::Approve };
        let r = h.apply(&h.dep.endorse_op(&req, a, verdict).unwrap());
        if i + 1 < voters.len() {
            assert_eq!(r.state(), Some(ContractState::Endorsing));
            assert!(r.effects().is_empty());
        } else {
            assert_eq!(r.state(), Some(ContractState::Rejected));
            let [Effect::Refund(refund)] = r.effects() else { panic!("{r:?}") };
            assert_eq!(refund.amount, 300);
            assert_eq!(refund.buyer_wallet, h.dep.buyers[0].cred.wallet_id());
        }
    }
    let r = h.apply(&h.bank_update(0, "t1", ContractUpdate::RefundRecorded { refund_id: Digest::of(b"r") }));
    assert_eq!(r.state(), Some(ContractState::Refunded));
}

#[test]
fn digest_mismatch_counts_as_rejection() {
    let mut h = Harness::new();
    h.propose("t1", 0, 1, 300);
    let mut req = h.c().endorsement_request();
    let voters = req.distinct_endorsers();
    for a in &voters[..3] {
        h.apply(&h.dep.endorse_op(&req, a, Verdict::Approve).unwrap());
    }
    req.proposal_digest = Digest::of(b"other proposal");
    let r = h.apply(&h.dep.endorse_op(&req, &voters[3], Verdict::Approve).unwrap());
    assert_eq!(r.state(), Some(ContractState::Rejected));
}

#[test]
fn endorsement_guards() {
    let mut h = Harness::new();
    h.propose("t1", 0, 1, 300);
    let req = h.c().endorsement_request();
    let bank0 = h.dep.banks[0].id().clone();

    let first = h.dep.endorse_op(&req, &bank0, Verdict::Approve).unwrap();
    assert!(h.apply(&first).is_applied());
    let again = h.dep.endorse_op(&req, &bank0, Verdict::Approve).unwrap();
    assert!(rejected(&h.apply(&again)).contains("already endorsed"));

    // merchant 0 is not party to this sale
    let outsider = h.dep.merchants[0].clone();
    let e = Endorsement::sign(&outsider, TxId::new("t1"), vec![Capacity::Merchant], Verdict::Approve, req.proposal_digest);
    let op = ChainOp::new(TxId::new("t1"), OpBody::Endorsement(e), &outsider);
    assert!(rejected(&h.apply(&op)).contains("not a required endorser"));

    // right actor, wrong capacity claim
    let platform = h.dep.platform.clone();
    let e = Endorsement::sign(&platform, TxId::new("t1"), vec![Capacity::Merchant], Verdict::Approve, req.proposal_digest);
    let op = ChainOp::new(TxId::new("t1"), OpBody::Endorsement(e), &platform);
    assert!(!h.apply(&op).is_applied());

    // endorsement submitted under someone else's certificate
    let e = Endorsement::sign(&platform, TxId::new("t1"), vec![Capacity::Platform], Verdict::Approve, req.proposal_digest);
    let op = ChainOp::new(TxId::new("t1"), OpBody::Endorsement(e), &h.dep.banks[1]);
    assert!(!h.apply(&op).is_applied());
    assert_eq!(h.c().endorsements.len(), 1);
}

#[test]
fn proposal_validation() {
    let mut h = Harness::new();
    let intent = h.intent("t1", 0, 1, 400);
    let token = h.dep.pay_escrow(0, &intent.tx_id, 400).unwrap();
    let buyer = h.dep.buyers[0].cred.clone();

    let mut p = h.dep.proposal(&intent, token.clone());
    p.price = 399;
    let forged_price = ChainOp::new(intent.tx_id.clone(), OpBody::Proposal(p.clone()), &buyer);
    assert!(rejected(&h.apply(&forged_price)).contains("signature"));
    let resigned = ChainOp::new(intent.tx_id.clone(), OpBody::Proposal(p.sign(&buyer)), &buyer);
    assert!(rejected(&h.apply(&resigned)).contains("payment token"));

    let mut bad_token = token.clone();
    bad_token.bank_signature = h.dep.banks[1].sign(b"x");
    let op = ChainOp::new(intent.tx_id.clone(), OpBody::Proposal(h.dep.proposal(&intent, bad_token)), &buyer);
    assert!(rejected(&h.apply(&op)).contains("payment token signature"));

    let other_buyer = h.dep.buyers[1].cred.clone();
    let op = ChainOp::new(intent.tx_id.clone(), OpBody::Proposal(h.dep.proposal(&intent, token.clone())), &other_buyer);
    assert!(!h.apply(&op).is_applied());

    let merchant = h.dep.merchants[1].clone();
    let op = ChainOp::new(intent.tx_id.clone(), OpBody::Proposal(h.dep.proposal(&intent, token.clone())), &merchant);
    assert!(rejected(&h.apply(&op)).contains("role"));

    assert!(h.contract.is_none());
    let good = ChainOp::new(intent.tx_id.clone(), OpBody::Proposal(h.dep.proposal(&intent, token)), &buyer);
    assert!(h.apply(&good).is_applied());
    assert!(rejected(&h.apply(&good)).contains("already in use"));
}

#[test]
fn only_issued_couriers_attest() {
    let mut h = Harness::locked("t1", 200);
    let tx = TxId::new("t1");
    let digest = h.c().proposal_digest;

    let rogue_ca = Credential::new_root(ActorId::new("rogue"), KeyPair::from_seed([9; 32]));
    let rogue = rogue_ca.issue(ActorId::new("courier-00"), Role::Courier, KeyPair::from_seed([8; 32])).unwrap();
    let op = ChainOp::new(tx.clone(), OpBody::CourierAttest(DeliveryAttestation::sign(&rogue, tx.clone(), digest)), &rogue);
    assert!(rejected(&h.apply(&op)).contains("authority"));

    let merchant = h.dep.merchants[1].clone();
    let op = ChainOp::new(tx.clone(), OpBody::CourierAttest(DeliveryAttestation::sign(&merchant, tx.clone(), digest)), &merchant);
    assert!(rejected(&h.apply(&op)).contains("role"));

    let op = h.dep.attest_op(1, &tx, Digest::of(b"wrong"));
    assert!(!h.apply(&op).is_applied());
    assert_eq!(h.c().state, ContractState::Locked);
}

#[test]
fn only_the_proposing_buyer_confirms() {
    let mut h = Harness::delivered("t1", 200);
    let tx = TxId::new("t1");
    assert!(!h.apply(&h.dep.decision_op(2, &tx, Decision::Confirmed)).is_applied());
    assert!(!h.apply(&h.dep.decision_op(1, &tx, Decision::Null)).is_applied());
    assert_eq!(h.c().state, ContractState::Delivered);
    assert!(h.apply(&h.dep.decision_op(0, &tx, Decision::Confirmed)).is_applied());
    assert!(!h.apply(&h.dep.decision_op(0, &tx, Decision::Null)).is_applied());
}

#[test]
fn expiry_waits_for_deadline_and_authorized_caller() {
    let mut h = Harness::new();
    h.propose("t1", 0, 1, 300);
    let tx = TxId::new("t1");
    let req = h.c().endorsement_request();
    h.apply(&h.dep.endorse_op(&req, h.dep.banks[0].id(), Verdict::Approve).unwrap());

    h.now_ms += h.config.endorsement_timeout_ms - 1;
    assert!(rejected(&h.apply(&h.dep.expire_op(&tx))).contains("deadline"));
    h.now_ms += 1;
    let courier = h.dep.couriers[0].clone();
    let op = ChainOp::new(tx.clone(), OpBody::ContractUpdate(ContractUpdate::ExpireEndorsements), &courier);
    assert!(rejected(&h.apply(&op)).contains("role"));

    let buyer = h.dep.buyers[0].cred.clone();
    let op = ChainOp::new(tx.clone(), OpBody::ContractUpdate(ContractUpdate::ExpireEndorsements), &buyer);
    let r = h.apply(&op);
    assert_eq!(r.state(), Some(ContractState::Rejected));
    assert!(matches!(r.effects(), [Effect::Refund(_)]));
    assert!(!h.apply(&h.dep.expire_op(&tx)).is_applied());
}

#[test]
fn settlement_needs_the_buyer_bank() {
    let mut h = Harness::delivered("t1", 200);
    h.apply(&h.dep.decision_op(0, &TxId::new("t1"), Decision::Confirmed));
    let update = || ContractUpdate::SettlementRecorded { proof_id: Digest::of(b"p"), proof: None };
    assert!(rejected(&h.apply(&h.bank_update(1, "t1", update()))).contains("role"));
    let platform_op = ChainOp::new(TxId::new("t1"), OpBody::ContractUpdate(update()), &h.dep.platform);
    assert!(!h.apply(&platform_op).is_applied());
    assert!(h.apply(&h.bank_update(0, "t1", update())).is_applied());
}

#[test]
fn proof_mode_demands_a_parsable_proof() {
    let mut h = Harness::delivered("t1", 200);
    h.config.require_settlement_proof = true;
    h.apply(&h.dep.decision_op(0, &TxId::new("t1"), Decision::Confirmed));
    let none = h.bank_update(0, "t1", ContractUpdate::SettlementRecorded { proof_id: Digest::of(b"p"), proof: None });
    assert!(rejected(&h.apply(&none)).contains("proof required"));
    let junk = h.bank_update(0, "t1", ContractUpdate::SettlementRecorded { proof_id: Digest::of(b"p"), proof: Some(vec![1, 2, 3]) });
    assert!(rejected(&h.apply(&junk)).contains("malformed"));
    assert_eq!(h.c().state, ContractState::Confirmed);
}

#[test]
fn courier_wins_dispute() {
    let (mut h, b, c) = Harness::disputed("t1", 301);
    let tx = TxId::new("t1");
    assert_eq!(h.c().state, ContractState::Disputed);
    assert!(!h.apply(&h.dep.dispute_resolve_op(&tx, Party::Courier)).is_applied(), "resolution before deposits");
    assert!(h.apply(&h.dep.dispute_open_op(&tx, b, c)).is_applied());
    let r = h.apply(&h.dep.dispute_resolve_op(&tx, Party::Courier));
    assert_eq!(r.state(), Some(ContractState::Confirmed));
    let [Effect::DisputePayout(p), Effect::Settle(s)] = r.effects() else { panic!("{r:?}") };
    assert_eq!((p.winner_amount, p.platform_amount), (451, 151));
    assert_eq!(p.winner_wallet, h.dep.couriers[0].wallet_id());
    assert_eq!(s.total(), 301);
    assert!(!h.apply(&h.dep.dispute_resolve_op(&tx, Party::Buyer)).is_applied());
}

#[test]
fn buyer_wins_dispute() {
    let (mut h, b, c) = Harness::disputed("t1", 300);
    let tx = TxId::new("t1");
    h.apply(&h.dep.dispute_open_op(&tx, b, c));
    let r = h.apply(&h.dep.dispute_resolve_op(&tx, Party::Buyer));
    assert_eq!(r.state(), Some(ContractState::Refunded));
    let [Effect::DisputePayout(p), Effect::Refund(refund)] = r.effects() else { panic!("{r:?}") };
    assert_eq!((p.winner_amount, p.platform_amount), (450, 150));
    assert_eq!(p.winner_wallet, h.dep.buyers[0].cred.wallet_id());
    assert_eq!(refund.amount, 300);
}

#[test]
fn dispute_rejects_bad_deposits() {
    let (mut h, b, c) = Harness::disputed("t1", 300);
    let tx = TxId::new("t1");
    let short = h.dep.pay_deposit(&h.dep.buyers[0].cred.clone(), &tx, 299);
    // the deposit lock id is per (tx, wallet), so a second deposit is refused outright
    assert!(short.is_err());

    let swapped = h.dep.dispute_open_op(&tx, c.clone(), b.clone());
    assert!(rejected(&h.apply(&swapped)).contains("wrong wallet"));

    let mut forged = c.clone();
    forged.amount = 300;
    forged.bank_signature = h.dep.banks[0].sign(b"forged");
    let op = h.dep.dispute_open_op(&tx, b.clone(), forged);
    assert!(rejected(&h.apply(&op)).contains("bank signature"));

    let missing = ChainOp::new(
        tx.clone(),
        OpBody::DisputeOpen(DisputeOpening { tx_id: tx.clone(), buyer_deposit: Some(b), courier_deposit: None }),
        &h.dep.platform,
    );
    assert!(rejected(&h.apply(&missing)).contains("missing"));
    assert!(h.c().dispute.is_none());
}

#[test]
fn op_tx_id_must_match_payload() {
    let mut h = Harness::locked("t1", 200);
    let attest = DeliveryAttestation::sign(&h.dep.couriers[0], TxId::new("t1"), h.c().proposal_digest);
    let op = ChainOp::new(TxId::new("t2"), OpBody::CourierAttest(attest), &h.dep.couriers[0]);
    assert!(!h.apply(&op).is_applied());
}

#[test]
fn audit_record_lists_fields_in_order() {
    let h = Harness::locked("t1", 200);
    let record = h.c().to_audit_record();
    let keys: Vec<&str> = record.lines().map(|l| l.split(':').next().unwrap()).collect();
    assert_eq!(&keys[..4], &["tx_id", "state", "product_id", "price"]);
    assert_eq!(keys.iter().filter(|k| **k == "endorsement").count(), 4);
    assert!(record.contains("state: Locked"));
    assert_eq!(keys.last(), Some(&"refund_record"));
}

#[test]
fn contract_canonical_round_trip() {
    let (mut h, b, c) = Harness::disputed("t1", 300);
    h.apply(&h.dep.dispute_open_op(&TxId::new("t1"), b, c));
    let bytes = h.c().to_canonical_bytes();
    assert_eq!(&EscrowContract::from_canonical_bytes(&bytes).unwrap(), h.c());
}

proptest! {
    #[test]
    fn dispute_payout_is_exact(d in 1u64..=u64::MAX / 2) {
        let (w, p) = dispute_payout(d);
        prop_assert_eq!(w, d + d / 2);
        prop_assert_eq!(p, 2 * d - w);
        prop_assert_eq!(w + p, 2 * d);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Folding ops in any order only ever takes legal transitions, and a
    /// rejected op never changes the contract.
    #[test]
    fn random_op_orders_respect_the_state_machine(order in proptest::collection::vec(0usize..12, 1..40), dispute in any::<bool>()) {
        let mut h = Harness::new();
        let tx = TxId::new("t1");
        let proposal = h.dep.purchase(&h.intent("t1", 0, 1, 600)).unwrap();
        let OpBody::Proposal(p) = &proposal.body else { unreachable!() };
        let digest = p.digest();
        let req = EndorsementRequest { tx_id: tx.clone(), proposal_digest: digest, required_endorsers: p.required_endorsers() };
        let voters = req.distinct_endorsers();
        let b = h.dep.pay_deposit(&h.dep.buyers[0].cred.clone(), &tx, 600).unwrap();
        let c = h.dep.pay_deposit(&h.dep.couriers[0].clone(), &tx, 600).unwrap();
        let decision = if dispute { Decision::Null } else { Decision::Confirmed };
        let mut pool = vec![proposal.clone()];
        pool.extend(voters.iter().map(|a| h.dep.endorse_op(&req, a, Verdict::Approve).unwrap()));
        pool.push(h.dep.attest_op(0, &tx, digest));
        pool.push(h.dep.decision_op(0, &tx, decision));
        pool.push(h.dep.dispute_open_op(&tx, b, c));
        pool.push(h.dep.dispute_resolve_op(&tx, Party::Courier));
        pool.push(h.bank_update(0, "t1", ContractUpdate::SettlementRecorded { proof_id: Digest::of(b"p"), proof: None }));
        pool.push(h.bank_update(0, "t1", ContractUpdate::RefundRecorded { refund_id: Digest::of(b"r") }));
        pool.push(h.dep.expire_op(&tx));
        prop_assert_eq!(pool.len(), 12);

        for (step, i) in std::iter::once(0).chain(order).enumerate() {
            let before = h.contract.clone();
            h.now_ms += 1_000 * step as u64;
            let r = h.apply(&pool[i]);
            match r {
                OpResult::Rejected { .. } => prop_assert_eq!(&h.contract, &before),
                OpResult::Applied { from, state, .. } => {
                    let legal = match from {
                        None => state == ContractState::Endorsing,
                        Some(f) => f == state || f.can_transition_to(state),
                    };
                    prop_assert!(legal, "{:?} -> {:?}", from, state);
                    if let Some(f) = from {
                        prop_assert!(!f.is_absorbing());
                    }
                }
            }
        }
    }
}
