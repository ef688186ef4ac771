//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Barrier;
use std::time::{Duration, Instant};

use common::{Net, FLOAT};
use escrowpay::bridge::{ChallengeOutcome, FaultMode, GatewayError, Request};
use escrowpay::chain::{log, Block, ChainOp, ChainProof, HeaderStore, OpBody, WorldState};
use escrowpay::codec::Canonical;
use escrowpay::contract::{
    dispute_payout, Amount, BuyerDecision, CommissionRate, ContractState, Decision, Effect, OpResult, Party, TxId, Verdict,
};
use escrowpay::identity::WalletId;
use escrowpay::ledger::{verify_settlement_offline, EntryKind, LedgerError, LockKind, SettlementProof, TransferIntent};
use escrowpay::sim::audit::audit;
use escrowpay::sim::report::{build_report, render_report};
use escrowpay::sim::{
    run_batch_sweep, simulate, Deployment, DeploymentParams, FaultSpec, MetricsReport, PurchaseIntent, ReportFormat, RunOutput, Scenario, ScenarioConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Outcome = Result<String, String>;

const NUM_TX: usize = 1000;
const BUDGET: Duration = Duration::from_secs(60);

struct Run {
    out: RunOutput,
    report: MetricsReport,
    elapsed: Duration,
    log_path: PathBuf,
}

fn scenario_config(scenario: Scenario, num_tx: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(scenario);
    cfg.num_transactions = num_tx;
    cfg
}

fn run(scenario: Scenario, dir: &Path, tag: &str) -> Run {
    let mut cfg = scenario_config(scenario, NUM_TX);
    let log_path = dir.join(format!("{tag}.log"));
    cfg.block_log = Some(log_path.clone());
    let start = Instant::now();
    let mut out = simulate(&cfg, false).expect("scenario runs");
    let invariants = audit(&mut out);
    let elapsed = start.elapsed();
    let report = build_report(&out, invariants, None);
    Run { out, report, elapsed, log_path }
}

struct Runs {
    normal: Run,
    dispute: Run,
    proof: Run,
    normal_again: Run,
}

impl Runs {
    fn all(&self) -> [(&str, &Run); 3] {
        [("normal", &self.normal), ("dispute", &self.dispute), ("proof", &self.proof)]
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn entitlement(price: Amount, rate: CommissionRate) -> Amount {
    let commission = (price as u128 * rate.ppm() as u128 / CommissionRate::SCALE as u128) as Amount;
    price - commission
}

fn headers_of(blocks: &[Block]) -> HeaderStore {
    let store = HeaderStore::new();
    for b in blocks {
        store.append(&b.header).expect("chain links");
    }
    store
}

// 1. Conservation after each scenario, exact, within the time budget.
fn conservation(runs: &Runs) -> Outcome {
    let mut details = Vec::new();
    for (name, r) in runs.all() {
        let ledger = &r.out.deployment.ledger;
        let journal = ledger.journal();
        let minted: u128 = journal.iter().map(|e| e.minted as u128).sum();
        let redeemed: u128 = journal.iter().map(|e| e.redeemed as u128).sum();
        let balances: u128 = ledger.audit_balances().values().map(|a| *a as u128).sum();
        let live = ledger.locks().into_iter().filter(|l| l.is_live()).collect::<Vec<_>>();
        let escrow: u128 = live.iter().filter(|l| l.kind == LockKind::Escrow).map(|l| l.amount as u128).sum();
        let deposits: u128 = live.iter().filter(|l| l.kind == LockKind::Deposit).map(|l| l.amount as u128).sum();
        ensure(balances + escrow + deposits == minted - redeemed, || {
            format!("{name}: balances {balances} + escrow {escrow} + deposits {deposits} != minted {minted} - redeemed {redeemed}")
        })?;
        ensure(ledger.conservation().holds(), || format!("{name}: ledger conservation report fails"))?;
        ensure(r.out.conservation_failures.is_empty(), || format!("{name}: broken at heights {:?}", r.out.conservation_failures))?;
        ensure(r.report.completed == NUM_TX, || format!("{name}: {} of {NUM_TX} completed", r.report.completed))?;
        ensure(r.elapsed < BUDGET, || format!("{name}: took {:.1?}", r.elapsed))?;
        details.push(format!("{name} {:.1?}", r.elapsed));
    }
    Ok(format!("3 x {NUM_TX} tx conserve exactly ({})", details.join(", ")))
}

// 2. Release attempts without a valid mandate never move money.
fn fund_security() -> Outcome {
    let mut net = Net::new(DeploymentParams::default(), false);
    let mut rng = ChaCha20Rng::seed_from_u64(0xa77ac);
    let mut locked = Vec::new();
    let mut confirmed = Vec::new();
    let mut disputed = Vec::new();
    for i in 0..24usize {
        let intent = net.intent(&format!("a{i:02}"), i % 4, (i / 4) % 2, rng.gen_range(100..10_000));
        let bank = net.dep.buyers[intent.buyer].bank;
        match i % 3 {
            0 => {
                net.propose(&intent);
                net.endorse_all(&intent.tx_id, Verdict::Approve);
                locked.push(intent);
            }
            1 => {
                net.watchers[bank].inject_settlement_fault(FaultMode::SkipTx, Some(intent.tx_id.clone()));
                net.sale(&intent, Decision::Confirmed);
                confirmed.push(intent);
            }
            _ => {
                net.sale(&intent, Decision::Null);
                let b = net.dep.pay_deposit(&net.dep.buyers[intent.buyer].cred.clone(), &intent.tx_id, intent.price).unwrap();
                let c = net.dep.pay_deposit(&net.dep.couriers[0].clone(), &intent.tx_id, intent.price).unwrap();
                net.run(net.dep.dispute_open_op(&intent.tx_id, b, c));
                disputed.push(intent);
            }
        }
    }
    for i in &confirmed {
        ensure(net.state(&i.tx_id) == ContractState::Confirmed, || format!("{} not held at Confirmed", i.tx_id))?;
    }
    let attacker = net.dep.couriers[1].wallet_id();
    let ledger = std::sync::Arc::clone(&net.dep.ledger);
    let balances_before = ledger.audit_balances();
    let journal_before = ledger.journal().len();
    let rate = CommissionRate::from_ppm(50_000).unwrap();

    let confirm_proof = |net: &Net, tx: &TxId| net.proof_of(tx, |b| matches!(b, OpBody::BuyerConfirm(_)));
    let any_proof = |net: &Net, tx: &TxId, rng: &mut ChaCha20Rng| {
        let picks: [fn(&OpBody) -> bool; 2] = [|b| matches!(b, OpBody::Proposal(_)), |b| matches!(b, OpBody::Endorsement(_))];
        net.proof_of(tx, picks[rng.gen_range(0..picks.len())])
    };
    let honest_split = |net: &Net, intent: &PurchaseIntent| -> Vec<(WalletId, Amount)> {
        let m = entitlement(intent.price, rate);
        vec![(net.dep.merchants[intent.merchant].wallet_id(), m), (net.dep.platform.wallet_id(), intent.price - m)]
    };

    let mut successes = Vec::new();
    let attempts = 1000;
    for n in 0..attempts {
        let kind = n % 10;
        let target = if kind == 1 || kind == 6 { &locked[rng.gen_range(0..locked.len())] } else { &confirmed[rng.gen_range(0..confirmed.len())] };
        let lock_id = net.lock_of(&target.tx_id);
        let holder = net.dep.banks[net.dep.buyers[target.buyer].bank].clone();
        let other = net.dep.banks[1 - net.dep.buyers[target.buyer].bank].clone();
        let split = honest_split(&net, target);
        let result: Result<(), LedgerError> = match kind {
            // holding bank signs a release with no proof at all
            0 => ledger.release_escrow(&holder.cert, &lock_id, None, &split).map(|_| ()),
            // proof of an op that mandates nothing
            1 => ledger.release_escrow(&holder.cert, &lock_id, Some(&any_proof(&net, &target.tx_id, &mut rng)), &split).map(|_| ()),
            // genuine mandate for another transaction
            2 => {
                let victim = &locked[rng.gen_range(0..locked.len())];
                let proof = confirm_proof(&net, &target.tx_id);
                ledger.release_escrow(&holder.cert, &net.lock_of(&victim.tx_id), Some(&proof), &split).map(|_| ())
            }
            // genuine mandate, wrong bank
            3 => ledger.release_escrow(&other.cert, &lock_id, Some(&confirm_proof(&net, &target.tx_id)), &split).map(|_| ()),
            // genuine mandate, redirected payees
            4 => {
                let mut bad = split.clone();
                bad[rng.gen_range(0..2)].0 = attacker;
                ledger.release_escrow(&holder.cert, &lock_id, Some(&confirm_proof(&net, &target.tx_id)), &bad).map(|_| ())
            }
            // mandate edited to pay the attacker
            5 => {
                let mut proof = confirm_proof(&net, &target.tx_id);
                if let OpResult::Applied { effects, .. } = &mut proof.result {
                    for e in effects.iter_mut() {
                        if let Effect::Settle(s) = e {
                            s.merchant_wallet = attacker;
                        }
                    }
                }
                let bad = vec![(attacker, split[0].1), split[1]];
                ledger.release_escrow(&holder.cert, &lock_id, Some(&proof), &bad).map(|_| ())
            }
            // fabricated block with a bank-signed confirmation
            6 => {
                let decision = BuyerDecision::sign(&holder, target.tx_id.clone(), Decision::Confirmed);
                let op = ChainOp::new(target.tx_id.clone(), OpBody::BuyerConfirm(decision), &holder);
                let mut real = confirm_proof(&net, &confirmed[0].tx_id);
                if let OpResult::Applied { effects, .. } = &mut real.result {
                    for e in effects.iter_mut() {
                        if let Effect::Settle(s) = e {
                            s.merchant_wallet = attacker;
                            s.merchant_amount = split[0].1;
                            s.platform_amount = split[1].1;
                        }
                    }
                }
                let height = if rng.gen_bool(0.5) { net.chain.height() } else { rng.gen_range(0..net.chain.height()) };
                let prev = net.chain.blocks().get(height.wrapping_sub(1) as usize).map_or(escrowpay::crypto::Digest::ZERO, |b| b.block_hash);
                let forged = Block::new(height, prev, net.now_ms, vec![op], vec![real.result]);
                let bad = vec![(attacker, split[0].1), split[1]];
                ledger.release_escrow(&holder.cert, &lock_id, Some(&forged.inclusion_proof(0)), &bad).map(|_| ())
            }
            // random single-byte corruption of a genuine mandate
            7 => {
                let mut bytes = confirm_proof(&net, &target.tx_id).to_canonical_bytes();
                let at = rng.gen_range(0..bytes.len());
                bytes[at] ^= rng.gen_range(1..=255u8);
                match ChainProof::from_canonical_bytes(&bytes) {
                    Ok(proof) => ledger.release_escrow(&holder.cert, &lock_id, Some(&proof), &split).map(|_| ()),
                    Err(_) => Err(LedgerError::InvalidChainProof("undecodable")),
                }
            }
            // refund or dispute payout driven by the wrong op
            8 => {
                if rng.gen_bool(0.5) {
                    ledger.refund_escrow(&holder.cert, &lock_id, Some(&confirm_proof(&net, &target.tx_id))).map(|_| ())
                } else {
                    let d = &disputed[rng.gen_range(0..disputed.len())];
                    let proof = net.proof_of(&d.tx_id, |b| matches!(b, OpBody::DisputeOpen(_)));
                    let bank = &net.dep.banks[net.dep.buyers[d.buyer].bank];
                    ledger.pay_dispute(&bank.cert, Some(&proof)).map(|_| ())
                }
            }
            // non-bank callers, and recovery without a compensation
            _ => {
                let proof = confirm_proof(&net, &target.tx_id);
                if rng.gen_bool(0.5) {
                    let who = [&net.dep.platform, &net.dep.merchants[target.merchant], &net.dep.couriers[0]][rng.gen_range(0..3)];
                    ledger.release_escrow(&who.cert, &lock_id, Some(&proof), &split).map(|_| ())
                } else {
                    ledger.recover_compensated(&holder.cert, &lock_id, &proof).map(|_| ())
                }
            }
        };
        if result.is_ok() {
            successes.push(format!("attempt {n} (kind {kind}) on {}", target.tx_id));
        }
    }
    ensure(successes.is_empty(), || format!("{} successes: {:?}", successes.len(), &successes[..successes.len().min(5)]))?;
    ensure(ledger.audit_balances() == balances_before, || "balances moved".into())?;
    ensure(ledger.journal().len() == journal_before, || "journal grew".into())?;
    ensure(ledger.audit_balance(&attacker) == FLOAT, || "attacker gained funds".into())?;
    for i in locked.iter().chain(&confirmed) {
        ensure(ledger.lock(&net.lock_of(&i.tx_id)).is_some_and(|l| l.is_live()), || format!("{} lock consumed", i.tx_id))?;
    }
    Ok(format!("{attempts} adversarial attempts, 0 successes"))
}

// 3. Every endorser subset and verdict pattern.
fn endorsement_completeness() -> Outcome {
    #[derive(Clone, Copy, PartialEq)]
    enum Vote {
        Approve,
        Reject,
        WrongDigest,
    }
    const VOTES: [Vote; 3] = [Vote::Approve, Vote::Reject, Vote::WrongDigest];

    let mut net = Net::new(DeploymentParams::default(), false);
    let mut cases = 0;
    let mut locked = 0;
    for subset in 0u32..16 {
        let members: Vec<usize> = (0..4).filter(|i| subset & (1 << i) != 0).collect();
        let patterns = 3usize.pow(members.len() as u32);
        for pattern in 0..patterns {
            let votes: Vec<Vote> = (0..members.len()).map(|k| VOTES[(pattern / 3usize.pow(k as u32)) % 3]).collect();
            let intent = net.intent(&format!("e{subset:02}-{pattern:02}"), 0, 1, 1_000);
            let buyer = net.dep.buyers[0].cred.wallet_id();
            let before = net.dep.ledger.audit_balance(&buyer);
            let req = net.propose(&intent);
            let endorsers = req.distinct_endorsers();
            ensure(endorsers.len() == 4, || format!("{} distinct endorsers", endorsers.len()))?;
            for (&m, vote) in members.iter().zip(&votes) {
                let mut r = req.clone();
                if *vote == Vote::WrongDigest {
                    r.proposal_digest = escrowpay::crypto::Digest::of(b"a different proposal");
                }
                let verdict = if *vote == Vote::Reject { Verdict::Reject } else { Verdict::Approve };
                net.submit(net.dep.endorse_op(&r, &endorsers[m], verdict).unwrap());
            }
            net.settle();
            if !net.state(&intent.tx_id).is_absorbing() && net.state(&intent.tx_id) != ContractState::Locked {
                net.expire(&intent.tx_id);
            }

            let expect_lock = members.len() == 4 && votes.iter().all(|v| *v == Vote::Approve);
            let state = net.state(&intent.tx_id);
            let refunds = net
                .dep
                .ledger
                .journal()
                .iter()
                .filter(|e| e.kind == EntryKind::Refund && e.tx_id.as_ref() == Some(&intent.tx_id))
                .count();
            let label = format!("subset {subset:04b} pattern {pattern}");
            if expect_lock {
                ensure(state == ContractState::Locked && refunds == 0, || format!("{label}: {state:?}, {refunds} refunds"))?;
                locked += 1;
            } else {
                ensure(state == ContractState::Refunded, || format!("{label}: ended {state:?}"))?;
                ensure(refunds == 1, || format!("{label}: {refunds} refunds"))?;
                ensure(net.dep.ledger.audit_balance(&buyer) == before, || format!("{label}: buyer not made whole"))?;
            }
            cases += 1;
        }
    }
    ensure(cases == 256 && locked == 1, || format!("{cases} cases, {locked} locked"))?;
    Ok(format!("{cases} cases: Locked only for 4/4 matching approvals, one refund otherwise"))
}

// 4. Dispute payout arithmetic and both resolution paths.
fn dispute_arithmetic() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(0xd15);
    for _ in 0..10_000 {
        let p: Amount = rng.gen_range(1..=1_000_000_000_000);
        let winner = (3 * p as u128 / 2) as Amount;
        let platform = (2 * p as u128 - winner as u128) as Amount;
        let got = dispute_payout(p);
        ensure(got == (winner, platform), || format!("price {p}: {got:?} != ({winner}, {platform})"))?;
        ensure(got.0 as u128 + got.1 as u128 == 2 * p as u128, || format!("price {p}: shares do not sum to 2p"))?;
    }

    let mut net = Net::new(DeploymentParams::default(), false);
    let rate = CommissionRate::from_ppm(50_000).unwrap();
    let ledger = std::sync::Arc::clone(&net.dep.ledger);
    for k in 0..40usize {
        let p: Amount = rng.gen_range(1..=50_000);
        let winner_party = if k % 2 == 0 { Party::Courier } else { Party::Buyer };
        let intent = net.intent(&format!("d{k:02}"), k % 4, k % 2, p);
        let buyer = net.dep.buyers[intent.buyer].cred.wallet_id();
        let courier = net.dep.couriers[intent.courier].wallet_id();
        let merchant = net.dep.merchants[intent.merchant].wallet_id();
        let (b0, c0, m0) = (ledger.audit_balance(&buyer), ledger.audit_balance(&courier), ledger.audit_balance(&merchant));
        net.dispute(&intent, winner_party);
        let w = p + p / 2;
        let (b1, c1, m1) = (ledger.audit_balance(&buyer), ledger.audit_balance(&courier), ledger.audit_balance(&merchant));
        let state = net.state(&intent.tx_id);
        match winner_party {
            Party::Courier => {
                ensure(state == ContractState::Settled, || format!("courier win at {p}: {state:?}"))?;
                ensure(c1 == c0 - p + w && b1 == b0 - 2 * p && m1 == m0 + entitlement(p, rate), || {
                    format!("courier win at {p}: balance deltas wrong")
                })?;
            }
            Party::Buyer => {
                ensure(state == ContractState::Refunded, || format!("buyer win at {p}: {state:?}"))?;
                ensure(b1 == b0 - p + w && c1 == c0 - p && m1 == m0, || format!("buyer win at {p}: principal not restored"))?;
            }
        }
    }
    ensure(ledger.conservation().holds(), || "conservation broken".into())?;
    Ok("10000 prices exact; 20 courier wins Settled, 20 buyer wins Refunded".into())
}

// 5. Settlement proofs, tampering, and the challenge protocol.
fn settlement_proofs(runs: &Runs) -> Outcome {
    let mut verified = 0;
    let mut sample = Vec::new();
    for (name, r) in [("normal", &runs.normal), ("proof", &runs.proof)] {
        let out = &r.out;
        let headers = headers_of(out.chain.blocks());
        let journal = out.deployment.ledger.journal();
        for intent in &out.intents {
            if out.chain.query_state(&intent.tx_id).map(|c| c.state).ok() != Some(ContractState::Settled) {
                continue;
            }
            let proof = out.deployment.ledger.settlement_proof(&intent.tx_id).ok_or_else(|| format!("{name}: {} has no proof", intent.tx_id))?;
            ensure(verify_settlement_offline(&proof, &journal, &headers, &out.deployment.authorities), || {
                format!("{name}: {} proof fails offline", intent.tx_id)
            })?;
            verified += 1;
            if name == "normal" && sample.len() < 100 {
                sample.push(proof);
            }
        }
    }
    ensure(verified >= 2 * NUM_TX, || format!("only {verified} settled proofs"))?;

    let out = &runs.normal.out;
    let headers = headers_of(out.chain.blocks());
    let journal = out.deployment.ledger.journal();
    let mut rng = ChaCha20Rng::seed_from_u64(0x7a3);
    let mut rejected = 0;
    for proof in &sample {
        let mut bytes = proof.to_canonical_bytes();
        let at = rng.gen_range(0..bytes.len());
        bytes[at] ^= rng.gen_range(1..=255u8);
        let ok = SettlementProof::from_canonical_bytes(&bytes)
            .is_ok_and(|p| verify_settlement_offline(&p, &journal, &headers, &out.deployment.authorities));
        if !ok {
            rejected += 1;
        }
    }
    ensure(sample.len() == 100 && rejected == 100, || format!("{rejected}/{} tamperings rejected", sample.len()))?;

    let mut compensated = 0;
    for schedule in 0..6u64 {
        let mut cfg = scenario_config(Scenario::Normal, 150);
        cfg.rng_seed = 100 + schedule;
        let mut picks = BTreeSet::new();
        for _ in 0..rng.gen_range(0..=8) {
            picks.insert(rng.gen_range(0..150));
        }
        cfg.faults = picks
            .iter()
            .map(|&i| FaultSpec {
                tx_id: escrowpay::sim::tx_id_for(i),
                mode: if rng.gen_bool(0.75) { FaultMode::SkipTx } else { FaultMode::WrongAmount },
            })
            .collect();
        let mut out = simulate(&cfg, false).map_err(|e| e.to_string())?;
        let checks = audit(&mut out);
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
        ensure(failed.is_empty(), || format!("schedule {schedule}: failed {failed:?}"))?;
        let faulted: BTreeMap<&TxId, FaultMode> = cfg.faults.iter().map(|f| (&f.tx_id, f.mode)).collect();
        let rate = cfg.commission().map_err(|e| e.to_string())?;
        let price: BTreeMap<&TxId, Amount> = out.intents.iter().map(|i| (&i.tx_id, i.price)).collect();
        let mut seen = BTreeSet::new();
        for case in &out.challenges {
            match case.outcome {
                ChallengeOutcome::Compensated(amount) => {
                    ensure(faulted.contains_key(&case.tx_id), || format!("schedule {schedule}: false compensation for {}", case.tx_id))?;
                    let expected = entitlement(price[&case.tx_id], rate);
                    ensure(amount == expected, || format!("{}: compensated {amount}, entitled {expected}", case.tx_id))?;
                    seen.insert(case.tx_id.clone());
                    compensated += 1;
                }
                ChallengeOutcome::ProofSupplied(_) => {
                    ensure(!faulted.contains_key(&case.tx_id), || format!("{}: faulted yet proof supplied", case.tx_id))?;
                }
            }
        }
        for (tx, mode) in &faulted {
            ensure(seen.contains(*tx), || format!("schedule {schedule}: {tx} ({mode:?}) not compensated"))?;
        }
    }
    Ok(format!("{verified} proofs verify offline, 100/100 tamperings rejected, {compensated} exact compensations, 0 false"))
}

// 6. Racing spends of one note, and shard-count independence.
fn double_spend() -> Outcome {
    let dep = Deployment::new(DeploymentParams { buyers: 8, ..Default::default() }).map_err(|e| e.to_string())?;
    let ledger = &dep.ledger;
    let mut rng = ChaCha20Rng::seed_from_u64(0xd5);
    let mut races: Vec<(usize, usize)> = (0..1000).map(|_| (2, 0)).collect();
    for k in 2..=8 {
        races.extend((0..25).map(|_| (k, 0)));
    }
    let mut notes = Vec::new();
    for (k, wins) in races.iter_mut() {
        let owner = &dep.buyers[rng.gen_range(0..8)].cred;
        let amount = rng.gen_range(1..100_000);
        let note = dep.fund(owner.wallet_id(), amount).map_err(|e| e.to_string())?;
        let intents: Vec<TransferIntent> = (0..*k)
            .map(|_| {
                let to = dep.buyers[rng.gen_range(0..8)].cred.wallet_id();
                let cut = rng.gen_range(0..=amount);
                let outputs = if cut == 0 || cut == amount { vec![(to, amount)] } else { vec![(to, cut), (owner.wallet_id(), amount - cut)] };
                TransferIntent::new(vec![note.note_id], outputs, &owner.keys)
            })
            .collect();
        let barrier = Barrier::new(*k);
        *wins = std::thread::scope(|s| {
            let handles: Vec<_> = intents
                .iter()
                .map(|intent| {
                    let barrier = &barrier;
                    s.spawn(move || {
                        barrier.wait();
                        ledger.transfer_2pc(intent).is_ok()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).filter(|w| *w).count()
        });
        notes.push(note.note_id);
    }
    let bad: Vec<_> = races.iter().enumerate().filter(|(_, (_, w))| *w != 1).collect();
    ensure(bad.is_empty(), || format!("{} races without exactly one commit: {:?}", bad.len(), &bad[..bad.len().min(5)]))?;
    let journal = ledger.journal();
    for id in &notes {
        let spends = journal.iter().filter(|e| e.inputs.iter().any(|n| &n.note_id == id)).count();
        ensure(spends == 1, || format!("note {id} consumed {spends} times"))?;
    }
    ensure(ledger.conservation().holds(), || "conservation broken".into())?;

    let mut reference = None;
    for shards in [1, 2, 4] {
        let mut cfg = scenario_config(Scenario::Normal, 200);
        cfg.shards = shards;
        let out = simulate(&cfg, false).map_err(|e| e.to_string())?;
        let balances = out.deployment.ledger.audit_balances();
        match &reference {
            None => reference = Some(balances),
            Some(r) => ensure(r == &balances, || format!("balances differ with {shards} shards"))?,
        }
    }
    Ok(format!("1000 two-way and 175 k-way races (k<=8), one commit each; balances equal for shards 1/2/4"))
}

// 7. Log replay and fixed-seed reruns.
fn determinism(runs: &Runs) -> Outcome {
    let a = &runs.normal;
    let b = &runs.normal_again;
    let blocks = log::read_log(&a.log_path).map_err(|e| e.to_string())?;
    ensure(blocks.as_slice() == a.out.chain.blocks(), || "log differs from chain".into())?;
    let replayed = WorldState::replay(&blocks, a.out.config.batch_size, a.out.chain.contract_config(), a.out.chain.authorities())
        .map_err(|e| e.to_string())?;
    ensure(replayed.to_canonical_bytes() == a.out.chain.world().to_canonical_bytes(), || "replayed world differs".into())?;

    let (la, lb) = (std::fs::read(&a.log_path).unwrap(), std::fs::read(&b.log_path).unwrap());
    ensure(la == lb, || "rerun wrote a different block log".into())?;
    let outcomes = |r: &Run| -> Vec<Option<ContractState>> { r.out.intents.iter().map(|i| r.out.chain.query_state(&i.tx_id).ok().map(|c| c.state)).collect() };
    ensure(outcomes(a) == outcomes(b), || "rerun outcomes differ".into())?;
    ensure(a.out.deployment.ledger.audit_balances() == b.out.deployment.ledger.audit_balances(), || "rerun balances differ".into())?;
    ensure(a.report.digests == b.report.digests, || "rerun digests differ".into())?;
    Ok(format!("{} blocks replay byte-identically; rerun digest {}", blocks.len(), &a.report.digests.world_state[..16]))
}

// 8. Relative throughput ordering and the endorsement bottleneck.
fn performance_ordering(runs: &Runs) -> Outcome {
    let (n, d, p) = (runs.normal.report.throughput_tps, runs.dispute.report.throughput_tps, runs.proof.report.throughput_tps);
    ensure(n > d, || format!("normal {n:.1} <= dispute {d:.1}"))?;
    ensure(n > p, || format!("normal {n:.1} <= proof {p:.1}"))?;
    let table = run_batch_sweep(&scenario_config(Scenario::BatchSweep, NUM_TX), &[10, 20, 40, 80]).map_err(|e| e.to_string())?;
    ensure(table.rows.len() == 12, || format!("{} sweep rows", table.rows.len()))?;
    let bad = table.endorsement_not_slowest();
    ensure(bad.is_empty(), || format!("endorsement not slowest at batch sizes {bad:?}"))?;
    Ok(format!("TPS normal {n:.1} > dispute {d:.1}, normal > proof {p:.1}; endorsement slowest at 10/20/40/80"))
}

/// Needles found anywhere in `hay`, in one pass per distinct needle length.
fn find_any<'a>(hay: &[u8], needles: &[&'a [u8]]) -> Vec<&'a [u8]> {
    let mut by_len: BTreeMap<usize, std::collections::HashSet<&[u8]>> = BTreeMap::new();
    for n in needles {
        by_len.entry(n.len()).or_default().insert(n);
    }
    let mut found = BTreeSet::new();
    for (len, set) in by_len {
        found.extend(hay.windows(len).filter_map(|w| set.get(w).copied()));
    }
    found.into_iter().collect()
}

// 9. Buyer account names never reach the chain or the platform.
fn privacy(runs: &Runs) -> Outcome {
    let mut trials = 0;
    for (name, r) in runs.all() {
        let out = &r.out;
        let mut artifacts = std::fs::read(&r.log_path).map_err(|e| e.to_string())?;
        artifacts.extend(log::encode_log(out.chain.blocks()));
        artifacts.extend(out.chain.world().to_canonical_bytes());
        for e in out.chain.replay_commits(0) {
            artifacts.extend(e.proof.to_canonical_bytes());
        }
        for f in [ReportFormat::JsonLines, ReportFormat::Csv, ReportFormat::Human] {
            artifacts.extend(render_report(&r.report, f).into_bytes());
        }
        let names: Vec<&[u8]> = out.deployment.buyers.iter().map(|b| b.user_id.as_bytes()).collect();
        let leaked = find_any(&artifacts, &names);
        ensure(leaked.is_empty(), || format!("{name}: {} account names leaked", leaked.len()))?;
        let platform = &out.deployment.platform.cert;
        for b in &out.deployment.buyers {
            let wallet = b.cred.wallet_id();
            for request in [Request::Query { wallet }, Request::History { wallet }] {
                let got = out.deployment.gateway.handle(platform, request);
                ensure(got == Err(GatewayError::Ledger(LedgerError::Unauthorized)), || format!("{name}: platform query answered {got:?}"))?;
                trials += 1;
            }
            ensure(out.deployment.ledger.query_balance(platform, &wallet) == Err(LedgerError::Unauthorized), || "ledger answered platform".into())?;
            trials += 1;
        }
    }
    Ok(format!("no account names in chain or reports; {trials}/{trials} platform queries Unauthorized"))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let started = Instant::now();
    // Sequential so each run's wall time is measured without contention.
    let runs = Runs {
        normal: run(Scenario::Normal, dir.path(), "normal"),
        dispute: run(Scenario::ReshippingDispute, dir.path(), "dispute"),
        proof: run(Scenario::ProofPerSettlement, dir.path(), "proof"),
        normal_again: run(Scenario::Normal, dir.path(), "normal-again"),
    };

    type Check<'a> = (&'static str, Box<dyn Fn() -> Outcome + Send + Sync + 'a>);
    let runs = &runs;
    let checks: Vec<Check> = vec![
        ("conservation", Box::new(move || conservation(runs))),
        ("fund_security", Box::new(fund_security)),
        ("endorsement_completeness", Box::new(endorsement_completeness)),
        ("dispute_arithmetic", Box::new(dispute_arithmetic)),
        ("settlement_proofs", Box::new(move || settlement_proofs(runs))),
        ("double_spend_exclusion", Box::new(double_spend)),
        ("determinism_replay", Box::new(move || determinism(runs))),
        ("performance_ordering", Box::new(move || performance_ordering(runs))),
        ("privacy_partition", Box::new(move || privacy(runs))),
    ];
    let results: Vec<(&str, Outcome, Duration)> = std::thread::scope(|s| {
        let handles: Vec<_> = checks
            .iter()
            .map(|(name, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
                        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
                    });
                    (*name, r, t.elapsed())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    let mut failed = 0;
    println!();
    for (i, (name, result, took)) in results.iter().enumerate() {
        match result {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({took:.1?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why} ({took:.1?})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed in {:.1?}", results.len() - failed, started.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
