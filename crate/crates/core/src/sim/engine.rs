//! Discrete-event driver. Time is a virtual microsecond clock; the single
//! orderer is a server whose service time per block comes from the cost
//! model (or a measurement in wall-clock mode).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::mpsc::Receiver;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::bridge::{ChallengeCase, ChallengeError, SettlementWatcher};
use crate::chain::{Chain, ChainConfig, ChainOp, CommitEvent, OpBody};
use crate::codec::Canonical;
use crate::contract::{Amount, ContractConfig, ContractState, Decision, Effect, Party, TxId, Verdict};
use crate::crypto::Digest;

use super::deploy::{Deployment, DeploymentParams};
use super::{workload_gen, ClockMode, CostModel, PurchaseIntent, Scenario, ScenarioConfig, SimError};

/// Per-transaction timestamps in virtual microseconds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TxTrack {
    pub submitted_us: Option<u64>,
    pub proposal_committed_us: Option<u64>,
    pub endorse_started_us: Option<u64>,
    pub endorsed_us: Option<u64>,
    pub escrow_started_us: Option<u64>,
    pub done_us: Option<u64>,
    pub outcome: Option<ContractState>,
}

#[derive(Debug)]
enum Event {
    Purchase(usize),
    Arrive(ChainOp),
    BlockDone,
    Timer,
    Expire(usize),
    Deposits(usize),
}

/// Everything a finished run leaves behind for auditing and reporting.
pub struct RunOutput {
    pub config: ScenarioConfig,
    pub deployment: Deployment,
    pub chain: Chain,
    pub watchers: Vec<SettlementWatcher>,
    pub intents: Vec<PurchaseIntent>,
    pub tracks: Vec<TxTrack>,
    pub challenges: Vec<ChallengeCase>,
    pub challenge_errors: Vec<(TxId, ChallengeError)>,
    /// Heights after which the conservation check failed.
    pub conservation_failures: Vec<u64>,
    pub submit_errors: usize,
    pub rejected_ops: usize,
    pub purchase_errors: Vec<(TxId, String)>,
    /// Virtual time at which the last block was delivered.
    pub end_us: u64,
    pub wall_clock_s: f64,
}

pub fn service_time_us<'a>(costs: &CostModel, ops: impl Iterator<Item = &'a ChainOp>) -> u64 {
    let per_op: u64 = ops
        .map(|op| {
            let bytes = op.to_canonical_bytes().len() as f64;
            costs.op_base_us + costs.sig_verify_us * (2 + op.body.inner_signature_count() as u64) + (bytes * costs.per_byte_us).round() as u64
        })
        .sum();
    costs.block_overhead_us + per_op
}

struct Engine {
    cfg: ScenarioConfig,
    staged: bool,
    dep: Deployment,
    chain: Chain,
    rx: Receiver<CommitEvent>,
    watchers: Vec<SettlementWatcher>,
    watcher_rx: Vec<Receiver<CommitEvent>>,
    intents: Vec<PurchaseIntent>,
    by_tx: HashMap<TxId, usize>,
    tracks: Vec<TxTrack>,
    rng: ChaCha20Rng,

    now: u64,
    last_commit_us: u64,
    seq: u64,
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    events: HashMap<u64, Event>,
    busy: bool,
    timer_at: Option<u64>,

    held_endorsements: Vec<ChainOp>,
    held_attests: Vec<usize>,
    proposals_committed: usize,
    endorsement_rounds_closed: usize,

    challenges: Vec<ChallengeCase>,
    challenge_errors: Vec<(TxId, ChallengeError)>,
    conservation_failures: Vec<u64>,
    submit_errors: usize,
    rejected_ops: usize,
    purchase_errors: Vec<(TxId, String)>,
}

/// Runs one scenario end to end. With `staged`, each workflow stage waits
/// for the previous one to finish across all transactions, so each stage
/// runs against a saturated orderer.
pub fn simulate(cfg: &ScenarioConfig, staged: bool) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let wall = Instant::now();
    let seed_rng = |label: &str| ChaCha20Rng::from_seed(Digest::tagged("escrowpay/sim-rng/v1", &[&cfg.rng_seed.to_be_bytes(), label.as_bytes()]).0);
    let intents: Vec<PurchaseIntent> = workload_gen(cfg, seed_rng("workload"))?.collect();
    let dep = Deployment::new(DeploymentParams::from(cfg))?;
    fund(&dep, cfg, &intents)?;

    let contract = ContractConfig {
        commission: cfg.commission()?,
        require_settlement_proof: cfg.proof_mode(),
        ..ContractConfig::default()
    };
    let mut chain = dep.chain(ChainConfig { batch_size: cfg.batch_size, block_timer_ms: cfg.block_timer_ms }, contract);
    if let Some(path) = &cfg.block_log {
        chain.persist_to(path)?;
    }
    let rx = chain.subscribe_commits();
    let mut watchers = dep.watchers(cfg.proof_mode());
    let watcher_rx = watchers.iter().map(|_| chain.subscribe_commits()).collect();
    for f in &cfg.faults {
        for w in &mut watchers {
            w.inject_settlement_fault(f.mode, Some(f.tx_id.clone()));
        }
    }

    let by_tx = intents.iter().map(|i| (i.tx_id.clone(), i.index)).collect();
    let mut engine = Engine {
        cfg: cfg.clone(),
        staged,
        dep,
        chain,
        rx,
        watchers,
        watcher_rx,
        tracks: vec![TxTrack::default(); intents.len()],
        intents,
        by_tx,
        rng: seed_rng("actors"),
        now: 0,
        last_commit_us: 0,
        seq: 0,
        heap: BinaryHeap::new(),
        events: HashMap::new(),
        busy: false,
        timer_at: None,
        held_endorsements: Vec::new(),
        held_attests: Vec::new(),
        proposals_committed: 0,
        endorsement_rounds_closed: 0,
        challenges: Vec::new(),
        challenge_errors: Vec::new(),
        conservation_failures: Vec::new(),
        submit_errors: 0,
        rejected_ops: 0,
        purchase_errors: Vec::new(),
    };
    for i in 0..engine.intents.len() {
        let at = if staged { 0 } else { i as u64 * cfg.delays.arrival_interval_us };
        engine.schedule(at, Event::Purchase(i));
    }
    engine.run_until_idle()?;
    engine.merchant_challenges();
    engine.run_until_idle()?;

    let Engine {
        dep,
        chain,
        watchers,
        intents,
        tracks,
        challenges,
        challenge_errors,
        conservation_failures,
        submit_errors,
        rejected_ops,
        purchase_errors,
        last_commit_us,
        ..
    } = engine;
    Ok(RunOutput {
        config: cfg.clone(),
        deployment: dep,
        chain,
        watchers,
        intents,
        tracks,
        challenges,
        challenge_errors,
        conservation_failures,
        submit_errors,
        rejected_ops,
        purchase_errors,
        end_us: last_commit_us,
        wall_clock_s: wall.elapsed().as_secs_f64(),
    })
}

/// Mints each buyer what its purchases (and, in the dispute scenario, its
/// deposits) need, each courier its deposits, and each bank a reserve for
/// compensation.
fn fund(dep: &Deployment, cfg: &ScenarioConfig, intents: &[PurchaseIntent]) -> Result<(), SimError> {
    const SLACK: Amount = 1_000;
    let dispute = cfg.scenario == Scenario::ReshippingDispute;
    let mut buyers: BTreeMap<usize, Amount> = BTreeMap::new();
    let mut couriers: BTreeMap<usize, Amount> = BTreeMap::new();
    for it in intents {
        *buyers.entry(it.buyer).or_default() += if dispute { 2 * it.price } else { it.price };
        if dispute {
            *couriers.entry(it.courier).or_default() += it.price;
        }
    }
    for (i, b) in dep.buyers.iter().enumerate() {
        dep.fund(b.cred.wallet_id(), buyers.get(&i).copied().unwrap_or(0) + SLACK)?;
    }
    for (k, c) in dep.couriers.iter().enumerate() {
        dep.fund(c.wallet_id(), couriers.get(&k).copied().unwrap_or(0) + SLACK)?;
    }
    let reserve: Amount = intents.iter().map(|i| i.price).sum::<Amount>() + SLACK;
    for b in &dep.banks {
        dep.fund(b.wallet_id(), reserve)?;
    }
    Ok(())
}

impl Engine {
    fn schedule(&mut self, at: u64, event: Event) {
        let seq = self.seq;
        self.seq += 1;
        self.events.insert(seq, event);
        self.heap.push(Reverse((at, seq)));
    }

    fn pop(&mut self) -> Option<(u64, Event)> {
        let Reverse((at, seq)) = self.heap.pop()?;
        Some((at, self.events.remove(&seq).expect("scheduled")))
    }

    fn now_ms(&self) -> u64 {
        self.now / 1_000
    }

    fn net(&self) -> u64 {
        self.cfg.delays.network_us
    }

    fn run_until_idle(&mut self) -> Result<(), SimError> {
        while let Some((at, event)) = self.pop() {
            self.now = at;
            match event {
                Event::Purchase(i) => self.purchase(i),
                Event::Arrive(op) => {
                    let mut ops = vec![op];
                    while let Some(Reverse((t, seq))) = self.heap.peek().copied() {
                        if t != at || !matches!(self.events.get(&seq), Some(Event::Arrive(_))) {
                            break;
                        }
                        self.heap.pop();
                        if let Some(Event::Arrive(op)) = self.events.remove(&seq) {
                            ops.push(op);
                        }
                    }
                    self.submit(ops);
                    self.try_start()?;
                }
                Event::BlockDone => {
                    self.busy = false;
                    self.block_done();
                    self.try_start()?;
                }
                Event::Timer => {
                    if self.timer_at == Some(at) {
                        self.timer_at = None;
                    }
                    self.try_start()?;
                }
                Event::Expire(i) => {
                    let tx = self.intents[i].tx_id.clone();
                    if self.chain.query_state(&tx).is_ok_and(|c| c.state.accepts_endorsements()) {
                        let op = self.dep.expire_op(&tx);
                        self.schedule(at + self.net(), Event::Arrive(op));
                    }
                }
                Event::Deposits(i) => self.deposits(i),
            }
        }
        Ok(())
    }

    fn purchase(&mut self, i: usize) {
        let intent = self.intents[i].clone();
        match self.dep.purchase(&intent) {
            Ok(op) => {
                self.tracks[i].submitted_us = Some(self.now);
                self.schedule(self.now + self.net(), Event::Arrive(op));
            }
            Err(e) => self.purchase_errors.push((intent.tx_id, e.to_string())),
        }
    }

    fn submit(&mut self, ops: Vec<ChainOp>) {
        for op in &ops {
            let Some(&i) = self.by_tx.get(&op.tx_id) else { continue };
            let t = &mut self.tracks[i];
            match op.body {
                OpBody::Endorsement(_) => {
                    t.endorse_started_us.get_or_insert(self.now);
                }
                OpBody::CourierAttest(_) => {
                    t.escrow_started_us.get_or_insert(self.now);
                }
                _ => {}
            }
        }
        let now_ms = self.now_ms();
        self.submit_errors += self.chain.submit_batch(ops, now_ms).iter().filter(|r| r.is_err()).count();
    }

    fn try_start(&mut self) -> Result<(), SimError> {
        if self.busy {
            return Ok(());
        }
        let now_ms = self.now_ms();
        if self.chain.ready(now_ms) {
            let n = self.chain.mempool_len().min(self.cfg.batch_size);
            let service = match self.cfg.clock {
                ClockMode::Simulated => {
                    let cost = service_time_us(&self.cfg.costs, self.chain.peek_mempool(n));
                    self.chain.cut_up_to(now_ms, n)?;
                    cost
                }
                ClockMode::WallClock => {
                    let start = Instant::now();
                    self.chain.cut_up_to(now_ms, n)?;
                    (start.elapsed().as_micros() as u64).max(1)
                }
            };
            self.busy = true;
            self.schedule(self.now + service, Event::BlockDone);
        } else if let Some(deadline) = self.chain.next_deadline() {
            let at = deadline * 1_000;
            if self.timer_at != Some(at) {
                self.timer_at = Some(at);
                self.schedule(at.max(self.now), Event::Timer);
            }
        }
        Ok(())
    }

    fn block_done(&mut self) {
        let events: Vec<CommitEvent> = self.rx.try_iter().collect();
        let height = events.first().map(|e| e.height());
        self.last_commit_us = self.now;
        for e in &events {
            self.on_commit(e);
        }
        let bank_delay = self.cfg.delays.bank_us + self.net();
        for k in 0..self.watchers.len() {
            self.watchers[k].poll(&self.watcher_rx[k]);
            for op in self.watchers[k].drain_outbox() {
                self.schedule(self.now + bank_delay, Event::Arrive(op));
            }
        }
        if let Some(h) = height {
            if !self.dep.ledger.conservation().holds() {
                self.conservation_failures.push(h);
            }
        }
    }

    fn on_commit(&mut self, e: &CommitEvent) {
        let op = e.op();
        let Some(&i) = self.by_tx.get(&op.tx_id) else { return };
        let now = self.now;
        if matches!(op.body, OpBody::Proposal(_)) {
            self.tracks[i].proposal_committed_us = Some(now);
            self.proposals_committed += 1;
        }
        let result = &e.proof.result;
        if !result.is_applied() {
            self.rejected_ops += 1;
            self.maybe_release_barriers();
            return;
        }
        let state = result.state().expect("applied ops carry a state");
        let intent = self.intents[i].clone();
        for effect in result.effects() {
            match effect {
                Effect::EndorsementRequested(req) => {
                    for endorser in req.distinct_endorsers() {
                        let verdict = if self.cfg.reject_rate > 0.0 && self.rng.gen_bool(self.cfg.reject_rate) {
                            Verdict::Reject
                        } else {
                            Verdict::Approve
                        };
                        let Some(op) = self.dep.endorse_op(req, &endorser, verdict) else { continue };
                        if self.staged {
                            self.held_endorsements.push(op);
                        } else {
                            self.schedule(now + self.cfg.delays.endorse_us + self.net(), Event::Arrive(op));
                        }
                    }
                    if !self.staged {
                        let timeout_us = self.chain.contract_config().endorsement_timeout_ms * 1_000;
                        self.schedule(now + timeout_us + 1_000, Event::Expire(i));
                    }
                }
                Effect::DepositsDemanded { .. } => self.schedule(now + self.cfg.delays.bank_us, Event::Deposits(i)),
                _ => {}
            }
        }
        match (&op.body, state) {
            (OpBody::Endorsement(_) | OpBody::ContractUpdate(_), ContractState::Locked | ContractState::Rejected)
                if self.tracks[i].endorsed_us.is_none() =>
            {
                self.tracks[i].endorsed_us = Some(now);
                self.endorsement_rounds_closed += 1;
                if state == ContractState::Locked {
                    if self.staged {
                        self.held_attests.push(i);
                    } else {
                        let op = self.dep.attest_op(intent.courier, &intent.tx_id, e.contract.as_ref().expect("applied").proposal_digest);
                        self.schedule(now + self.cfg.delays.delivery_us + self.net(), Event::Arrive(op));
                    }
                }
            }
            (OpBody::CourierAttest(_), ContractState::Delivered) => {
                let decision = if self.cfg.scenario == Scenario::ReshippingDispute { Decision::Null } else { Decision::Confirmed };
                let op = self.dep.decision_op(intent.buyer, &intent.tx_id, decision);
                self.schedule(now + self.cfg.delays.confirm_us + self.net(), Event::Arrive(op));
            }
            (OpBody::DisputeOpen(_), ContractState::Disputed) => {
                let op = self.dep.dispute_resolve_op(&intent.tx_id, Party::Courier);
                self.schedule(now + self.cfg.delays.adjudication_us + self.net(), Event::Arrive(op));
            }
            _ => {}
        }
        if state.is_absorbing() {
            let t = &mut self.tracks[i];
            t.done_us.get_or_insert(now);
            t.outcome = Some(state);
        }
        self.maybe_release_barriers();
    }

    fn maybe_release_barriers(&mut self) {
        if !self.staged {
            return;
        }
        let n = self.intents.len() - self.purchase_errors.len();
        let at = self.now + self.net();
        if self.proposals_committed == n && !self.held_endorsements.is_empty() {
            for op in std::mem::take(&mut self.held_endorsements) {
                self.schedule(at, Event::Arrive(op));
            }
        }
        if self.endorsement_rounds_closed == n && !self.held_attests.is_empty() {
            for i in std::mem::take(&mut self.held_attests) {
                let it = &self.intents[i];
                let digest = self.chain.query_state(&it.tx_id).expect("locked contract exists").proposal_digest;
                let op = self.dep.attest_op(it.courier, &it.tx_id, digest);
                self.schedule(at, Event::Arrive(op));
            }
        }
    }

    fn deposits(&mut self, i: usize) {
        let it = self.intents[i].clone();
        let buyer = self.dep.buyers[it.buyer].cred.clone();
        let courier = self.dep.couriers[it.courier].clone();
        let receipts = self
            .dep
            .pay_deposit(&buyer, &it.tx_id, it.price)
            .and_then(|b| self.dep.pay_deposit(&courier, &it.tx_id, it.price).map(|c| (b, c)));
        match receipts {
            Ok((b, c)) => {
                let op = self.dep.dispute_open_op(&it.tx_id, b, c);
                self.schedule(self.now + self.net(), Event::Arrive(op));
            }
            Err(e) => self.purchase_errors.push((it.tx_id, format!("deposit: {e}"))),
        }
    }

    /// Each merchant challenges its unsettled confirmed sales, and with
    /// `challenge_all` its settled ones too.
    fn merchant_challenges(&mut self) {
        for i in 0..self.intents.len() {
            let it = &self.intents[i];
            let Ok(contract) = self.chain.query_state(&it.tx_id) else { continue };
            let due = contract.state == ContractState::Confirmed || (self.cfg.challenge_all && contract.state == ContractState::Settled);
            if !due {
                continue;
            }
            let contract = contract.clone();
            let merchant = self.dep.merchants[it.merchant].cert.clone();
            let bank = self.dep.bank_index(&contract.proposal.buyer_bank).expect("known bank");
            match self.watchers[bank].challenge(&contract, &merchant) {
                Ok(case) => self.challenges.push(case),
                Err(e) => self.challenge_errors.push((it.tx_id.clone(), e)),
            }
        }
        let at = self.now + self.cfg.delays.bank_us + self.net();
        for k in 0..self.watchers.len() {
            for op in self.watchers[k].drain_outbox() {
                self.schedule(at, Event::Arrive(op));
            }
        }
    }
}
