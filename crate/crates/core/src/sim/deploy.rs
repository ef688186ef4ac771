use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::bridge::{Gateway, GatewayError, Request, Response, SettlementWatcher};
use crate::chain::{Chain, ChainConfig, ChainOp, OpBody};
use crate::contract::{
    Amount, BuyerDecision, ContractConfig, ContractUpdate, Decision, DeliveryAttestation, DisputeOpening, DisputeResolution, Endorsement,
    EndorsementRequest, Party, TransactionProposal, TxId, Verdict,
};
use crate::crypto::{Digest, KeyPair, Signature};
use crate::identity::{ActorId, AuthoritySet, Credential, Role, WalletId, WalletRegistry};
use crate::ledger::{DepositReceipt, FundNote, Ledger, LedgerConfig, LedgerError, PaymentToken, SignedSpend, SpendAction};

use super::{PurchaseIntent, ScenarioConfig, SimError};

pub fn derive_keys(seed: u64, label: &str) -> KeyPair {
    KeyPair::from_seed(Digest::tagged("escrowpay/sim-key/v1", &[&seed.to_be_bytes(), label.as_bytes()]).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeploymentParams {
    pub seed: u64,
    pub banks: usize,
    pub buyers: usize,
    pub merchants: usize,
    pub couriers: usize,
    pub shards: usize,
}

impl From<&ScenarioConfig> for DeploymentParams {
    fn from(c: &ScenarioConfig) -> Self {
        DeploymentParams {
            seed: c.rng_seed,
            banks: c.num_banks,
            buyers: c.num_buyers,
            merchants: c.num_merchants,
            couriers: c.num_couriers,
            shards: c.shards,
        }
    }
}

impl Default for DeploymentParams {
    fn default() -> Self {
        DeploymentParams { seed: 1, banks: 2, buyers: 4, merchants: 2, couriers: 2, shards: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct BuyerAccount {
    /// Platform account name; known only to the buyer and its bank.
    pub user_id: String,
    pub cred: Credential,
    pub bank: usize,
}

/// A complete set of actors sharing one authority set and one ledger.
pub struct Deployment {
    pub ca: Credential,
    pub banks: Vec<Credential>,
    pub platform: Credential,
    pub platform_bank: usize,
    pub merchants: Vec<Credential>,
    pub merchant_banks: Vec<usize>,
    pub couriers: Vec<Credential>,
    pub courier_banks: Vec<usize>,
    pub buyers: Vec<BuyerAccount>,
    pub authorities: AuthoritySet,
    pub ledger: Arc<Ledger>,
    pub gateway: Gateway,
    nonces: Mutex<HashMap<WalletId, u64>>,
}

impl Deployment {
    pub fn new(params: DeploymentParams) -> Result<Self, SimError> {
        let seed = params.seed;
        let ca = Credential::new_root(ActorId::new("central-bank"), derive_keys(seed, "central-bank"));
        let mut authorities = AuthoritySet::new(ca.cert.clone());
        let mut banks = Vec::with_capacity(params.banks);
        for i in 0..params.banks {
            let name = format!("bank-{i}");
            let bank = ca.issue(ActorId::new(&name), Role::Bank, derive_keys(seed, &name))?;
            authorities.add_bank(bank.cert.clone())?;
            banks.push(bank);
        }
        let platform = ca.issue(ActorId::new("platform"), Role::Platform, derive_keys(seed, "platform"))?;

        let mut merchants = Vec::new();
        let mut merchant_banks = Vec::new();
        for j in 0..params.merchants {
            let name = format!("merchant-{j:02}");
            let b = j % params.banks;
            merchants.push(banks[b].issue(ActorId::new(&name), Role::Merchant, derive_keys(seed, &name))?);
            merchant_banks.push(b);
        }
        let mut couriers = Vec::new();
        let mut courier_banks = Vec::new();
        for k in 0..params.couriers {
            let name = format!("courier-{k:02}");
            couriers.push(ca.issue(ActorId::new(&name), Role::Courier, derive_keys(seed, &name))?);
            courier_banks.push(k % params.banks);
        }

        let registry = Arc::new(WalletRegistry::new(authorities.clone()));
        let ledger = Arc::new(Ledger::new(LedgerConfig { shards: params.shards }, registry, banks.clone()));
        let gateway = Gateway::new(Arc::clone(&ledger));

        let mut dep = Deployment {
            ca,
            banks,
            platform,
            platform_bank: 0,
            merchants,
            merchant_banks,
            couriers,
            courier_banks,
            buyers: Vec::new(),
            authorities,
            ledger,
            gateway,
            nonces: Mutex::default(),
        };
        dep.register(dep.platform_bank, "platform", &dep.platform.clone())?;
        for j in 0..dep.merchants.len() {
            let m = dep.merchants[j].clone();
            dep.register(dep.merchant_banks[j], m.id().as_str(), &m)?;
        }
        for k in 0..dep.couriers.len() {
            let c = dep.couriers[k].clone();
            dep.register(dep.courier_banks[k], c.id().as_str(), &c)?;
        }

        let mut rng = ChaCha20Rng::from_seed(Digest::tagged("escrowpay/sim-users/v1", &[&seed.to_be_bytes()]).0);
        for i in 0..params.buyers {
            let bank = i % params.banks;
            let user_id = format!("acct-{:016x}", rng.gen::<u64>());
            let keys = derive_keys(seed, &format!("buyer-{i}"));
            let pseudonym = ActorId::for_wallet(&WalletId::from_public_key(&keys.public_key()));
            let cred = dep.banks[bank].issue(pseudonym, Role::Buyer, keys)?;
            dep.register(bank, &user_id, &cred)?;
            dep.buyers.push(BuyerAccount { user_id, cred, bank });
        }
        Ok(dep)
    }

    fn register(&self, bank: usize, user_id: &str, who: &Credential) -> Result<(), SimError> {
        let bank = &self.banks[bank];
        let request = Request::Register { user_id: user_id.to_owned(), bank_id: bank.id().clone(), public_key: who.keys.public_key() };
        self.gateway.handle(&bank.cert, request)?;
        Ok(())
    }

    pub fn bank_index(&self, id: &ActorId) -> Option<usize> {
        self.banks.iter().position(|b| b.id() == id)
    }

    /// Credential of any actor that may endorse.
    pub fn endorser(&self, id: &ActorId) -> Option<&Credential> {
        self.banks.iter().chain(self.merchants.iter()).chain(std::iter::once(&self.platform)).find(|c| c.id() == id)
    }

    pub fn fund(&self, wallet: WalletId, amount: Amount) -> Result<FundNote, LedgerError> {
        self.ledger.mint(&self.ca, wallet, amount)
    }

    pub fn spend(&self, who: &Credential, action: SpendAction) -> SignedSpend {
        let mut nonces = self.nonces.lock().unwrap();
        let n = nonces.entry(who.wallet_id()).or_insert(0);
        *n += 1;
        SignedSpend::new(action, *n, &who.keys)
    }

    pub fn pay_escrow(&self, buyer: usize, tx_id: &TxId, amount: Amount) -> Result<PaymentToken, GatewayError> {
        let who = &self.buyers[buyer].cred;
        let spend = self.spend(who, SpendAction::LockEscrow { tx_id: tx_id.clone(), amount });
        match self.gateway.handle(&who.cert, Request::PayEscrow(spend))? {
            Response::Token(t) => Ok(t),
            _ => unreachable!("PayEscrow answers with a token"),
        }
    }

    pub fn pay_deposit(&self, who: &Credential, tx_id: &TxId, amount: Amount) -> Result<DepositReceipt, GatewayError> {
        let spend = self.spend(who, SpendAction::LockDeposit { tx_id: tx_id.clone(), amount });
        match self.gateway.handle(&who.cert, Request::PayDeposit(spend))? {
            Response::Deposit(r) => Ok(r),
            _ => unreachable!("PayDeposit answers with a receipt"),
        }
    }

    pub fn proposal(&self, intent: &PurchaseIntent, token: PaymentToken) -> TransactionProposal {
        let buyer = &self.buyers[intent.buyer];
        let merchant = &self.merchants[intent.merchant];
        TransactionProposal {
            tx_id: intent.tx_id.clone(),
            product_id: intent.product_id.clone(),
            price: intent.price,
            merchant_id: merchant.id().clone(),
            merchant_wallet: merchant.wallet_id(),
            merchant_bank: self.banks[self.merchant_banks[intent.merchant]].id().clone(),
            buyer_wallet: buyer.cred.wallet_id(),
            buyer_bank: self.banks[buyer.bank].id().clone(),
            platform_id: self.platform.id().clone(),
            platform_wallet: self.platform.wallet_id(),
            payment_token: token,
            buyer_signature: Signature([0; 64]),
        }
        .sign(&buyer.cred)
    }

    /// Locks the escrow through the gateway and returns the signed proposal op.
    pub fn purchase(&self, intent: &PurchaseIntent) -> Result<ChainOp, GatewayError> {
        let token = self.pay_escrow(intent.buyer, &intent.tx_id, intent.price)?;
        let proposal = self.proposal(intent, token);
        Ok(ChainOp::new(intent.tx_id.clone(), OpBody::Proposal(proposal), &self.buyers[intent.buyer].cred))
    }

    pub fn endorse_op(&self, request: &EndorsementRequest, endorser: &ActorId, verdict: Verdict) -> Option<ChainOp> {
        let cred = self.endorser(endorser)?;
        let caps = request.capacities_of(endorser);
        let e = Endorsement::sign(cred, request.tx_id.clone(), caps, verdict, request.proposal_digest);
        Some(ChainOp::new(request.tx_id.clone(), OpBody::Endorsement(e), cred))
    }

    pub fn attest_op(&self, courier: usize, tx_id: &TxId, proposal_digest: Digest) -> ChainOp {
        let cred = &self.couriers[courier];
        ChainOp::new(tx_id.clone(), OpBody::CourierAttest(DeliveryAttestation::sign(cred, tx_id.clone(), proposal_digest)), cred)
    }

    pub fn decision_op(&self, buyer: usize, tx_id: &TxId, decision: Decision) -> ChainOp {
        let cred = &self.buyers[buyer].cred;
        ChainOp::new(tx_id.clone(), OpBody::BuyerConfirm(BuyerDecision::sign(cred, tx_id.clone(), decision)), cred)
    }

    pub fn dispute_open_op(&self, tx_id: &TxId, buyer_deposit: DepositReceipt, courier_deposit: DepositReceipt) -> ChainOp {
        let opening = DisputeOpening { tx_id: tx_id.clone(), buyer_deposit: Some(buyer_deposit), courier_deposit: Some(courier_deposit) };
        ChainOp::new(tx_id.clone(), OpBody::DisputeOpen(opening), &self.platform)
    }

    pub fn dispute_resolve_op(&self, tx_id: &TxId, winner: Party) -> ChainOp {
        let r = DisputeResolution::sign(&self.platform, tx_id.clone(), winner);
        ChainOp::new(tx_id.clone(), OpBody::DisputeResolve(r), &self.platform)
    }

    pub fn expire_op(&self, tx_id: &TxId) -> ChainOp {
        ChainOp::new(tx_id.clone(), OpBody::ContractUpdate(ContractUpdate::ExpireEndorsements), &self.platform)
    }

    pub fn chain(&self, config: ChainConfig, contract: ContractConfig) -> Chain {
        Chain::new(config, contract, self.authorities.clone())
    }

    pub fn watchers(&self, proof_mode: bool) -> Vec<SettlementWatcher> {
        self.banks.iter().map(|b| SettlementWatcher::new(b.clone(), Arc::clone(&self.ledger), proof_mode)).collect()
    }
}
