use std::io::Write;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::contract::Amount;
use crate::crypto::PublicKey;
use crate::identity::{ActorId, Certificate, IdentityError, Role, WalletBinding, WalletId};
use crate::ledger::{
    DepositReceipt, FundNote, HistoryEntry, Ledger, LedgerError, PaymentToken, RedeemRecord, SignedSpend, SpendAction, TokenInfo,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("unauthorized")]
    Unauthorized,
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
}

#[derive(Debug, Clone)]
pub enum Request {
    /// A bank onboards one of its customers.
    Register { user_id: String, bank_id: ActorId, public_key: PublicKey },
    Query { wallet: WalletId },
    History { wallet: WalletId },
    Transfer(SignedSpend),
    Redeem(SignedSpend),
    PayEscrow(SignedSpend),
    PayDeposit(SignedSpend),
    VerifyToken(PaymentToken),
}

impl Request {
    pub fn label(&self) -> &'static str {
        match self {
            Request::Register { .. } => "register",
            Request::Query { .. } => "query",
            Request::History { .. } => "history",
            Request::Transfer(_) => "transfer",
            Request::Redeem(_) => "redeem",
            Request::PayEscrow(_) => "pay_escrow",
            Request::PayDeposit(_) => "pay_deposit",
            Request::VerifyToken(_) => "verify_token",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Registered(WalletBinding),
    Balance(Amount),
    History(Vec<HistoryEntry>),
    Transferred(Vec<FundNote>),
    Redeemed(RedeemRecord),
    Token(PaymentToken),
    Deposit(DepositReceipt),
    TokenValid(TokenInfo),
}

#[derive(Serialize)]
struct AuditLine<'a> {
    seq: u64,
    caller: &'a ActorId,
    role: Role,
    request: &'static str,
    ok: bool,
    error: Option<String>,
}

struct AuditLog {
    out: Box<dyn Write + Send>,
    seq: u64,
}

/// Actor-facing entry point to the CBDC ledger.
pub struct Gateway {
    ledger: Arc<Ledger>,
    audit: Option<Mutex<AuditLog>>,
}

impl Gateway {
    pub fn new(ledger: Arc<Ledger>) -> Self {
        Gateway { ledger, audit: None }
    }

    /// Appends one JSON line per request: sequence, caller, request kind
    /// and outcome. Payloads are not logged.
    pub fn with_audit_log(mut self, out: Box<dyn Write + Send>) -> Self {
        self.audit = Some(Mutex::new(AuditLog { out, seq: 0 }));
        self
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn handle(&self, caller: &Certificate, request: Request) -> Result<Response, GatewayError> {
        let label = request.label();
        let out = self.dispatch(caller, request);
        if let Some(audit) = &self.audit {
            let mut log = audit.lock().unwrap();
            let line = AuditLine {
                seq: log.seq,
                caller: &caller.subject_id,
                role: caller.role,
                request: label,
                ok: out.is_ok(),
                error: out.as_ref().err().map(|e| e.to_string()),
            };
            log.seq += 1;
            if let Ok(json) = serde_json::to_string(&line) {
                let _ = writeln!(log.out, "{json}");
            }
        }
        out
    }

    fn dispatch(&self, caller: &Certificate, request: Request) -> Result<Response, GatewayError> {
        if !self.ledger.authorities().verify(caller) {
            return Err(GatewayError::Unauthorized);
        }
        let own = |spend: &SignedSpend| caller.wallet_id() == spend.wallet;
        match request {
            Request::Register { user_id, bank_id, public_key } => {
                if caller.role != Role::Bank || caller.subject_id != bank_id {
                    return Err(GatewayError::Unauthorized);
                }
                Ok(Response::Registered(self.ledger.registry().register_wallet(&user_id, &bank_id, public_key)?))
            }
            Request::Query { wallet } => Ok(Response::Balance(self.ledger.query_balance(caller, &wallet)?)),
            Request::History { wallet } => Ok(Response::History(self.ledger.query_history(caller, &wallet)?)),
            Request::Transfer(spend) if own(&spend) => Ok(Response::Transferred(self.ledger.transfer(&spend)?)),
            Request::Redeem(spend) if own(&spend) => Ok(Response::Redeemed(self.ledger.redeem(&spend)?)),
            Request::PayEscrow(spend) if own(&spend) && caller.role == Role::Buyer => {
                if !matches!(spend.action, SpendAction::LockEscrow { .. }) {
                    return Err(LedgerError::WrongRequest.into());
                }
                Ok(Response::Token(self.ledger.lock_escrow(&spend)?.1))
            }
            Request::PayDeposit(spend) if own(&spend) && matches!(caller.role, Role::Buyer | Role::Courier) => {
                Ok(Response::Deposit(self.ledger.lock_deposit(&spend)?.1))
            }
            Request::VerifyToken(token) if matches!(caller.role, Role::Platform | Role::Merchant | Role::Bank) => {
                Ok(Response::TokenValid(self.ledger.verify_token(&token)?))
            }
            _ => Err(GatewayError::Unauthorized),
        }
    }
}
