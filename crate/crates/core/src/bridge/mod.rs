//! Gateway and settlement watcher between the chain and the CBDC ledger.

mod gateway;
mod watcher;

pub use gateway::{Gateway, GatewayError, Request, Response};
pub use watcher::{
    Action, ChallengeCase, ChallengeError, ChallengeOutcome, Fault, FaultMode, SettlementTask, SettlementWatcher, TaskStatus, Trigger,
};
