//! Escrow payments for e-commerce: a permissioned chain runs the escrow
//! contract and a CBDC ledger holds the money, joined by a settlement bridge.

pub mod bridge;
pub mod chain;
pub mod codec;
pub mod contract;
pub mod crypto;
pub mod identity;
pub mod ledger;
pub mod sim;
