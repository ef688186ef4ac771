use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contract::{Amount, TxId};

use super::{ScenarioConfig, SimError};

/// One buyer purchase to drive through the escrow flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurchaseIntent {
    pub index: usize,
    pub tx_id: TxId,
    pub buyer: usize,
    pub merchant: usize,
    pub courier: usize,
    pub product_id: String,
    pub price: Amount,
}

pub fn tx_id_for(index: usize) -> TxId {
    TxId::new(format!("tx-{index:06}"))
}

/// Yields `num_transactions` intents with uniform prices and uniform
/// buyer, merchant and courier choice.
pub struct Workload<R> {
    rng: R,
    next: usize,
    total: usize,
    buyers: usize,
    merchants: usize,
    couriers: usize,
    prices: (Amount, Amount),
}

pub fn workload_gen<R: Rng>(config: &ScenarioConfig, rng: R) -> Result<Workload<R>, SimError> {
    config.validate()?;
    Ok(Workload {
        rng,
        next: 0,
        total: config.num_transactions,
        buyers: config.num_buyers,
        merchants: config.num_merchants,
        couriers: config.num_couriers,
        prices: (config.price_min, config.price_max),
    })
}

impl<R: Rng> Iterator for Workload<R> {
    type Item = PurchaseIntent;

    fn next(&mut self) -> Option<PurchaseIntent> {
        if self.next >= self.total {
            return None;
        }
        let index = self.next;
        self.next += 1;
        let merchant = self.rng.gen_range(0..self.merchants);
        Some(PurchaseIntent {
            index,
            tx_id: tx_id_for(index),
            buyer: self.rng.gen_range(0..self.buyers),
            merchant,
            courier: self.rng.gen_range(0..self.couriers),
            product_id: format!("sku-{merchant:02}-{:04}", self.rng.gen_range(0..10_000u32)),
            price: self.rng.gen_range(self.prices.0..=self.prices.1),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total - self.next;
        (left, Some(left))
    }
}

impl<R: Rng> ExactSizeIterator for Workload<R> {}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;

    fn intents(cfg: &ScenarioConfig) -> Vec<PurchaseIntent> {
        workload_gen(cfg, ChaCha20Rng::seed_from_u64(cfg.rng_seed)).unwrap().collect()
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = ScenarioConfig { rng_seed: 7, num_transactions: 200, ..Default::default() };
        assert_eq!(intents(&cfg), intents(&cfg));
        let other = ScenarioConfig { rng_seed: 8, ..cfg.clone() };
        assert_ne!(intents(&cfg), intents(&other));
    }

    #[test]
    fn zero_buyers_rejected() {
        let cfg = ScenarioConfig { num_buyers: 0, ..Default::default() };
        assert!(matches!(workload_gen(&cfg, ChaCha20Rng::seed_from_u64(1)), Err(SimError::ConfigInvalid(_))));
    }

    #[test]
    fn intents_respect_bounds() {
        let cfg = ScenarioConfig { num_transactions: 500, price_min: 10, price_max: 20, num_buyers: 3, ..Default::default() };
        let all = intents(&cfg);
        assert_eq!(all.len(), 500);
        for (i, it) in all.iter().enumerate() {
            assert_eq!(it.index, i);
            assert!((10..=20).contains(&it.price));
            assert!(it.buyer < 3 && it.merchant < cfg.num_merchants && it.courier < cfg.num_couriers);
        }
    }

    #[test]
    fn ten_thousand_intents_fast() {
        let cfg = ScenarioConfig { num_transactions: 10_000, ..Default::default() };
        let start = std::time::Instant::now();
        assert_eq!(intents(&cfg).len(), 10_000);
        assert!(start.elapsed().as_secs_f64() < 1.0);
    }
}
