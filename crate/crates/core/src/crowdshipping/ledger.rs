use std::collections::BTreeMap;

use serde::Serialize;

/// A balance-changing outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Settlement {
    /// Auction won: the buyer pays the seller.
    Sale { seller: String, buyer: String, price: f64 },
    /// Parcel delivered: the holder earns its reward.
    Delivery { holder: String, reward: f64 },
}

/// Per-agent balances in EUR, starting at zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Ledger {
    balances: BTreeMap<String, f64>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn balance(&self, agent: &str) -> f64 {
        self.balances.get(agent).copied().unwrap_or(0.0)
    }

    pub fn balances(&self) -> &BTreeMap<String, f64> {
        &self.balances
    }

    pub fn total(&self) -> f64 {
        self.balances.values().sum()
    }

    fn credit(&mut self, agent: &str, amount: f64) {
        *self.balances.entry(agent.to_owned()).or_insert(0.0) += amount;
    }
}

pub fn settle(outcome: &Settlement, ledger: &mut Ledger) {
    match outcome {
        Settlement::Sale { seller, buyer, price } => {
            ledger.credit(buyer, -price);
            ledger.credit(seller, *price);
        }
        Settlement::Delivery { holder, reward } => ledger.credit(holder, *reward),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sale_moves_money_and_delivery_pays_reward() {
        let mut l = Ledger::new();
        settle(
            &Settlement::Sale {
                seller: "a2".into(),
                buyer: "a1".into(),
                price: 1.5,
            },
            &mut l,
        );
        assert_eq!(l.balance("a2"), 1.5);
        assert_eq!(l.balance("a1"), -1.5);
        assert_eq!(l.total(), 0.0);
        settle(
            &Settlement::Delivery {
                holder: "a1".into(),
                reward: 3.5,
            },
            &mut l,
        );
        assert_eq!(l.balance("a1"), 2.0);
        assert_eq!(l.total(), 3.5);
    }
}
