use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{GeoPoint, Timestamp};
use crate::geo::distance;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("speed must be positive, got {0}")]
    NonPositiveSpeed(f64),
    #[error("no movement in batch")]
    EmptyBatch,
    #[error("auction {0} is already resolved")]
    AlreadyResolved(String),
    #[error("auction {0} is still accepting bids")]
    BiddingOpen(String),
    #[error("auction {0} does not accept bids at this time")]
    BiddingClosed(String),
}

/// Seconds needed to cover `distance_m` at `speed_mps`.
pub fn estimate_arrival(distance_m: f64, speed_mps: f64) -> Result<f64, DomainError> {
    if speed_mps <= 0.0 || speed_mps.is_nan() {
        return Err(DomainError::NonPositiveSpeed(speed_mps));
    }
    Ok(distance_m / speed_mps)
}

/// Average speed over a batch window: summed displacements over the window
/// length.
pub fn compute_speed(displacements_m: &[f64], window_s: f64) -> Result<f64, DomainError> {
    if displacements_m.is_empty() {
        return Err(DomainError::EmptyBatch);
    }
    Ok(displacements_m.iter().sum::<f64>() / window_s)
}

/// Monetary preferences of a user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserProfile {
    /// Parcels paying less are ignored (EUR).
    pub min_reward: f64,
    /// Pickups farther away are ignored (m).
    pub max_pickup_distance: f64,
    /// Revenue the user wants to keep (EUR).
    pub reserve: f64,
    /// Cost of each detour meter (EUR/m).
    pub detour_cost_rate: f64,
}

impl Default for UserProfile {
    fn default() -> Self {
        Self {
            min_reward: 2.0,
            max_pickup_distance: 500.0,
            reserve: 1.0,
            detour_cost_rate: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinnerPolicy {
    /// Score penalty per minute of estimated arrival (EUR/min).
    pub arrival_weight: f64,
}

impl Default for WinnerPolicy {
    fn default() -> Self {
        Self { arrival_weight: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bid {
    pub bidder: String,
    pub amount: f64,
    /// Estimated arrival at the parcel in seconds.
    pub eta_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AuctionState {
    Open,
    Resolved,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Auction {
    pub id: String,
    pub parcel_id: String,
    pub auctioneer: String,
    pub location: GeoPoint,
    pub destination: GeoPoint,
    pub reward: f64,
    pub pickup_deadline_s: f64,
    pub bidding_interval_ms: u64,
    pub opened_at: Timestamp,
    pub bids: Vec<Bid>,
    pub state: AuctionState,
}

impl Auction {
    pub fn closes_at(&self) -> Timestamp {
        self.opened_at + self.bidding_interval_ms
    }

    pub fn accepts_bids_at(&self, t: Timestamp) -> bool {
        self.state == AuctionState::Open && self.opened_at <= t && t < self.closes_at()
    }

    pub fn submit(&mut self, bid: Bid, t: Timestamp) -> Result<(), DomainError> {
        if !self.accepts_bids_at(t) {
            return Err(DomainError::BiddingClosed(self.id.clone()));
        }
        self.bids.push(bid);
        Ok(())
    }
}

/// Amount the user would bid, or `None` when the task is not worth it.
///
/// The detour is the extra distance of reaching the parcel's destination
/// via the pickup point instead of directly.
pub fn decide_bid(profile: &UserProfile, auction: &Auction, position: GeoPoint) -> Option<f64> {
    let pickup = distance(position, auction.location);
    if auction.reward < profile.min_reward || pickup > profile.max_pickup_distance {
        return None;
    }
    let detour = pickup + distance(auction.location, auction.destination) - distance(position, auction.destination);
    let amount = auction.reward - profile.reserve - profile.detour_cost_rate * detour.max(0.0);
    (amount > 0.0).then_some(amount)
}

/// Resolves the auction: highest `amount - weight * eta_minutes` wins, ties
/// go to the smaller bidder id, and the winner pays its own bid.
pub fn determine_winner(
    auction: &mut Auction,
    policy: &WinnerPolicy,
    now: Timestamp,
) -> Result<Option<(String, f64)>, DomainError> {
    if auction.state != AuctionState::Open {
        return Err(DomainError::AlreadyResolved(auction.id.clone()));
    }
    if now < auction.closes_at() {
        return Err(DomainError::BiddingOpen(auction.id.clone()));
    }
    let score = |b: &Bid| b.amount - policy.arrival_weight * b.eta_s / 60.0;
    let best = auction.bids.iter().max_by(|a, b| {
        score(a)
            .partial_cmp(&score(b))
            .unwrap_or(Ordering::Equal)
            .then_with(|| b.bidder.cmp(&a.bidder))
    });
    match best {
        Some(b) => {
            let out = (b.bidder.clone(), b.amount);
            auction.state = AuctionState::Resolved;
            Ok(Some(out))
        }
        None => {
            auction.state = AuctionState::Failed;
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn auction(bids: &[(&str, f64, f64)]) -> Auction {
        let p = GeoPoint::new(52.37, 9.73).unwrap();
        Auction {
            id: "A1".into(),
            parcel_id: "p1".into(),
            auctioneer: "a2".into(),
            location: p,
            destination: p,
            reward: 3.5,
            pickup_deadline_s: 300.0,
            bidding_interval_ms: 60_000,
            opened_at: 0,
            bids: bids
                .iter()
                .map(|(b, a, e)| Bid {
                    bidder: (*b).into(),
                    amount: *a,
                    eta_s: *e,
                })
                .collect(),
            state: AuctionState::Open,
        }
    }

    #[test]
    fn arrival_and_speed() {
        assert_eq!(estimate_arrival(600.0, 2.0).unwrap(), 300.0);
        assert!(matches!(
            estimate_arrival(1.0, 0.0),
            Err(DomainError::NonPositiveSpeed(_))
        ));
        assert_eq!(compute_speed(&[30.0, 60.0], 30.0).unwrap(), 3.0);
        assert_eq!(compute_speed(&[], 30.0), Err(DomainError::EmptyBatch));
    }

    #[test]
    fn higher_bid_wins_without_arrival_weight() {
        let mut a = auction(&[("a1", 1.5, 300.0), ("a3", 1.2, 60.0)]);
        let w = determine_winner(&mut a, &WinnerPolicy { arrival_weight: 0.0 }, 60_000).unwrap();
        assert_eq!(w, Some(("a1".into(), 1.5)));
        assert_eq!(a.state, AuctionState::Resolved);
        assert!(matches!(
            determine_winner(&mut a, &WinnerPolicy::default(), 60_000),
            Err(DomainError::AlreadyResolved(_))
        ));
    }

    #[test]
    fn faster_bidder_can_beat_higher_bid() {
        let mut a = auction(&[("a1", 1.5, 300.0), ("a3", 1.45, 120.0)]);
        let w = determine_winner(&mut a, &WinnerPolicy { arrival_weight: 0.05 }, 60_000).unwrap();
        assert_eq!(w, Some(("a3".into(), 1.45)));
    }

    #[test]
    fn ties_go_to_smaller_id_and_no_bids_fail() {
        let mut a = auction(&[("a5", 1.0, 60.0), ("a2", 1.0, 60.0)]);
        let w = determine_winner(&mut a, &WinnerPolicy::default(), 60_000).unwrap();
        assert_eq!(w.unwrap().0, "a2");
        let mut empty = auction(&[]);
        assert_eq!(
            determine_winner(&mut empty, &WinnerPolicy::default(), 60_000).unwrap(),
            None
        );
        assert_eq!(empty.state, AuctionState::Failed);
        let mut early = auction(&[]);
        assert!(determine_winner(&mut early, &WinnerPolicy::default(), 59_999).is_err());
    }

    #[test]
    fn bids_only_inside_interval() {
        let mut a = auction(&[]);
        let bid = Bid {
            bidder: "a1".into(),
            amount: 1.0,
            eta_s: 10.0,
        };
        assert!(a.submit(bid.clone(), 59_999).is_ok());
        assert!(a.submit(bid, 60_000).is_err());
    }

    #[test]
    fn bid_amount_rules() {
        let origin = GeoPoint::new(52.37, 9.73).unwrap();
        let parcel_at = crate::geo::offset(origin, 250.0, 0.0);
        let mut a = auction(&[]);
        a.location = parcel_at;
        a.destination = origin;
        // Going out 250 m and back again is a 500 m detour.
        let bid = decide_bid(&UserProfile::default(), &a, origin).unwrap();
        assert!((bid - 2.0).abs() < 1e-3, "{bid}");

        a.reward = 1.5;
        assert_eq!(decide_bid(&UserProfile::default(), &a, origin), None);

        a.reward = 3.5;
        a.location = crate::geo::offset(origin, 600.0, 0.0);
        assert_eq!(decide_bid(&UserProfile::default(), &a, origin), None);
    }

    proptest! {
        #[test]
        fn winner_invariant_under_scaling(
            bids in proptest::collection::vec((0u32..500, 0u32..900), 1..8),
            weight in 0u32..20,
            exp in -4i32..5,
        ) {
            let named: Vec<(String, f64, f64)> = bids
                .iter()
                .enumerate()
                .map(|(i, (a, e))| (format!("a{i}"), *a as f64 / 100.0, *e as f64))
                .collect();
            let refs: Vec<(&str, f64, f64)> = named.iter().map(|(n, a, e)| (n.as_str(), *a, *e)).collect();
            let c = 2f64.powi(exp);
            let policy = WinnerPolicy { arrival_weight: weight as f64 / 100.0 };
            let scaled_policy = WinnerPolicy { arrival_weight: policy.arrival_weight * c };
            let mut plain = auction(&refs);
            let mut scaled = auction(&refs);
            for b in &mut scaled.bids {
                b.amount *= c;
            }
            let w1 = determine_winner(&mut plain, &policy, 60_000).unwrap().map(|w| w.0);
            let w2 = determine_winner(&mut scaled, &scaled_policy, 60_000).unwrap().map(|w| w.0);
            prop_assert_eq!(w1, w2);
        }
    }
}
