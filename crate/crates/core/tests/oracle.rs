mod common;

use common::*;

fn check(name: &str, gen: fn(u64) -> Case, reference: fn(&Case) -> Vec<Firing>) {
    let rule = corpus_rule(name);
    for seed in 0..300 {
        let case = gen(seed);
        if let Err(m) = same_firings(run_rule(&rule, &case), reference(&case), 1e-9) {
            panic!("seed {seed}: {m}");
        }
    }
}

#[test]
fn plausibility_matches_reference() {
    check("Forward plausible GPS data", gps_case, plausible_ref);
}

#[test]
fn movement_matches_reference() {
    check("Detect movement", gps_case, has_moved_ref);
}

#[test]
fn speed_matches_reference() {
    check("Compute speed", speed_case, speed_ref);
}

#[test]
fn distance_matches_reference() {
    check("Compute distance to destination", distance_case, distance_ref);
}

#[test]
fn stall_matches_reference() {
    check("Detect slow delivery progress", stall_case, stall_ref);
}

#[test]
fn arrival_matches_reference() {
    check("Estimate arrival time at auction", arrival_case, arrival_ref);
}

#[test]
fn nearby_matches_reference() {
    check("Consider bidding", nearby_case, nearby_ref);
}

#[test]
fn generators_exercise_both_outcomes() {
    // Guards against references that pass by never firing.
    let fired = |gen: fn(u64) -> Case, r: fn(&Case) -> Vec<Firing>| (0..50).filter(|s| !r(&gen(*s)).is_empty()).count();
    assert!(fired(stall_case, stall_ref) > 10);
    assert!(fired(nearby_case, nearby_ref) > 10);
    assert!(fired(arrival_case, arrival_ref) > 10);
    let dropped = (0..50)
        .filter(|s| {
            let c = gps_case(*s);
            plausible_ref(&c).len() < c.events.len()
        })
        .count();
    assert!(dropped > 5);
}
