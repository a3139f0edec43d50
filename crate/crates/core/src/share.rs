//! Unit-by-unit proportional sharing of an energy budget.
//!
//! Each unit goes to node `i` with probability proportional to `weights[i]`,
//! restricted to nodes with positive weight whose allocation is still below
//! their cap. Units that no node can take stay unallocated. The greedy
//! baseline, the combined-nodes baseline and the aggregate energy
//! distribution all materialize allocations through this procedure.

use std::collections::BTreeMap;

use rand::Rng;

use crate::SimRng;

/// Adds up to `units` units to `alloc` and returns how many were handed out.
pub fn share_units(units: u32, weights: &[f64], caps: Option<&[u32]>, alloc: &mut [u32], rng: &mut SimRng) -> u32 {
    let cap_of = |i: usize| caps.map_or(u32::MAX, |c| c[i]);
    let mut active: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| if w > 0.0 && alloc[i] < cap_of(i) { w } else { 0.0 })
        .collect();
    let mut total: f64 = active.iter().sum();
    let mut given = 0;
    while given < units && total > 0.0 {
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in active.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
        }
        let i = pick.expect("positive total weight has a positive entry");
        alloc[i] += 1;
        given += 1;
        if alloc[i] >= cap_of(i) {
            active[i] = 0.0;
            total = active.iter().sum();
        }
    }
    given
}

/// Exact law of the allocation produced by [`share_units`] starting from
/// `start`, as `(allocation, probability)` pairs in lexicographic order.
pub fn share_distribution(units: u32, weights: &[f64], caps: Option<&[u32]>, start: &[u32]) -> Vec<(Vec<u32>, f64)> {
    let cap_of = |i: usize| caps.map_or(u32::MAX, |c| c[i]);
    let mut done: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    let mut frontier: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    frontier.insert(start.to_vec(), 1.0);
    for _ in 0..units {
        let mut next: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for (alloc, p) in frontier {
            let total: f64 = weights
                .iter()
                .enumerate()
                .filter(|&(i, &w)| w > 0.0 && alloc[i] < cap_of(i))
                .map(|(_, &w)| w)
                .sum();
            if total <= 0.0 {
                *done.entry(alloc).or_default() += p;
                continue;
            }
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 && alloc[i] < cap_of(i) {
                    let mut a = alloc.clone();
                    a[i] += 1;
                    *next.entry(a).or_default() += p * w / total;
                }
            }
        }
        frontier = next;
    }
    for (alloc, p) in frontier {
        *done.entry(alloc).or_default() += p;
    }
    done.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn single_positive_weight_takes_everything() {
        let mut rng = SimRng::seed_from_u64(1);
        let mut alloc = [0, 0];
        assert_eq!(share_units(5, &[3.0, 0.0], None, &mut alloc, &mut rng), 5);
        assert_eq!(alloc, [5, 0]);
    }

    #[test]
    fn zero_weights_hand_out_nothing() {
        let mut rng = SimRng::seed_from_u64(1);
        let mut alloc = [2, 1];
        assert_eq!(share_units(4, &[0.0, 0.0], None, &mut alloc, &mut rng), 0);
        assert_eq!(alloc, [2, 1]);
        assert_eq!(share_distribution(4, &[0.0, 0.0], None, &[2, 1]), vec![(vec![2, 1], 1.0)]);
    }

    #[test]
    fn caps_leave_units_over() {
        let mut rng = SimRng::seed_from_u64(9);
        let mut alloc = [0, 4];
        let given = share_units(10, &[1.0, 1.0], Some(&[3, 7]), &mut alloc, &mut rng);
        assert_eq!(alloc, [3, 7]);
        assert_eq!(given, 6);
    }

    #[test]
    fn exact_law_is_binomial_without_caps() {
        let dist = share_distribution(3, &[1.0, 2.0], None, &[0, 0]);
        let expect = [(vec![0, 3], 8.0 / 27.0), (vec![1, 2], 12.0 / 27.0), (vec![2, 1], 6.0 / 27.0), (vec![3, 0], 1.0 / 27.0)];
        assert_eq!(dist.len(), 4);
        for ((a, p), (ea, ep)) in dist.iter().zip(expect.iter()) {
            assert_eq!(a, ea);
            assert_abs_diff_eq!(*p, *ep, epsilon = 1e-15);
        }
    }

    #[test]
    fn sampler_matches_exact_law_with_caps() {
        let weights = [2.0, 1.0, 1.0];
        let caps = [2, 3, 1];
        let exact = share_distribution(5, &weights, Some(&caps), &[0, 1, 0]);
        let total: f64 = exact.iter().map(|(_, p)| p).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        let mut rng = SimRng::seed_from_u64(11);
        let trials = 100_000;
        let mut counts: BTreeMap<Vec<u32>, u32> = BTreeMap::new();
        for _ in 0..trials {
            let mut alloc = vec![0, 1, 0];
            share_units(5, &weights, Some(&caps), &mut alloc, &mut rng);
            *counts.entry(alloc).or_default() += 1;
        }
        for (alloc, p) in exact {
            let freq = *counts.get(&alloc).unwrap_or(&0) as f64 / trials as f64;
            assert_abs_diff_eq!(freq, p, epsilon = 0.01);
        }
    }
}
