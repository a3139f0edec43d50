use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Buffer levels at the start of a slot, plus the previous arrivals when the
/// arrival processes are autoregressive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemState {
    pub q: Vec<u32>,
    pub e: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prev_x: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prev_y: Option<u32>,
}

impl SystemState {
    pub fn new(q: Vec<u32>, e: u32) -> Self {
        Self { q, e, prev_x: None, prev_y: None }
    }

    /// All buffers empty; previous arrivals zero when `markov`.
    pub fn empty(nodes: usize, markov: bool) -> Self {
        Self {
            q: vec![0; nodes],
            e: 0,
            prev_x: markov.then(|| vec![0; nodes]),
            prev_y: markov.then_some(0),
        }
    }

    pub fn queue_sum(&self) -> u64 {
        self.q.iter().map(|&v| v as u64).sum()
    }
}

impl fmt::Display for SystemState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q={} e={}", join(&self.q), self.e)?;
        if let (Some(x), Some(y)) = (&self.prev_x, self.prev_y) {
            write!(f, " x={} y={}", join(x), y)?;
        }
        Ok(())
    }
}

pub(crate) fn join(values: &[u32]) -> String {
    values.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

/// Energy units handed to each node in one slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action(pub Vec<u32>);

impl Action {
    pub fn zeros(nodes: usize) -> Self {
        Action(vec![0; nodes])
    }

    pub fn total(&self) -> u64 {
        self.0.iter().map(|&v| v as u64).sum()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&join(&self.0))
    }
}

/// Every integer allocation `t >= 0` with `sum(t) <= state.e`, in ascending
/// lexicographic order.
pub fn feasible_actions(state: &SystemState) -> Vec<Action> {
    let n = state.q.len();
    let mut flat = Vec::new();
    enumerate_simplex(n, state.e, &mut vec![0; n], 0, &mut flat);
    flat.chunks(n.max(1)).map(|c| Action(c.to_vec())).collect()
}

fn enumerate_simplex(n: usize, budget: u32, buf: &mut Vec<u32>, pos: usize, out: &mut Vec<u32>) {
    if pos == n {
        out.extend_from_slice(buf);
        return;
    }
    for v in 0..=budget {
        buf[pos] = v;
        enumerate_simplex(n, budget - v, buf, pos + 1, out);
    }
    buf[pos] = 0;
}

/// Feasible action lists for every energy level, stored flat.
#[derive(Clone, Debug)]
pub struct ActionCatalog {
    nodes: usize,
    levels: Vec<Vec<u32>>,
}

impl ActionCatalog {
    pub fn new(nodes: usize, e_max: u32) -> Self {
        let levels = (0..=e_max)
            .map(|e| {
                let mut flat = Vec::new();
                enumerate_simplex(nodes, e, &mut vec![0; nodes], 0, &mut flat);
                flat
            })
            .collect();
        Self { nodes, levels }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    #[inline]
    pub fn count(&self, e: u32) -> usize {
        self.levels[e as usize].len() / self.nodes
    }

    #[inline]
    pub fn get(&self, e: u32, index: usize) -> &[u32] {
        let n = self.nodes;
        &self.levels[e as usize][index * n..(index + 1) * n]
    }

    /// Position of `action` in the list for energy level `e`.
    pub fn index_of(&self, e: u32, action: &[u32]) -> Option<usize> {
        let (mut lo, mut hi) = (0usize, self.count(e));
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.get(e, mid).cmp(action) {
                Ordering::Less => lo = mid + 1,
                Ordering::Greater => hi = mid,
                Ordering::Equal => return Some(mid),
            }
        }
        None
    }
}

/// Mixed-radix encoding of states into `u64` keys.
///
/// Digits, most significant first: `q_1..q_n`, `e`, then `prev_x_1..prev_x_n`,
/// `prev_y` for autoregressive arrivals. For i.i.d. arrivals the key is a
/// dense index with the all-empty state at 0.
#[derive(Clone, Debug)]
pub struct StateCodec {
    nodes: usize,
    d_max: u32,
    e_max: u32,
    prev_caps: Option<(u32, u32)>,
}

impl StateCodec {
    pub fn new(nodes: usize, d_max: u32, e_max: u32, prev_caps: Option<(u32, u32)>) -> Self {
        Self { nodes, d_max, e_max, prev_caps }
    }

    /// Number of distinct keys, if it fits in a `u64`.
    pub fn cardinality(&self) -> Option<u64> {
        let mut total: u64 = 1;
        for _ in 0..self.nodes {
            total = total.checked_mul(self.d_max as u64 + 1)?;
        }
        total = total.checked_mul(self.e_max as u64 + 1)?;
        if let Some((xc, yc)) = self.prev_caps {
            for _ in 0..self.nodes {
                total = total.checked_mul(xc as u64 + 1)?;
            }
            total = total.checked_mul(yc as u64 + 1)?;
        }
        Some(total)
    }

    #[inline]
    pub fn encode(&self, s: &SystemState) -> u64 {
        let dr = self.d_max as u64 + 1;
        let mut key = 0u64;
        for &q in &s.q {
            key = key * dr + q as u64;
        }
        key = key * (self.e_max as u64 + 1) + s.e as u64;
        if let Some((xc, yc)) = self.prev_caps {
            let xr = xc as u64 + 1;
            for &x in s.prev_x.as_deref().unwrap_or(&[]) {
                key = key * xr + x as u64;
            }
            key = key * (yc as u64 + 1) + s.prev_y.unwrap_or(0) as u64;
        }
        key
    }

    pub fn decode(&self, mut key: u64) -> SystemState {
        let n = self.nodes;
        let mut prev = None;
        if let Some((xc, yc)) = self.prev_caps {
            let y = (key % (yc as u64 + 1)) as u32;
            key /= yc as u64 + 1;
            let mut x = vec![0; n];
            for slot in x.iter_mut().rev() {
                *slot = (key % (xc as u64 + 1)) as u32;
                key /= xc as u64 + 1;
            }
            prev = Some((x, y));
        }
        let e = (key % (self.e_max as u64 + 1)) as u32;
        key /= self.e_max as u64 + 1;
        let mut q = vec![0; n];
        for slot in q.iter_mut().rev() {
            *slot = (key % (self.d_max as u64 + 1)) as u32;
            key /= self.d_max as u64 + 1;
        }
        let (prev_x, prev_y) = match prev {
            Some((x, y)) => (Some(x), Some(y)),
            None => (None, None),
        };
        SystemState { q, e, prev_x, prev_y }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binomial(n: u64, k: u64) -> u64 {
        (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn single_node_two_units() {
        let acts = feasible_actions(&SystemState::new(vec![0], 2));
        assert_eq!(acts, vec![Action(vec![0]), Action(vec![1]), Action(vec![2])]);
    }

    #[test]
    fn no_energy_only_idle() {
        let acts = feasible_actions(&SystemState::new(vec![3, 1], 0));
        assert_eq!(acts, vec![Action(vec![0, 0])]);
    }

    #[test]
    fn two_nodes_two_units_matches_brute_force() {
        let acts = feasible_actions(&SystemState::new(vec![0, 0], 2));
        // brute force over the box, filtered to the simplex
        let mut brute = Vec::new();
        for a in 0..=2u32 {
            for b in 0..=2u32 {
                if a + b <= 2 {
                    brute.push(Action(vec![a, b]));
                }
            }
        }
        assert_eq!(acts, brute);
        assert_eq!(acts.len() as u64, binomial(4, 2));
    }

    #[test]
    fn catalog_lookup() {
        let cat = ActionCatalog::new(3, 4);
        for e in 0..=4 {
            let listed = feasible_actions(&SystemState::new(vec![0; 3], e));
            assert_eq!(cat.count(e), listed.len());
            for (i, a) in listed.iter().enumerate() {
                assert_eq!(cat.get(e, i), a.0.as_slice());
                assert_eq!(cat.index_of(e, &a.0), Some(i));
            }
        }
        assert_eq!(cat.index_of(2, &[1, 1, 1]), None);
    }

    #[test]
    fn codec_dense_for_iid() {
        let codec = StateCodec::new(2, 3, 3, None);
        assert_eq!(codec.cardinality(), Some(64));
        assert_eq!(codec.encode(&SystemState::empty(2, false)), 0);
        for key in 0..64 {
            assert_eq!(codec.encode(&codec.decode(key)), key);
        }
    }

    proptest! {
        #[test]
        fn simplex_cardinality(n in 1usize..4, e in 0u32..9) {
            let acts = feasible_actions(&SystemState::new(vec![0; n], e));
            prop_assert_eq!(acts.len() as u64, binomial(e as u64 + n as u64, n as u64));
            prop_assert!(acts.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(acts.iter().all(|a| a.total() <= e as u64));
        }

        #[test]
        fn codec_round_trip_markov(q in proptest::collection::vec(0u32..=5, 3), e in 0u32..=7,
                                   x in proptest::collection::vec(0u32..=4, 3), y in 0u32..=9) {
            let codec = StateCodec::new(3, 5, 7, Some((4, 9)));
            let s = SystemState { q, e, prev_x: Some(x), prev_y: Some(y) };
            prop_assert_eq!(codec.decode(codec.encode(&s)), s);
        }
    }
}
