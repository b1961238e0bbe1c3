use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Key groups and their sizes, to be spread over `workers`.
#[derive(Debug, Clone)]
pub struct LoadBalanceInput {
    pub groups: Vec<(u64, u64)>,
    pub workers: usize,
}

/// Worker assignment for every key, with the resulting per-worker load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    /// `(key, worker)` sorted by key.
    pub assignment: Vec<(u64, u32)>,
    pub loads: Vec<u64>,
}

impl Placement {
    pub fn max_load(&self) -> u64 {
        self.loads.iter().copied().max().unwrap_or(0)
    }

    pub fn worker_of(&self, key: u64) -> Option<usize> {
        self.assignment
            .binary_search_by_key(&key, |&(k, _)| k)
            .ok()
            .map(|i| self.assignment[i].1 as usize)
    }
}

/// Longest-processing-time placement: groups in descending size (key
/// ascending on ties) each go to the currently lightest worker (lowest
/// index on ties).
pub fn balance_groups(input: &LoadBalanceInput) -> Placement {
    let workers = input.workers.max(1);
    let mut order: Vec<(u64, u64)> = input.groups.clone();
    order.sort_unstable_by_key(|&(key, size)| (Reverse(size), key));

    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = (0..workers).map(|w| Reverse((0, w))).collect();
    let mut loads = vec![0u64; workers];
    let mut assignment = Vec::with_capacity(order.len());
    for (key, size) in order {
        let Reverse((load, w)) = heap.pop().expect("at least one worker");
        loads[w] = load + size;
        heap.push(Reverse((loads[w], w)));
        assignment.push((key, w as u32));
    }
    assignment.sort_unstable_by_key(|&(k, _)| k);
    Placement { assignment, loads }
}
