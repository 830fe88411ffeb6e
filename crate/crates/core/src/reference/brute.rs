use thiserror::Error;

use crate::metrics::{size_factor, CostParams};
use crate::model::{DsmCase, Partition, SolutionRecord};

/// Bell(12) is about 4.2 million partitions.
pub const DEFAULT_MAX_N: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BruteForceError {
    #[error("case has {n} nodes, exhaustive search is limited to {max_n}")]
    TooLarge { n: usize, max_n: usize },
}

/// Lexicographic enumeration of restricted growth strings of length `n`.
///
/// Each yielded slice is a canonical 0-based assignment: `a[0] = 0` and
/// `a[i] <= 1 + max(a[..i])`.
pub struct SetPartitions {
    rgs: Vec<usize>,
    // prefix_max[i] = max(rgs[..=i])
    prefix_max: Vec<usize>,
    started: bool,
    done: bool,
}

impl SetPartitions {
    pub fn new(n: usize) -> Self {
        SetPartitions {
            rgs: vec![0; n],
            prefix_max: vec![0; n],
            started: false,
            done: n == 0,
        }
    }

    /// Advances to the next string; returns `None` when exhausted.
    pub fn next_rgs(&mut self) -> Option<&[usize]> {
        if self.done {
            return None;
        }
        if !self.started {
            self.started = true;
            return Some(&self.rgs);
        }
        let n = self.rgs.len();
        let mut i = n;
        while i > 1 {
            i -= 1;
            if self.rgs[i] <= self.prefix_max[i - 1] {
                self.rgs[i] += 1;
                self.prefix_max[i] = self.prefix_max[i - 1].max(self.rgs[i]);
                for j in i + 1..n {
                    self.rgs[j] = 0;
                    self.prefix_max[j] = self.prefix_max[i];
                }
                return Some(&self.rgs);
            }
        }
        self.done = true;
        None
    }
}

pub fn bell_number(n: usize) -> u64 {
    // Bell triangle.
    let mut row = vec![1u64];
    for _ in 0..n {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().unwrap());
        for &x in &row {
            let prev = *next.last().unwrap();
            next.push(prev + x);
        }
        row = next;
    }
    row[0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub best: SolutionRecord,
    /// Number of feasible (`K >= 2`) partitions evaluated.
    pub visited: u64,
}

/// Exhaustive minimum of TotalCost over all partitions with `K >= 2`.
///
/// Ties resolve to the lexicographically smallest canonical assignment.
pub fn brute_force_optimum(
    case: &DsmCase,
    params: CostParams,
    max_n: usize,
) -> Result<BruteForceResult, BruteForceError> {
    let n = case.n();
    if n > max_n {
        return Err(BruteForceError::TooLarge { n, max_n });
    }
    let links = case.links();
    let mut intra = vec![0.0; n];
    let mut sizes = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut visited = 0u64;
    let mut parts = SetPartitions::new(n);
    while let Some(rgs) = parts.next_rgs() {
        let k = rgs.iter().max().map_or(0, |m| m + 1);
        if k < 2 {
            continue;
        }
        visited += 1;
        intra[..k].iter_mut().for_each(|w| *w = 0.0);
        sizes[..k].iter_mut().for_each(|s| *s = 0);
        for &m in rgs {
            sizes[m] += 1;
        }
        let mut cross = 0.0;
        for l in links {
            let a = rgs[l.target];
            if a == rgs[l.source] {
                intra[a] += l.weight;
            } else {
                cross += l.weight;
            }
        }
        let cost: f64 = (0..k)
            .map(|m| intra[m] * size_factor(sizes[m], n, params.rho))
            .sum::<f64>()
            + n as f64 * cross;
        let better = match &best {
            None => true,
            Some((b, _)) => cost < b - 1e-9 * b.abs().max(1.0),
        };
        if better {
            best = Some((cost, rgs.to_vec()));
        }
    }
    let (total_cost, rgs) = best.expect("n >= 2 always has a feasible partition");
    let partition = Partition::from_canonical(rgs.into_iter().map(|m| m + 1).collect())
        .expect("restricted growth strings are canonical");
    Ok(BruteForceResult {
        best: SolutionRecord {
            partition,
            total_cost,
            iteration_found: 0,
        },
        visited,
    })
}
