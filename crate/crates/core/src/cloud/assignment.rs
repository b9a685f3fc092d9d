//! Capped 0/1 assignment of sub-tasks to modules.
//!
//! Maximize `Σ_{t,n} H[t][n]·M[t][n]` over binary `M` subject to a per-module
//! cap `κ1` and a per-sub-task cap `κ2`. With count caps the constraint matrix
//! is that of a bipartite transportation problem, so the LP relaxation is
//! integral and a min-cost flow gives the exact optimum in polynomial time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-module cap `κ1` is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapMode {
    /// Number of sub-tasks assigned to a module.
    #[default]
    Count,
    /// Sum of `H` over the sub-tasks assigned to a module.
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub mask: Vec<Vec<bool>>,
    pub objective: f64,
    /// Whether the solver proved optimality.
    pub exact: bool,
    /// Sub-tasks that received a module through post-repair.
    pub repaired_rows: Vec<usize>,
}

/// `Σ H ⊙ M` summed in row-major order.
pub fn objective(h: &[Vec<f64>], mask: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for (hr, mr) in h.iter().zip(mask) {
        for (&v, &m) in hr.iter().zip(mr) {
            if m {
                total += v;
            }
        }
    }
    total
}

fn check(h: &[Vec<f64>]) -> Result<usize> {
    let n = h.first().map_or(0, Vec::len);
    if h.is_empty() || n == 0 {
        return Err(Error::Config("assignment needs a non-empty H".into()));
    }
    if h.iter().any(|r| r.len() != n) {
        return Err(Error::Config("H rows differ in length".into()));
    }
    if h.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config("H entries must be finite and non-negative".into()));
    }
    Ok(n)
}

/// Solves the capped assignment with count caps (`κ1` sub-tasks per module,
/// `κ2` modules per sub-task).
pub fn solve_assignment(h: &[Vec<f64>], kappa1: usize, kappa2: usize) -> Result<Assignment> {
    let n = check(h)?;
    if kappa1 == 0 || kappa2 == 0 {
        return Err(Error::Config("assignment caps must be at least 1".into()));
    }
    let mut mask = min_cost_flow(h, n, kappa1, kappa2);
    let repaired_rows = repair_rows(h, &mut mask, |col: &[bool]| col.iter().filter(|&&b| b).count() < kappa1);
    Ok(Assignment {
        objective: objective(h, &mask),
        mask,
        exact: repaired_rows.is_empty(),
        repaired_rows,
    })
}

/// Solves the assignment with the weighted column cap `Σ_t H[t][n]·M[t][n] ≤ κ1`.
///
/// Branch-and-bound over cells in descending `H`; gives up proving optimality
/// after `node_limit` nodes and returns the best mask found.
pub fn solve_assignment_weighted(h: &[Vec<f64>], kappa1: f64, kappa2: usize, node_limit: u64) -> Result<Assignment> {
    let n = check(h)?;
    if !(kappa1 > 0.0) || kappa2 == 0 {
        return Err(Error::Config("assignment caps must be positive".into()));
    }
    let t = h.len();
    let mut cells: Vec<(usize, usize)> = (0..t).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
    cells.sort_by(|a, b| h[b.0][b.1].total_cmp(&h[a.0][a.1]).then(a.cmp(b)));
    let mut bb = WeightedBb {
        h,
        cells: &cells,
        kappa1,
        kappa2,
        row_used: vec![0; t],
        col_load: vec![0.0; n],
        chosen: vec![vec![false; n]; t],
        best: vec![vec![false; n]; t],
        best_value: -1.0,
        nodes: 0,
        node_limit,
    };
    bb.search(0, 0.0);
    let exact = bb.nodes < node_limit;
    let mut mask = bb.best;
    let repaired_rows = repair_rows(h, &mut mask, |_| true);
    let col_ok = (0..n).all(|c| (0..t).filter(|&r| mask[r][c]).map(|r| h[r][c]).sum::<f64>() <= kappa1 + 1e-12);
    Ok(Assignment {
        objective: objective(h, &mask),
        mask,
        exact: exact && repaired_rows.is_empty() && col_ok,
        repaired_rows,
    })
}

struct WeightedBb<'a> {
    h: &'a [Vec<f64>],
    cells: &'a [(usize, usize)],
    kappa1: f64,
    kappa2: usize,
    row_used: Vec<usize>,
    col_load: Vec<f64>,
    chosen: Vec<Vec<bool>>,
    best: Vec<Vec<bool>>,
    best_value: f64,
    nodes: u64,
    node_limit: u64,
}

impl WeightedBb<'_> {
    /// Upper bound: remaining cells taken greedily under the row caps only.
    fn bound(&self, from: usize) -> f64 {
        let mut extra = self.row_used.clone();
        let mut total = 0.0;
        for &(r, c) in &self.cells[from..] {
            if extra[r] < self.kappa2 && self.col_load[c] + self.h[r][c] <= self.kappa1 + 1e-12 {
                extra[r] += 1;
                total += self.h[r][c];
            }
        }
        total
    }

    fn search(&mut self, pos: usize, value: f64) {
        self.nodes += 1;
        if value > self.best_value {
            self.best_value = value;
            self.best = self.chosen.clone();
        }
        if pos == self.cells.len() || self.nodes >= self.node_limit {
            return;
        }
        if value + self.bound(pos) <= self.best_value {
            return;
        }
        let (r, c) = self.cells[pos];
        let v = self.h[r][c];
        if v > 0.0 && self.row_used[r] < self.kappa2 && self.col_load[c] + v <= self.kappa1 + 1e-12 {
            self.row_used[r] += 1;
            self.col_load[c] += v;
            self.chosen[r][c] = true;
            self.search(pos + 1, value + v);
            self.chosen[r][c] = false;
            self.col_load[c] -= v;
            self.row_used[r] -= 1;
        }
        self.search(pos + 1, value);
    }
}

/// Gives every empty row its best column among those with slack.
fn repair_rows(h: &[Vec<f64>], mask: &mut [Vec<bool>], has_slack: impl Fn(&[bool]) -> bool) -> Vec<usize> {
    let n = h[0].len();
    let mut repaired = Vec::new();
    for r in 0..h.len() {
        if mask[r].iter().any(|&b| b) {
            continue;
        }
        let mut best: Option<usize> = None;
        for c in 0..n {
            let col: Vec<bool> = mask.iter().map(|row| row[c]).collect();
            if has_slack(&col) && best.is_none_or(|b| h[r][c] > h[r][b]) {
                best = Some(c);
            }
        }
        if let Some(c) = best {
            mask[r][c] = true;
            repaired.push(r);
        }
    }
    repaired
}

struct Edge {
    to: usize,
    cap: usize,
    cost: f64,
}

/// Successive shortest paths (Bellman-Ford) on source → rows → columns → sink,
/// stopping once the cheapest augmenting path no longer improves the objective.
fn min_cost_flow(h: &[Vec<f64>], n: usize, kappa1: usize, kappa2: usize) -> Vec<Vec<bool>> {
    let t = h.len();
    let source = 0;
    let sink = t + n + 1;
    let nodes = sink + 1;
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let add = |edges: &mut Vec<Edge>, adj: &mut Vec<Vec<usize>>, a: usize, b: usize, cap: usize, cost: f64| {
        adj[a].push(edges.len());
        edges.push(Edge { to: b, cap, cost });
        adj[b].push(edges.len());
        edges.push(Edge { to: a, cap: 0, cost: -cost });
    };
    for r in 0..t {
        add(&mut edges, &mut adj, source, 1 + r, kappa2, 0.0);
    }
    let mut cell_edge = vec![vec![usize::MAX; n]; t];
    for r in 0..t {
        for c in 0..n {
            if h[r][c] > 0.0 {
                cell_edge[r][c] = edges.len();
                add(&mut edges, &mut adj, 1 + r, 1 + t + c, 1, -h[r][c]);
            }
        }
    }
    for c in 0..n {
        add(&mut edges, &mut adj, 1 + t + c, sink, kappa1, 0.0);
    }
    loop {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev_edge = vec![usize::MAX; nodes];
        dist[source] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if dist[u] == f64::INFINITY {
                    continue;
                }
                for &e in &adj[u] {
                    let edge = &edges[e];
                    if edge.cap > 0 && dist[u] + edge.cost < dist[edge.to] - 1e-15 {
                        dist[edge.to] = dist[u] + edge.cost;
                        prev_edge[edge.to] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink] >= -1e-12 {
            break;
        }
        let mut v = sink;
        while v != source {
            let e = prev_edge[v];
            edges[e].cap -= 1;
            edges[e ^ 1].cap += 1;
            v = edges[e ^ 1].to;
        }
    }
    (0..t)
        .map(|r| {
            (0..n)
                .map(|c| cell_edge[r][c] != usize::MAX && edges[cell_edge[r][c]].cap == 0)
                .collect()
        })
        .collect()
}

/// Default module cap: `⌈T·κ2/N⌉`.
pub fn default_kappa1(subtasks: usize, kappa2: usize, modules: usize) -> usize {
    (subtasks * kappa2).div_ceil(modules).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over every mask of a `t × n` instance (t·n ≤ 24).
    pub(crate) fn brute_force(h: &[Vec<f64>], kappa1: usize, kappa2: usize) -> f64 {
        let t = h.len();
        let n = h[0].len();
        let row_mask = (1u32 << n) - 1;
        let mut best = 0.0f64;
        for bits in 0u32..(1 << (t * n)) {
            let mut ok = true;
            let mut col_counts = vec![0usize; n];
            for r in 0..t {
                let row = (bits >> (r * n)) & row_mask;
                if row.count_ones() as usize > kappa2 {
                    ok = false;
                    break;
                }
                for (c, cc) in col_counts.iter_mut().enumerate() {
                    *cc += ((row >> c) & 1) as usize;
                }
            }
            if !ok || col_counts.iter().any(|&c| c > kappa1) {
                continue;
            }
            let mask: Vec<Vec<bool>> = (0..t)
                .map(|r| (0..n).map(|c| bits >> (r * n + c) & 1 == 1).collect())
                .collect();
            best = best.max(objective(h, &mask));
        }
        best
    }

    fn random_h(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| {
                let row: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let s: f64 = row.iter().sum();
                row.iter().map(|v| v / s).collect()
            })
            .collect()
    }

    #[test]
    fn diagonal_dominance_gives_identity() {
        let h = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let a = solve_assignment(&h, 1, 1).unwrap();
        assert_eq!(a.mask, vec![vec![true, false], vec![false, true]]);
        assert!((a.objective - 1.7).abs() < 1e-15);
    }

    #[test]
    fn loose_caps_select_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = random_h(&mut rng, 3, 4);
        let a = solve_assignment(&h, 3, 4).unwrap();
        assert!(a.mask.iter().flatten().all(|&b| b));
        let total: f64 = h.iter().flatten().sum();
        assert!((a.objective - total).abs() < 1e-12);
    }

    #[test]
    fn greedy_is_not_optimal_but_flow_is() {
        // Greedy takes (0,0)=0.9 first and then is stuck with 0.1 + 0.1.
        let h = vec![vec![0.9, 0.8], vec![0.85, 0.1]];
        let a = solve_assignment(&h, 1, 1).unwrap();
        assert!((a.objective - 1.65).abs() < 1e-12);
        assert_eq!(a.objective, brute_force(&h, 1, 1));
    }

    #[test]
    fn matches_brute_force_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..30 {
            let h = random_h(&mut rng, 3, 4);
            for (k1, k2) in [(1, 1), (1, 2), (2, 1), (2, 3)] {
                let a = solve_assignment(&h, k1, k2).unwrap();
                assert_eq!(a.objective, brute_force(&h, k1, k2), "k1 {k1} k2 {k2}: {h:?}");
            }
        }
    }

    #[test]
    fn empty_row_is_repaired_where_slack_exists() {
        // Row 1 only values column 0, which row 0 already fills at κ1 = 1.
        let h = vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        let a = solve_assignment(&h, 1, 1).unwrap();
        assert!(a.mask[0][0]);
        assert!(a.mask[1].iter().any(|&b| b));
        assert_eq!(a.repaired_rows, vec![1]);
    }

    #[test]
    fn weighted_mode_respects_load_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_h(&mut rng, 4, 5);
        let a = solve_assignment_weighted(&h, 0.6, 2, 1_000_000).unwrap();
        assert!(a.exact);
        for c in 0..5 {
            let load: f64 = (0..4).filter(|&r| a.mask[r][c]).map(|r| h[r][c]).sum();
            assert!(load <= 0.6 + 1e-12);
        }
        assert!(a.mask.iter().all(|r| r.iter().filter(|&&b| b).count() <= 2));
    }

    #[test]
    fn default_cap() {
        assert_eq!(default_kappa1(8, 4, 16), 2);
        assert_eq!(default_kappa1(5, 2, 16), 1);
        assert_eq!(default_kappa1(10, 4, 16), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn relaxing_caps_never_hurts(seed in 0u64..10_000, k1 in 1usize..4, k2 in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_h(&mut rng, 4, 5);
            let base = solve_assignment(&h, k1, k2).unwrap().objective;
            prop_assert!(solve_assignment(&h, k1 + 1, k2).unwrap().objective >= base - 1e-12);
            prop_assert!(solve_assignment(&h, k1, k2 + 1).unwrap().objective >= base - 1e-12);
        }

        #[test]
        fn caps_are_respected(seed in 0u64..10_000, k1 in 1usize..4, k2 in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_h(&mut rng, 6, 7);
            let a = solve_assignment(&h, k1, k2).unwrap();
            prop_assert!(a.repaired_rows.is_empty());
            for row in &a.mask {
                prop_assert!(row.iter().filter(|&&b| b).count() <= k2);
            }
            for c in 0..7 {
                prop_assert!(a.mask.iter().filter(|r| r[c]).count() <= k1);
            }
        }
    }
}
