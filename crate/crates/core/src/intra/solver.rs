//! Strategy table (the quadratic one-hot program) and its exact solver.
//!
//! The program chooses one strategy `s_v` per node and minimises
//! `sum_v c_v[s_v] + d_v[s_v] + sum_(u,v) R_uv[s_u][s_v]`. The solver first
//! eliminates nodes of degree at most two (exact for trees and
//! series-parallel graphs), then runs depth-first branch and bound on the
//! remaining core.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::time::Time;

/// Resharding costs of one node pair, `k_u x k_v` row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeMatrix {
    pub u: usize,
    pub v: usize,
    pub costs: Vec<Time>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyTable {
    /// Communication cost `c_v` per strategy.
    pub node_costs: Vec<Vec<Time>>,
    /// Compute cost `d_v` per strategy; all zero in the planner.
    pub compute_costs: Vec<Vec<Time>>,
    /// At most one matrix per unordered pair, with `u < v`.
    pub edges: Vec<EdgeMatrix>,
}

impl StrategyTable {
    pub fn num_nodes(&self) -> usize {
        self.node_costs.len()
    }

    pub fn k(&self, v: usize) -> usize {
        self.node_costs[v].len()
    }

    /// Adds `costs` (`k_u x k_v`) to the term of pair `(u, v)`, transposing
    /// into `u < v` orientation when needed.
    pub fn add_edge(&mut self, u: usize, v: usize, costs: Vec<Time>) {
        assert_ne!(u, v, "self edges belong in the node cost");
        let (ku, kv) = (self.k(u), self.k(v));
        assert_eq!(costs.len(), ku * kv);
        let (a, b, oriented) = if u < v {
            (u, v, costs)
        } else {
            let mut t = vec![Time::ZERO; ku * kv];
            for i in 0..ku {
                for j in 0..kv {
                    t[j * ku + i] = costs[i * kv + j];
                }
            }
            (v, u, t)
        };
        match self.edges.iter_mut().find(|e| e.u == a && e.v == b) {
            Some(e) => e.costs.iter_mut().zip(oriented).for_each(|(x, y)| *x += y),
            None => self.edges.push(EdgeMatrix { u: a, v: b, costs: oriented }),
        }
    }

    /// Objective at a full assignment.
    pub fn evaluate(&self, choice: &[usize]) -> Time {
        let nodes: Time = (0..self.num_nodes())
            .map(|v| self.node_costs[v][choice[v]] + self.compute_costs[v][choice[v]])
            .sum();
        let edges: Time = self.edges.iter().map(|e| e.costs[choice[e.u] * self.k(e.v) + choice[e.v]]).sum();
        nodes + edges
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.compute_costs.len() != self.node_costs.len() {
            return Err("compute and communication vectors differ in length".into());
        }
        for (v, c) in self.node_costs.iter().enumerate() {
            if c.is_empty() {
                return Err(format!("node {v} has no strategy"));
            }
            if self.compute_costs[v].len() != c.len() {
                return Err(format!("node {v}: cost vectors differ in length"));
            }
        }
        for e in &self.edges {
            if e.u >= e.v || e.v >= self.num_nodes() || e.costs.len() != self.k(e.u) * self.k(e.v) {
                return Err(format!("malformed edge ({}, {})", e.u, e.v));
            }
        }
        Ok(())
    }

    /// Number of binary variables after linearisation: one-hot node
    /// variables plus one `e` variable per matrix entry.
    pub fn num_variables(&self) -> usize {
        self.node_costs.iter().map(Vec::len).sum::<usize>() + self.edges.iter().map(|e| e.costs.len()).sum::<usize>()
    }

    /// The linearised program in CPLEX LP format, coefficients in picoseconds.
    pub fn to_lp(&self) -> String {
        let mut out = String::from("\\ objective coefficients in picoseconds\nMinimize\n obj:");
        let mut first = true;
        let mut term = |out: &mut String, coef: u64, var: String| {
            let _ = write!(out, " {}{} {}", if first { "" } else { "+ " }, coef, var);
            first = false;
        };
        for v in 0..self.num_nodes() {
            for i in 0..self.k(v) {
                term(&mut out, (self.node_costs[v][i] + self.compute_costs[v][i]).ticks(), format!("s_{v}_{i}"));
            }
        }
        for e in &self.edges {
            let kv = self.k(e.v);
            for (idx, c) in e.costs.iter().enumerate() {
                term(&mut out, c.ticks(), format!("e_{}_{}_{}_{}", e.u, e.v, idx / kv, idx % kv));
            }
        }
        out.push_str("\nSubject To\n");
        for v in 0..self.num_nodes() {
            let vars: Vec<String> = (0..self.k(v)).map(|i| format!("s_{v}_{i}")).collect();
            let _ = writeln!(out, " onehot_{v}: {} = 1", vars.join(" + "));
        }
        for e in &self.edges {
            let (ku, kv) = (self.k(e.u), self.k(e.v));
            for i in 0..ku {
                let vars: Vec<String> = (0..kv).map(|j| format!("e_{}_{}_{i}_{j}", e.u, e.v)).collect();
                let _ = writeln!(out, " row_{}_{}_{i}: {} - s_{}_{i} = 0", e.u, e.v, vars.join(" + "), e.u);
            }
            for j in 0..kv {
                let vars: Vec<String> = (0..ku).map(|i| format!("e_{}_{}_{i}_{j}", e.u, e.v)).collect();
                let _ = writeln!(out, " col_{}_{}_{j}: {} - s_{}_{j} = 0", e.u, e.v, vars.join(" + "), e.v);
            }
        }
        out.push_str("Binary\n");
        for v in 0..self.num_nodes() {
            for i in 0..self.k(v) {
                let _ = writeln!(out, " s_{v}_{i}");
            }
        }
        for e in &self.edges {
            let kv = self.k(e.v);
            for idx in 0..e.costs.len() {
                let _ = writeln!(out, " e_{}_{}_{}_{}", e.u, e.v, idx / kv, idx % kv);
            }
        }
        out.push_str("End\n");
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Solution {
    pub choice: Vec<usize>,
    pub objective: Time,
    /// False when the search budget ran out before optimality was proven.
    pub certified: bool,
    /// Branch-and-bound nodes expanded.
    pub explored: u64,
}

pub const DEFAULT_BUDGET: u64 = 5_000_000;

#[derive(Clone)]
struct Mat {
    cols: usize,
    data: Vec<u64>,
}

impl Mat {
    fn at(&self, i: usize, j: usize) -> u64 {
        self.data[i * self.cols + j]
    }

    fn transpose(&self, rows: usize) -> Mat {
        let mut data = vec![0; self.data.len()];
        for i in 0..rows {
            for j in 0..self.cols {
                data[j * rows + i] = self.at(i, j);
            }
        }
        Mat { cols: rows, data }
    }
}

enum Elim {
    Isolated { v: usize, best: usize },
    Leaf { v: usize, u: usize, best: Vec<usize> },
    Series { v: usize, a: usize, b: usize, kb: usize, best: Vec<usize> },
}

fn argmin(values: impl Iterator<Item = u64>) -> (usize, u64) {
    let mut best = (0, u64::MAX);
    for (i, x) in values.enumerate() {
        if x < best.1 {
            best = (i, x);
        }
    }
    best
}

/// Exact minimisation; ties resolve to the lowest strategy index at each
/// elimination step and in search order.
pub fn solve(table: &StrategyTable, budget: u64) -> Solution {
    let n = table.num_nodes();
    let k: Vec<usize> = (0..n).map(|v| table.k(v)).collect();
    let mut cost: Vec<Vec<u64>> = (0..n)
        .map(|v| (0..k[v]).map(|i| (table.node_costs[v][i] + table.compute_costs[v][i]).ticks()).collect())
        .collect();
    let mut adj: Vec<BTreeMap<usize, Mat>> = vec![BTreeMap::new(); n];
    for e in &table.edges {
        let m = Mat { cols: k[e.v], data: e.costs.iter().map(|t| t.ticks()).collect() };
        let t = m.transpose(k[e.u]);
        adj[e.u].insert(e.v, m);
        adj[e.v].insert(e.u, t);
    }
    let mut alive = vec![true; n];
    let mut elims = Vec::new();

    while let Some(v) = (0..n).find(|&v| alive[v] && adj[v].len() <= 2) {
        alive[v] = false;
        let nbrs: Vec<usize> = adj[v].keys().copied().collect();
        match nbrs.as_slice() {
            [] => {
                let (best, _) = argmin(cost[v].iter().copied());
                elims.push(Elim::Isolated { v, best });
            }
            &[u] => {
                let m = adj[v].remove(&u).expect("edge present");
                adj[u].remove(&v);
                let mut best = Vec::with_capacity(k[u]);
                for j in 0..k[u] {
                    let (i, c) = argmin((0..k[v]).map(|i| cost[v][i].saturating_add(m.at(i, j))));
                    cost[u][j] = cost[u][j].saturating_add(c);
                    best.push(i);
                }
                elims.push(Elim::Leaf { v, u, best });
            }
            &[a, b] => {
                let ma = adj[v].remove(&a).expect("edge present");
                let mb = adj[v].remove(&b).expect("edge present");
                adj[a].remove(&v);
                adj[b].remove(&v);
                let (ka, kb) = (k[a], k[b]);
                let mut data = vec![0u64; ka * kb];
                let mut best = vec![0usize; ka * kb];
                for x in 0..ka {
                    for y in 0..kb {
                        let (i, c) =
                            argmin((0..k[v]).map(|i| cost[v][i].saturating_add(ma.at(i, x)).saturating_add(mb.at(i, y))));
                        data[x * kb + y] = c;
                        best[x * kb + y] = i;
                    }
                }
                let new = Mat { cols: kb, data };
                let merged = match adj[a].remove(&b) {
                    Some(old) => Mat {
                        cols: kb,
                        data: old.data.iter().zip(&new.data).map(|(p, q)| p.saturating_add(*q)).collect(),
                    },
                    None => new,
                };
                adj[b].insert(a, merged.transpose(ka));
                adj[a].insert(b, merged);
                elims.push(Elim::Series { v, a, b, kb, best });
            }
            _ => unreachable!("degree checked above"),
        }
    }

    let core: Vec<usize> = (0..n).filter(|&v| alive[v]).collect();
    let mut choice = vec![0usize; n];
    let mut certified = true;
    let mut explored = 0;
    if !core.is_empty() {
        let mut bnb = Bnb::new(&core, &k, &cost, &adj, budget);
        bnb.run();
        for (&v, &c) in bnb.order.iter().zip(&bnb.best_assign) {
            choice[v] = c;
        }
        certified = !bnb.exhausted;
        explored = bnb.explored;
    }
    for e in elims.iter().rev() {
        match e {
            Elim::Isolated { v, best } => choice[*v] = *best,
            Elim::Leaf { v, u, best } => choice[*v] = best[choice[*u]],
            Elim::Series { v, a, b, kb, best } => choice[*v] = best[choice[*a] * kb + choice[*b]],
        }
    }
    let objective = table.evaluate(&choice);
    Solution { choice, objective, certified, explored }
}

/// Branch and bound over the nodes left after elimination.
struct Bnb {
    order: Vec<usize>,
    k: Vec<usize>,
    /// Neighbours later in `order`, with matrix oriented `[this][nbr]`.
    later: Vec<Vec<(usize, Mat)>>,
    partial: Vec<Vec<u64>>,
    edge_min_suffix: Vec<u64>,
    assign: Vec<usize>,
    best: u64,
    best_assign: Vec<usize>,
    explored: u64,
    budget: u64,
    exhausted: bool,
}

impl Bnb {
    fn new(core: &[usize], k: &[usize], cost: &[Vec<u64>], adj: &[BTreeMap<usize, Mat>], budget: u64) -> Bnb {
        // Order: highest degree first, then most connections to the placed set.
        let pos_in_core = |v: usize| core.binary_search(&v).expect("core member");
        let mut placed = vec![false; core.len()];
        let mut order = Vec::with_capacity(core.len());
        let start = core.iter().copied().max_by(|&a, &b| adj[a].len().cmp(&adj[b].len()).then(b.cmp(&a))).expect("nonempty");
        placed[pos_in_core(start)] = true;
        order.push(start);
        while order.len() < core.len() {
            let next = core
                .iter()
                .copied()
                .filter(|&v| !placed[pos_in_core(v)])
                .max_by(|&a, &b| {
                    let ca = adj[a].keys().filter(|&&w| placed[pos_in_core(w)]).count();
                    let cb = adj[b].keys().filter(|&&w| placed[pos_in_core(w)]).count();
                    ca.cmp(&cb).then(adj[a].len().cmp(&adj[b].len())).then(b.cmp(&a))
                })
                .expect("unplaced node exists");
            placed[pos_in_core(next)] = true;
            order.push(next);
        }
        let m = order.len();
        let mut pos = vec![usize::MAX; k.len()];
        for (p, &v) in order.iter().enumerate() {
            pos[v] = p;
        }
        let kk: Vec<usize> = order.iter().map(|&v| k[v]).collect();
        let mut later = vec![Vec::new(); m];
        let mut edge_min_at = vec![0u64; m + 1];
        for (p, &v) in order.iter().enumerate() {
            for (&w, mat) in &adj[v] {
                if pos[w] > p {
                    later[p].push((pos[w], mat.clone()));
                    // An edge becomes fully assigned once its earlier end is.
                    edge_min_at[p] = edge_min_at[p].saturating_add(*mat.data.iter().min().unwrap_or(&0));
                }
            }
        }
        let mut edge_min_suffix = vec![0u64; m + 1];
        for p in (0..m).rev() {
            edge_min_suffix[p] = edge_min_suffix[p + 1].saturating_add(edge_min_at[p]);
        }
        let partial: Vec<Vec<u64>> = order.iter().map(|&v| cost[v].clone()).collect();
        Bnb {
            order,
            k: kk,
            later,
            partial,
            edge_min_suffix,
            assign: vec![0; m],
            best: u64::MAX,
            best_assign: vec![0; m],
            explored: 0,
            budget,
            exhausted: false,
        }
    }

    fn apply(&mut self, p: usize, i: usize, sign: bool) {
        for idx in 0..self.later[p].len() {
            let (q, ref mat) = self.later[p][idx];
            for j in 0..self.k[q] {
                let c = mat.at(i, j);
                let slot = &mut self.partial[q][j];
                *slot = if sign { slot.saturating_add(c) } else { slot.saturating_sub(c) };
            }
        }
    }

    fn greedy(&mut self) {
        let m = self.order.len();
        let mut total = 0u64;
        for p in 0..m {
            let (i, c) = argmin(self.partial[p].iter().copied());
            self.assign[p] = i;
            total = total.saturating_add(c);
            self.apply(p, i, true);
        }
        for p in (0..m).rev() {
            let i = self.assign[p];
            self.apply(p, i, false);
        }
        self.best = total;
        self.best_assign = self.assign.clone();
    }

    fn run(&mut self) {
        self.greedy();
        self.dfs(0, 0);
    }

    fn dfs(&mut self, p: usize, current: u64) {
        let m = self.order.len();
        if p == m {
            if current < self.best {
                self.best = current;
                self.best_assign = self.assign.clone();
            }
            return;
        }
        self.explored += 1;
        if self.explored > self.budget {
            self.exhausted = true;
            return;
        }
        // Edges from positions < p are already inside `partial`; edges
        // between unassigned nodes contribute at least their minimum entry.
        let mut lb = current.saturating_add(self.edge_min_suffix[p]);
        for q in p..m {
            lb = lb.saturating_add(*self.partial[q].iter().min().expect("k >= 1"));
        }
        if lb >= self.best {
            return;
        }
        let mut cand: Vec<usize> = (0..self.k[p]).collect();
        cand.sort_by_key(|&i| (self.partial[p][i], i));
        for i in cand {
            let c = current.saturating_add(self.partial[p][i]);
            if c >= self.best {
                break;
            }
            self.assign[p] = i;
            self.apply(p, i, true);
            self.dfs(p + 1, c);
            self.apply(p, i, false);
            if self.exhausted {
                return;
            }
        }
    }
}
