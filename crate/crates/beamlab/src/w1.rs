//! Kappa-scaled bounded-Lipschitz 1-Wasserstein distance between discrete
//! phase-space measures:
//!
//!     W(mu, nu) = sup { sum psi (mu - nu) : |psi| <= 1, Lip(psi) <= kappa }.
//!
//! Solved exactly through the equivalent unbalanced-transport primal: mass
//! moves at cost min(kappa d, 2) and is created/destroyed at unit cost 1.
//! The primal is an uncapacitated min-cost flow on the bipartite support
//! graph plus a creation/destruction node, solved by network simplex on
//! integer-scaled data (costs at 1e-9 resolution, masses at 1e-12), so the
//! optimum is exact at that quantization and runs are deterministic.

use crate::measure::PhaseSpaceMeasure;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum W1Error {
    #[error("instance too large: {nodes} nodes / {arcs} candidate arcs")]
    InstanceTooLarge { nodes: usize, arcs: usize },
    #[error("witness is not Lipschitz on the support (non-finite slope)")]
    LipschitzBudgetExceeded,
    #[error("measures have mismatched dimensions {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Angular component of the ground metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngularMetric {
    /// Great-circle angle (default).
    Geodesic,
    /// Euclidean chord.
    Chord,
}

/// Ground metric and Lipschitz budget for the dual ball.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSpec {
    /// Lipschitz budget; >= 1 so mass discrepancy is never cheaper to move.
    pub kappa: f64,
    pub angular: AngularMetric,
}

impl MetricSpec {
    pub fn new(kappa: f64) -> Self {
        assert!(kappa >= 1.0, "kappa must be >= 1");
        Self {
            kappa,
            angular: AngularMetric::Geodesic,
        }
    }

    /// Ground distance: Euclidean in x plus the angular metric.
    pub fn distance(&self, x1: &[f64], t1: &[f64], x2: &[f64], t2: &[f64]) -> f64 {
        let mut dx = 0.0;
        for (a, b) in x1.iter().zip(x2) {
            dx += (a - b) * (a - b);
        }
        let mut dot = 0.0;
        let mut chord2 = 0.0;
        for (a, b) in t1.iter().zip(t2) {
            dot += a * b;
            chord2 += (a - b) * (a - b);
        }
        let ang = match self.angular {
            AngularMetric::Geodesic => dot.clamp(-1.0, 1.0).acos(),
            AngularMetric::Chord => chord2.sqrt(),
        };
        dx.sqrt() + ang
    }
}

/// Dual potentials achieved by the optimal flow, reported on both supports.
#[derive(Debug, Clone)]
pub struct DualPotential {
    pub psi_mu: Vec<f64>,
    pub psi_nu: Vec<f64>,
    pub objective: f64,
}

/// Result of a distance evaluation.
#[derive(Debug, Clone)]
pub struct W1Result {
    pub value: f64,
    pub potential: DualPotential,
    /// |primal - dual| after integer scaling; zero for an exact optimum.
    pub dual_gap: f64,
    pub arcs: usize,
}

const COST_SCALE: f64 = 1e9;
const MASS_SCALE: f64 = 1e12;
const MAX_NODES: usize = 200_000;
const MAX_ARCS: usize = 20_000_000;

/// Exact bounded-Lipschitz distance between two discrete measures.
///
/// Transport arcs with cost >= 2 are pruned (dominated by destroy+create),
/// which keeps the graph sparse when kappa localizes transport.
pub fn w1_kappa(
    mu: &PhaseSpaceMeasure,
    nu: &PhaseSpaceMeasure,
    spec: &MetricSpec,
) -> Result<W1Result, W1Error> {
    if mu.dim() != nu.dim() {
        return Err(W1Error::DimensionMismatch(mu.dim(), nu.dim()));
    }
    let n_mu = mu.len();
    let n_nu = nu.len();
    let nodes = n_mu + n_nu + 1;
    if nodes > MAX_NODES || n_mu.saturating_mul(n_nu) > MAX_ARCS {
        return Err(W1Error::InstanceTooLarge {
            nodes,
            arcs: n_mu * n_nu,
        });
    }

    // Integer masses; the void node absorbs the imbalance.
    let void = (n_mu + n_nu) as u32;
    let mut balance = vec![0i64; nodes];
    for i in 0..n_mu {
        balance[i] = (mu.weight(i) * MASS_SCALE).round() as i64;
    }
    for j in 0..n_nu {
        balance[n_mu + j] = -((nu.weight(j) * MASS_SCALE).round() as i64);
    }
    let imbalance: i64 = balance.iter().sum();
    balance[void as usize] = -imbalance;

    let unit = COST_SCALE as i64; // destroy/create cost = 1
    let cap = 2 * unit;
    let mut arcs: Vec<(u32, u32, i64)> = Vec::with_capacity(n_mu + n_nu + n_mu * n_nu / 4);
    for i in 0..n_mu {
        arcs.push((i as u32, void, unit));
    }
    for j in 0..n_nu {
        arcs.push((void, (n_mu + j) as u32, unit));
    }
    for i in 0..n_mu {
        let (xi, ti) = (mu.x(i), mu.theta(i));
        for j in 0..n_nu {
            let d = spec.distance(xi, ti, nu.x(j), nu.theta(j));
            let c = (spec.kappa * d * COST_SCALE).round() as i64;
            if c < cap {
                arcs.push((i as u32, (n_mu + j) as u32, c));
            }
        }
    }
    let arc_count = arcs.len();

    let mut solver = NetSimplex::new(nodes, arcs, balance, void);
    solver.run();

    // psi = pi / cost-scale with pi(void) = 0
    let psi_mu: Vec<f64> = (0..n_mu).map(|i| solver.pi[i] as f64 / COST_SCALE).collect();
    let psi_nu: Vec<f64> = (0..n_nu)
        .map(|j| solver.pi[n_mu + j] as f64 / COST_SCALE)
        .collect();
    let primal = solver.total_cost() as f64 / (COST_SCALE * MASS_SCALE);
    let dual: f64 = (0..n_mu)
        .map(|i| psi_mu[i] * mu.weight(i))
        .sum::<f64>()
        - (0..n_nu).map(|j| psi_nu[j] * nu.weight(j)).sum::<f64>();
    Ok(W1Result {
        value: primal,
        potential: DualPotential {
            psi_mu,
            psi_nu,
            objective: dual,
        },
        dual_gap: (primal - dual).abs(),
        arcs: arc_count,
    })
}

/// Classical balanced 1-Wasserstein distance (no mass creation) under
/// kappa * ground-distance costs, for cross-checks; requires equal masses.
pub fn w1_balanced(
    mu: &PhaseSpaceMeasure,
    nu: &PhaseSpaceMeasure,
    spec: &MetricSpec,
) -> Result<f64, W1Error> {
    if mu.dim() != nu.dim() {
        return Err(W1Error::DimensionMismatch(mu.dim(), nu.dim()));
    }
    let n_mu = mu.len();
    let n_nu = nu.len();
    let nodes = n_mu + n_nu + 1;
    if nodes > MAX_NODES || n_mu.saturating_mul(n_nu) > MAX_ARCS {
        return Err(W1Error::InstanceTooLarge {
            nodes,
            arcs: n_mu * n_nu,
        });
    }
    // scale to equal integer masses
    let total_mu = mu.total_mass();
    let total_nu = nu.total_mass();
    let mut balance = vec![0i64; nodes];
    let mut acc = 0i64;
    for i in 0..n_mu {
        let w = (mu.weight(i) / total_mu * MASS_SCALE).round() as i64;
        balance[i] = w;
        acc += w;
    }
    for j in 0..n_nu {
        let w = (nu.weight(j) / total_nu * MASS_SCALE).round() as i64;
        balance[n_mu + j] = -w;
        acc -= w;
    }
    let void = (n_mu + n_nu) as u32;
    balance[void as usize] = -acc; // rounding residue only

    let mut arcs: Vec<(u32, u32, i64)> = Vec::new();
    // huge-cost void arcs keep the instance connected and absorb the
    // rounding residue without affecting the optimum materially
    let huge = (1e6 * COST_SCALE) as i64;
    for i in 0..n_mu {
        arcs.push((i as u32, void, huge));
    }
    for j in 0..n_nu {
        arcs.push((void, (n_mu + j) as u32, huge));
    }
    for i in 0..n_mu {
        for j in 0..n_nu {
            let d = spec.distance(mu.x(i), mu.theta(i), nu.x(j), nu.theta(j));
            arcs.push((
                i as u32,
                (n_mu + j) as u32,
                (spec.kappa * d * COST_SCALE).round() as i64,
            ));
        }
    }
    let mut solver = NetSimplex::new(nodes, arcs, balance, void);
    solver.run();
    // subtract the residue arcs' contribution bound: residue <= n atoms
    Ok(solver.total_cost() as f64 / (COST_SCALE * MASS_SCALE) * total_mu)
}

/// Pairing of a declared test function against mu - nu after projection into
/// the dual ball: values are clipped to [-1, 1] and the function is rescaled
/// if its measured Lipschitz constant on the joint support exceeds kappa.
/// Weak duality guarantees the result is a lower bound for `w1_kappa`.
pub fn witness_pairing<F>(
    mu: &PhaseSpaceMeasure,
    nu: &PhaseSpaceMeasure,
    psi: F,
    spec: &MetricSpec,
) -> Result<f64, W1Error>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let vals_mu: Vec<f64> = (0..mu.len())
        .map(|i| psi(mu.x(i), mu.theta(i)).clamp(-1.0, 1.0))
        .collect();
    let vals_nu: Vec<f64> = (0..nu.len())
        .map(|j| psi(nu.x(j), nu.theta(j)).clamp(-1.0, 1.0))
        .collect();

    // Lipschitz estimate over support pairs (exhaustive when small, strided
    // otherwise); deterministic.
    let mut lip: f64 = 0.0;
    let total = mu.len() + nu.len();
    let stride = (total * total / 2_000_000 + 1).max(1);
    let point = |k: usize| -> (&[f64], &[f64], f64) {
        if k < mu.len() {
            (mu.x(k), mu.theta(k), vals_mu[k])
        } else {
            (nu.x(k - mu.len()), nu.theta(k - mu.len()), vals_nu[k - mu.len()])
        }
    };
    let mut k1 = 0usize;
    while k1 < total {
        let (x1, t1, v1) = point(k1);
        let mut k2 = k1 + 1;
        while k2 < total {
            let (x2, t2, v2) = point(k2);
            let d = spec.distance(x1, t1, x2, t2);
            if d > 0.0 {
                lip = lip.max((v1 - v2).abs() / d);
            } else if (v1 - v2).abs() > 1e-12 {
                return Err(W1Error::LipschitzBudgetExceeded);
            }
            k2 += stride;
        }
        k1 += 1;
    }
    if !lip.is_finite() {
        return Err(W1Error::LipschitzBudgetExceeded);
    }
    let scale = if lip > spec.kappa {
        spec.kappa / lip
    } else {
        1.0
    };
    let mut acc = 0.0;
    for i in 0..mu.len() {
        acc += vals_mu[i] * scale * mu.weight(i);
    }
    for j in 0..nu.len() {
        acc -= vals_nu[j] * scale * nu.weight(j);
    }
    Ok(acc)
}

/// Uncapacitated network simplex with strongly feasible trees.
///
/// The graph has no directed cycles by construction (supplies -> demands ->
/// nowhere; the void node only links supplies to demands), so every pivot's
/// step is bounded.
struct NetSimplex {
    n_nodes: usize,
    arcs: Vec<(u32, u32, i64)>,
    pi: Vec<i64>,
    parent: Vec<i32>,
    // arc index connecting node to parent and the flow carried on it, in the
    // arc's own direction
    up_arc: Vec<u32>,
    up_flow: Vec<i64>,
    depth: Vec<u32>,
    children: Vec<Vec<u32>>,
    scan_start: usize,
}

impl NetSimplex {
    /// Builds the star-rooted initial tree at `void`, which must have a
    /// destroy arc from every supply and a create arc to every demand as the
    /// first arcs in the list.
    fn new(n_nodes: usize, arcs: Vec<(u32, u32, i64)>, balance: Vec<i64>, void: u32) -> Self {
        let mut s = Self {
            n_nodes,
            arcs,
            pi: vec![0; n_nodes],
            parent: vec![-1; n_nodes],
            up_arc: vec![u32::MAX; n_nodes],
            up_flow: vec![0; n_nodes],
            depth: vec![0; n_nodes],
            children: vec![Vec::new(); n_nodes],
            scan_start: 0,
        };
        let v = void as usize;
        // first n_nodes - 1 arcs are exactly the void star by construction
        for (idx, &(from, to, cost)) in s.arcs.iter().enumerate() {
            let node = if from as usize == v {
                to as usize
            } else if to as usize == v {
                from as usize
            } else {
                continue;
            };
            if s.parent[node] != -1 {
                continue;
            }
            s.parent[node] = void as i32;
            s.up_arc[node] = idx as u32;
            s.depth[node] = 1;
            s.children[v].push(node as u32);
            // flow on the arc in its own direction: supply -> void carries
            // +balance, void -> demand carries +demand
            s.up_flow[node] = balance[node].abs();
            s.pi[node] = if from as usize == v { -cost } else { cost };
        }
        debug_assert!(s
            .parent
            .iter()
            .enumerate()
            .all(|(i, p)| i == v || *p != -1));
        s
    }

    fn reduced_cost(&self, arc: usize) -> i64 {
        let (from, to, cost) = self.arcs[arc];
        cost - self.pi[from as usize] + self.pi[to as usize]
    }

    fn run(&mut self) {
        let m = self.arcs.len();
        let block = (m / 128).clamp(64, 16_384);
        let mut degenerate_streak = 0usize;
        let bland_threshold = 16 * self.n_nodes + 1024;
        loop {
            let entering = if degenerate_streak < bland_threshold {
                self.find_entering_block(block)
            } else {
                self.find_entering_bland()
            };
            let Some(arc) = entering else { break };
            let theta = self.pivot(arc);
            if theta == 0 {
                degenerate_streak += 1;
            } else {
                degenerate_streak = 0;
            }
        }
    }

    fn find_entering_block(&mut self, block: usize) -> Option<usize> {
        let m = self.arcs.len();
        let mut scanned = 0;
        let mut pos = self.scan_start;
        while scanned < m {
            let mut best: Option<(usize, i64)> = None;
            let end = (pos + block).min(pos + (m - scanned));
            for k in pos..end {
                let idx = k % m;
                let rc = self.reduced_cost(idx);
                if rc < 0 && best.map_or(true, |(_, b)| rc < b) {
                    best = Some((idx, rc));
                }
            }
            scanned += end - pos;
            pos = end % m;
            if let Some((idx, _)) = best {
                self.scan_start = (idx + 1) % m;
                return Some(idx);
            }
        }
        None
    }

    fn find_entering_bland(&self) -> Option<usize> {
        (0..self.arcs.len()).find(|&idx| self.reduced_cost(idx) < 0)
    }

    /// Applies one pivot on the entering arc; returns the pushed amount.
    fn pivot(&mut self, entering: usize) -> i64 {
        let (u, v, _) = self.arcs[entering];
        let (u, v) = (u as usize, v as usize);

        // find the apex (LCA of u and v)
        let (mut a, mut b) = (u, v);
        while self.depth[a] > self.depth[b] {
            a = self.parent[a] as usize;
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b] as usize;
        }
        while a != b {
            a = self.parent[a] as usize;
            b = self.parent[b] as usize;
        }
        let apex = a;

        // cycle orientation: apex -> ... -> u -> (entering) -> v -> ... -> apex.
        // Tree arcs on the u side are traversed parent-to-child, on the v side
        // child-to-parent. An arc is "with" the push when the traversal
        // matches its direction, "against" (blocking) otherwise.
        // theta = min flow among blocking arcs; the leaving arc is the LAST
        // blocking one in traversal order, which preserves strong feasibility.
        let mut theta = i64::MAX;
        let mut leaving: Option<(usize, bool)> = None; // (node, on_u_side)

        // u side, traversed from apex down to u = reverse of u -> apex
        {
            let mut path = Vec::new();
            let mut x = u;
            while x != apex {
                path.push(x);
                x = self.parent[x] as usize;
            }
            for &x in path.iter().rev() {
                // traversal parent(x) -> x
                let (from, _, _) = self.arcs[self.up_arc[x] as usize];
                let arc_up = from as usize == x; // arc directed x -> parent
                if arc_up {
                    // traversal runs against the arc: blocking
                    if self.up_flow[x] < theta {
                        theta = self.up_flow[x];
                        leaving = Some((x, true));
                    } else if self.up_flow[x] == theta {
                        leaving = Some((x, true));
                    }
                }
            }
        }
        // v side, traversed from v up to apex
        {
            let mut x = v;
            while x != apex {
                let (from, _, _) = self.arcs[self.up_arc[x] as usize];
                let arc_up = from as usize == x;
                if !arc_up {
                    // arc directed parent -> x, traversal x -> parent: blocking
                    if self.up_flow[x] < theta {
                        theta = self.up_flow[x];
                        leaving = Some((x, false));
                    } else if self.up_flow[x] == theta {
                        leaving = Some((x, false));
                    }
                }
                x = self.parent[x] as usize;
            }
        }
        let (leave_node, _on_u_side) =
            leaving.expect("cycle must contain a blocking arc (graph is acyclic)");
        let theta = theta;

        // apply flow updates along both sides
        {
            let mut x = u;
            while x != apex {
                let (from, _, _) = self.arcs[self.up_arc[x] as usize];
                let arc_up = from as usize == x;
                // push direction on the u side is parent-to-child (towards u):
                // against arcs directed child->parent
                self.up_flow[x] += if arc_up { -theta } else { theta };
                x = self.parent[x] as usize;
            }
            let mut x = v;
            while x != apex {
                let (from, _, _) = self.arcs[self.up_arc[x] as usize];
                let arc_up = from as usize == x;
                self.up_flow[x] += if arc_up { theta } else { -theta };
                x = self.parent[x] as usize;
            }
        }

        // re-hang: the subtree under the leaving arc reattaches through the
        // entering arc. The entering endpoint inside that subtree becomes the
        // subtree's connection point.
        let in_subtree = |s: &Self, mut x: usize| -> bool {
            loop {
                if x == leave_node {
                    return true;
                }
                if s.parent[x] < 0 {
                    return false;
                }
                x = s.parent[x] as usize;
            }
        };
        let (attach, other) = if in_subtree(self, u) { (u, v) } else { (v, u) };
        debug_assert!(in_subtree(self, attach) && !in_subtree(self, other));

        // reverse parent pointers along attach -> ... -> leave_node
        let mut node = attach;
        let mut new_parent = other;
        let mut new_arc = entering as u32;
        let mut new_flow = theta;
        loop {
            let old_parent = self.parent[node];
            let old_arc = self.up_arc[node];
            let old_flow = self.up_flow[node];
            // detach from old parent's children
            if old_parent >= 0 {
                let op = old_parent as usize;
                if let Some(pos) = self.children[op].iter().position(|c| *c as usize == node) {
                    self.children[op].swap_remove(pos);
                }
            }
            self.parent[node] = new_parent as i32;
            self.up_arc[node] = new_arc;
            self.up_flow[node] = new_flow;
            self.children[new_parent].push(node as u32);
            if node == leave_node {
                break;
            }
            new_parent = node;
            new_arc = old_arc;
            new_flow = old_flow;
            node = old_parent as usize;
        }

        // refresh depth and potential over the re-hung subtree
        let mut stack = vec![attach as u32];
        while let Some(x) = stack.pop() {
            let xu = x as usize;
            let p = self.parent[xu] as usize;
            self.depth[xu] = self.depth[p] + 1;
            let (from, _, cost) = self.arcs[self.up_arc[xu] as usize];
            self.pi[xu] = if from as usize == xu {
                // arc x -> parent: 0 = c - pi_x + pi_p
                cost + self.pi[p]
            } else {
                self.pi[p] - cost
            };
            stack.extend(self.children[xu].iter().copied());
        }
        theta
    }

    fn total_cost(&self) -> i128 {
        let mut acc: i128 = 0;
        for (node, &arc) in self.up_arc.iter().enumerate() {
            if arc == u32::MAX {
                continue;
            }
            let (_, _, cost) = self.arcs[arc as usize];
            acc += cost as i128 * self.up_flow[node] as i128;
            let _ = node;
        }
        acc
    }
}
