//! Classical random graphs `G(N, p)` and small-subgraph appearance.
//!
//! Containment is exact: a backtracking search that maps pattern vertices
//! one at a time, growing along pattern edges so each new vertex is chosen
//! among the neighbours of an already-placed one.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::rng::{self, experiment};

/// Above this node count the sampler switches from per-pair draws to
/// geometric skipping.
pub const PER_PAIR_LIMIT: usize = 1 << 10;

pub type Node = u32;

/// Simple undirected graph with sorted adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    edges: BTreeSet<(Node, Node)>,
    adjacency: Vec<Vec<Node>>,
}

impl Graph {
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (Node, Node)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(invalid(format!("self-loop at {a}")));
            }
            if a as usize >= node_count || b as usize >= node_count {
                return Err(invalid(format!("edge ({a}, {b}) outside {node_count} nodes")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(invalid(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self::from_set(node_count, set))
    }

    fn from_set(node_count: usize, edges: BTreeSet<(Node, Node)>) -> Self {
        let mut adjacency = vec![Vec::new(); node_count];
        for &(a, b) in &edges {
            adjacency[a as usize].push(b);
            adjacency[b as usize].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Self { node_count, edges, adjacency }
    }

    pub fn empty(node_count: usize) -> Self {
        Self::from_set(node_count, BTreeSet::new())
    }

    pub fn complete(node_count: usize) -> Self {
        let n = node_count as Node;
        Self::from_set(node_count, (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect())
    }

    pub fn cycle(node_count: usize) -> Result<Self> {
        if node_count < 3 {
            return Err(invalid("a cycle needs at least three nodes"));
        }
        let n = node_count as Node;
        Self::new(node_count, (0..n).map(|a| (a, (a + 1) % n)))
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Node, Node)> + '_ {
        self.edges.iter().copied()
    }

    pub fn neighbors(&self, v: Node) -> &[Node] {
        &self.adjacency[v as usize]
    }

    pub fn degree(&self, v: Node) -> usize {
        self.adjacency[v as usize].len()
    }

    pub fn has_edge(&self, a: Node, b: Node) -> bool {
        self.adjacency
            .get(a as usize)
            .is_some_and(|list| list.binary_search(&b).is_ok())
    }

    /// Degree sequence, node order.
    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }
}

/// A small connected target subgraph `F = (V, E)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubgraphPattern {
    name: String,
    node_count: usize,
    /// Edges with `a < b`, sorted lexicographically.
    edges: Vec<(usize, usize)>,
}

impl SubgraphPattern {
    /// Builds a pattern; node count is one past the largest endpoint.
    pub fn new(name: impl Into<String>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(invalid(format!("self-loop at {a}")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(invalid(format!("duplicate edge ({a}, {b})")));
            }
        }
        let node_count = set.iter().map(|&(_, b)| b + 1).max().unwrap_or(0);
        if node_count == 0 {
            return Err(invalid("pattern needs at least one edge"));
        }
        let pattern = Self { name: name.into(), node_count, edges: set.into_iter().collect() };
        if !pattern.is_connected() {
            return Err(invalid(format!("pattern `{}` is not connected", pattern.name)));
        }
        Ok(pattern)
    }

    pub fn edge() -> Self {
        Self::new("edge", [(0, 1)]).expect("valid")
    }

    pub fn path3() -> Self {
        Self::new("path3", [(0, 1), (1, 2)]).expect("valid")
    }

    pub fn path4() -> Self {
        Self::new("path4", [(0, 1), (1, 2), (2, 3)]).expect("valid")
    }

    pub fn triangle() -> Self {
        Self::new("triangle", [(0, 1), (1, 2), (0, 2)]).expect("valid")
    }

    pub fn square() -> Self {
        Self::new("square", [(0, 1), (1, 2), (2, 3), (0, 3)]).expect("valid")
    }

    pub fn k4() -> Self {
        Self::new("k4", [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]).expect("valid")
    }

    /// Parses `edge`, `path3`, `path4`, `triangle`, `square`, `k4` or
    /// `custom:0-1,1-2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        match spec {
            "edge" => Ok(Self::edge()),
            "path3" => Ok(Self::path3()),
            "path4" => Ok(Self::path4()),
            "triangle" => Ok(Self::triangle()),
            "square" => Ok(Self::square()),
            "k4" | "K4" => Ok(Self::k4()),
            _ => {
                let list = spec
                    .strip_prefix("custom:")
                    .ok_or_else(|| invalid(format!("unknown pattern `{spec}`")))?;
                let edges = list
                    .split(',')
                    .map(|e| {
                        let (a, b) = e
                            .split_once('-')
                            .ok_or_else(|| invalid(format!("bad edge `{e}`, expected a-b")))?;
                        let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| invalid(format!("bad node `{s}`")));
                        Ok((parse(a)?, parse(b)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::new(spec, edges)
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `n`, the number of vertices.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// `l`, the number of edges.
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == v || b == v).count()
    }

    fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter_map(move |&(a, b)| {
            if a == v {
                Some(b)
            } else if b == v {
                Some(a)
            } else {
                None
            }
        })
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.node_count];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for w in self.neighbors(v) {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Vertex order for the search: highest degree first, then always the
    /// vertex with most already-placed neighbours. Each entry carries the
    /// placed neighbours of that vertex.
    fn search_order(&self) -> Vec<(usize, Vec<usize>)> {
        let n = self.node_count;
        let mut placed = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let first = (0..n).max_by_key(|&v| (self.degree(v), std::cmp::Reverse(v))).expect("non-empty");
        placed[first] = true;
        order.push((first, Vec::new()));
        while order.len() < n {
            let next = (0..n)
                .filter(|&v| !placed[v])
                .max_by_key(|&v| {
                    let back = self.neighbors(v).filter(|&w| placed[w]).count();
                    (back, self.degree(v), std::cmp::Reverse(v))
                })
                .expect("unplaced vertex");
            let back: Vec<usize> = self.neighbors(next).filter(|&w| placed[w]).collect();
            placed[next] = true;
            order.push((next, back));
        }
        order
    }
}

impl fmt::Display for SubgraphPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (n={}, l={})", self.name, self.node_count, self.edges.len())
    }
}

/// True iff `g` has a (not necessarily induced) subgraph isomorphic to `f`.
pub fn contains_subgraph(g: &Graph, f: &SubgraphPattern) -> bool {
    if f.node_count() > g.node_count() || f.edge_count() > g.edge_count() {
        return false;
    }
    let order = f.search_order();
    let degrees: Vec<usize> = order.iter().map(|(v, _)| f.degree(*v)).collect();
    let mut image = vec![Node::MAX; f.node_count()];
    let mut used = vec![false; g.node_count()];
    extend_embedding(g, &order, &degrees, 0, &mut image, &mut used)
}

fn extend_embedding(
    g: &Graph,
    order: &[(usize, Vec<usize>)],
    degrees: &[usize],
    depth: usize,
    image: &mut [Node],
    used: &mut [bool],
) -> bool {
    if depth == order.len() {
        return true;
    }
    let (v, back) = &order[depth];
    let try_candidate = |cand: Node, image: &mut [Node], used: &mut [bool]| -> bool {
        if used[cand as usize] || g.degree(cand) < degrees[depth] {
            return false;
        }
        if !back.iter().all(|&w| g.has_edge(cand, image[w])) {
            return false;
        }
        image[*v] = cand;
        used[cand as usize] = true;
        let found = extend_embedding(g, order, degrees, depth + 1, image, used);
        used[cand as usize] = false;
        found
    };
    match back.first() {
        None => (0..g.node_count() as Node).any(|cand| try_candidate(cand, image, used)),
        Some(&anchor) => {
            let pivot = image[anchor];
            g.neighbors(pivot).iter().any(|&cand| try_candidate(cand, image, used))
        }
    }
}

/// Exact rational number `num/den` with `den > 0`, in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Rational {
    pub num: i64,
    pub den: i64,
}

impl Rational {
    pub fn new(num: i64, den: i64) -> Result<Self> {
        if den == 0 {
            return Err(invalid("zero denominator"));
        }
        let g = gcd(num.unsigned_abs(), den.unsigned_abs()).max(1) as i64;
        let sign = den.signum();
        Ok(Self { num: sign * num / g, den: sign * den / g })
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// The exponent `-n/l` of the appearance threshold `p_c(N) = c·N^{-n/l}`.
pub fn critical_exponent(f: &SubgraphPattern) -> Result<Rational> {
    if f.edge_count() == 0 {
        return Err(Error::ThresholdUndefined);
    }
    Rational::new(-(f.node_count() as i64), f.edge_count() as i64)
}

/// Connection probability scaling `p(N) = c·N^z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingLaw {
    pub z: f64,
    pub c_coeff: f64,
}

impl ScalingLaw {
    pub fn new(z: f64, c_coeff: f64) -> Result<Self> {
        if !(z <= 0.0) || !(c_coeff > 0.0) || !c_coeff.is_finite() {
            return Err(invalid(format!("need z <= 0 and c > 0, got z={z}, c={c_coeff}")));
        }
        Ok(Self { z, c_coeff })
    }

    /// Classical edge probability `min(1, c·N^z)`.
    pub fn classical_p(&self, n: usize) -> f64 {
        (self.c_coeff * (n as f64).powf(self.z)).min(1.0)
    }

    /// Link entanglement degree `min(1, 2c·N^z)` of the quantum model.
    pub fn quantum_p(&self, n: usize) -> f64 {
        (2.0 * self.c_coeff * (n as f64).powf(self.z)).min(1.0)
    }
}

/// Edges of one `G(N, p_max)` sample with the uniform variate that admitted
/// each edge. The sample restricted to `u < p` is distributed as `G(N, p)`
/// for every `p ≤ p_max`, so thinning one sample couples all smaller `p`
/// monotonically.
#[derive(Debug, Clone)]
pub struct CoupledSample {
    node_count: usize,
    p_max: f64,
    /// Sorted by `u`.
    edges: Vec<(f64, Node, Node)>,
}

impl CoupledSample {
    pub fn draw<R: Rng + ?Sized>(node_count: usize, p_max: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_max) {
            return Err(invalid(format!("probability {p_max} outside [0, 1]")));
        }
        let mut edges = Vec::new();
        let n = node_count as Node;
        if p_max > 0.0 && node_count >= 2 {
            if node_count <= PER_PAIR_LIMIT {
                for a in 0..n {
                    for b in a + 1..n {
                        let u: f64 = rng.random();
                        if u < p_max {
                            edges.push((u, a, b));
                        }
                    }
                }
            } else {
                for (a, b) in geometric_pairs(node_count, p_max, rng) {
                    edges.push((p_max * rng.random::<f64>(), a, b));
                }
            }
        }
        edges.sort_by(|x, y| x.0.total_cmp(&y.0));
        Ok(Self { node_count, p_max, edges })
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    /// The graph of edges with `u < p`.
    pub fn graph_at(&self, p: f64) -> Graph {
        let k = self.edges.partition_point(|e| e.0 < p);
        self.prefix(k)
    }

    fn prefix(&self, k: usize) -> Graph {
        Graph::from_set(self.node_count, self.edges[..k].iter().map(|&(_, a, b)| (a, b)).collect())
    }

    /// Smallest `u` at which `f` appears, or `None` if it never does below
    /// `p_max`. The sample contains `f` at `p` iff the result is `< p`.
    pub fn appearance_threshold(&self, f: &SubgraphPattern) -> Option<f64> {
        if !contains_subgraph(&self.prefix(self.edges.len()), f) {
            return None;
        }
        // Containment is monotone in the prefix length.
        let (mut lo, mut hi) = (0, self.edges.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if contains_subgraph(&self.prefix(mid), f) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Some(self.edges[lo - 1].0)
    }
}

/// Pairs `(a, b)`, `a < b`, each included independently with probability
/// `p`, found by geometric skipping over the row-major pair order.
fn geometric_pairs<R: Rng + ?Sized>(node_count: usize, p: f64, rng: &mut R) -> Vec<(Node, Node)> {
    let mut out = Vec::new();
    if node_count < 2 || p <= 0.0 {
        return out;
    }
    let geo = Geometric::new(p).expect("p in (0, 1]");
    let n = node_count as u64;
    // Cursor sits just before column `b` in row `a`.
    let (mut a, mut b) = (0u64, 0u64);
    loop {
        b += geo.sample(rng) + 1;
        while b >= n {
            let overflow = b - n;
            a += 1;
            if a + 1 >= n {
                return out;
            }
            b = a + 1 + overflow;
        }
        out.push((a as Node, b as Node));
    }
}

/// Samples `G(N, p)`: every pair is an edge independently with probability `p`.
pub fn sample_gnp<R: Rng + ?Sized>(node_count: usize, p: f64, rng: &mut R) -> Result<Graph> {
    Ok(CoupledSample::draw(node_count, p, rng)?.graph_at(p))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub z: f64,
    pub p: f64,
    pub trials: usize,
    pub hits: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub pattern: String,
    pub c_coeff: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Half-appearance exponent at `n` by linear interpolation between the
    /// first grid point with `fraction >= 1/2` and its predecessor.
    pub fn crossing(&self, n: usize) -> Option<f64> {
        let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.n == n).collect();
        let i = rows.iter().position(|r| r.fraction >= 0.5)?;
        if i == 0 {
            return Some(rows[0].z);
        }
        let (lo, hi) = (rows[i - 1], rows[i]);
        let t = (0.5 - lo.fraction) / (hi.fraction - lo.fraction);
        Some(lo.z + t * (hi.z - lo.z))
    }
}

/// Fraction of `G(N, min(1, c·N^z))` samples containing `f`, over a grid of
/// `(N, z)`. All `z` for one trial share a coupled sample, so the fractions
/// are non-decreasing in `z` for every `N`.
pub fn threshold_sweep(
    f: &SubgraphPattern,
    ns: &[usize],
    zs: &[f64],
    c_coeff: f64,
    trials: usize,
    seed: u64,
) -> Result<SweepResult> {
    if trials == 0 {
        return Err(invalid("trials must be at least 1"));
    }
    let mut zs = zs.to_vec();
    zs.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(ns.len() * zs.len());
    for &n in ns {
        let laws = zs
            .iter()
            .map(|&z| ScalingLaw::new(z, c_coeff))
            .collect::<Result<Vec<_>>>()?;
        let ps: Vec<f64> = laws.iter().map(|l| l.classical_p(n)).collect();
        let p_max = ps.iter().copied().fold(0.0, f64::max);
        let thresholds = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng::stream(seed, experiment::SWEEP, ((n as u64) << 32) | t as u64);
                CoupledSample::draw(n, p_max, &mut rng).map(|s| s.appearance_threshold(f))
            })
            .collect::<Result<Vec<_>>>()?;
        for (&z, &p) in zs.iter().zip(&ps) {
            let hits = thresholds.iter().filter(|u| u.is_some_and(|u| u < p)).count();
            rows.push(SweepRow { n, z, p, trials, hits, fraction: hits as f64 / trials as f64 });
        }
    }
    Ok(SweepResult { pattern: f.name().to_string(), c_coeff, rows })
}
