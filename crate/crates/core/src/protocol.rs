//! LOCC extraction of a target subgraph state `|F⟩` from a quantum random
//! graph.
//!
//! The chain has four steps:
//!
//! 1. Harvest nodes whose degree-counting outcome is `m = 1`. They hold the
//!    perfect-matching superposition `|K_c'⟩`, which is shrunk two nodes at a
//!    time down to `|K_c⟩` with `c = n + D`, `D = d²`, `d = 2^l`.
//! 2. Keep nodes `0..n`, measure every link between kept nodes (success when
//!    all read `0`), then measure the other `D` nodes in the Fourier basis
//!    and undo the phases at the kept nodes. The kept nodes end in
//!    `Σ_{i_1≠…≠i_n} |i_1…i_n⟩` over `D` levels.
//! 3. Split every kept `D`-level node into two `d`-level halves, measure one
//!    half in the Fourier basis and post-select `k = 1, …, 1, d−n+1`. Only
//!    the `n`-party GHZ state of dimension `d` survives.
//! 4. Map the GHZ state onto `⊗_e |Φ+⟩_e` with one local element per node.
//!
//! Native `|K_c⟩` uses the qubit labels of [`crate::network`]: `q{i}.{j}` is
//! node `i`'s qubit for its link to `j`, and a matched pair reads `|11⟩`.
//! In the relabeled form node `i` is a single qudit `n{i}` of dimension
//! `c−1` whose level is the round-robin colour of its matched edge.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::graph::SubgraphPattern;
use crate::network::{qubit_label, sample_pm_outcomes};
use crate::state::{
    apply_element, fidelity, roots_of_unity, superpose, MeasurementElement, MeasurementSet, QuditRegister, Site,
    SparseState, ONE, ZERO,
};

/// Largest `|K_c⟩` simulated in exact or sampled mode.
pub const EXACT_NODE_LIMIT: usize = 8;

/// Post-selected branches whose corrected state reaches this fidelity with
/// the step-2 target are accepted.
pub const ACCEPT_FIDELITY: f64 = 1.0 - 1e-9;

/// Cap on the number of terms of `Σ_{i_1≠…≠i_n}|i_1…i_n⟩` built explicitly.
pub const KETD_TERM_LIMIT: f64 = (1u64 << 20) as f64;

/// All perfect matchings of `nodes`, each as pairs `(a, b)` with `a < b`,
/// in lexicographic order.
pub fn perfect_matchings(nodes: &[usize]) -> Vec<Vec<(usize, usize)>> {
    if nodes.is_empty() {
        return vec![Vec::new()];
    }
    if nodes.len() % 2 == 1 {
        return Vec::new();
    }
    let first = nodes[0];
    let mut out = Vec::new();
    for k in 1..nodes.len() {
        let rest: Vec<usize> = nodes[1..].iter().copied().filter(|&v| v != nodes[k]).collect();
        for mut tail in perfect_matchings(&rest) {
            tail.insert(0, (first, nodes[k]));
            out.push(tail);
        }
    }
    out
}

/// `(c−1)!!`, the number of perfect matchings of `K_c`.
pub fn double_factorial_odd(c: usize) -> u64 {
    (1..c as u64).step_by(2).product()
}

/// Level (1-based) of edge `{i, j}` in the round-robin 1-factorization of
/// `K_c`: the `c−1` colour classes are perfect matchings, so both ends of a
/// matched edge agree on it.
pub fn kc_level(c: usize, i: usize, j: usize) -> u16 {
    debug_assert!(c.is_multiple_of(2) && i != j && i < c && j < c);
    let m = c - 1;
    let round = if i == m {
        j
    } else if j == m {
        i
    } else {
        // i + j ≡ 2r (mod m), m odd.
        (i + j) * (m + 1) / 2 % m
    };
    round as u16 + 1
}

/// Labels of the native `|K_c⟩` register, node-major.
pub fn native_labels(c: usize) -> Vec<String> {
    (0..c)
        .flat_map(|i| (0..c).filter(move |&j| j != i).map(move |j| qubit_label(i, j)))
        .collect()
}

fn native_position(c: usize, i: usize, j: usize) -> usize {
    i * (c - 1) + if j < i { j } else { j - 1 }
}

fn native_index(c: usize, matching: &[(usize, usize)]) -> Vec<u16> {
    let mut index = vec![ZERO; c * (c - 1)];
    for &(a, b) in matching {
        index[native_position(c, a, b)] = ONE;
        index[native_position(c, b, a)] = ONE;
    }
    index
}

/// Equal-amplitude superposition of the given matchings on the native
/// `K_c` register.
pub fn matching_superposition(c: usize, matchings: &[Vec<(usize, usize)>]) -> Result<SparseState> {
    let register = QuditRegister::qubits(native_labels(c))?;
    SparseState::normalized(
        register,
        matchings.iter().map(|m| (native_index(c, m), Complex64::new(1.0, 0.0))),
    )
}

/// Element mapping a node's weight-one qubit configurations onto one qudit:
/// the configuration whose `|1⟩` sits at position `p` goes to `level(p)`.
/// Other configurations are annihilated, so the element is an isometry on
/// the subspace the protocol states live in.
fn weight_one_relabel(
    label: String,
    sites: Vec<Site>,
    out: Site,
    level: impl Fn(usize) -> Option<u16>,
) -> Result<MeasurementElement> {
    MeasurementElement::from_fn(label, sites, vec![out], |t| {
        let ones: Vec<usize> = t.iter().enumerate().filter(|(_, &v)| v == ONE).map(|(p, _)| p).collect();
        match ones.as_slice() {
            [p] => level(*p).map(|l| vec![(vec![l], Complex64::new(1.0, 0.0))]).unwrap_or_default(),
            _ => Vec::new(),
        }
    })
}

/// Applies an element that must succeed with certainty.
fn apply_certain(state: &SparseState, element: &MeasurementElement) -> Result<SparseState> {
    let rec = apply_element(state, element)?;
    match rec.post_state {
        Some(post) if (rec.probability - 1.0).abs() < 1e-9 => Ok(post),
        _ => Err(invalid(format!("element `{}` is not certain (p = {})", rec.label, rec.probability))),
    }
}

/// `|K_c⟩` in native and relabeled form.
#[derive(Debug, Clone)]
pub struct MatchingState {
    c_nodes: usize,
    native: SparseState,
    relabeled: SparseState,
}

impl MatchingState {
    /// Wraps a native-form state on the `K_c` register and derives the
    /// relabeled form.
    pub fn from_native(c_nodes: usize, native: SparseState) -> Result<Self> {
        let relabeled = relabel_native(c_nodes, &native)?;
        Ok(Self { c_nodes, native, relabeled })
    }

    pub fn c_nodes(&self) -> usize {
        self.c_nodes
    }

    pub fn native(&self) -> &SparseState {
        &self.native
    }

    pub fn relabeled(&self) -> &SparseState {
        &self.relabeled
    }
}

/// Equal-amplitude superposition of all `(c−1)!!` perfect matchings of `K_c`.
pub fn build_kc(c: usize) -> Result<MatchingState> {
    if c % 2 == 1 {
        return Err(Error::OddNodeCount(c));
    }
    if c < 2 {
        return Err(invalid("K_c needs at least two nodes"));
    }
    let nodes: Vec<usize> = (0..c).collect();
    let native = matching_superposition(c, &perfect_matchings(&nodes))?;
    MatchingState::from_native(c, native)
}

/// Relabeled form of `m`: `c` qudits of dimension `c−1`.
pub fn relabel_kc(m: &MatchingState) -> Result<SparseState> {
    relabel_native(m.c_nodes, &m.native)
}

fn relabel_native(c: usize, native: &SparseState) -> Result<SparseState> {
    let mut state = native.clone();
    for i in 0..c {
        let partners: Vec<usize> = (0..c).filter(|&j| j != i).collect();
        let sites = partners.iter().map(|&j| Site::qubit(qubit_label(i, j))).collect();
        let element = weight_one_relabel(format!("relabel n{i}"), sites, Site::new(format!("n{i}"), c - 1), |p| {
            Some(kc_level(c, i, partners[p]))
        })?;
        state = apply_certain(&state, &element)?;
    }
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct ReduceBranch {
    /// Node matched to the measured node in this branch.
    pub partner: usize,
    pub probability: f64,
    /// Remaining `|K_{c−2}⟩`, nodes renumbered in order.
    pub state: MatchingState,
}

/// Measures every qubit of `node` in the computational basis. Exactly one
/// reads `|1⟩`; that partner and `node` then factor out. Returns every
/// branch.
pub fn reduce_kc_branches(m: &MatchingState, node: usize) -> Result<Vec<ReduceBranch>> {
    let c = m.c_nodes;
    if c < 4 {
        return Err(invalid("reduction needs at least four nodes"));
    }
    if node >= c {
        return Err(invalid(format!("node {node} outside 0..{c}")));
    }
    let partners: Vec<usize> = (0..c).filter(|&j| j != node).collect();
    let sites: Vec<Site> = partners.iter().map(|&j| Site::qubit(qubit_label(node, j))).collect();
    let elements = partners
        .iter()
        .enumerate()
        .map(|(p, &u)| {
            MeasurementElement::from_fn(format!("link {node}-{u}"), sites.clone(), vec![], |t| {
                let hit = t.iter().enumerate().all(|(q, &v)| (v == ONE) == (q == p));
                if hit {
                    vec![(vec![], Complex64::new(1.0, 0.0))]
                } else {
                    Vec::new()
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut branches = Vec::new();
    for (element, &u) in elements.iter().zip(&partners) {
        let rec = apply_element(&m.native, element)?;
        let Some(post) = rec.post_state else { continue };
        let gone = [node, u];
        let mut drop: Vec<String> = (0..c).filter(|&j| j != u).map(|j| qubit_label(u, j)).collect();
        for k in (0..c).filter(|k| !gone.contains(k)) {
            drop.push(qubit_label(k, node));
            drop.push(qubit_label(k, u));
        }
        let kept = post.discard_product_sites(&drop)?;
        let remaining: Vec<usize> = (0..c).filter(|k| !gone.contains(k)).collect();
        let renumber = |old: usize| remaining.binary_search(&old).expect("remaining node");
        let renamed = kept.rename(|label| {
            let (i, j) = label[1..].split_once('.').expect("native label");
            qubit_label(renumber(i.parse().expect("node")), renumber(j.parse().expect("node")))
        })?;
        branches.push(ReduceBranch {
            partner: u,
            probability: rec.probability,
            state: MatchingState::from_native(c - 2, renamed)?,
        });
    }
    Ok(branches)
}

/// Samples one reduction of the last node; returns the new state, the
/// probability of the observed outcome and the partner that factored out.
pub fn reduce_kc<R: Rng + ?Sized>(m: &MatchingState, rng: &mut R) -> Result<(MatchingState, f64, usize)> {
    let branches = reduce_kc_branches(m, m.c_nodes - 1)?;
    let b = sample_index(branches.iter().map(|b| b.probability), rng);
    let branch = branches.into_iter().nth(b).expect("index in range");
    Ok((branch.state, branch.probability, branch.partner))
}

fn sample_index<R: Rng + ?Sized>(weights: impl IntoIterator<Item = f64>, rng: &mut R) -> usize {
    let weights: Vec<f64> = weights.into_iter().collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Result of the step-1 harvest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Harvest {
    /// Nodes that returned `m = 1`.
    pub harvested: usize,
    /// Nodes that returned `m ≥ 2`; any such node spoils the matching
    /// structure and the harvest is discarded.
    pub higher_degree: usize,
    /// Pairwise reductions applied to reach the target.
    pub reductions: usize,
    pub achieved: usize,
    pub success: bool,
}

/// Degree-counting harvest on `|G_{N,p}⟩` with `p = 2c·N^{-2}`, using the
/// classical outcome distribution, followed by reductions down to
/// `target_c` nodes. Each reduction succeeds with certainty.
pub fn step1_harvest<R: Rng + ?Sized>(n: usize, c_coeff: f64, target_c: usize, rng: &mut R) -> Result<Harvest> {
    step1_harvest_with_loss(n, c_coeff, 0.0, target_c, rng)
}

/// Harvest when each link independently collapses to vacuum with
/// probability `eps`; only intact links can read `|11⟩`.
pub fn step1_harvest_with_loss<R: Rng + ?Sized>(
    n: usize,
    c_coeff: f64,
    eps: f64,
    target_c: usize,
    rng: &mut R,
) -> Result<Harvest> {
    if target_c % 2 == 1 {
        return Err(Error::OddNodeCount(target_c));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(invalid(format!("eps = {eps} outside [0, 1]")));
    }
    let p = 2.0 * c_coeff / (n as f64 * n as f64);
    if !(0.0..=1.0).contains(&p) || !(c_coeff > 0.0) {
        return Err(invalid(format!("p = 2c/N^2 = {p} outside (0, 1]")));
    }
    let stats = sample_pm_outcomes(n, p * (1.0 - eps), rng)?;
    let harvested = stats.count(1);
    let higher_degree: usize = stats.counts.iter().skip(2).sum();
    let success = higher_degree == 0 && harvested >= target_c;
    let reductions = if success { (harvested - target_c) / 2 } else { 0 };
    Ok(Harvest {
        harvested,
        higher_degree,
        reductions,
        achieved: if success { target_c } else { harvested },
        success,
    })
}

/// The target `F` with the sizes the construction needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgraphTarget {
    pub pattern: SubgraphPattern,
    /// `d = 2^l`.
    pub d: usize,
    /// `D = d²`.
    #[serde(rename = "D")]
    pub big_d: usize,
    /// `c = n + D`.
    pub c_nodes: usize,
}

impl SubgraphTarget {
    pub fn new(pattern: SubgraphPattern) -> Result<Self> {
        let l = pattern.edge_count();
        if l > 7 {
            return Err(Error::TooLarge(format!("{l} edges: d = 2^{l} overflows the index width")));
        }
        let d = 1usize << l;
        let big_d = d * d;
        let c_nodes = pattern.node_count() + big_d;
        Ok(Self { pattern, d, big_d, c_nodes })
    }

    pub fn n(&self) -> usize {
        self.pattern.node_count()
    }

    pub fn l(&self) -> usize {
        self.pattern.edge_count()
    }
}

/// Labels of the kept nodes after step 2.
pub fn kept_labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("k{i}")).collect()
}

/// Normalized `Σ_{i_1≠…≠i_n} |i_1…i_n⟩` over `big_d` levels.
pub fn distinct_index_state(n: usize, big_d: usize, labels: &[String]) -> Result<SparseState> {
    if n == 0 || n > big_d || labels.len() != n {
        return Err(invalid(format!("need 1 <= n <= D and n labels, got n={n}, D={big_d}")));
    }
    let terms: f64 = (0..n).map(|i| (big_d - i) as f64).product();
    if terms > KETD_TERM_LIMIT {
        return Err(Error::TooLarge(format!("{terms} terms")));
    }
    let mut out = Vec::with_capacity(terms as usize);
    let mut current = Vec::with_capacity(n);
    fn fill(n: usize, big_d: usize, current: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
        if current.len() == n {
            out.push(current.clone());
            return;
        }
        for v in 1..=big_d as u16 {
            if !current.contains(&v) {
                current.push(v);
                fill(n, big_d, current, out);
                current.pop();
            }
        }
    }
    fill(n, big_d, &mut current, &mut out);
    let amp = Complex64::new(1.0, 0.0);
    SparseState::normalized(QuditRegister::uniform(labels.iter().cloned(), big_d)?, out.into_iter().map(|t| (t, amp)))
}

/// Step 2a: measure one qubit of every link among the kept nodes `0..n`
/// and post-select `|0⟩`. Returns the native state with those links
/// removed and the success probability, or `None` if impossible.
pub fn carve_links(native: &SparseState, c: usize, n: usize) -> Result<Option<(SparseState, f64)>> {
    let mut state = native.clone();
    let mut probability = 1.0;
    for i in 0..n {
        for j in i + 1..n {
            let element = MeasurementElement::basis_bra(Site::qubit(qubit_label(i, j)), ZERO)?;
            let rec = apply_element(&state, &element)?;
            let Some(post) = rec.post_state else { return Ok(None) };
            probability *= rec.probability;
            state = post.discard_product_sites(&[qubit_label(j, i)])?;
        }
    }
    let _ = c;
    Ok(Some((state, probability)))
}

/// Maps the carved native state to qudits: kept node `i` becomes `k{i}`
/// with level `x − n + 1` for partner `x`; node `x ≥ n` becomes `m{x}` with
/// its round-robin level.
fn relabel_carved(state: &SparseState, c: usize, n: usize) -> Result<SparseState> {
    let big_d = c - n;
    let mut state = state.clone();
    for i in 0..n {
        let partners: Vec<usize> = (n..c).collect();
        let sites = partners.iter().map(|&x| Site::qubit(qubit_label(i, x))).collect();
        let element = weight_one_relabel(format!("relabel k{i}"), sites, Site::new(format!("k{i}"), big_d), |p| {
            Some((partners[p] - n + 1) as u16)
        })?;
        state = apply_certain(&state, &element)?;
    }
    for x in n..c {
        let partners: Vec<usize> = (0..c).filter(|&j| j != x).collect();
        let sites = partners.iter().map(|&j| Site::qubit(qubit_label(x, j))).collect();
        let element = weight_one_relabel(format!("relabel m{x}"), sites, Site::new(format!("m{x}"), c - 1), |p| {
            Some(kc_level(c, x, partners[p]))
        })?;
        state = apply_certain(&state, &element)?;
    }
    Ok(state)
}

/// Diagonal phases `ω^{α_i(ℓ)}`, `ω = exp(2πi/(c−1))`, one table per
/// kept node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseCorrection {
    modulus: usize,
    alpha: Vec<Vec<u64>>,
}

impl PhaseCorrection {
    /// Applies the phases to a state over the kept nodes.
    pub fn apply(&self, state: &SparseState) -> Result<SparseState> {
        let roots = roots_of_unity(self.modulus);
        let mut state = state.clone();
        let sites = state.register().sites().to_vec();
        if sites.len() != self.alpha.len() {
            return Err(Error::RegisterMismatch);
        }
        for (site, alpha) in sites.into_iter().zip(&self.alpha) {
            let element = MeasurementElement::diagonal(format!("phase {}", site.label), vec![site], |t| {
                roots[alpha[t[0] as usize - 1] as usize]
            })?;
            state = apply_certain(&state, &element)?;
        }
        Ok(state)
    }
}

/// Fits one diagonal unitary per kept node that makes all amplitudes equal.
///
/// After the measurements every amplitude is a `(c−1)`-th root of unity
/// times a common modulus. Node `i` at level `ℓ` picks up `ω^{α_i(ℓ)}`,
/// and `Σ_i α_i(x_i) ≡ −φ(x)` is solved over `GF(c−1)` for every term `x`.
/// Returns `None` when no solution exists or the moduli differ.
pub fn fit_phase_correction(state: &SparseState, c: usize) -> Result<Option<PhaseCorrection>> {
    let m = c - 1;
    let dims = state.register().dims();
    if m == 1 {
        return Ok(Some(PhaseCorrection { modulus: 1, alpha: dims.iter().map(|&d| vec![0; d]).collect() }));
    }
    if !(2..m).all(|q| !m.is_multiple_of(q)) {
        return Err(Error::TooLarge(format!("phase fitting needs c - 1 prime, got {m}")));
    }
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let vars: usize = dims.iter().sum();
    let modulus = state.terms().next().map(|(_, a)| a.norm()).unwrap_or(0.0);
    let mut rows = Vec::with_capacity(state.len());
    for (index, amp) in state.terms() {
        if (amp.norm() - modulus).abs() > 1e-9 {
            return Ok(None);
        }
        let turns = amp.arg() / std::f64::consts::TAU * m as f64;
        let phase = turns.round();
        if (turns - phase).abs() > 1e-6 {
            return Ok(None);
        }
        let mut row = vec![0u64; vars + 1];
        for (i, &v) in index.iter().enumerate() {
            row[offsets[i] + v as usize - 1] = 1;
        }
        row[vars] = (-(phase as i64)).rem_euclid(m as i64) as u64;
        rows.push(row);
    }
    Ok(solve_mod_prime(rows, vars, m as u64).map(|x| PhaseCorrection {
        modulus: m,
        alpha: offsets.iter().zip(&dims).map(|(&o, &d)| x[o..o + d].to_vec()).collect(),
    }))
}

/// Solves an augmented system over `GF(p)`; free variables are set to 0.
fn solve_mod_prime(mut rows: Vec<Vec<u64>>, vars: usize, p: u64) -> Option<Vec<u64>> {
    let inverse = |a: u64| (1..p).find(|&b| a * b % p == 1).expect("p is prime");
    let mut pivots = Vec::new();
    let mut r = 0;
    for col in 0..vars {
        let Some(found) = (r..rows.len()).find(|&k| rows[k][col] != 0) else { continue };
        rows.swap(r, found);
        let inv = inverse(rows[r][col]);
        for v in rows[r].iter_mut() {
            *v = *v * inv % p;
        }
        for k in 0..rows.len() {
            if k != r && rows[k][col] != 0 {
                let f = rows[k][col];
                for j in 0..=vars {
                    rows[k][j] = (rows[k][j] + (p - f) * rows[r][j]) % p;
                }
            }
        }
        pivots.push(col);
        r += 1;
        if r == rows.len() {
            break;
        }
    }
    if rows[r..].iter().any(|row| row[vars] != 0) {
        return None;
    }
    let mut x = vec![0u64; vars];
    for (k, &col) in pivots.iter().enumerate() {
        x[col] = rows[k][vars];
    }
    Some(x)
}

/// How the kept-node phases are treated at the end of step 2.
#[derive(Debug, Clone)]
pub enum PhasePolicy {
    /// Leave the measured state as it is.
    Raw,
    /// Fit a correction to the branch itself.
    Fit,
    /// Apply a correction chosen beforehand for this outcome pattern.
    Given(PhaseCorrection),
}

/// One Fourier outcome pattern of step 2.
#[derive(Debug, Clone)]
pub struct Step2Branch {
    /// Fourier outcome `k` of nodes `n..c`, in node order.
    pub outcomes: Vec<usize>,
    /// Joint probability of the link and Fourier outcomes.
    pub probability: f64,
    /// Kept-node state after the phase policy.
    pub state: SparseState,
    /// Correction applied, if any.
    pub correction: Option<PhaseCorrection>,
    /// Fidelity of `state` with the normalized distinct-index state.
    pub fidelity: f64,
}

impl Step2Branch {
    pub fn accepted(&self) -> bool {
        self.fidelity >= ACCEPT_FIDELITY
    }
}

/// Every outcome of step 2 applied to a native-form state.
#[derive(Debug, Clone)]
pub struct Step2Tree {
    pub c: usize,
    pub n: usize,
    pub link_probability: f64,
    pub branches: Vec<Step2Branch>,
}

impl Step2Tree {
    pub fn accepted(&self) -> impl Iterator<Item = &Step2Branch> {
        self.branches.iter().filter(|b| b.accepted())
    }

    pub fn accepted_probability(&self) -> f64 {
        self.accepted().map(|b| b.probability).sum()
    }

    /// Accepted outcome patterns with the corrections they use.
    pub fn accepted_corrections(&self) -> BTreeMap<Vec<usize>, PhaseCorrection> {
        self.accepted()
            .filter_map(|b| b.correction.clone().map(|c| (b.outcomes.clone(), c)))
            .collect()
    }
}

fn check_step2_sizes(c: usize, n: usize) -> Result<()> {
    if c % 2 == 1 {
        return Err(Error::OddNodeCount(c));
    }
    if n == 0 || n > c - n {
        return Err(invalid(format!("need 1 <= n <= D, got n={n}, c={c}")));
    }
    Ok(())
}

fn finish_branch(
    state: SparseState,
    c: usize,
    n: usize,
    outcomes: Vec<usize>,
    probability: f64,
    policy: &PhasePolicy,
) -> Result<Step2Branch> {
    let correction = match policy {
        PhasePolicy::Raw => None,
        PhasePolicy::Fit => fit_phase_correction(&state, c)?,
        PhasePolicy::Given(correction) => Some(correction.clone()),
    };
    let state = match &correction {
        Some(correction) => correction.apply(&state)?,
        None => state,
    };
    let target = distinct_index_state(n, c - n, &kept_labels(n))?;
    let fidelity = fidelity(&state, &target)?;
    Ok(Step2Branch { outcomes, probability, state, correction, fidelity })
}

/// Explores every Fourier outcome of step 2 on `native` (a state on the
/// `K_c` register). Branches are in lexicographic outcome order.
pub fn step2_tree(native: &SparseState, c: usize, n: usize, policy: &PhasePolicy) -> Result<Step2Tree> {
    check_step2_sizes(c, n)?;
    let Some((carved, link_probability)) = carve_links(native, c, n)? else {
        return Ok(Step2Tree { c, n, link_probability: 0.0, branches: Vec::new() });
    };
    let relabeled = relabel_carved(&carved, c, n)?;
    let mut frontier = vec![(relabeled, Vec::new(), link_probability)];
    for x in n..c {
        let set = fourier_set(c, x)?;
        let mut next = Vec::new();
        for (state, outcomes, prob) in frontier {
            for (k, rec) in set.measure(&state)?.into_iter().enumerate() {
                if let Some(post) = rec.post_state {
                    let mut o: Vec<usize> = outcomes.clone();
                    o.push(k + 1);
                    next.push((post, o, prob * rec.probability));
                }
            }
        }
        frontier = next;
    }
    let branches = frontier
        .into_iter()
        .map(|(state, outcomes, probability)| finish_branch(state, c, n, outcomes, probability, policy))
        .collect::<Result<Vec<_>>>()?;
    Ok(Step2Tree { c, n, link_probability, branches })
}

fn fourier_set(c: usize, x: usize) -> Result<MeasurementSet> {
    let site = Site::new(format!("m{x}"), c - 1);
    MeasurementSet::complete(
        (1..=c - 1)
            .map(|k| MeasurementElement::fourier_bra(site.clone(), k))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Step 2 along one given Fourier outcome pattern. Returns `None` when the
/// pattern is impossible for this input.
pub fn step2_carve(
    native: &SparseState,
    c: usize,
    n: usize,
    outcomes: &[usize],
    policy: &PhasePolicy,
) -> Result<Option<Step2Branch>> {
    check_step2_sizes(c, n)?;
    if outcomes.len() != c - n {
        return Err(invalid(format!("need {} Fourier outcomes, got {}", c - n, outcomes.len())));
    }
    let Some((carved, mut probability)) = carve_links(native, c, n)? else { return Ok(None) };
    let mut state = relabel_carved(&carved, c, n)?;
    for (x, &k) in (n..c).zip(outcomes) {
        let rec = apply_element(&state, &MeasurementElement::fourier_bra(Site::new(format!("m{x}"), c - 1), k)?)?;
        let Some(post) = rec.post_state else { return Ok(None) };
        probability *= rec.probability;
        state = post;
    }
    finish_branch(state, c, n, outcomes.to_vec(), probability, policy).map(Some)
}

/// One term of the free-index expansion of `Σ_{i_1≠…≠i_n}|i_1…i_n⟩`.
#[derive(Debug, Clone)]
pub struct PartitionTerm {
    /// Set partition of the node positions `0..n`.
    pub blocks: Vec<Vec<usize>>,
    /// Möbius weight `Π_B (−1)^{|B|−1} (|B|−1)!`.
    pub weight: i64,
    /// Normalized `⊗_B |Φ_{|B|}^D⟩`, blocks placed on their positions.
    pub state: SparseState,
}

impl PartitionTerm {
    /// Block sizes in non-increasing order.
    pub fn shape(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.blocks.iter().map(Vec::len).collect();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s
    }
}

/// All set partitions of `0..n`, blocks in order of their smallest element.
pub fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new()];
    for v in 0..n {
        let mut next = Vec::new();
        for partition in out {
            for b in 0..partition.len() {
                let mut p: Vec<Vec<usize>> = partition.clone();
                p[b].push(v);
                next.push(p);
            }
            let mut p = partition;
            p.push(vec![v]);
            next.push(p);
        }
        out = next;
    }
    out
}

/// Inclusion–exclusion expansion over set partitions: summing
/// `weight · D^{r/2} · state` over all terms gives the unnormalized
/// distinct-index sum.
pub fn expand_partitions(n: usize, big_d: usize) -> Result<Vec<PartitionTerm>> {
    if n == 0 || big_d < 2 {
        return Err(invalid("need n >= 1 and D >= 2"));
    }
    let labels = kept_labels(n);
    let register = QuditRegister::uniform(labels, big_d)?;
    set_partitions(n)
        .into_iter()
        .map(|blocks| {
            let r = blocks.len();
            if (big_d as f64).powi(r as i32) > KETD_TERM_LIMIT * 16.0 {
                return Err(Error::TooLarge(format!("D^{r} terms")));
            }
            let weight = blocks
                .iter()
                .map(|b| {
                    let k = b.len() as i64;
                    let f: i64 = (1..k).product();
                    if (k - 1) % 2 == 0 { f } else { -f }
                })
                .product();
            let mut terms = Vec::new();
            let mut values = vec![1u16; r];
            loop {
                let mut index = vec![0u16; n];
                for (b, block) in blocks.iter().enumerate() {
                    for &pos in block {
                        index[pos] = values[b];
                    }
                }
                terms.push((index, Complex64::new(1.0, 0.0)));
                let mut carry = 0;
                while carry < r && values[carry] as usize == big_d {
                    values[carry] = 1;
                    carry += 1;
                }
                if carry == r {
                    break;
                }
                values[carry] += 1;
            }
            let state = SparseState::normalized(register.clone(), terms)?;
            Ok(PartitionTerm { blocks, weight, state })
        })
        .collect()
}

/// Sums the partition terms back into the normalized distinct-index state.
pub fn reconstruct_partitions(terms: &[PartitionTerm], big_d: usize) -> Result<SparseState> {
    let scaled: Vec<(Complex64, &SparseState)> = terms
        .iter()
        .map(|t| {
            let scale = t.weight as f64 * (big_d as f64).powf(t.blocks.len() as f64 / 2.0);
            (Complex64::new(scale, 0.0), &t.state)
        })
        .collect();
    Ok(superpose(&scaled)?.0)
}

/// Result of a post-selected step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub probability: f64,
    pub state: Option<SparseState>,
}

/// Labels of the surviving halves after step 3.
pub fn ghz_labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("k{i}.a")).collect()
}

/// Fourier outcome required at kept node `i` in step 3.
pub fn step3_pattern(n: usize, d: usize, i: usize) -> usize {
    if i + 1 == n {
        d + 1 - n
    } else {
        1
    }
}

/// Step 3 on a state over `k0..k{n−1}` of dimension `d²`: split every node
/// into `k{i}.a`, `k{i}.b`, measure each `k{i}.b` in the Fourier basis and
/// post-select [`step3_pattern`]. Probability is unconditioned on the
/// input's normalization, so it can be read as the surviving weight.
pub fn step3_extract_ghz(state: &SparseState, n: usize, d: usize) -> Result<StepOutcome> {
    if d < n {
        return Err(invalid(format!("need d >= n, got d={d}, n={n}")));
    }
    let mut s = state.clone();
    for i in 0..n {
        s = s.split_site(&format!("k{i}"), d, format!("k{i}.a"), format!("k{i}.b"))?;
    }
    let mut probability = 1.0;
    for i in 0..n {
        let k = step3_pattern(n, d, i);
        let element = MeasurementElement::fourier_bra(Site::new(format!("k{i}.b"), d), k)?;
        let rec = apply_element(&s, &element)?;
        match rec.post_state {
            Some(post) => {
                probability *= rec.probability;
                s = post;
            }
            None => return Ok(StepOutcome { probability: 0.0, state: None }),
        }
    }
    Ok(StepOutcome { probability, state: Some(s) })
}

/// Bit assignment for term `i` (1-based) of the expansion of `⊗_e |Φ+⟩_e`:
/// edges in lexicographic order, the first edge is the most significant bit.
fn term_bits(i: usize, l: usize) -> Vec<bool> {
    (0..l).map(|e| (i - 1) >> (l - 1 - e) & 1 == 1).collect()
}

/// Edge positions incident to `node`, in edge order.
fn incident_edges(pattern: &SubgraphPattern, node: usize) -> Vec<usize> {
    pattern
        .edges()
        .iter()
        .enumerate()
        .filter(|(_, &(a, b))| a == node || b == node)
        .map(|(e, _)| e)
        .collect()
}

/// Qubit labels node `j` holds in `|F⟩`, in edge order.
pub fn target_node_labels(pattern: &SubgraphPattern, node: usize) -> Vec<String> {
    incident_edges(pattern, node)
        .into_iter()
        .map(|e| {
            let (a, b) = pattern.edges()[e];
            qubit_label(node, if a == node { b } else { a })
        })
        .collect()
}

/// `|F⟩ = ⊗_e |Φ+⟩_e`, qubits ordered node-major as produced by step 4.
/// Built edge by edge and then permuted.
pub fn target_state(pattern: &SubgraphPattern) -> Result<SparseState> {
    let mut state: Option<SparseState> = None;
    let h = Complex64::new(1.0, 0.0);
    for &(a, b) in pattern.edges() {
        let pair = SparseState::normalized(
            QuditRegister::qubits([qubit_label(a, b), qubit_label(b, a)])?,
            [(vec![ZERO, ZERO], h), (vec![ONE, ONE], h)],
        )?;
        state = Some(match state {
            None => pair,
            Some(s) => s.tensor(&pair)?,
        });
    }
    let order: Vec<String> = (0..pattern.node_count()).flat_map(|j| target_node_labels(pattern, j)).collect();
    state.ok_or_else(|| invalid("pattern has no edges"))?.reorder(&order)
}

/// The two elements used at node `j` in step 4: the map
/// `d^{-1/2} Σ_i |φ_{i,j}⟩⟨i|` and its completion
/// `√(I − M†M)`, which keeps the qudit.
pub fn step4_elements(target: &SubgraphTarget, node: usize, input: &str) -> Result<[MeasurementElement; 2]> {
    let pattern = &target.pattern;
    let (d, l) = (target.d, target.l());
    let incident = incident_edges(pattern, node);
    let outputs: Vec<Site> = target_node_labels(pattern, node).into_iter().map(Site::qubit).collect();
    let local = |i: usize| -> Vec<u16> {
        let bits = term_bits(i, l);
        incident.iter().map(|&e| if bits[e] { ONE } else { ZERO }).collect()
    };
    let scale = 1.0 / (d as f64).sqrt();
    let site = Site::new(input, d);
    let map = MeasurementElement::from_fn(format!("F@{node}"), vec![site.clone()], outputs, |t| {
        vec![(local(t[0] as usize), Complex64::new(scale, 0.0))]
    })?;
    // M†M = (g/d)·P on each group of levels sharing a local pattern, P the
    // projector onto the group's uniform vector, g = 2^{l − deg}.
    let group = 1usize << (l - incident.len());
    let shift = ((1.0 - group as f64 / d as f64).sqrt() - 1.0) / group as f64;
    let complement = MeasurementElement::from_fn(format!("F@{node}:fail"), vec![site.clone()], vec![site], |t| {
        let i = t[0] as usize;
        let mine = local(i);
        (1..=d)
            .filter(|&i2| local(i2) == mine)
            .map(|i2| {
                let v = if i2 == i { 1.0 + shift } else { shift };
                (vec![i2 as u16], Complex64::new(v, 0.0))
            })
            .filter(|(_, c)| c.norm() > 0.0)
            .collect()
    })?;
    Ok([map, complement])
}

/// Step 4: apply the mapping element at every node of an `n`-site register
/// of dimension `d` (site `j` is node `j`).
pub fn step4_project(ghz: &SparseState, target: &SubgraphTarget) -> Result<StepOutcome> {
    let labels: Vec<String> = ghz.register().labels().map(String::from).collect();
    if labels.len() != target.n() || ghz.register().sites().iter().any(|s| s.dim != target.d) {
        return Err(invalid("step 4 needs n sites of dimension d"));
    }
    let mut s = ghz.clone();
    let mut probability = 1.0;
    for (j, label) in labels.iter().enumerate() {
        let [map, _] = step4_elements(target, j, label)?;
        let rec = apply_element(&s, &map)?;
        match rec.post_state {
            Some(post) => {
                probability *= rec.probability;
                s = post;
            }
            None => return Ok(StepOutcome { probability: 0.0, state: None }),
        }
    }
    Ok(StepOutcome { probability, state: Some(s) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: String,
    pub outcomes: Vec<String>,
    /// Probability of this step's accepted outcomes given success so far.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolTrace {
    pub target: String,
    pub mode: Mode,
    pub c_nodes: usize,
    pub d: usize,
    #[serde(rename = "D")]
    pub big_d: usize,
    /// `full` for steps 1–4, `steps3-4` when the chain starts from the
    /// exact step-2 output.
    pub chain: String,
    pub note: Option<String>,
    pub steps: Vec<StepRecord>,
    #[serde(rename = "p_F")]
    pub p_f: f64,
    pub success: bool,
    pub final_fidelity: Option<f64>,
}

impl ProtocolTrace {
    fn new(target: &SubgraphTarget, mode: Mode, chain: &str) -> Self {
        Self {
            target: target.pattern.name().to_string(),
            mode,
            c_nodes: target.c_nodes,
            d: target.d,
            big_d: target.big_d,
            chain: chain.to_string(),
            note: None,
            steps: Vec::new(),
            p_f: 0.0,
            success: false,
            final_fidelity: None,
        }
    }

    fn push(&mut self, step: &str, outcomes: Vec<String>, probability: f64) {
        self.steps.push(StepRecord { step: step.to_string(), outcomes, probability });
    }

    /// Product of the recorded step probabilities.
    pub fn step_product(&self) -> f64 {
        self.steps.iter().map(|s| s.probability).product()
    }
}

fn check_exact_size(target: &SubgraphTarget) -> Result<()> {
    if target.c_nodes % 2 == 1 {
        return Err(Error::OddNodeCount(target.c_nodes));
    }
    if target.c_nodes > EXACT_NODE_LIMIT {
        return Err(Error::TooLarge(format!("c = {} > {EXACT_NODE_LIMIT}", target.c_nodes)));
    }
    Ok(())
}

/// Outcome of steps 3 and 4 from a kept-node state.
struct Tail {
    p3: f64,
    p4: f64,
    final_state: Option<SparseState>,
}

fn run_tail(state: &SparseState, target: &SubgraphTarget) -> Result<Tail> {
    let s3 = step3_extract_ghz(state, target.n(), target.d)?;
    let Some(ghz) = s3.state else {
        return Ok(Tail { p3: 0.0, p4: 0.0, final_state: None });
    };
    let s4 = step4_project(&ghz, target)?;
    Ok(Tail { p3: s3.probability, p4: s4.probability, final_state: s4.state })
}

/// Step 1 in exact mode: `|K_{c+2}⟩` reduced at its last node over every
/// branch. Returns `|K_c⟩` and the outcome labels.
fn exact_step1(c: usize) -> Result<(MatchingState, Vec<String>, f64)> {
    let start = build_kc(c + 2)?;
    let reference = build_kc(c)?;
    let branches = reduce_kc_branches(&start, c + 1)?;
    let mut labels = Vec::new();
    let mut total = 0.0;
    for b in &branches {
        let f = fidelity(b.state.native(), reference.native())?;
        if f < 1.0 - 1e-12 {
            return Err(invalid(format!("reduction branch {} left fidelity {f}", b.partner)));
        }
        total += b.probability;
        labels.push(format!("reduce node {} partner {}", c + 1, b.partner));
    }
    Ok((reference, labels, total))
}

/// Runs steps 1–4 for `target`.
///
/// * Exact mode explores the whole outcome tree; `p_F` is the total weight
///   of the accepted leaves and the final fidelity is the worst over them.
/// * Sampled mode draws one branch per run from `runs` seeded streams and
///   returns one trace per run; `p_F` of a run is the probability of the
///   path it took. Step 1 is sampled on `N = harvest_n` nodes with
///   `c_coeff = 2c` and counts as a failed run when it falls short.
pub fn run_full_protocol(target: &SubgraphTarget, mode: Mode, runs: usize, seed: u64) -> Result<Vec<ProtocolTrace>> {
    check_exact_size(target)?;
    match mode {
        Mode::Exact => Ok(vec![run_exact(target)?]),
        Mode::Sampled => run_sampled(target, runs, seed, DEFAULT_HARVEST_N),
    }
}

/// Network size used for the sampled step-1 harvest.
pub const DEFAULT_HARVEST_N: usize = 10_000;

fn run_exact(target: &SubgraphTarget) -> Result<ProtocolTrace> {
    let (c, n) = (target.c_nodes, target.n());
    let mut trace = ProtocolTrace::new(target, Mode::Exact, "full");
    let (kc, labels, p1) = exact_step1(c)?;
    trace.push("step1_harvest", labels, p1);

    let tree = step2_tree(kc.native(), c, n, &PhasePolicy::Fit)?;
    let accepted: Vec<&Step2Branch> = tree.accepted().collect();
    let p2 = tree.accepted_probability();
    trace.push(
        "step2_carve",
        vec![
            "links=0".to_string(),
            format!("accepted {} of {} Fourier patterns", accepted.len(), tree.branches.len()),
        ],
        p2,
    );

    let expected = target_state(&target.pattern)?;
    let tails: Vec<(f64, Tail)> = accepted
        .par_iter()
        .map(|b| run_tail(&b.state, target).map(|t| (b.probability, t)))
        .collect::<Result<Vec<_>>>()?;
    let w3: f64 = tails.iter().map(|(w, t)| w * t.p3).sum();
    let w4: f64 = tails.iter().map(|(w, t)| w * t.p3 * t.p4).sum();
    let mut worst: Option<f64> = None;
    for (_, t) in &tails {
        if let Some(s) = &t.final_state {
            let f = fidelity(s, &expected)?;
            worst = Some(worst.map_or(f, |w: f64| w.min(f)));
        }
    }
    let cond = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    trace.push("step3_extract_ghz", step3_labels(n, target.d), cond(w3, p2));
    trace.push("step4_project", vec!["F".to_string()], cond(w4, w3));
    trace.p_f = p1 * w4;
    trace.success = trace.p_f > 0.0;
    trace.final_fidelity = worst;
    Ok(trace)
}

fn step3_labels(n: usize, d: usize) -> Vec<String> {
    (0..n).map(|i| format!("k{i}.b:k={}", step3_pattern(n, d, i))).collect()
}

fn run_sampled(target: &SubgraphTarget, runs: usize, seed: u64, harvest_n: usize) -> Result<Vec<ProtocolTrace>> {
    let c = target.c_nodes;
    let kc = build_kc(c)?;
    // The accepted Fourier patterns are fixed by the protocol, not by the run.
    let accepted = step2_tree(kc.native(), c, target.n(), &PhasePolicy::Fit)?.accepted_corrections();
    let expected = target_state(&target.pattern)?;
    (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = crate::rng::stream(seed, crate::rng::experiment::PROTOCOL, r as u64);
            sample_run(target, &kc, &accepted, &expected, harvest_n, &mut rng)
        })
        .collect()
}

fn sample_run<R: Rng + ?Sized>(
    target: &SubgraphTarget,
    kc: &MatchingState,
    accepted: &BTreeMap<Vec<usize>, PhaseCorrection>,
    expected: &SparseState,
    harvest_n: usize,
    rng: &mut R,
) -> Result<ProtocolTrace> {
    let (c, n) = (target.c_nodes, target.n());
    let mut trace = ProtocolTrace::new(target, Mode::Sampled, "full");
    let harvest = step1_harvest(harvest_n, 2.0 * c as f64, c, rng)?;
    trace.push(
        "step1_harvest",
        vec![format!("harvested={}", harvest.harvested), format!("higher_degree={}", harvest.higher_degree)],
        if harvest.success { 1.0 } else { 0.0 },
    );
    if !harvest.success {
        trace.note = Some("harvest fell short".into());
        return Ok(trace);
    }
    // Step 2a, sampled link by link.
    let Some((carved, p_links)) = carve_links(kc.native(), c, n)? else {
        trace.note = Some("kept nodes linked".into());
        return Ok(trace);
    };
    if rng.random::<f64>() >= p_links {
        trace.push("step2_carve", vec!["links!=0".into()], p_links);
        trace.note = Some("kept nodes linked".into());
        return Ok(trace);
    }
    let mut state = relabel_carved(&carved, c, n)?;
    let mut outcomes = Vec::with_capacity(c - n);
    let mut p2 = p_links;
    for x in n..c {
        let records = fourier_set(c, x)?.measure(&state)?;
        let k = sample_index(records.iter().map(|r| r.probability), rng);
        p2 *= records[k].probability;
        outcomes.push(k + 1);
        state = records[k].post_state.clone().expect("sampled outcome is possible");
    }
    let labels = outcomes.iter().zip(n..c).map(|(k, x)| format!("m{x}:k={k}")).collect();
    trace.push("step2_carve", labels, p2);
    let Some(correction) = accepted.get(&outcomes) else {
        trace.note = Some("Fourier pattern rejected".into());
        return Ok(trace);
    };
    let state = correction.apply(&state)?;
    let tail = run_tail(&state, target)?;
    trace.push("step3_extract_ghz", step3_labels(n, target.d), tail.p3);
    if rng.random::<f64>() >= tail.p3 {
        trace.note = Some("step 3 post-selection failed".into());
        return Ok(trace);
    }
    trace.push("step4_project", vec!["F".into()], tail.p4);
    if rng.random::<f64>() >= tail.p4 {
        trace.note = Some("step 4 complement outcome".into());
        return Ok(trace);
    }
    let final_state = tail.final_state.expect("successful tail has a state");
    trace.final_fidelity = Some(fidelity(&final_state, expected)?);
    trace.p_f = trace.step_product();
    trace.success = true;
    Ok(trace)
}

/// Steps 3 and 4 from the exact step-2 output, for targets whose `|K_c⟩`
/// cannot be built (odd `c`) or is too large to simulate.
pub fn run_from_distinct_state(target: &SubgraphTarget) -> Result<ProtocolTrace> {
    let n = target.n();
    let mut trace = ProtocolTrace::new(target, Mode::Exact, "steps3-4");
    let start = distinct_index_state(n, target.big_d, &kept_labels(n))?;
    let tail = run_tail(&start, target)?;
    trace.push("step3_extract_ghz", step3_labels(n, target.d), tail.p3);
    trace.push("step4_project", vec!["F".into()], tail.p4);
    if let Some(s) = &tail.final_state {
        trace.final_fidelity = Some(fidelity(s, &target_state(&target.pattern)?)?);
    }
    trace.p_f = tail.p3 * tail.p4;
    trace.success = trace.p_f > 0.0;
    Ok(trace)
}

/// Step 4 alone, from `|Φ_n^d⟩`.
pub fn run_from_ghz(target: &SubgraphTarget) -> Result<ProtocolTrace> {
    let mut trace = ProtocolTrace::new(target, Mode::Exact, "step4");
    let ghz = SparseState::ghz(target.d, target.d, ghz_labels(target.n()))?;
    let s4 = step4_project(&ghz, target)?;
    trace.push("step4_project", vec!["F".into()], s4.probability);
    if let Some(s) = &s4.state {
        trace.final_fidelity = Some(fidelity(s, &target_state(&target.pattern)?)?);
    }
    trace.p_f = s4.probability;
    trace.success = trace.p_f > 0.0;
    Ok(trace)
}

/// Number of independent sets `L` such that at least one succeeds with
/// probability `1 − epsilon_fail`, and the number of links discarded
/// between sets when `N` nodes are split evenly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AmplificationPlan {
    pub sets: u64,
    pub nodes_per_set: usize,
    pub discarded_links: u64,
}

pub fn amplification_plan(n: usize, p_f: f64, epsilon_fail: f64) -> Result<AmplificationPlan> {
    if !(p_f > 0.0 && p_f <= 1.0) {
        return Err(invalid(format!("p_F = {p_f} outside (0, 1]")));
    }
    let sets = repetitions(p_f, epsilon_fail)?;
    let per = if sets == 0 { 0 } else { n / sets as usize };
    let total = n as u64 * (n as u64).saturating_sub(1) / 2;
    let inner = sets * (per as u64 * (per as u64).saturating_sub(1) / 2);
    let leftover = (n - per * sets as usize) as u64;
    let leftover_inner = leftover * leftover.saturating_sub(1) / 2;
    Ok(AmplificationPlan {
        sets,
        nodes_per_set: per,
        discarded_links: total.saturating_sub(inner + leftover_inner),
    })
}

/// Smallest `r ≥ 1` with `(1 − p)^r ≤ epsilon_fail`.
pub(crate) fn repetitions(p: f64, epsilon_fail: f64) -> Result<u64> {
    if !(epsilon_fail > 0.0 && epsilon_fail < 1.0) {
        return Err(invalid(format!("epsilon_fail = {epsilon_fail} outside (0, 1)")));
    }
    if p >= 1.0 {
        return Ok(1);
    }
    let mut r = ((epsilon_fail.ln() / (1.0 - p).ln()).ceil() as u64).max(1);
    // Guard the ceiling against rounding on either side.
    while r > 1 && (1.0 - p).powi(r as i32 - 1) <= epsilon_fail {
        r -= 1;
    }
    while (1.0 - p).powi(r as i32) > epsilon_fail {
        r += 1;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn matching_counts() {
        for (c, count) in [(2, 1), (4, 3), (6, 15), (8, 105)] {
            let nodes: Vec<usize> = (0..c).collect();
            assert_eq!(perfect_matchings(&nodes).len(), count);
            assert_eq!(double_factorial_odd(c), count as u64);
        }
    }

    #[test]
    fn round_robin_levels_form_a_one_factorization() {
        for c in [2, 4, 6, 8, 10] {
            for i in 0..c {
                let mut seen: Vec<u16> = (0..c).filter(|&j| j != i).map(|j| kc_level(c, i, j)).collect();
                for j in (0..c).filter(|&j| j != i) {
                    assert_eq!(kc_level(c, i, j), kc_level(c, j, i));
                }
                seen.sort_unstable();
                assert_eq!(seen, (1..c as u16).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn k4_relabeled_is_three_level_ghz() {
        let kc = build_kc(4).unwrap();
        let expected = SparseState::ghz(3, 3, ["n0", "n1", "n2", "n3"]).unwrap();
        assert!((fidelity(kc.relabeled(), &expected).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(kc.native().len(), 3);
        assert_eq!(relabel_kc(&kc).unwrap(), *kc.relabeled());
    }

    #[test]
    fn k2_relabels_to_trivial_qudits() {
        let kc = build_kc(2).unwrap();
        assert_eq!(kc.relabeled().register().dims(), vec![1, 1]);
    }

    #[test]
    fn odd_node_count_is_rejected() {
        assert!(matches!(build_kc(5), Err(Error::OddNodeCount(5))));
    }

    #[test]
    fn reductions_recover_smaller_matching_states() {
        for c in [4, 6] {
            let kc = build_kc(c).unwrap();
            let smaller = build_kc(c - 2).unwrap();
            for node in [0, c - 1] {
                let branches = reduce_kc_branches(&kc, node).unwrap();
                assert_eq!(branches.len(), c - 1);
                for b in &branches {
                    assert!((b.probability - 1.0 / (c - 1) as f64).abs() < 1e-12);
                    assert!((fidelity(b.state.native(), smaller.native()).unwrap() - 1.0).abs() < 1e-12);
                }
            }
        }
        let mut rng = stream(1, 0, 0);
        let (s, p, _) = reduce_kc(&build_kc(6).unwrap(), &mut rng).unwrap();
        assert_eq!(s.c_nodes(), 4);
        assert!((p - 0.2).abs() < 1e-12);
    }

    #[test]
    fn harvest_rejects_bad_inputs_and_counts_reductions() {
        let mut rng = stream(3, 0, 0);
        assert!(step1_harvest(10, 1.0, 5, &mut rng).is_err());
        assert!(step1_harvest(2, 10.0, 4, &mut rng).is_err());
        let h = step1_harvest(10_000, 12.0, 6, &mut rng).unwrap();
        if h.success {
            assert_eq!(h.harvested, 6 + 2 * h.reductions);
        }
    }

    #[test]
    fn edge_step2_links_and_accepted_patterns() {
        let kc = build_kc(6).unwrap();
        let tree = step2_tree(kc.native(), 6, 2, &PhasePolicy::Fit).unwrap();
        assert!((tree.link_probability - 0.8).abs() < 1e-12);
        let total: f64 = tree.branches.iter().map(|b| b.probability).sum();
        assert!((total - 0.8).abs() < 1e-10);
        let all_last = tree.accepted().any(|b| b.outcomes == vec![5; 4]);
        assert!(all_last);
        for b in tree.accepted() {
            assert_eq!(b.state.len(), 12);
            let again = step2_carve(kc.native(), 6, 2, &b.outcomes, &PhasePolicy::Fit).unwrap().unwrap();
            assert!((again.probability - b.probability).abs() < 1e-12);
        }
    }

    #[test]
    fn partitions_of_three_sites() {
        let terms = expand_partitions(3, 4).unwrap();
        let mut weights: Vec<i64> = terms.iter().map(|t| t.weight).collect();
        weights.sort_unstable();
        assert_eq!(weights, vec![-1, -1, -1, 1, 2]);
        let ketd = distinct_index_state(3, 4, &kept_labels(3)).unwrap();
        let rebuilt = reconstruct_partitions(&terms, 4).unwrap();
        assert!((fidelity(&ketd, &rebuilt).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(set_partitions(4).len(), 15);
    }

    #[test]
    fn step3_keeps_only_the_single_block_term() {
        let (n, d) = (3, 4);
        for t in expand_partitions(n, d * d).unwrap() {
            let out = step3_extract_ghz(&t.state, n, d).unwrap();
            if t.blocks.len() == 1 {
                let ghz = SparseState::ghz(d, d, ghz_labels(n)).unwrap();
                assert!(fidelity(out.state.as_ref().unwrap(), &ghz).unwrap() > 1.0 - 1e-12);
            } else {
                assert!(out.state.is_none());
            }
        }
    }

    #[test]
    fn step4_elements_are_complete_and_map_ghz_to_target() {
        for pattern in [SubgraphPattern::edge(), SubgraphPattern::path3(), SubgraphPattern::triangle()] {
            let target = SubgraphTarget::new(pattern).unwrap();
            for j in 0..target.n() {
                let pair = step4_elements(&target, j, "g").unwrap().to_vec();
                assert!(MeasurementSet::complete(pair).is_ok());
            }
            let run = run_from_ghz(&target).unwrap();
            let expected = (target.d as f64).powi(-(target.n() as i32));
            assert!((run.p_f - expected).abs() < 1e-12);
            assert!(run.final_fidelity.unwrap() > 1.0 - 1e-12);
        }
    }

    #[test]
    fn exact_edge_protocol_reaches_the_target() {
        let target = SubgraphTarget::new(SubgraphPattern::edge()).unwrap();
        let trace = run_full_protocol(&target, Mode::Exact, 1, 0).unwrap().remove(0);
        assert_eq!(trace.steps.len(), 4);
        assert!(trace.p_f > 0.0 && trace.p_f < 1.0);
        assert!((trace.step_product() - trace.p_f).abs() < 1e-12);
        assert!(trace.final_fidelity.unwrap() > 1.0 - 1e-10);
    }

    #[test]
    fn odd_targets_are_rejected_before_any_state_is_built() {
        let target = SubgraphTarget::new(SubgraphPattern::triangle()).unwrap();
        assert_eq!(target.c_nodes, 67);
        assert!(matches!(run_full_protocol(&target, Mode::Exact, 1, 0), Err(Error::OddNodeCount(67))));
    }

    #[test]
    fn repetition_counts() {
        assert_eq!(repetitions(0.5, 1e-3).unwrap(), 10);
        assert_eq!(repetitions(0.01, 1e-2).unwrap(), 459);
        assert_eq!(repetitions(1.0, 1e-2).unwrap(), 1);
        let plan = amplification_plan(100, 0.5, 1e-3).unwrap();
        assert_eq!(plan.sets, 10);
        assert_eq!(plan.nodes_per_set, 10);
        assert_eq!(plan.discarded_links, 4950 - 450);
    }
}
