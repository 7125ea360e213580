//! The quantum random graph `|G_{N,p}⟩`.
//!
//! Every pair of nodes shares one copy of the link state
//! `√(1−p/2)|00⟩ + √(p/2)|11⟩`, so node `i` owns `N−1` qubits, one per
//! partner. Qubit labels are `q{i}.{j}`: the qubit held by node `i` for its
//! link to node `j`. Registers list them node-major.

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::graph::sample_gnp;
use crate::state::{MeasurementElement, MeasurementSet, OutcomeRecord, QuditRegister, Site, SparseState, ONE, ZERO};

/// Largest `N` for which `|G_{N,p}⟩` is materialized as a state vector.
pub const MATERIALIZE_LIMIT: usize = 6;

/// Label of the qubit node `i` holds for its link to node `j`.
pub fn qubit_label(i: usize, j: usize) -> String {
    format!("q{i}.{j}")
}

/// A link with entanglement degree `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkSpec {
    p: f64,
}

impl LinkSpec {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid(format!("link parameter p={p} outside [0, 1]")));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Squared Schmidt coefficients `(1 − p/2, p/2)`.
    pub fn schmidt_weights(&self) -> (f64, f64) {
        (1.0 - self.p / 2.0, self.p / 2.0)
    }

    fn amplitudes(&self) -> (f64, f64) {
        let (w0, w1) = self.schmidt_weights();
        (w0.sqrt(), w1.sqrt())
    }
}

/// `√(1−p/2)|00⟩ + √(p/2)|11⟩` on sites `a` and `b`.
pub fn link_state_on(p: f64, a: &str, b: &str) -> Result<SparseState> {
    let (zero, one) = LinkSpec::new(p)?.amplitudes();
    SparseState::normalized(
        QuditRegister::qubits([a, b])?,
        [
            (vec![ZERO, ZERO], Complex64::new(zero, 0.0)),
            (vec![ONE, ONE], Complex64::new(one, 0.0)),
        ],
    )
}

pub fn link_state(p: f64) -> Result<SparseState> {
    link_state_on(p, "a", "b")
}

/// Optimal LOCC probability of converting one link into `|Φ+⟩`: twice the
/// smaller squared Schmidt coefficient, which is `p` itself.
pub fn singlet_conversion_prob(p: f64) -> Result<f64> {
    let (w0, w1) = LinkSpec::new(p)?.schmidt_weights();
    Ok(2.0 * w0.min(w1))
}

/// `|⟨G_{N,p}|0…0⟩|² = (1 − p/2)^{N(N−1)/2}`.
pub fn vacuum_overlap(n: usize, p: f64) -> Result<f64> {
    LinkSpec::new(p)?;
    if n == 0 {
        return Err(invalid("N must be at least 1"));
    }
    let pairs = (n as f64) * (n as f64 - 1.0) / 2.0;
    Ok((pairs * (-p / 2.0).ln_1p()).exp())
}

/// Large-`N` form `exp(−N^{z+2}/4)` of the vacuum overlap at `p = N^z`.
pub fn vacuum_overlap_asymptotic(n: usize, z: f64) -> f64 {
    (-(n as f64).powf(z + 2.0) / 4.0).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OutcomeExpectation {
    /// `N!/(m!(N−1−m)!) (p/2)^m (1−p/2)^{N−1−m}`.
    pub exact: f64,
    /// `c^m/m! · N^{m(z+1)+1}`.
    pub asymptotic: f64,
}

/// Expected number of nodes with outcome `m` at `p = 2c·N^z`.
pub fn expected_outcome_count(n: usize, z: f64, c_coeff: f64, m: usize) -> Result<OutcomeExpectation> {
    if n == 0 {
        return Err(invalid("N must be at least 1"));
    }
    let p = 2.0 * c_coeff * (n as f64).powf(z);
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("p = 2cN^z = {p} outside [0, 1]")));
    }
    let mut m_factorial = 1.0;
    for i in 1..=m {
        m_factorial *= i as f64;
    }
    let asymptotic = c_coeff.powi(m as i32) / m_factorial * (n as f64).powf(m as f64 * (z + 1.0) + 1.0);
    if m + 1 > n {
        return Ok(OutcomeExpectation { exact: 0.0, asymptotic });
    }
    let half = p / 2.0;
    // N · C(N−1, m), built as a running product.
    let mut ln_prefactor = (n as f64).ln();
    for i in 0..m {
        ln_prefactor += ((n - 1 - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    let ln_rest = if m == 0 { 0.0 } else { m as f64 * half.ln() } + (n - 1 - m) as f64 * (-half).ln_1p();
    let exact = if half == 0.0 && m > 0 { 0.0 } else { (ln_prefactor + ln_rest).exp() };
    Ok(OutcomeExpectation { exact, asymptotic })
}

/// Histogram of degree-counting outcomes over all nodes of one network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeStats {
    pub n: usize,
    pub p: f64,
    /// `counts[m]` = number of nodes that returned outcome `m`.
    pub counts: Vec<usize>,
}

impl OutcomeStats {
    pub fn count(&self, m: usize) -> usize {
        self.counts.get(m).copied().unwrap_or(0)
    }
}

/// Measures `P_m` on every node (order `0..N`) by sampling the classical
/// graph `G(N, p/2)` and reading off its degree histogram, which has the
/// same joint distribution as the quantum outcomes.
pub fn sample_pm_outcomes<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<OutcomeStats> {
    LinkSpec::new(p)?;
    let g = sample_gnp(n, p / 2.0, rng)?;
    let mut counts = vec![0usize; 1];
    for d in g.degrees() {
        if d >= counts.len() {
            counts.resize(d + 1, 0);
        }
        counts[d] += 1;
    }
    Ok(OutcomeStats { n, p, counts })
}

/// `|G_{N,p}⟩`, optionally held as an explicit state.
#[derive(Debug, Clone)]
pub struct QuantumRandomGraph {
    n: usize,
    link: LinkSpec,
    materialized: Option<SparseState>,
}

impl QuantumRandomGraph {
    pub fn new(n: usize, p: f64) -> Result<Self> {
        if n < 2 {
            return Err(invalid("a quantum random graph needs at least two nodes"));
        }
        Ok(Self { n, link: LinkSpec::new(p)?, materialized: None })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn link(&self) -> LinkSpec {
        self.link
    }

    pub fn state(&self) -> Option<&SparseState> {
        self.materialized.as_ref()
    }

    /// Qubit labels held by `node`, in partner order.
    pub fn node_qubits(&self, node: usize) -> Vec<String> {
        (0..self.n).filter(|&j| j != node).map(|j| qubit_label(node, j)).collect()
    }

    /// Builds the explicit product of all `N(N−1)/2` link states.
    pub fn materialize(mut self) -> Result<Self> {
        if self.n > MATERIALIZE_LIMIT {
            return Err(Error::TooLarge(format!("N = {} > {MATERIALIZE_LIMIT}", self.n)));
        }
        let n = self.n;
        let labels: Vec<String> = (0..n).flat_map(|i| self.node_qubits(i)).collect();
        let position = |i: usize, j: usize| i * (n - 1) + if j < i { j } else { j - 1 };
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let (zero, one) = self.link.amplitudes();
        let mut terms = Vec::new();
        for mask in 0u64..(1 << pairs.len()) {
            let mut index = vec![ZERO; labels.len()];
            let mut amp = 1.0;
            for (k, &(i, j)) in pairs.iter().enumerate() {
                if mask >> k & 1 == 1 {
                    index[position(i, j)] = ONE;
                    index[position(j, i)] = ONE;
                    amp *= one;
                } else {
                    amp *= zero;
                }
            }
            if amp > 0.0 {
                terms.push((index, Complex64::new(amp, 0.0)));
            }
        }
        self.materialized = Some(SparseState::normalized(QuditRegister::qubits(labels)?, terms)?);
        Ok(self)
    }

    /// The complete set `{P_m}`, `m = 0..N−1`, on `node`'s qubits.
    pub fn pm_measurement(&self, node: usize) -> Result<MeasurementSet> {
        if node >= self.n {
            return Err(invalid(format!("node {node} outside 0..{}", self.n)));
        }
        let sites: Vec<Site> = self.node_qubits(node).into_iter().map(Site::qubit).collect();
        let elements = (0..self.n)
            .map(|m| {
                MeasurementElement::projector(format!("P{m}@{node}"), sites.clone(), |t| {
                    t.iter().filter(|&&v| v == ONE).count() == m
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MeasurementSet::complete(elements)
    }
}

/// Applies the complete degree-counting measurement at `node`; outcome `m`
/// sits at position `m`.
pub fn apply_pm_exact(g: &QuantumRandomGraph, node: usize) -> Result<Vec<OutcomeRecord>> {
    let state = g.state().ok_or(Error::NotMaterialized)?;
    g.pm_measurement(node)?.measure(state)
}
