//! Sparse kets over registers of labelled qudits.
//!
//! Basis indices are 1-based: a site of dimension `d` takes values `1..=d`.
//! For qubits, [`ZERO`] and [`ONE`] name the indices of `|0⟩` and `|1⟩`.
//!
//! States are immutable values. Every operation returns a fresh state, so
//! they can be shared freely between worker threads.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{invalid, Error, Result};

/// Amplitudes with magnitude below this are dropped after every operation.
pub const PRUNE_THRESHOLD: f64 = 1e-13;

/// Allowed deviation of a state's squared norm from one.
pub const NORM_TOLERANCE: f64 = 1e-12;

/// Index of the qubit state `|0⟩`.
pub const ZERO: u16 = 1;
/// Index of the qubit state `|1⟩`.
pub const ONE: u16 = 2;

/// One basis-index tuple, one entry per site.
pub type BasisIndex = Vec<u16>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Site {
    pub label: String,
    pub dim: usize,
}

impl Site {
    pub fn new(label: impl Into<String>, dim: usize) -> Self {
        Self { label: label.into(), dim }
    }

    pub fn qubit(label: impl Into<String>) -> Self {
        Self::new(label, 2)
    }
}

/// Ordered list of labelled sites.
///
/// Dimension-one sites are permitted: a node of `|K_2⟩` has a single
/// configuration and is represented as a one-level qudit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuditRegister {
    sites: Vec<Site>,
}

impl QuditRegister {
    pub fn new(sites: Vec<Site>) -> Result<Self> {
        if sites.is_empty() {
            return Err(invalid("register needs at least one site"));
        }
        let mut seen = HashSet::new();
        for site in &sites {
            if site.dim == 0 || site.dim > u16::MAX as usize {
                return Err(invalid(format!("site `{}` has dimension {}", site.label, site.dim)));
            }
            if !seen.insert(site.label.as_str()) {
                return Err(Error::DuplicateSite(site.label.clone()));
            }
        }
        Ok(Self { sites })
    }

    pub fn qubits<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(labels.into_iter().map(Site::qubit).collect())
    }

    pub fn uniform<S: Into<String>>(labels: impl IntoIterator<Item = S>, dim: usize) -> Result<Self> {
        Self::new(labels.into_iter().map(|l| Site::new(l, dim)).collect())
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.sites.iter().map(|s| s.label.as_str())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.dim).collect()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.label == label)
    }

    fn require(&self, label: &str) -> Result<usize> {
        self.position(label).ok_or_else(|| Error::UnknownSite(label.to_string()))
    }

    /// Product of the local dimensions, as a float since it overflows quickly.
    pub fn total_dimension(&self) -> f64 {
        self.sites.iter().map(|s| s.dim as f64).product()
    }

    fn check_index(&self, index: &[u16]) -> Result<()> {
        if index.len() != self.sites.len() {
            return Err(invalid(format!(
                "basis tuple has {} entries, register has {} sites",
                index.len(),
                self.sites.len()
            )));
        }
        for (site, &i) in self.sites.iter().zip(index) {
            if i == 0 || i as usize > site.dim {
                return Err(Error::IndexOutOfRange {
                    site: site.label.clone(),
                    index: i as usize,
                    dim: site.dim,
                });
            }
        }
        Ok(())
    }
}

/// Table of `d`-th roots of unity, `table[j] = exp(2πi j/d)`.
pub fn roots_of_unity(d: usize) -> Vec<Complex64> {
    (0..d)
        .map(|j| Complex64::from_polar(1.0, 2.0 * PI * j as f64 / d as f64))
        .collect()
}

/// `exp(2πi j k / d)` looked up in `roots`.
fn phase(roots: &[Complex64], j: usize, k: usize) -> Complex64 {
    roots[(j * k) % roots.len()]
}

/// Components of the single-qudit Fourier vector `|Φ_1^{k,d}⟩`, indexed `j-1`.
pub fn fourier_vector(k: usize, d: usize) -> Result<Vec<Complex64>> {
    if d == 0 || k == 0 || k > d {
        return Err(invalid(format!("Fourier index k={k} outside 1..={d}")));
    }
    let roots = roots_of_unity(d);
    let scale = 1.0 / (d as f64).sqrt();
    Ok((1..=d).map(|j| phase(&roots, j, k) * scale).collect())
}

/// A normalized ket with sparse support.
#[derive(Clone, PartialEq)]
pub struct SparseState {
    register: QuditRegister,
    amplitudes: BTreeMap<BasisIndex, Complex64>,
}

impl fmt::Debug for SparseState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<&str> = self.register.labels().collect();
        writeln!(f, "SparseState{labels:?} ({} terms)", self.amplitudes.len())?;
        for (index, amp) in self.amplitudes.iter().take(32) {
            writeln!(f, "  {index:?}: {:+.6}{:+.6}i", amp.re, amp.im)?;
        }
        if self.amplitudes.len() > 32 {
            writeln!(f, "  ...")?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct JsonTerm<'a> {
    indices: &'a [u16],
    re: f64,
    im: f64,
}

impl SparseState {
    /// Normalizes `terms` onto `register`; returns the state and the norm of
    /// the input vector. Repeated tuples are summed.
    pub fn from_unnormalized(
        register: QuditRegister,
        terms: impl IntoIterator<Item = (BasisIndex, Complex64)>,
    ) -> Result<(Self, f64)> {
        let mut amplitudes = BTreeMap::new();
        for (index, amp) in terms {
            register.check_index(&index)?;
            *amplitudes.entry(index).or_insert(Complex64::new(0.0, 0.0)) += amp;
        }
        Self::finish(register, amplitudes)
    }

    pub fn normalized(
        register: QuditRegister,
        terms: impl IntoIterator<Item = (BasisIndex, Complex64)>,
    ) -> Result<Self> {
        Self::from_unnormalized(register, terms).map(|(s, _)| s)
    }

    fn finish(register: QuditRegister, mut amplitudes: BTreeMap<BasisIndex, Complex64>) -> Result<(Self, f64)> {
        amplitudes.retain(|_, a| a.norm() >= PRUNE_THRESHOLD);
        let norm = amplitudes.values().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if amplitudes.is_empty() || norm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        for a in amplitudes.values_mut() {
            *a /= norm;
        }
        Ok((Self { register, amplitudes }, norm))
    }

    /// The computational basis state with the given indices.
    pub fn basis(register: QuditRegister, index: BasisIndex) -> Result<Self> {
        Self::normalized(register, [(index, Complex64::new(1.0, 0.0))])
    }

    /// `|Φ_n^{k,d}⟩ = d^{-1/2} Σ_j exp(2πi jk/d) |j…j⟩` on the given sites.
    pub fn ghz<S: Into<String>>(k: usize, d: usize, sites: impl IntoIterator<Item = S>) -> Result<Self> {
        let register = QuditRegister::uniform(sites, d)?;
        let n = register.len();
        let amps = fourier_vector(k, d)?;
        Self::normalized(
            register,
            amps.into_iter()
                .enumerate()
                .map(|(j, a)| (vec![(j + 1) as u16; n], a)),
        )
    }

    pub fn register(&self) -> &QuditRegister {
        &self.register
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    /// Terms in lexicographic order of their basis tuples.
    pub fn terms(&self) -> impl Iterator<Item = (&BasisIndex, &Complex64)> {
        self.amplitudes.iter()
    }

    pub fn amplitude(&self, index: &[u16]) -> Complex64 {
        self.amplitudes.get(index).copied().unwrap_or_default()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.values().map(|a| a.norm_sqr()).sum()
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &SparseState) -> Result<Complex64> {
        if self.register != other.register {
            return Err(Error::RegisterMismatch);
        }
        let (small, large, flip) = if self.len() <= other.len() {
            (self, other, false)
        } else {
            (other, self, true)
        };
        let mut acc = Complex64::new(0.0, 0.0);
        for (index, a) in &small.amplitudes {
            if let Some(b) = large.amplitudes.get(index) {
                acc += if flip { b.conj() * a } else { a.conj() * b };
            }
        }
        Ok(acc)
    }

    pub fn tensor(&self, other: &SparseState) -> Result<SparseState> {
        let mut sites = self.register.sites.clone();
        sites.extend(other.register.sites.iter().cloned());
        let register = QuditRegister::new(sites)?;
        let mut amplitudes = BTreeMap::new();
        for (ia, a) in &self.amplitudes {
            for (ib, b) in &other.amplitudes {
                let mut index = Vec::with_capacity(ia.len() + ib.len());
                index.extend_from_slice(ia);
                index.extend_from_slice(ib);
                amplitudes.insert(index, a * b);
            }
        }
        Self::finish(register, amplitudes).map(|(s, _)| s)
    }

    /// Replaces `site` (dimension `d²`) by two sites of dimension `d` under
    /// `j = (j1-1)·d + j2`.
    pub fn split_site(&self, site: &str, d: usize, first: impl Into<String>, second: impl Into<String>) -> Result<Self> {
        let pos = self.register.require(site)?;
        let dim = self.register.sites[pos].dim;
        if d == 0 || dim != d * d {
            return Err(Error::NotPerfectSquare { dim, d });
        }
        let mut sites = self.register.sites.clone();
        sites.splice(pos..=pos, [Site::new(first, d), Site::new(second, d)]);
        let register = QuditRegister::new(sites)?;
        let d16 = d as u16;
        let amplitudes = self
            .amplitudes
            .iter()
            .map(|(index, &a)| {
                let j = index[pos] - 1;
                let mut out = Vec::with_capacity(index.len() + 1);
                out.extend_from_slice(&index[..pos]);
                out.push(j / d16 + 1);
                out.push(j % d16 + 1);
                out.extend_from_slice(&index[pos + 1..]);
                (out, a)
            })
            .collect();
        Ok(Self { register, amplitudes })
    }

    /// Inverse of [`split_site`](Self::split_site): `first` must be
    /// immediately followed by `second`.
    pub fn merge_sites(&self, first: &str, second: &str, merged: impl Into<String>) -> Result<Self> {
        let pos = self.register.require(first)?;
        let next = self.register.require(second)?;
        if next != pos + 1 {
            return Err(invalid(format!("`{second}` does not follow `{first}`")));
        }
        let (d1, d2) = (self.register.sites[pos].dim, self.register.sites[next].dim);
        let mut sites = self.register.sites.clone();
        sites.splice(pos..=next, [Site::new(merged, d1 * d2)]);
        let register = QuditRegister::new(sites)?;
        let amplitudes = self
            .amplitudes
            .iter()
            .map(|(index, &a)| {
                let j = (index[pos] as usize - 1) * d2 + index[next] as usize;
                let mut out = Vec::with_capacity(index.len() - 1);
                out.extend_from_slice(&index[..pos]);
                out.push(j as u16);
                out.extend_from_slice(&index[next + 1..]);
                (out, a)
            })
            .collect();
        Ok(Self { register, amplitudes })
    }

    /// Permutes sites into the given label order.
    pub fn reorder<S: AsRef<str>>(&self, order: &[S]) -> Result<Self> {
        if order.len() != self.register.len() {
            return Err(invalid("reorder must list every site exactly once"));
        }
        let perm = order
            .iter()
            .map(|l| self.register.require(l.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let register = QuditRegister::new(perm.iter().map(|&p| self.register.sites[p].clone()).collect())?;
        let amplitudes = self
            .amplitudes
            .iter()
            .map(|(index, &a)| (perm.iter().map(|&p| index[p]).collect(), a))
            .collect();
        Ok(Self { register, amplitudes })
    }

    /// Renames every site through `f`; the site order is unchanged.
    pub fn rename(&self, f: impl Fn(&str) -> String) -> Result<Self> {
        let sites = self
            .register
            .sites
            .iter()
            .map(|s| Site::new(f(&s.label), s.dim))
            .collect();
        Ok(Self {
            register: QuditRegister::new(sites)?,
            amplitudes: self.amplitudes.clone(),
        })
    }

    /// Value of `site` if it holds the same basis index in every term.
    pub fn product_value(&self, site: &str) -> Result<Option<u16>> {
        let pos = self.register.require(site)?;
        let mut values = self.amplitudes.keys().map(|k| k[pos]);
        let first = values.next();
        Ok(first.filter(|&v| values.all(|w| w == v)))
    }

    /// Drops sites that are in a definite basis state, i.e. that factor out.
    pub fn discard_product_sites<S: AsRef<str>>(&self, labels: &[S]) -> Result<Self> {
        let mut drop = Vec::with_capacity(labels.len());
        for label in labels {
            let label = label.as_ref();
            if self.product_value(label)?.is_none() {
                return Err(Error::NotProductSite(label.to_string()));
            }
            drop.push(self.register.require(label)?);
        }
        drop.sort_unstable();
        drop.dedup();
        let keep: Vec<usize> = (0..self.register.len()).filter(|p| drop.binary_search(p).is_err()).collect();
        let register = QuditRegister::new(keep.iter().map(|&p| self.register.sites[p].clone()).collect())?;
        let amplitudes = self
            .amplitudes
            .iter()
            .map(|(index, &a)| (keep.iter().map(|&p| index[p]).collect(), a))
            .collect();
        Ok(Self { register, amplitudes })
    }

    /// Multiplies every amplitude by `phase` (a unit complex number).
    pub fn with_global_phase(&self, phase: Complex64) -> Self {
        Self {
            register: self.register.clone(),
            amplitudes: self.amplitudes.iter().map(|(k, &a)| (k.clone(), a * phase)).collect(),
        }
    }

    /// Debug dump: `[{"indices": [..], "re": .., "im": ..}, ..]` sorted by indices.
    pub fn to_json(&self) -> serde_json::Value {
        let terms: Vec<JsonTerm<'_>> = self
            .amplitudes
            .iter()
            .map(|(indices, a)| JsonTerm { indices, re: a.re, im: a.im })
            .collect();
        serde_json::to_value(terms).expect("terms serialize")
    }
}

/// `|⟨a|b⟩|²`.
pub fn fidelity(a: &SparseState, b: &SparseState) -> Result<f64> {
    Ok(a.inner(b)?.norm_sqr().min(1.0))
}

/// Weighted sum `Σ c_i |ψ_i⟩` over states sharing one register, normalized.
/// Returns the state and the norm of the sum.
pub fn superpose(terms: &[(Complex64, &SparseState)]) -> Result<(SparseState, f64)> {
    let register = terms.first().ok_or(Error::ZeroNorm)?.1.register.clone();
    let mut amplitudes: BTreeMap<BasisIndex, Complex64> = BTreeMap::new();
    for (c, state) in terms {
        if state.register != register {
            return Err(Error::RegisterMismatch);
        }
        for (index, a) in &state.amplitudes {
            *amplitudes.entry(index.clone()).or_default() += c * a;
        }
    }
    SparseState::finish(register, amplitudes)
}

/// One Kraus-type element of a generalized measurement.
///
/// The element reads the sites in `acts_on` and writes the sites in
/// `outputs`, which take the place of the input sites in the register. An
/// empty `outputs` list means the measured sites are consumed (a projection
/// onto a bra). The action is a sparse matrix from local input tuples to
/// local output tuples; input tuples that are absent map to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementElement {
    label: String,
    acts_on: Vec<Site>,
    outputs: Vec<Site>,
    action: BTreeMap<BasisIndex, Vec<(BasisIndex, Complex64)>>,
}

/// Enumerates every tuple over the given dimensions, lexicographically.
pub fn enumerate_tuples(dims: &[usize]) -> Vec<BasisIndex> {
    let mut out = vec![Vec::with_capacity(dims.len())];
    for &d in dims {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (1..=d as u16).map(move |v| {
                    let mut t = prefix.clone();
                    t.push(v);
                    t
                })
            })
            .collect();
    }
    out
}

impl MeasurementElement {
    /// Builds an element by evaluating `map` on every local input tuple.
    pub fn from_fn(
        label: impl Into<String>,
        acts_on: Vec<Site>,
        outputs: Vec<Site>,
        map: impl Fn(&[u16]) -> Vec<(BasisIndex, Complex64)>,
    ) -> Result<Self> {
        if acts_on.is_empty() {
            return Err(invalid("measurement element must act on at least one site"));
        }
        let dims: Vec<usize> = acts_on.iter().map(|s| s.dim).collect();
        let out_dims: Vec<usize> = outputs.iter().map(|s| s.dim).collect();
        let mut action = BTreeMap::new();
        for input in enumerate_tuples(&dims) {
            let row: Vec<_> = map(&input)
                .into_iter()
                .filter(|(_, c)| c.norm() > 0.0)
                .collect();
            for (out, _) in &row {
                let ok = out.len() == out_dims.len()
                    && out.iter().zip(&out_dims).all(|(&v, &d)| v >= 1 && v as usize <= d);
                if !ok {
                    return Err(invalid(format!("output tuple {out:?} does not fit the output sites")));
                }
            }
            if !row.is_empty() {
                action.insert(input, row);
            }
        }
        Ok(Self { label: label.into(), acts_on, outputs, action })
    }

    /// Diagonal element `Σ_t f(t) |t⟩⟨t|` that keeps its sites.
    pub fn diagonal(label: impl Into<String>, sites: Vec<Site>, f: impl Fn(&[u16]) -> Complex64) -> Result<Self> {
        let outputs = sites.clone();
        Self::from_fn(label, sites, outputs, |t| vec![(t.to_vec(), f(t))])
    }

    /// Projector onto the tuples accepted by `keep`.
    pub fn projector(label: impl Into<String>, sites: Vec<Site>, keep: impl Fn(&[u16]) -> bool) -> Result<Self> {
        Self::diagonal(label, sites, |t| {
            if keep(t) {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
    }

    /// The bra `⟨v|` on one site; the site is consumed.
    pub fn bra(label: impl Into<String>, site: Site, v: &[Complex64]) -> Result<Self> {
        if v.len() != site.dim {
            return Err(invalid("bra length does not match site dimension"));
        }
        Self::from_fn(label, vec![site], vec![], |t| vec![(vec![], v[t[0] as usize - 1].conj())])
    }

    /// `⟨Φ_1^{k,d}|` on one site.
    pub fn fourier_bra(site: Site, k: usize) -> Result<Self> {
        let v = fourier_vector(k, site.dim)?;
        Self::bra(format!("{}:k={k}", site.label), site, &v)
    }

    /// Computational-basis projection of one site onto `value`; the site is consumed.
    pub fn basis_bra(site: Site, value: u16) -> Result<Self> {
        let mut v = vec![Complex64::new(0.0, 0.0); site.dim];
        *v.get_mut(value as usize - 1).ok_or_else(|| invalid("basis value out of range"))? = Complex64::new(1.0, 0.0);
        Self::bra(format!("{}={value}", site.label), site, &v)
    }

    /// Same action scaled by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        for row in self.action.values_mut() {
            for (_, c) in row.iter_mut() {
                *c *= factor;
            }
        }
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn acts_on(&self) -> &[Site] {
        &self.acts_on
    }

    pub fn outputs(&self) -> &[Site] {
        &self.outputs
    }

    /// Gram matrix entry `⟨t|E†E|u⟩` for local input tuples `t`, `u`.
    fn gram(&self, t: &[u16], u: &[u16]) -> Complex64 {
        let (Some(rt), Some(ru)) = (self.action.get(t), self.action.get(u)) else {
            return Complex64::new(0.0, 0.0);
        };
        let mut acc = Complex64::new(0.0, 0.0);
        for (ot, ct) in rt {
            for (ou, cu) in ru {
                if ot == ou {
                    acc += ct.conj() * cu;
                }
            }
        }
        acc
    }
}

/// Largest entry of `|Σ_e E_e†E_e − I|` over the shared input space.
pub fn completeness_deviation(elements: &[MeasurementElement]) -> Result<f64> {
    let first = elements.first().ok_or_else(|| invalid("empty measurement set"))?;
    if elements.iter().any(|e| e.acts_on != first.acts_on) {
        return Err(invalid("elements act on different sites"));
    }
    let dims: Vec<usize> = first.acts_on.iter().map(|s| s.dim).collect();
    let tuples = enumerate_tuples(&dims);
    let mut worst: f64 = 0.0;
    for (i, t) in tuples.iter().enumerate() {
        for (j, u) in tuples.iter().enumerate() {
            let g: Complex64 = elements.iter().map(|e| e.gram(t, u)).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - target).norm());
        }
    }
    Ok(worst)
}

/// A set of elements declared to form a complete measurement.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    elements: Vec<MeasurementElement>,
}

impl MeasurementSet {
    /// Checks `Σ E†E = I` within `1e-12`.
    pub fn complete(elements: Vec<MeasurementElement>) -> Result<Self> {
        let dev = completeness_deviation(&elements)?;
        if dev > 1e-12 {
            return Err(Error::Incomplete(dev));
        }
        Ok(Self { elements })
    }

    pub fn elements(&self) -> &[MeasurementElement] {
        &self.elements
    }

    /// Applies every element; impossible outcomes are kept with probability zero.
    pub fn measure(&self, state: &SparseState) -> Result<Vec<OutcomeRecord>> {
        self.elements.iter().map(|e| apply_element(state, e)).collect()
    }
}

/// Result of applying one measurement element.
#[derive(Debug, Clone)]
pub struct OutcomeRecord {
    pub label: String,
    pub probability: f64,
    /// Conditioned, renormalized state; `None` when the outcome is impossible.
    pub post_state: Option<SparseState>,
}

impl OutcomeRecord {
    pub fn is_possible(&self) -> bool {
        self.post_state.is_some()
    }
}

/// Applies `element` to `state`: probability `‖E ψ‖²`, post-state `Eψ/‖Eψ‖`.
pub fn apply_element(state: &SparseState, element: &MeasurementElement) -> Result<OutcomeRecord> {
    let reg = &state.register;
    let positions = element
        .acts_on
        .iter()
        .map(|s| {
            let p = reg.require(&s.label)?;
            if reg.sites[p].dim != s.dim {
                return Err(invalid(format!("site `{}` has dimension {}, element expects {}", s.label, reg.sites[p].dim, s.dim)));
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sorted = positions.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != positions.len() {
        return Err(Error::DuplicateSite(element.label.clone()));
    }
    let insert_at = sorted[0];

    // Output layout: untouched sites before `insert_at`, the output sites,
    // then the remaining untouched sites.
    let rest: Vec<usize> = (0..reg.len()).filter(|p| sorted.binary_search(p).is_err()).collect();
    let split = rest.partition_point(|&p| p < insert_at);
    let mut sites: Vec<Site> = rest[..split].iter().map(|&p| reg.sites[p].clone()).collect();
    sites.extend(element.outputs.iter().cloned());
    sites.extend(rest[split..].iter().map(|&p| reg.sites[p].clone()));

    let mut amplitudes: BTreeMap<BasisIndex, Complex64> = BTreeMap::new();
    let mut local = Vec::with_capacity(positions.len());
    for (index, &a) in &state.amplitudes {
        local.clear();
        local.extend(positions.iter().map(|&p| index[p]));
        let Some(row) = element.action.get(&local) else { continue };
        for (out, c) in row {
            let mut next = Vec::with_capacity(sites.len());
            next.extend(rest[..split].iter().map(|&p| index[p]));
            next.extend_from_slice(out);
            next.extend(rest[split..].iter().map(|&p| index[p]));
            *amplitudes.entry(next).or_default() += a * c;
        }
    }
    amplitudes.retain(|_, a| a.norm() >= PRUNE_THRESHOLD);
    let probability: f64 = amplitudes.values().map(|a| a.norm_sqr()).sum();
    let label = element.label.clone();
    if amplitudes.is_empty() {
        return Ok(OutcomeRecord { label, probability: 0.0, post_state: None });
    }
    if sites.is_empty() {
        // Every site was consumed; only the scalar remains.
        return Ok(OutcomeRecord { label, probability, post_state: None });
    }
    let register = QuditRegister::new(sites)?;
    let (post, _) = SparseState::finish(register, amplitudes)?;
    Ok(OutcomeRecord { label, probability: probability.min(1.0), post_state: Some(post) })
}
