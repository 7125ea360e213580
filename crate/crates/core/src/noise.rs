//! Links from a source that emits vacuum `|00⟩` with probability `ε`.
//!
//! Every mixed state is held as a pure ensemble: weighted pure components
//! that are propagated through the protocol one by one.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::network::{link_state_on, qubit_label};
use crate::protocol::{
    build_kc, double_factorial_odd, matching_superposition, perfect_matchings, repetitions, step1_harvest_with_loss,
    step2_carve, step2_tree, step3_extract_ghz, step4_project, target_state, PhaseCorrection, PhasePolicy,
    SubgraphTarget, EXACT_NODE_LIMIT,
};
use crate::rng::{experiment, stream};
use crate::state::{fidelity, QuditRegister, SparseState, ZERO};

/// Components lighter than this are dropped; their mass is reported.
pub const PRUNE_WEIGHT: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleComponent {
    pub label: String,
    pub weight: f64,
    pub state: SparseState,
}

/// `ρ = Σ_k w_k |ψ_k⟩⟨ψ_k|` with normalized `ψ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PureEnsemble {
    components: Vec<EnsembleComponent>,
    pruned_mass: f64,
}

impl PureEnsemble {
    /// Drops components below [`PRUNE_WEIGHT`] and keeps the rest in order.
    pub fn new(components: Vec<EnsembleComponent>) -> Result<Self> {
        if components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(invalid("ensemble weights must be non-negative"));
        }
        let pruned_mass = components.iter().filter(|c| c.weight < PRUNE_WEIGHT).map(|c| c.weight).sum();
        let components: Vec<_> = components.into_iter().filter(|c| c.weight >= PRUNE_WEIGHT).collect();
        if let Some(first) = components.first() {
            if components.iter().any(|c| c.state.register() != first.state.register()) {
                return Err(Error::RegisterMismatch);
            }
        }
        Ok(Self { components, pruned_mass })
    }

    pub fn components(&self) -> &[EnsembleComponent] {
        &self.components
    }

    pub fn pruned_mass(&self) -> f64 {
        self.pruned_mass
    }

    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    /// `⟨a|ρ|b⟩`.
    pub fn matrix_element(&self, a: &SparseState, b: &SparseState) -> Result<Complex64> {
        let mut sum = Complex64::new(0.0, 0.0);
        for c in &self.components {
            sum += c.weight * a.inner(&c.state)? * c.state.inner(b)?;
        }
        Ok(sum)
    }

    /// `⟨ψ|ρ|ψ⟩`.
    pub fn fidelity_with(&self, psi: &SparseState) -> Result<f64> {
        self.components.iter().map(|c| Ok(c.weight * fidelity(psi, &c.state)?)).sum()
    }

    /// Weight of the component with the given label, 0 if absent.
    pub fn weight_of(&self, label: &str) -> f64 {
        self.components.iter().filter(|c| c.label == label).map(|c| c.weight).sum()
    }
}

/// `(1 − ε)|φ⟩⟨φ| + ε|00⟩⟨00|` for one link between nodes `a` and `b`.
pub fn mixed_link(p: f64, eps: f64, a: usize, b: usize) -> Result<PureEnsemble> {
    check_eps(eps)?;
    let labels = [qubit_label(a, b), qubit_label(b, a)];
    let link = link_state_on(p, &labels[0], &labels[1])?;
    let vacuum = SparseState::basis(QuditRegister::qubits(labels.clone())?, vec![ZERO, ZERO])?;
    PureEnsemble::new(vec![
        EnsembleComponent { label: "link".into(), weight: 1.0 - eps, state: link },
        EnsembleComponent { label: "vacuum".into(), weight: eps, state: vacuum },
    ])
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(invalid(format!("eps = {eps} outside [0, 1]")));
    }
    Ok(())
}

/// All partial matchings of `K_c` (sets of disjoint edges), smallest first.
pub fn partial_matchings(c: usize) -> Vec<Vec<(usize, usize)>> {
    fn grow(c: usize, from: usize, used: &mut Vec<bool>, current: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        out.push(current.clone());
        for a in from..c {
            if used[a] {
                continue;
            }
            for b in a + 1..c {
                if used[b] {
                    continue;
                }
                used[a] = true;
                used[b] = true;
                current.push((a, b));
                grow(c, a + 1, used, current, out);
                current.pop();
                used[a] = false;
                used[b] = false;
            }
        }
    }
    let mut out = Vec::new();
    grow(c, 0, &mut vec![false; c], &mut Vec::new(), &mut out);
    out.sort_by(|x, y| x.len().cmp(&y.len()).then_with(|| x.cmp(y)));
    out
}

/// Label of the noiseless `|K_c⟩` component in [`build_kc_noisy`].
pub const KC_COMPONENT: &str = "S={}";

fn component_label(s: &[(usize, usize)]) -> String {
    let inner: Vec<String> = s.iter().map(|(a, b)| format!("{a}-{b}")).collect();
    format!("S={{{}}}", inner.join(","))
}

/// Noisy `|K_c⟩` after the harvest.
///
/// In the matching basis the state is `ρ_{MM'} = (1−ε)^{|M∖M'|}/(c−1)!!`:
/// coherence between two matchings survives only if every link where they
/// differ came from the source intact. It is written here as a mixture over
/// partial matchings `S`: the component `|K(S)⟩` is the uniform superposition
/// of the perfect matchings that contain `S`, and its weight is
/// `(1−ε)^{c/2−|S|} ε^{|S|} (c−2|S|−1)!!/(c−1)!!`. `S = ∅` is `|K_c⟩` itself
/// with weight `(1−ε)^{c/2}`.
pub fn build_kc_noisy(c: usize, eps: f64) -> Result<PureEnsemble> {
    check_eps(eps)?;
    if c % 2 == 1 {
        return Err(Error::OddNodeCount(c));
    }
    build_kc(c)?;
    let half = (c / 2) as i32;
    let all = perfect_matchings(&(0..c).collect::<Vec<_>>());
    let total = double_factorial_odd(c) as f64;
    let mut components = Vec::new();
    for s in partial_matchings(c) {
        let k = s.len() as i32;
        let weight = (1.0 - eps).powi(half - k) * eps.powi(k) * double_factorial_odd(c - 2 * s.len()) as f64 / total;
        let members: Vec<Vec<(usize, usize)>> =
            all.iter().filter(|m| s.iter().all(|e| m.contains(e))).cloned().collect();
        components.push(EnsembleComponent {
            label: component_label(&s),
            weight,
            state: matching_superposition(c, &members)?,
        });
    }
    PureEnsemble::new(components)
}

/// `(1 − ε)^{c/2}`, the weight of `|K_c⟩` in the noisy state.
pub fn kc_weight(c: usize, eps: f64) -> f64 {
    (1.0 - eps).powi((c / 2) as i32)
}

/// Independent attempts needed so that at least one ends in `|F⟩` with
/// probability `1 − epsilon_fail`, when each ends there with probability `x`.
pub fn retry_budget(x: f64, epsilon_fail: f64) -> Result<u64> {
    if !(x > 0.0 && x <= 1.0) {
        return Err(invalid(format!("x = {x} outside (0, 1]")));
    }
    repetitions(x, epsilon_fail)
}

/// One ensemble component after the protocol.
#[derive(Debug, Clone, Serialize)]
pub struct PropagatedComponent {
    pub label: String,
    pub input_weight: f64,
    /// Probability that this component passes the accepted branches.
    pub success_probability: f64,
    /// Probability that it passes and ends exactly in `|F⟩`.
    pub target_probability: f64,
    /// `Σ_branches P(branch) |⟨F|ψ_branch⟩|²`.
    pub target_overlap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NoisyReport {
    pub target: String,
    pub eps: f64,
    pub c_nodes: usize,
    /// `(1 − ε)^{c/2}`.
    pub x_theory: f64,
    /// Probability of ending exactly in `|F⟩`, relative to the noiseless
    /// protocol: `P_ε(success, out = F) / P_0(success)`.
    pub x_measured: f64,
    /// Success probability with noise.
    pub success_probability: f64,
    /// Success probability without noise.
    pub noiseless_success: f64,
    /// Weight of exact `|F⟩` in the output, conditioned on success.
    pub conditional_target_weight: f64,
    /// `⟨F|ρ_out|F⟩` of the normalized output.
    pub conditional_fidelity: f64,
    pub retry_budget: u64,
    pub epsilon_fail: f64,
    pub pruned_mass: f64,
    pub components: Vec<PropagatedComponent>,
}

/// Report plus the normalized output ensemble on the `|F⟩` register.
#[derive(Debug, Clone)]
pub struct NoisyRun {
    pub report: NoisyReport,
    pub output: PureEnsemble,
}

/// Output fidelity at or above which a branch counts as `|F⟩`.
pub const TARGET_FIDELITY: f64 = 1.0 - 1e-9;

struct Propagation {
    success: f64,
    target: f64,
    overlap: f64,
    outputs: Vec<(String, f64, SparseState)>,
}

fn propagate(
    state: &SparseState,
    target: &SubgraphTarget,
    corrections: &BTreeMap<Vec<usize>, PhaseCorrection>,
    expected: &SparseState,
) -> Result<Propagation> {
    let (c, n) = (target.c_nodes, target.n());
    let mut out = Propagation { success: 0.0, target: 0.0, overlap: 0.0, outputs: Vec::new() };
    for (outcomes, correction) in corrections {
        let policy = PhasePolicy::Given(correction.clone());
        let Some(branch) = step2_carve(state, c, n, outcomes, &policy)? else { continue };
        let s3 = step3_extract_ghz(&branch.state, n, target.d)?;
        let Some(ghz) = s3.state else { continue };
        let s4 = step4_project(&ghz, target)?;
        let Some(final_state) = s4.state else { continue };
        let p = branch.probability * s3.probability * s4.probability;
        let f = fidelity(&final_state, expected)?;
        out.success += p;
        out.overlap += p * f;
        if f >= TARGET_FIDELITY {
            out.target += p;
        }
        let label = outcomes.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        out.outputs.push((format!("k=[{label}]"), p, final_state));
    }
    Ok(out)
}

/// Runs the exact protocol on the noisy `|K_c⟩` ensemble.
///
/// Outcome patterns and phase corrections are those of the noiseless run,
/// since the nodes cannot tell which component they hold. Each component is
/// pushed through every accepted branch and steps 3–4.
pub fn run_protocol_noisy(target: &SubgraphTarget, eps: f64, epsilon_fail: f64) -> Result<NoisyRun> {
    let (c, n) = (target.c_nodes, target.n());
    if c % 2 == 1 {
        return Err(Error::OddNodeCount(c));
    }
    if c > EXACT_NODE_LIMIT {
        return Err(Error::TooLarge(format!("c = {c} > {EXACT_NODE_LIMIT}")));
    }
    let ensemble = build_kc_noisy(c, eps)?;
    let pure = build_kc(c)?;
    let corrections = step2_tree(pure.native(), c, n, &PhasePolicy::Fit)?.accepted_corrections();
    let expected = target_state(&target.pattern)?;

    let noiseless = propagate(pure.native(), target, &corrections, &expected)?;
    let propagated: Vec<Propagation> = ensemble
        .components()
        .par_iter()
        .map(|comp| propagate(&comp.state, target, &corrections, &expected))
        .collect::<Result<_>>()?;

    let mut components = Vec::with_capacity(propagated.len());
    let mut outputs = Vec::new();
    let (mut success, mut hit, mut overlap) = (0.0, 0.0, 0.0);
    for (comp, prop) in ensemble.components().iter().zip(propagated) {
        let w = comp.weight;
        success += w * prop.success;
        hit += w * prop.target;
        overlap += w * prop.overlap;
        components.push(PropagatedComponent {
            label: comp.label.clone(),
            input_weight: w,
            success_probability: prop.success,
            target_probability: prop.target,
            target_overlap: prop.overlap,
        });
        for (branch, p, state) in prop.outputs {
            outputs.push((format!("{} {branch}", comp.label), w * p, state));
        }
    }
    if !(success > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let output = PureEnsemble::new(
        outputs
            .into_iter()
            .map(|(label, w, state)| EnsembleComponent { label, weight: w / success, state })
            .collect(),
    )?;
    let x_measured = hit / noiseless.success;
    let report = NoisyReport {
        target: target.pattern.name().to_string(),
        eps,
        c_nodes: c,
        x_theory: kc_weight(c, eps),
        x_measured,
        success_probability: success,
        noiseless_success: noiseless.success,
        conditional_target_weight: hit / success,
        conditional_fidelity: overlap / success,
        retry_budget: retry_budget(x_measured, epsilon_fail)?,
        epsilon_fail,
        pruned_mass: ensemble.pruned_mass(),
        components,
    };
    Ok(NoisyRun { report, output })
}

/// Monte-Carlo version of [`run_protocol_noisy`]'s `x_measured`: each run
/// draws a noisy harvest (constant raised to `c/(1−ε)`) and one ensemble
/// component, and scores the component's exact `|F⟩` rate.
#[derive(Debug, Clone, Serialize)]
pub struct SampledNoise {
    pub runs: usize,
    pub harvest_failures: usize,
    pub x_estimate: f64,
    pub x_std_err: f64,
}

pub fn run_protocol_noisy_sampled(
    target: &SubgraphTarget,
    eps: f64,
    runs: usize,
    seed: u64,
    harvest_n: usize,
) -> Result<SampledNoise> {
    if runs == 0 {
        return Err(invalid("runs must be positive"));
    }
    if eps >= 1.0 {
        return Err(invalid("eps = 1 leaves no links"));
    }
    let exact = run_protocol_noisy(target, eps, 0.5)?.report;
    let c = target.c_nodes;
    let weights: Vec<f64> = exact.components.iter().map(|c| c.input_weight).collect();
    let scores: Vec<f64> =
        exact.components.iter().map(|comp| comp.target_probability / exact.noiseless_success).collect();
    let c_coeff = 2.0 * c as f64 / (1.0 - eps);
    let draws: Vec<Option<f64>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, experiment::NOISE, r as u64);
            let harvest = step1_harvest_with_loss(harvest_n, c_coeff, eps, c, &mut rng)?;
            if !harvest.success {
                return Ok(None);
            }
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            Ok(Some(scores[pick]))
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = draws.iter().flatten().copied().collect();
    let harvest_failures = runs - values.len();
    let (mean, std_err) = mean_and_error(&values);
    Ok(SampledNoise { runs, harvest_failures, x_estimate: mean, x_std_err: std_err })
}

fn mean_and_error(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SubgraphPattern;
    use crate::state::ONE;

    #[test]
    fn mixed_link_components() {
        let pure = mixed_link(0.4, 0.0, 0, 1).unwrap();
        assert_eq!(pure.components().len(), 1);
        let vac = mixed_link(0.4, 1.0, 0, 1).unwrap();
        assert_eq!(vac.components()[0].label, "vacuum");
        let m = mixed_link(1.0, 0.3, 0, 1).unwrap();
        assert!((m.components()[0].weight - 0.7).abs() < 1e-15);
        let phi = m.components()[0].state.amplitude(&[ONE, ONE]);
        assert!((phi.re - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(mixed_link(0.5, 1.5, 0, 1).is_err());
    }

    /// `ρ_{MM'}` from the link-level picture: matched links that differ
    /// between `M` and `M'` must all be intact for the coherence to survive.
    fn link_level_coherence(c: usize, eps: f64, a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
        let differing = a.iter().filter(|e| !b.contains(e)).count();
        (1.0 - eps).powi(differing as i32) / double_factorial_odd(c) as f64
    }

    #[test]
    fn noisy_kc_matches_link_level_density() {
        for c in [4, 6] {
            let matchings = perfect_matchings(&(0..c).collect::<Vec<_>>());
            let kets: Vec<SparseState> =
                matchings.iter().map(|m| matching_superposition(c, std::slice::from_ref(m)).unwrap()).collect();
            for eps in [0.0, 0.1, 0.5] {
                let rho = build_kc_noisy(c, eps).unwrap();
                assert!((rho.total_weight() + rho.pruned_mass() - 1.0).abs() < 1e-12);
                for (i, a) in matchings.iter().enumerate() {
                    for (j, b) in matchings.iter().enumerate() {
                        let got = rho.matrix_element(&kets[i], &kets[j]).unwrap();
                        assert!((got.re - link_level_coherence(c, eps, a, b)).abs() < 1e-12);
                        assert!(got.im.abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn kc_component_weight() {
        for c in [2, 4, 6] {
            for eps in [0.0, 0.1, 0.5] {
                let rho = build_kc_noisy(c, eps).unwrap();
                assert!((rho.weight_of(KC_COMPONENT) - kc_weight(c, eps)).abs() < 1e-15);
            }
        }
        assert!((build_kc_noisy(4, 0.2).unwrap().weight_of(KC_COMPONENT) - 0.64).abs() < 1e-12);
        assert!(matches!(build_kc_noisy(5, 0.1), Err(Error::OddNodeCount(5))));
    }

    #[test]
    fn k4_separable_part_is_diagonal_in_matchings() {
        let eps = 0.3;
        let x = kc_weight(4, eps);
        let rho = build_kc_noisy(4, eps).unwrap();
        let kc = build_kc(4).unwrap();
        let separable = rho.fidelity_with(kc.native()).unwrap() - x;
        assert!((separable - (1.0 - x) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_edge_weight_and_budget() {
        let target = SubgraphTarget::new(SubgraphPattern::edge()).unwrap();
        let mut last = f64::INFINITY;
        for eps in [0.0, 0.2, 0.5] {
            let run = run_protocol_noisy(&target, eps, 1e-3).unwrap();
            let r = &run.report;
            assert!((r.x_measured - (1.0 - eps).powi(3)).abs() < 1e-9);
            assert!(r.x_measured <= last + 1e-12);
            last = r.x_measured;
            assert!((run.output.total_weight() + run.output.pruned_mass() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn retry_budgets() {
        assert_eq!(retry_budget(1.0, 1e-3).unwrap(), 1);
        assert_eq!(retry_budget(0.64, 1e-3).unwrap(), 7);
        assert_eq!(retry_budget(0.25, 1e-2).unwrap(), 17);
        assert!(retry_budget(0.0, 1e-2).is_err());
    }

    #[test]
    fn sampled_estimate_is_reproducible() {
        let target = SubgraphTarget::new(SubgraphPattern::edge()).unwrap();
        let a = run_protocol_noisy_sampled(&target, 0.2, 300, 9, 10_000).unwrap();
        let b = run_protocol_noisy_sampled(&target, 0.2, 300, 9, 10_000).unwrap();
        assert_eq!(a.x_estimate, b.x_estimate);
        assert!((a.x_estimate - 0.512).abs() < 5.0 * a.x_std_err + 1e-9);
    }
}
