//! Simulation toolkit for classical and quantum random graphs.
//!
//! * [`graph`]: Erdős–Rényi sampling, exact small-subgraph containment and
//!   appearance-threshold sweeps.
//! * [`state`]: sparse kets over labelled qudits, generalized measurements,
//!   Fourier vectors and GHZ states.
//! * [`network`]: the quantum random graph built from identical partially
//!   entangled links, and the local degree-counting measurement.
//! * [`protocol`]: the LOCC construction that turns a quantum random graph
//!   into an arbitrary target subgraph state.
//! * [`noise`]: the same construction with links from a source that
//!   sometimes emits vacuum.

pub mod error;
pub mod graph;
pub mod network;
pub mod noise;
pub mod protocol;
pub mod rng;
pub mod state;

pub use error::{Error, Result};
pub use graph::{
    contains_subgraph, critical_exponent, sample_gnp, threshold_sweep, Graph, Rational, ScalingLaw,
    SubgraphPattern, SweepResult, SweepRow,
};
pub use network::{expected_outcome_count, sample_pm_outcomes, vacuum_overlap, QuantumRandomGraph};
pub use noise::{build_kc_noisy, mixed_link, retry_budget, run_protocol_noisy, PureEnsemble};
pub use num_complex::Complex64;
pub use protocol::{
    amplification_plan, build_kc, expand_partitions, reduce_kc, relabel_kc, run_full_protocol, step1_harvest,
    step2_carve, step3_extract_ghz, step4_project, target_state, MatchingState, Mode, PartitionTerm, ProtocolTrace,
    SubgraphTarget,
};
pub use state::{apply_element, fidelity, MeasurementElement, MeasurementSet, OutcomeRecord, QuditRegister, Site, SparseState};
