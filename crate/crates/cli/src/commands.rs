//! One function per subcommand: validate, run, write.

use serde::Serialize;

use qnetlab::network::{expected_outcome_count, sample_pm_outcomes};
use qnetlab::noise::{build_kc_noisy, retry_budget, run_protocol_noisy, run_protocol_noisy_sampled};
use qnetlab::protocol::{
    run_from_distinct_state, run_from_ghz, run_full_protocol, Mode, ProtocolTrace, SubgraphTarget,
    DEFAULT_HARVEST_N, EXACT_NODE_LIMIT, KETD_TERM_LIMIT,
};
use qnetlab::rng::{experiment, stream};
use qnetlab::{threshold_sweep, Error, SubgraphPattern};
use rayon::prelude::*;

use crate::args::{Format, GlobalOpts, ModeArg, NoiseArgs, PmDistArgs, ProtocolArgs, SweepArgs};
use crate::output::{csv_bytes, json_bytes, Sink};

pub enum Failure {
    Usage(String),
    Internal(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(err: E) -> Self {
        Failure::Internal(err.into())
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

#[derive(Serialize)]
struct Config<'a, A: Serialize> {
    seed: u64,
    format: Format,
    threads: Option<usize>,
    args: &'a A,
}

fn config<'a, A: Serialize>(global: &GlobalOpts, format: Format, args: &'a A) -> Config<'a, A> {
    Config { seed: global.seed, format, threads: global.threads, args }
}

fn parse_pattern(name: &str) -> Result<SubgraphPattern, Failure> {
    SubgraphPattern::parse(name).or_else(|e| usage(format!("pattern `{name}`: {e}")))
}

/// `z_min, z_min + step, …, z_max`, rounded to 1e-9 so grid points print
/// cleanly.
pub fn z_grid(z_min: f64, z_max: f64, z_step: f64) -> Vec<f64> {
    let count = ((z_max - z_min) / z_step + 1e-9).floor() as usize + 1;
    (0..count).map(|i| ((z_min + i as f64 * z_step) * 1e9).round() / 1e9).collect()
}

pub fn sweep(global: &GlobalOpts, a: &SweepArgs) -> Result<(), Failure> {
    let pattern = parse_pattern(&a.pattern)?;
    let finite = [a.z_min, a.z_max, a.z_step, a.c_coeff].iter().all(|v| v.is_finite());
    if !finite || !(a.z_step > 0.0) || a.z_min > a.z_max || a.z_max > 0.0 {
        return usage("need finite z_min <= z_max <= 0 and z_step > 0");
    }
    if !(a.c_coeff > 0.0) {
        return usage("--c-coeff must be positive");
    }
    if a.trials == 0 {
        return usage("--trials must be at least 1");
    }
    if let Some(&n) = a.n_list.iter().find(|&&n| n < pattern.node_count()) {
        return usage(format!("N = {n} is smaller than the pattern"));
    }
    let format = global.format.unwrap_or(Format::Csv);
    let zs = z_grid(a.z_min, a.z_max, a.z_step);
    let result = threshold_sweep(&pattern, &a.n_list, &zs, a.c_coeff, a.trials, global.seed)?;
    let bytes = match format {
        Format::Csv => csv_bytes(&result.rows)?,
        Format::Json => json_bytes(&result)?,
    };
    let mut sink = Sink::new();
    sink.emit(global.out.as_deref(), &bytes)?;
    sink.finish(global.out.as_deref(), "sweep", config(global, format, a))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct PmRow {
    m: usize,
    count_mean: f64,
    count_std: f64,
    expected_exact: f64,
    expected_asymptotic: f64,
}

pub fn pm_dist(global: &GlobalOpts, a: &PmDistArgs) -> Result<(), Failure> {
    if a.n < 2 {
        return usage("--n must be at least 2");
    }
    if a.trials == 0 {
        return usage("--trials must be at least 1");
    }
    let p = 2.0 * a.c_coeff * (a.n as f64).powf(a.z);
    if !(p > 0.0 && p <= 1.0) {
        return usage(format!("p = 2c·N^z = {p} must lie in (0, 1]"));
    }
    let format = global.format.unwrap_or(Format::Csv);
    let histograms: Vec<Vec<usize>> = (0..a.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(global.seed, experiment::PM_OUTCOMES, t as u64);
            sample_pm_outcomes(a.n, p, &mut rng).map(|s| s.counts)
        })
        .collect::<Result<_, Error>>()?;
    let max_m = histograms.iter().map(|h| h.len() - 1).max().unwrap_or(0).max(2);
    let trials = a.trials as f64;
    let rows = (0..=max_m)
        .map(|m| {
            let counts: Vec<f64> = histograms.iter().map(|h| h.get(m).copied().unwrap_or(0) as f64).collect();
            let mean = counts.iter().sum::<f64>() / trials;
            let var = if a.trials > 1 {
                counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (trials - 1.0)
            } else {
                0.0
            };
            let expected = expected_outcome_count(a.n, a.z, a.c_coeff, m)?;
            Ok(PmRow {
                m,
                count_mean: mean,
                count_std: var.sqrt(),
                expected_exact: expected.exact,
                expected_asymptotic: expected.asymptotic,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let bytes = match format {
        Format::Csv => csv_bytes(&rows)?,
        Format::Json => json_bytes(&rows)?,
    };
    let mut sink = Sink::new();
    sink.emit(global.out.as_deref(), &bytes)?;
    sink.finish(global.out.as_deref(), "pm-dist", config(global, format, a))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TraceRow {
    run: usize,
    success: bool,
    #[serde(rename = "p_F")]
    p_f: f64,
    fidelity: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SampledSummary<'a> {
    target: String,
    mode: &'static str,
    c_nodes: usize,
    runs: usize,
    harvest_failures: usize,
    successes: usize,
    /// Successes among runs whose harvest succeeded.
    success_rate: f64,
    std_err: f64,
    #[serde(rename = "p_F_exact")]
    p_f_exact: f64,
    traces: &'a [ProtocolTrace],
}

fn exact_trace(target: &SubgraphTarget) -> Result<ProtocolTrace, Failure> {
    let c = target.c_nodes;
    if c % 2 == 0 && c <= EXACT_NODE_LIMIT {
        return Ok(run_full_protocol(target, Mode::Exact, 1, 0)?.remove(0));
    }
    let reason = if c % 2 == 1 {
        format!("c = {c} is odd, so |K_c> has no perfect matching")
    } else {
        format!("c = {c} exceeds the exact limit {EXACT_NODE_LIMIT}")
    };
    let n = target.n();
    let terms: f64 = (0..n).map(|i| (target.big_d - i) as f64).product();
    let mut trace = if terms <= KETD_TERM_LIMIT {
        run_from_distinct_state(target)?
    } else {
        run_from_ghz(target)?
    };
    trace.note = Some(format!("{reason}; chain starts at {}", trace.chain));
    Ok(trace)
}

pub fn protocol(global: &GlobalOpts, a: &ProtocolArgs) -> Result<(), Failure> {
    let pattern = parse_pattern(&a.target)?;
    let target = SubgraphTarget::new(pattern).or_else(|e| usage(e.to_string()))?;
    let format = global.format.unwrap_or(Format::Json);
    let mut sink = Sink::new();
    match a.mode {
        ModeArg::Exact => {
            let trace = exact_trace(&target)?;
            let bytes = match format {
                Format::Json => json_bytes(&trace)?,
                Format::Csv => csv_bytes(&[TraceRow {
                    run: 0,
                    success: trace.success,
                    p_f: trace.p_f,
                    fidelity: trace.final_fidelity,
                }])?,
            };
            sink.emit(global.out.as_deref(), &bytes)?;
            if let Some(path) = &a.trace_out {
                sink.emit(Some(path), &json_bytes(&trace)?)?;
            }
        }
        ModeArg::Sampled => {
            let c = target.c_nodes;
            if c % 2 == 1 || c > EXACT_NODE_LIMIT {
                return usage(format!("sampled mode needs an even c <= {EXACT_NODE_LIMIT}, target has c = {c}"));
            }
            if a.runs == 0 {
                return usage("--runs must be at least 1");
            }
            let traces = run_full_protocol(&target, Mode::Sampled, a.runs, global.seed)?;
            let exact = run_full_protocol(&target, Mode::Exact, 1, 0)?.remove(0);
            let harvest_failures = traces.iter().filter(|t| t.steps.first().is_some_and(|s| s.probability == 0.0)).count();
            let successes = traces.iter().filter(|t| t.success).count();
            let valid = (a.runs - harvest_failures) as f64;
            let rate = if valid > 0.0 { successes as f64 / valid } else { 0.0 };
            let std_err = if valid > 0.0 { (rate * (1.0 - rate) / valid).sqrt() } else { 0.0 };
            let bytes = match format {
                Format::Csv => csv_bytes(
                    &traces
                        .iter()
                        .enumerate()
                        .map(|(run, t)| TraceRow { run, success: t.success, p_f: t.p_f, fidelity: t.final_fidelity })
                        .collect::<Vec<_>>(),
                )?,
                Format::Json => json_bytes(&SampledSummary {
                    target: target.pattern.name().to_string(),
                    mode: "sampled",
                    c_nodes: c,
                    runs: a.runs,
                    harvest_failures,
                    successes,
                    success_rate: rate,
                    std_err,
                    p_f_exact: exact.p_f,
                    traces: &traces,
                })?,
            };
            sink.emit(global.out.as_deref(), &bytes)?;
            if let Some(path) = &a.trace_out {
                sink.emit(Some(path), &json_bytes(&traces)?)?;
            }
        }
    }
    sink.finish(global.out.as_deref(), "protocol", config(global, format, a))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct NoiseOut {
    eps: f64,
    x_theory: f64,
    x_measured: f64,
    retry_budget: Option<u64>,
    pruned_mass: f64,
    target: String,
    c_nodes: usize,
    mode: &'static str,
    epsilon_fail: f64,
    x_std_err: Option<f64>,
    runs: Option<usize>,
    harvest_failures: Option<usize>,
    success_probability: Option<f64>,
    noiseless_success: Option<f64>,
    conditional_target_weight: Option<f64>,
    conditional_fidelity: Option<f64>,
}

pub fn noise(global: &GlobalOpts, a: &NoiseArgs) -> Result<(), Failure> {
    let pattern = parse_pattern(&a.target)?;
    let target = SubgraphTarget::new(pattern).or_else(|e| usage(e.to_string()))?;
    if !(0.0..=1.0).contains(&a.eps) {
        return usage("--eps must lie in [0, 1]");
    }
    if !(a.epsilon_fail > 0.0 && a.epsilon_fail < 1.0) {
        return usage("--epsilon-fail must lie in (0, 1)");
    }
    let c = target.c_nodes;
    if c % 2 == 1 || c > EXACT_NODE_LIMIT {
        return usage(format!("the noisy protocol needs an even c <= {EXACT_NODE_LIMIT}, target has c = {c}"));
    }
    let format = global.format.unwrap_or(Format::Json);
    let pruned_mass = build_kc_noisy(c, a.eps)?.pruned_mass();
    let out = match a.mode {
        ModeArg::Exact => {
            let r = run_protocol_noisy(&target, a.eps, a.epsilon_fail)?.report;
            NoiseOut {
                eps: a.eps,
                x_theory: r.x_theory,
                x_measured: r.x_measured,
                retry_budget: retry_budget(r.x_measured, a.epsilon_fail).ok(),
                pruned_mass,
                target: r.target,
                c_nodes: c,
                mode: "exact",
                epsilon_fail: a.epsilon_fail,
                x_std_err: None,
                runs: None,
                harvest_failures: None,
                success_probability: Some(r.success_probability),
                noiseless_success: Some(r.noiseless_success),
                conditional_target_weight: Some(r.conditional_target_weight),
                conditional_fidelity: Some(r.conditional_fidelity),
            }
        }
        ModeArg::Sampled => {
            if a.runs == 0 {
                return usage("--runs must be at least 1");
            }
            if a.eps >= 1.0 {
                return usage("sampled mode needs eps < 1");
            }
            let s = run_protocol_noisy_sampled(&target, a.eps, a.runs, global.seed, DEFAULT_HARVEST_N)?;
            NoiseOut {
                eps: a.eps,
                x_theory: qnetlab::noise::kc_weight(c, a.eps),
                x_measured: s.x_estimate,
                retry_budget: retry_budget(s.x_estimate, a.epsilon_fail).ok(),
                pruned_mass,
                target: target.pattern.name().to_string(),
                c_nodes: c,
                mode: "sampled",
                epsilon_fail: a.epsilon_fail,
                x_std_err: Some(s.x_std_err),
                runs: Some(s.runs),
                harvest_failures: Some(s.harvest_failures),
                success_probability: None,
                noiseless_success: None,
                conditional_target_weight: None,
                conditional_fidelity: None,
            }
        }
    };
    let bytes = match format {
        Format::Json => json_bytes(&out)?,
        Format::Csv => csv_bytes(&[&out])?,
    };
    let mut sink = Sink::new();
    sink.emit(global.out.as_deref(), &bytes)?;
    sink.finish(global.out.as_deref(), "noise", config(global, format, a))?;
    Ok(())
}
