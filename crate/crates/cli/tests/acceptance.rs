//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::f64::consts::TAU;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use qnetlab::graph::{critical_exponent, threshold_sweep, SubgraphPattern};
use qnetlab::network::{
    apply_pm_exact, expected_outcome_count, sample_pm_outcomes, vacuum_overlap, vacuum_overlap_asymptotic,
    QuantumRandomGraph,
};
use qnetlab::noise::{build_kc_noisy, run_protocol_noisy, KC_COMPONENT};
use qnetlab::protocol::{
    build_kc, distinct_index_state, expand_partitions, ghz_labels, kc_level, kept_labels, reconstruct_partitions,
    relabel_kc, run_from_ghz, run_full_protocol, step3_extract_ghz, Mode, SubgraphTarget,
};
use qnetlab::rng::stream;
use qnetlab::{fidelity, Complex64, SparseState};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget_secs: u64, outcome: Outcome) -> Outcome {
    let secs = elapsed.as_secs_f64();
    match outcome {
        Ok(d) if secs <= budget_secs as f64 => Ok(format!("{d}; {secs:.1}s")),
        Ok(d) => Err(format!("{d}; took {secs:.1}s > {budget_secs}s")),
        Err(d) => Err(format!("{d}; {secs:.1}s")),
    }
}

fn threshold_ordering() -> Outcome {
    let start = Instant::now();
    let ns = [64, 128, 256, 512];
    let zs: Vec<f64> = (0..=125).map(|i| -2.7 + 0.02 * i as f64).collect();
    let patterns = [
        SubgraphPattern::edge(),
        SubgraphPattern::path3(),
        SubgraphPattern::triangle(),
        SubgraphPattern::k4(),
    ];
    let mut hats = Vec::new();
    for (k, f) in patterns.iter().enumerate() {
        let sweep = threshold_sweep(f, &ns, &zs, 1.0, 200, 1000 + k as u64).map_err(|e| e.to_string())?;
        let z = sweep.crossing(512).ok_or(format!("{} never reaches 1/2", f.name()))?;
        hats.push((f.name().to_string(), z, critical_exponent(f).map_err(|e| e.to_string())?.to_f64()));
    }
    let ordered = hats.windows(2).all(|w| w[0].1 < w[1].1);
    let close = [0, 2].iter().all(|&i| (hats[i].1 - hats[i].2).abs() <= 0.2);
    let detail = hats.iter().map(|(n, z, t)| format!("{n} {z:.3} (-n/l {t:.3})")).collect::<Vec<_>>().join(", ");
    within(start.elapsed(), 300, check(ordered && close, format!("z(512): {detail}")))
}

fn binomial_pmf(n: usize, q: f64, k: usize) -> f64 {
    let c: f64 = (0..k).map(|i| (n - i) as f64 / (i + 1) as f64).product();
    c * q.powi(k as i32) * (1.0 - q).powi((n - k) as i32)
}

fn pm_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for p in [0.1, 0.5, 1.0] {
        let g = QuantumRandomGraph::new(5, p).and_then(|g| g.materialize()).map_err(|e| e.to_string())?;
        for node in 0..5 {
            let records = apply_pm_exact(&g, node).map_err(|e| e.to_string())?;
            let tv: f64 = records
                .iter()
                .enumerate()
                .map(|(m, r)| (r.probability - binomial_pmf(4, p / 2.0, m)).abs())
                .sum::<f64>()
                / 2.0;
            worst = worst.max(tv);
        }
    }
    check(worst < 1e-10, format!("max TV distance {worst:.2e}"))
}

fn vacuum() -> Outcome {
    let (n, z) = (1000usize, -2.5);
    let exact = vacuum_overlap(n, (n as f64).powf(z)).map_err(|e| e.to_string())?;
    let asym = vacuum_overlap_asymptotic(n, z);
    check(
        (exact - asym).abs() <= 1e-3 && exact > 0.99,
        format!("overlap {exact:.6}, exp(-N^(z+2)/4) = {asym:.6}"),
    )
}

fn relabel_identity() -> Outcome {
    let kc = build_kc(4).map_err(|e| e.to_string())?;
    let relabeled = relabel_kc(&kc).map_err(|e| e.to_string())?;
    let ghz = SparseState::ghz(3, 3, ["n0", "n1", "n2", "n3"]).map_err(|e| e.to_string())?;
    let f = fidelity(&relabeled, &ghz).map_err(|e| e.to_string())?;
    check(f >= 1.0 - 1e-12, format!("fidelity {f:.15}"))
}

/// Dense re-derivation of the edge protocol (c = 6, n = 2, D = 4, d = 2)
/// that shares only the colouring with the library. Phases are tracked as
/// integers mod 5 and phase correctability is decided by exhaustive search.
fn edge_oracle() -> f64 {
    const C: usize = 6;
    const M: i64 = 5;
    fn matchings(nodes: Vec<usize>) -> Vec<Vec<(usize, usize)>> {
        if nodes.is_empty() {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for k in 1..nodes.len() {
            let rest: Vec<usize> = nodes.iter().enumerate().filter(|&(i, _)| i != 0 && i != k).map(|(_, &v)| v).collect();
            for mut m in matchings(rest) {
                m.push((nodes[0], nodes[k]));
                out.push(m);
            }
        }
        out
    }
    let all = matchings((0..C).collect());
    assert_eq!(all.len(), 15);
    let carved: Vec<Vec<(usize, usize)>> = all.into_iter().filter(|m| !m.contains(&(0, 1))).collect();
    let p_links = carved.len() as f64 / 15.0;
    // For each kept configuration (a, b): the D-node levels of its matching.
    let mut levels = [[None::<[i64; 4]>; 4]; 4];
    for m in &carved {
        let partner = |v: usize| m.iter().find_map(|&(x, y)| if x == v { Some(y) } else if y == v { Some(x) } else { None }).unwrap();
        let (a, b) = (partner(0) - 2, partner(1) - 2);
        let mut l = [0i64; 4];
        for x in 2..C {
            l[x - 2] = kc_level(C, x, partner(x)) as i64;
        }
        levels[a][b] = Some(l);
    }
    let amp = (1.0 / carved.len() as f64).sqrt() * (1.0 / M as f64).powi(2);
    let mut p_f = 0.0;
    for code in 0..625usize {
        let k: Vec<i64> = (0..4).map(|x| (code / 5usize.pow(x as u32) % 5) as i64 + 1).collect();
        let theta = |a: usize, b: usize| -> Option<i64> {
            levels[a][b].map(|l| (-(0..4).map(|x| k[x] * l[x]).sum::<i64>()).rem_euclid(M))
        };
        // Every configuration with a != b occurs exactly once, all with modulus `amp`.
        let norm_sq = 12.0 * amp * amp;
        let mut correctable = false;
        'search: for code1 in 0..625usize {
            let a1: Vec<i64> = (0..4).map(|x| (code1 / 5usize.pow(x as u32) % 5) as i64).collect();
            let target = theta(0, 1).unwrap() + a1[1];
            let mut a0 = [0i64; 4];
            for a in 0..4 {
                let b = if a == 0 { 1 } else { 0 };
                a0[a] = (target - theta(a, b).unwrap() - a1[b]).rem_euclid(M);
            }
            for a in 0..4 {
                for b in (0..4).filter(|&b| b != a) {
                    if (theta(a, b).unwrap() + a0[a] + a1[b] - target).rem_euclid(M) != 0 {
                        continue 'search;
                    }
                }
            }
            correctable = true;
            break;
        }
        if !correctable {
            continue;
        }
        // Corrected: amplitude `amp` on every a != b. Step 3 with d = 2, k = (1, 1).
        let bra = |j2: usize| Complex64::from_polar(1.0 / 2f64.sqrt(), -TAU * (j2 + 1) as f64 / 2.0);
        let mut g = [[Complex64::new(0.0, 0.0); 2]; 2];
        for a in 0..4 {
            for b in (0..4).filter(|&b| b != a) {
                g[a / 2][b / 2] += amp * bra(a % 2) * bra(b % 2);
            }
        }
        let g_norm: f64 = g.iter().flatten().map(|v| v.norm_sqr()).sum();
        // Step 4: level i -> bit i - 1 at both nodes, scaled by 1/sqrt(2) each.
        let h: Vec<Complex64> = g.iter().flatten().map(|v| v * 0.5).collect();
        let h_norm: f64 = h.iter().map(|v| v.norm_sqr()).sum();
        p_f += p_links * norm_sq * (g_norm / norm_sq) * (h_norm / g_norm);
    }
    p_f
}

fn full_edge_pipeline() -> Outcome {
    let start = Instant::now();
    let target = SubgraphTarget::new(SubgraphPattern::edge()).map_err(|e| e.to_string())?;
    let trace = run_full_protocol(&target, Mode::Exact, 1, 0).map_err(|e| e.to_string())?.remove(0);
    let oracle = edge_oracle();
    let f = trace.final_fidelity.unwrap_or(0.0);
    within(
        start.elapsed(),
        60,
        check(
            trace.success && f >= 1.0 - 1e-9 && (trace.p_f - oracle).abs() <= 1e-9,
            format!("fidelity {f:.12}, p_F {:.12} vs oracle {oracle:.12}", trace.p_f),
        ),
    )
}

fn step3_isolation() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (n, d, big_d) in [(2, 2, 4), (2, 3, 9), (3, 4, 16)] {
        let ketd = distinct_index_state(n, big_d, &kept_labels(n)).map_err(|e| e.to_string())?;
        let out = step3_extract_ghz(&ketd, n, d).map_err(|e| e.to_string())?;
        let ghz = SparseState::ghz(d, d, ghz_labels(n)).map_err(|e| e.to_string())?;
        let f = match &out.state {
            Some(s) => fidelity(s, &ghz).map_err(|e| e.to_string())?,
            None => 0.0,
        };
        let mut leak: f64 = 0.0;
        for term in expand_partitions(n, big_d).map_err(|e| e.to_string())? {
            if term.shape()[0] < n {
                let p = step3_extract_ghz(&term.state, n, d).map_err(|e| e.to_string())?.probability;
                leak = leak.max(p);
            }
        }
        ok &= f >= 1.0 - 1e-9 && leak < 1e-12;
        parts.push(format!("({n},{d},{big_d}) fidelity {f:.12} leak {leak:.1e}"));
    }
    within(start.elapsed(), 120, check(ok, parts.join(", ")))
}

fn step4_isolation() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for f in [SubgraphPattern::edge(), SubgraphPattern::path3(), SubgraphPattern::triangle()] {
        let target = SubgraphTarget::new(f).map_err(|e| e.to_string())?;
        let trace = run_from_ghz(&target).map_err(|e| e.to_string())?;
        let fid = trace.final_fidelity.unwrap_or(0.0);
        ok &= fid >= 1.0 - 1e-9;
        parts.push(format!("{} (d={}) {fid:.12}", target.pattern.name(), target.d));
    }
    check(ok, parts.join(", "))
}

fn partition_expansion() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in 1..=4 {
        for big_d in n.max(2)..=16 {
            let terms = expand_partitions(n, big_d).map_err(|e| e.to_string())?;
            let rebuilt = reconstruct_partitions(&terms, big_d).map_err(|e| e.to_string())?;
            let exact = distinct_index_state(n, big_d, &kept_labels(n)).map_err(|e| e.to_string())?;
            for (index, _) in exact.terms().chain(rebuilt.terms()) {
                worst = worst.max((exact.amplitude(index) - rebuilt.amplitude(index)).norm());
            }
        }
    }
    let three = expand_partitions(3, 4).map_err(|e| e.to_string())?;
    let weight_of = |shape: &[usize]| -> Vec<i64> {
        three.iter().filter(|t| t.shape() == shape).map(|t| t.weight).collect()
    };
    let weights_ok = weight_of(&[1, 1, 1]) == vec![1] && weight_of(&[2, 1]) == vec![-1; 3] && weight_of(&[3]) == vec![2];
    check(
        worst < 1e-12 && weights_ok,
        format!("max amplitude error {worst:.1e}; n=3 weights (1,1,1)->{:?} (2,1)->{:?} (3)->{:?}", weight_of(&[1, 1, 1]), weight_of(&[2, 1]), weight_of(&[3])),
    )
}

fn noisy_weight_law() -> Outcome {
    let start = Instant::now();
    let target = SubgraphTarget::new(SubgraphPattern::edge()).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for eps in [0.0, 0.1, 0.2, 0.5] {
        let report = run_protocol_noisy(&target, eps, 1e-3).map_err(|e| e.to_string())?.report;
        let want = (1.0 - eps).powi(3);
        let k4 = build_kc_noisy(4, eps).map_err(|e| e.to_string())?.weight_of(KC_COMPONENT);
        ok &= (report.x_measured - want).abs() <= 1e-9 && (k4 - (1.0 - eps).powi(2)).abs() <= 1e-12;
        parts.push(format!("eps {eps}: x {:.12} (want {want:.12}), K4 {k4:.12}", report.x_measured));
    }
    within(start.elapsed(), 60, check(ok, parts.join("; ")))
}

fn outcome_counts() -> Outcome {
    let start = Instant::now();
    let (n, z, c) = (10_000usize, -2.0, 3.0);
    let p = 2.0 * c * (n as f64).powf(z);
    let mut total = 0usize;
    for s in 0..400u64 {
        let mut rng = stream(2024, 0, s);
        total += sample_pm_outcomes(n, p, &mut rng).map_err(|e| e.to_string())?.count(1);
    }
    let mean = total as f64 / 400.0;
    let e = expected_outcome_count(n, z, c, 1).map_err(|e| e.to_string())?;
    let rel = (e.exact - e.asymptotic).abs() / e.asymptotic;
    within(
        start.elapsed(),
        60,
        check(
            (mean - 3.0).abs() <= 0.3 && rel <= 0.02,
            format!("mean m=1 count {mean:.3}; exact {:.5} vs asymptotic {:.5}", e.exact, e.asymptotic),
        ),
    )
}

fn run_cli(dir: &Path, name: &str, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = dir.join(name);
    let status = Command::new(env!("CARGO_BIN_EXE_qnetlab"))
        .args(args)
        .arg("--out")
        .arg(&out)
        .env_remove("QNETLAB_THREADS")
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("`{}` exited with {status}", args.join(" ")));
    }
    std::fs::read(&out).map_err(|e| e.to_string())
}

fn manifest_digests(dir: &Path, name: &str) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(dir.join(format!("{name}.manifest.json"))).map_err(|e| e.to_string())?;
    let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok(json["outputs"].as_array().map(|a| a.iter().map(|o| o["sha256"].clone()).collect()).unwrap_or_default())
}

fn determinism() -> Outcome {
    let runs: [(&str, &[&str]); 7] = [
        ("sweep.csv", &["sweep", "--pattern", "triangle", "--n-list", "64,128", "--z-min", "-1.6", "--z-max", "-0.4", "--z-step", "0.1", "--trials", "50", "--seed", "7"]),
        ("pm.csv", &["pm-dist", "--n", "2000", "--z", "-1.5", "--c-coeff", "1", "--trials", "40", "--seed", "3"]),
        ("protocol.json", &["protocol", "--target", "edge", "--mode", "exact", "--seed", "1"]),
        ("sampled.csv", &["protocol", "--target", "edge", "--mode", "sampled", "--runs", "200", "--seed", "5", "--format", "csv"]),
        ("path3.json", &["protocol", "--target", "path3", "--seed", "1"]),
        ("noise.json", &["noise", "--target", "edge", "--eps", "0.2", "--mode", "exact"]),
        ("noise-sampled.json", &["noise", "--target", "edge", "--eps", "0.2", "--mode", "sampled", "--runs", "200", "--seed", "4"]),
    ];
    let first = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut mismatched = Vec::new();
    for (name, args) in runs {
        let a = run_cli(first.path(), name, args)?;
        let mut threaded: Vec<&str> = args.to_vec();
        threaded.extend(["--threads", "2"]);
        let b = run_cli(second.path(), name, &threaded)?;
        if a != b || manifest_digests(first.path(), name)? != manifest_digests(second.path(), name)? {
            mismatched.push(name);
        }
    }
    check(mismatched.is_empty(), format!("7 invocations, differing outputs: {mismatched:?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("threshold crossings ordered by -n/l, edge and triangle near it", threshold_ordering),
        ("P_m outcomes match Binomial(N-1, p/2) on |G_5,p>", pm_equivalence),
        ("vacuum overlap below z = -2", vacuum),
        ("relabeled |K_4> is the 4-party 3-level GHZ state", relabel_identity),
        ("exact edge pipeline fidelity and p_F vs brute-force oracle", full_edge_pipeline),
        ("step-3 cascade isolates the GHZ term", step3_isolation),
        ("step-4 maps GHZ onto |F>", step4_isolation),
        ("partition expansion reconstruction and n=3 weights", partition_expansion),
        ("noisy edge |F> weight (1-eps)^3 and K_4 weight (1-eps)^2", noisy_weight_law),
        ("mean m=1 count and exact vs asymptotic expectation", outcome_counts),
        ("CLI outputs byte-identical across repeated seeded runs", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("criterion {:>2}: PASS  {name} [{detail}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2}: FAIL  {name} [{detail}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
