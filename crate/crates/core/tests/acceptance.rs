//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use sparse_oracle::cli::{run_experiment, write_report, Experiment, ExperimentConfig, ExperimentReport};
use sparse_oracle::estimators::backprop_gradient;
use sparse_oracle::geometry::{canonicalize, norm_domination_check, project_ball, prox, ProxKind};
use sparse_oracle::guarantees::lipschitz_audit;
use sparse_oracle::net::{matrix_norm, Activation, Architecture, BallConstraint, MatrixNorm, ParamStack};
use sparse_oracle::noise::{brute_force_effective_noise, effective_noise, NoiseKind, NoiseSearch};
use sparse_oracle::synth::{gen_inputs, gen_noise, Dataset, InputDist, NoiseModel};
use sparse_oracle::seed;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed <= limit
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * normal(rng))
}

fn table_column(report: &ExperimentReport, table: &str, column: &str) -> Vec<String> {
    let t = report.table(table).expect("table present");
    let c = t.column(column).expect("column present");
    t.rows.iter().map(|r| r[c].render()).collect()
}

// ---------------------------------------------------------------------------------------

fn lipschitz() -> Outcome {
    let start = Instant::now();
    let archs = [
        Architecture::new(8, vec![6], 3).unwrap(),
        Architecture::new(8, vec![6, 5], 3).unwrap(),
        Architecture::new(8, vec![6, 5, 4], 3).unwrap(),
    ];
    let mut violations = [0usize; 2];
    let mut layerwise = 0;
    let mut max_ratio = [0.0f64; 2];
    let mut cases = 0;
    for (a, arch) in archs.iter().enumerate() {
        for (k, kind) in [NoiseKind::Con, NoiseKind::Node].into_iter().enumerate() {
            for (f, act) in [Activation::Relu, Activation::Tanh].into_iter().enumerate() {
                let audit = lipschitz_audit(arch, act, kind, 10_000, (100 * a + 10 * k + f) as u64).unwrap();
                violations[k] += audit.violations;
                layerwise += audit.layerwise_violations;
                max_ratio[k] = max_ratio[k].max(audit.max_ratio);
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        violations == [0, 0] && within(Duration::from_secs(60), elapsed),
        format!(
            "{cases} cases x 10000 trials, violations con {} / node {}, max ratio con {:.4} / node {:.4}, \
             layerwise-bound violations {layerwise}, {elapsed:.1?}",
            violations[0], violations[1], max_ratio[0], max_ratio[1]
        ),
    )
}

/// Full-size oracle-inequality runs, shared by the two bound criteria.
fn verify_oracle_runs() -> (ExperimentReport, Duration) {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::defaults(Experiment::VerifyOracle);
    cfg.replications = 50;
    cfg.n = 200;
    cfg.noise = NoiseModel::Gaussian { sigma: 0.5 };
    (run_experiment(&cfg).unwrap(), start.elapsed())
}

fn oracle_inequality(report: &ExperimentReport, elapsed: Duration) -> Outcome {
    let cert = table_column(report, "bounds", "certificate");
    let premise = table_column(report, "bounds", "premise");
    let holds = table_column(report, "bounds", "holds");
    let checked = (0..cert.len()).filter(|&i| cert[i] == "true" && premise[i] == "true").count();
    let failed = (0..cert.len())
        .filter(|&i| cert[i] == "true" && premise[i] == "true" && holds[i] != "true")
        .count();
    outcome(
        failed == 0 && !report.violation && checked > 0 && within(Duration::from_secs(600), elapsed),
        format!("{checked}/{} replications certified, {failed} violations, {elapsed:.1?}", cert.len()),
    )
}

fn parametric_instance(report: &ExperimentReport) -> Outcome {
    let cert = table_column(report, "bounds", "certificate");
    let err_ref: Vec<f64> = table_column(report, "bounds", "err_ref").iter().map(|v| v.parse().unwrap()).collect();
    let noise_only = table_column(report, "bounds", "noise_only_bound_holds");
    let certified: Vec<usize> = (0..cert.len()).filter(|&i| cert[i] == "true").collect();
    let failed = certified.iter().filter(|&&i| noise_only[i] != "true").count();
    let max_ref = err_ref.iter().fold(0.0f64, |m, v| m.max(*v));
    outcome(
        failed == 0 && !certified.is_empty() && max_ref <= 1e-20,
        format!("{} certified, {failed} violations of err <= 2r|outer|/n, max teacher error {max_ref:.1e}", certified.len()),
    )
}

fn oracle_agreement() -> Outcome {
    let start = Instant::now();
    let archs = [
        Architecture::new(1, vec![1], 1).unwrap(),
        Architecture::new(2, vec![1], 1).unwrap(),
        Architecture::new(1, vec![2], 2).unwrap(),
        Architecture::new(1, vec![1, 1], 2).unwrap(),
        Architecture::new(2, vec![1], 2).unwrap(),
    ];
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..50usize {
        let arch = &archs[i % archs.len()];
        let kind = if (i / archs.len()) % 2 == 0 { NoiseKind::Con } else { NoiseKind::Node };
        let act = if (i / (2 * archs.len())) % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let n = 12 + i % 10;
        let x = gen_inputs(n, arch.d, InputDist::Gaussian, 1000 + i as u64).unwrap();
        let u = gen_noise(n, arch.m, NoiseModel::Gaussian { sigma: 1.0 }, 2000 + i as u64).unwrap();
        let search = NoiseSearch { n_starts: 64, ascent_iters: 100, seed: i as u64 };
        let multi = effective_noise(&x.view(), &u.view(), arch, act, kind, &search).unwrap().value;
        let grid = brute_force_effective_noise(&x.view(), &u.view(), arch, act, kind, 1e-3).unwrap();
        let rel = if grid == 0.0 { multi.abs() } else { (multi - grid).abs() / grid };
        worst = worst.max(rel);
        if rel > 0.02 {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && within(Duration::from_secs(120), elapsed),
        format!("50 instances, worst relative gap {worst:.2e}, {failures} beyond 2%, {elapsed:.1?}"),
    )
}

fn rate_scaling() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::defaults(Experiment::RateSweep);
    let report = run_experiment(&cfg).unwrap();
    let elapsed = start.elapsed();
    let slope = |k: &str| report.summary[k].as_f64();
    let ok = |s: Option<f64>| s.is_some_and(|s| (0.45..=0.75).contains(&s));
    let (con, node) = (slope("slope_con"), slope("slope_node"));
    outcome(
        ok(con) && ok(node) && within(Duration::from_secs(900), elapsed),
        format!("slopes con {con:?}, node {node:?} over n = 64..4096, 10 reps, {elapsed:.1?}"),
    )
}

/// Nearest feasible point to `a` on a grid of spacing `step` inside `[lo, hi]^k`.
fn grid_nearest(a: &[f64], lo: &[f64], hi: &[f64], step: f64, feasible: impl Fn(&[f64]) -> bool, cost: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let k = a.len();
    let counts: Vec<usize> = (0..k).map(|j| ((hi[j] - lo[j]) / step).round() as usize + 1).collect();
    let mut idx = vec![0usize; k];
    let mut point = vec![0.0; k];
    let mut best = (f64::INFINITY, vec![0.0; k]);
    loop {
        for j in 0..k {
            point[j] = lo[j] + idx[j] as f64 * step;
        }
        if feasible(&point) {
            let c = cost(&point);
            if c < best.0 {
                best = (c, point.clone());
            }
        }
        let mut j = 0;
        loop {
            if j == k {
                return best.1;
            }
            idx[j] += 1;
            if idx[j] < counts[j] {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Constraint norm of a row-major `rows × cols` matrix given as a flat slice.
fn flat_norm(z: &[f64], rows: usize, cols: usize, constraint: BallConstraint) -> f64 {
    match constraint {
        BallConstraint::L1Ball => z.iter().map(|v| v.abs()).sum(),
        BallConstraint::L21Ball => (0..cols)
            .map(|c| (0..rows).map(|r| z[r * cols + c].powi(2)).sum::<f64>().sqrt())
            .sum(),
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn projection_and_prox() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(6);
    let mut worst = 0.0f64;
    let mut worst_idem = 0.0f64;
    let mut worst_location = 0.0f64;
    let mut failures = 0;
    let shapes = [(1usize, 2usize), (2, 1), (1, 3), (3, 1)];
    for i in 0..200 {
        let (rows, cols) = shapes[i % shapes.len()];
        let constraint = if (i / shapes.len()) % 2 == 0 { BallConstraint::L1Ball } else { BallConstraint::L21Ball };
        let radius = rng.random_range(0.3..1.5);
        let a = random_matrix(&mut rng, rows, cols, 1.5);
        let p = project_ball(&a.view(), constraint, radius).unwrap().matrix;
        let pp = project_ball(&p.view(), constraint, radius).unwrap().matrix;
        worst_idem = worst_idem.max((&pp - &p).iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let flat_a: Vec<f64> = a.iter().copied().collect();
        let flat_p: Vec<f64> = p.iter().copied().collect();
        let feasible = |z: &[f64]| flat_norm(z, rows, cols, constraint) <= radius + 1e-12;
        let cost = |z: &[f64]| dist(z, &flat_a);
        let q = if rows * cols == 2 {
            // Exhaustive grid over the ball's bounding box.
            grid_nearest(&flat_a, &[-radius; 2], &[radius; 2], 1e-3, feasible, cost)
        } else {
            // Grid over a neighborhood of the candidate; for a convex problem any feasible
            // improvement near a non-optimal point shows up here.
            let h = 0.05;
            let lo: Vec<f64> = flat_p.iter().map(|v| v - h).collect();
            let hi: Vec<f64> = flat_p.iter().map(|v| v + h).collect();
            grid_nearest(&flat_a, &lo, &hi, 1e-3, feasible, cost)
        };
        // Grid minimizers drift along curved or oblique boundaries where the distance is flat,
        // so the match is on the attained distance; the candidate must also beat the grid.
        let (dp, dq) = (dist(&flat_p, &flat_a), dist(&q, &flat_a));
        let beaten = dq < dp - 1e-12;
        let gap = (dq - dp).abs();
        worst = worst.max(gap);
        worst_location = worst_location.max(dist(&q, &flat_p));
        if gap > 2e-3 || beaten || !feasible(&flat_p) {
            failures += 1;
        }
    }
    // Prox: minimize ½‖B − A‖² + τ·norm(B) on a grid for 2-entry inputs.
    let mut worst_prox = 0.0f64;
    for i in 0..100 {
        let (kind, constraint, shape) = if i % 2 == 0 {
            (ProxKind::L1, BallConstraint::L1Ball, (1, 2))
        } else {
            (ProxKind::L21, BallConstraint::L21Ball, (2, 1))
        };
        let a = random_matrix(&mut rng, shape.0, shape.1, 1.0);
        let tau = rng.random_range(0.05..1.0);
        let p = prox(&a.view(), tau, kind);
        let flat_a: Vec<f64> = a.iter().copied().collect();
        let flat_p: Vec<f64> = p.iter().copied().collect();
        let bound = flat_a.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-3;
        let q = grid_nearest(
            &flat_a,
            &[-bound; 2],
            &[bound; 2],
            1e-3,
            |_| true,
            |z| 0.5 * dist(z, &flat_a).powi(2) + tau * flat_norm(z, shape.0, shape.1, constraint),
        );
        let gap = dist(&q, &flat_p);
        worst_prox = worst_prox.max(gap);
        if gap > 2e-3 {
            failures += 1;
        }
    }
    let pass = failures == 0 && worst_idem <= 1e-12;
    outcome(
        pass,
        format!(
            "200 projections worst distance gap {worst:.2e} (grid argmin offset {worst_location:.1e}), 100 proxes worst gap {worst_prox:.2e}, idempotence {worst_idem:.1e}, {:.1?}",
            start.elapsed()
        ),
    )
}

/// Pre-activations of every hidden layer for input `x`.
fn pre_activations(theta: &ParamStack, x: &Array1<f64>) -> Vec<f64> {
    let mut h = x.clone();
    let mut out = Vec::new();
    for layer in theta.inner_layers() {
        let z = layer.dot(&h);
        out.extend(z.iter().copied());
        h = z.mapv(|v| theta.activation().eval(v));
    }
    out
}

fn gradient_check() -> Outcome {
    let mut rng = seed::rng(7);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut configs = 0;
    let mut attempts = 0;
    while configs < 100 {
        attempts += 1;
        assert!(attempts < 10_000, "could not draw well-separated ReLU configurations");
        let act = if configs % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let d = rng.random_range(1..=4);
        let depth = rng.random_range(1..=3);
        let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=4)).collect();
        let m = rng.random_range(1..=3);
        let arch = Architecture::new(d, widths, m).unwrap();
        let layers: Vec<Array2<f64>> = arch
            .layer_shapes()
            .into_iter()
            .map(|(r, c)| random_matrix(&mut rng, r, c, 1.0 / (c as f64).sqrt()))
            .collect();
        let theta = ParamStack::new(layers, act).unwrap();
        let n = rng.random_range(3..=12);
        let x = random_matrix(&mut rng, n, d, 1.0);
        if act == Activation::Relu {
            let separated = x.rows().into_iter().all(|row| {
                pre_activations(&theta, &row.to_owned()).iter().all(|z| z.abs() >= 0.1)
            });
            if !separated {
                continue;
            }
        }
        let y = random_matrix(&mut rng, n, m, 1.0);
        let data = Dataset::new(x, y).unwrap();
        let grads = backprop_gradient(&theta, &data).unwrap();
        let loss = |t: &ParamStack| {
            let out = t.forward_batch(&data.x.view()).unwrap();
            (&out - &data.y).iter().map(|v| v * v).sum::<f64>()
        };
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for (j, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                let shifted = |delta: f64| {
                    let mut layers = theta.layers().to_vec();
                    layers[j][[r, c]] += delta;
                    ParamStack::new(layers, act).unwrap()
                };
                let fd = (loss(&shifted(h)) - loss(&shifted(-h))) / (2.0 * h);
                diff = diff.max((fd - g[[r, c]]).abs());
                scale = scale.max(fd.abs()).max(g[[r, c]].abs());
            }
        }
        worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
        configs += 1;
    }
    outcome(worst <= 1e-5, format!("100 configurations (Tanh and separated ReLU), max relative error {worst:.2e}"))
}

fn canonicalization() -> Outcome {
    let mut rng = seed::rng(8);
    let (mut worst_fn, mut worst_norm) = (0.0f64, 0.0f64);
    let acts = [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Identity];
    for i in 0..100 {
        let act = acts[i % acts.len()];
        let constraint = if i % 2 == 0 { BallConstraint::L1Ball } else { BallConstraint::L21Ball };
        let d = rng.random_range(1..=5);
        let depth = rng.random_range(1..=3);
        let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=5)).collect();
        let arch = Architecture::new(d, widths, rng.random_range(1..=3)).unwrap();
        let layers: Vec<Array2<f64>> = arch
            .layer_shapes()
            .into_iter()
            .map(|(r, c)| {
                let scale = rng.random_range(0.2..3.0);
                random_matrix(&mut rng, r, c, scale)
            })
            .collect();
        let theta = ParamStack::new(layers, act).unwrap();
        let canon = canonicalize(&theta, constraint).unwrap();
        for l in canon.inner_layers() {
            worst_norm = worst_norm.max((constraint.norm(&l.view()) - 1.0).abs());
        }
        let probes = random_matrix(&mut rng, 100, d, 2.0);
        let a = theta.forward_batch(&probes.view()).unwrap();
        let b = canon.forward_batch(&probes.view()).unwrap();
        worst_fn = worst_fn.max((&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    outcome(
        worst_fn <= 1e-10 && worst_norm <= 1e-12,
        format!("100 stacks, max output change {worst_fn:.1e}, max inner norm deviation {worst_norm:.1e}"),
    )
}

fn norm_domination() -> Outcome {
    let mut rng = seed::rng(9);
    let (mut dom, mut frob) = (0, 0);
    for i in 0..1000 {
        let rows = rng.random_range(1..=20);
        let cols = rng.random_range(1..=20);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let mut a = random_matrix(&mut rng, rows, cols, scale);
        if i % 3 == 0 {
            // Sparse columns stress the column-norm side.
            a.mapv_inplace(|v| if rng.random_bool(0.6) { 0.0 } else { v });
        }
        if !norm_domination_check(&a.view()).ok {
            dom += 1;
        }
        if matrix_norm(&a.view(), MatrixNorm::Frobenius) > matrix_norm(&a.view(), MatrixNorm::L21) * (1.0 + 1e-12) {
            frob += 1;
        }
    }
    outcome(
        dom == 0 && frob == 0,
        format!("1000 matrices, {dom} violations of l1 <= sqrt(rows) l21, {frob} of frobenius <= l21"),
    )
}

fn generalization() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::defaults(Experiment::Generalization);
    let report = run_experiment(&cfg).unwrap();
    let fraction = report.summary["fraction_holding"].as_f64().unwrap();
    let c_fit = report.summary["c_fit"].as_f64().unwrap();
    let has_caveat = report.summary.get("caveat").and_then(|v| v.as_str()).is_some_and(|s| !s.is_empty());
    outcome(
        fraction >= 0.9 && has_caveat,
        format!(
            "{:.0}% of 50 test replications hold with b = 0.5, c_fit = {c_fit:.3e} from 20 pilots, {:.1?}",
            100.0 * fraction,
            start.elapsed()
        ),
    )
}

fn small_config(experiment: Experiment) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(experiment);
    cfg.seed = 17;
    cfg.replications = 3;
    cfg.n = 60;
    cfg.oracle.n_starts = 8;
    cfg.oracle.ascent_iters = 30;
    cfg.train.max_iters = 300;
    cfg.train.restarts = 2;
    cfg.sweep.n_grid = vec![32, 64, 128];
    cfg.sweep.reps = 3;
    cfg.audit.trials = 500;
    cfg.generalization.pilot_reps = 4;
    cfg.generalization.reps = 6;
    cfg
}

fn determinism() -> Outcome {
    let mut mismatched = Vec::new();
    let mut files = 0;
    for experiment in Experiment::ALL {
        let cfg = small_config(experiment);
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let mut bodies = Vec::new();
        for dir in &dirs {
            let report = run_experiment(&cfg).unwrap();
            let paths = write_report(&report, dir.path(), false).unwrap();
            let csvs: Vec<Vec<u8>> = paths
                .iter()
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .map(|p| std::fs::read(p).unwrap())
                .collect();
            bodies.push(csvs);
        }
        files += bodies[0].len();
        if bodies[0] != bodies[1] {
            mismatched.push(experiment.name());
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("6 experiments run twice, {files} CSV files compared, mismatches {mismatched:?}"),
    )
}

fn main() -> ExitCode {
    // Positional arguments restrict the run to criteria whose names contain one of them;
    // flags passed by the test runner are ignored.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, run: &mut dyn FnMut() -> Outcome| {
        if !selected(name) {
            return;
        }
        let o = run();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    let mut bounds: Option<(ExperimentReport, Duration)> = None;
    record("lipschitz-audit", &mut lipschitz);
    record("oracle-inequality-certificate", &mut || {
        let (report, elapsed) = bounds.get_or_insert_with(verify_oracle_runs);
        oracle_inequality(report, *elapsed)
    });
    record("parametric-oracle-inequality", &mut || {
        let (report, _) = bounds.get_or_insert_with(verify_oracle_runs);
        parametric_instance(report)
    });
    record("effective-noise-oracle-agreement", &mut oracle_agreement);
    record("rate-scaling", &mut rate_scaling);
    record("projection-and-prox", &mut projection_and_prox);
    record("gradient-check", &mut gradient_check);
    record("canonicalization", &mut canonicalization);
    record("norm-domination", &mut norm_domination);
    record("generalization-monitoring", &mut generalization);
    record("determinism", &mut determinism);
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
