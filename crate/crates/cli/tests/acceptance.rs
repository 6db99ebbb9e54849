//! End-to-end acceptance run. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any fails.
//!
//! Set `ACCEPTANCE_ONLY=2,5` to run a subset while iterating; by default all run.

use mzimesh::chip::{generate_dataset, sweep_protocol, ChipConfig, DatasetSpec, SweepSpec, VirtualChip};
use mzimesh::dataset::{Dataset, Record, Split};
use mzimesh::ensemble::{fit_weights, Combiner, LambdaSelection, RidgeConfig, StudyReport};
use mzimesh::mesh::{eval_am, grad_am, AnalyticalModelParams, MeshTopology, VoltageVector, WeightMatrixDb, DB_FLOOR, N_AM_PARAMS, N_MZI, N_WEIGHTS};
use mzimesh::neural::{init_params, Batch, Hyperparams, NetObjective};
use mzimesh::optim::{check_gradient, fit_am_multistart, AmFitConfig, FnObjective};
use mzimesh::predict::evaluate;
use mzimesh::rng::{stream, Rng};
use mzimesh::transfer::generate_synthetic;
use mzimesh_cli::config::Family;
use mzimesh_cli::experiments::{run_ensemble, run_scarcity, Inputs, ScarcityReport};
use mzimesh_cli::RunConfig;
use rand::Rng as _;
use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

const DESK: &str = include_str!("../../../configs/desk.toml");
/// Stream tag for the draws made by this harness.
const DRAWS: u64 = 0xacce;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn desk() -> RunConfig {
    RunConfig::from_toml(DESK).expect("desk config")
}

/// Realistic chip and measured campaign under the desk configuration.
fn realistic() -> &'static (VirtualChip, Dataset) {
    static DATA: OnceLock<(VirtualChip, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = desk();
        let chip = VirtualChip::generate(&cfg.chip, cfg.seed).unwrap();
        let ds = generate_dataset(&chip, &cfg.dataset, cfg.seed).unwrap();
        (chip, ds)
    })
}

fn realistic_inputs() -> Inputs {
    let ds = &realistic().1;
    Inputs { pool: ds.filter(Split::Train).concat(ds.filter(Split::Validation)).unwrap(), test: ds.select(Split::Test) }
}

fn random_topology(rng: &mut Rng) -> MeshTopology {
    let mut paths = Vec::new();
    let mut signs = Vec::new();
    for _ in 0..N_WEIGHTS {
        let len = rng.random_range(1..=3);
        let mut path: Vec<usize> = Vec::new();
        while path.len() < len {
            let m = rng.random_range(0..N_MZI);
            if !path.contains(&m) {
                path.push(m);
            }
        }
        signs.push(path.iter().map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect());
        paths.push(path);
    }
    MeshTopology::new(paths, signs).unwrap()
}

fn random_params(rng: &mut Rng) -> AnalyticalModelParams {
    let mut phi2 = [[0.0; N_MZI]; N_MZI];
    for (m, row) in phi2.iter_mut().enumerate() {
        for (n, p) in row.iter_mut().enumerate() {
            *p = if m == n { rng.random_range(0.5..1.2) * PI / 4.0 } else { rng.random_range(-0.1..0.1) };
        }
    }
    AnalyticalModelParams {
        alpha: std::array::from_fn(|_| rng.random_range(0.02..0.95)),
        er: 10f64.powf(rng.random_range(1.0..3.5)),
        phi0: std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI)),
        phi2,
    }
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut rng = stream(1, DRAWS);
    let (mut am_worst, mut resampled) = (0.0f64, 0);
    let mut points = 0;
    while points < 100 {
        let topo = if points % 2 == 0 { MeshTopology::crossbar() } else { random_topology(&mut rng) };
        let params = random_params(&mut rng);
        let v = VoltageVector::new(std::array::from_fn(|_| rng.random_range(0.0..=2.0))).unwrap();
        // The gradient is undefined where a weight sits on the clip floor.
        if grad_am(&params, &topo, &v).is_err() {
            resampled += 1;
            continue;
        }
        let x = params.to_vec();
        for k in 0..N_WEIGHTS {
            let obj = FnObjective::new(N_AM_PARAMS, |x: &[f64], g: &mut [f64]| {
                let p = AnalyticalModelParams::from_slice(x);
                g.copy_from_slice(grad_am(&p, &topo, &v).unwrap().1.row(k));
                eval_am(&p, &topo, &v).unwrap().as_array()[k]
            });
            let r = check_gradient(&obj, &x, 1e-6, 1.0).unwrap();
            am_worst = am_worst.max(r.max_rel_error);
        }
        points += 1;
    }

    let mut nn_worst = 0.0f64;
    for point in 0..100u64 {
        let hyper = Hyperparams {
            n1: rng.random_range(2..=12),
            n2: rng.random_range(2..=12),
            lambda_l1: 10f64.powf(rng.random_range(-6.0..-2.0)),
            lambda_l2: 10f64.powf(rng.random_range(-8.0..-2.0)),
        };
        let mut net = init_params(&hyper, point, 1.0).unwrap();
        // Biases start at zero, where the L1 term has a kink; move every parameter clear of it.
        for p in net.params_mut() {
            if p.abs() <= 1e-3 {
                *p = rng.random_range(0.01..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
        let records: Vec<Record> = (0..rng.random_range(5..30))
            .map(|_| {
                let v = VoltageVector::new(std::array::from_fn(|_| rng.random_range(0.0..=2.0))).unwrap();
                let w = WeightMatrixDb::new(std::array::from_fn(|_| rng.random_range(-40.0..-5.0))).unwrap();
                Record { v, w, split: Split::Train }
            })
            .collect();
        let batch = Batch::new(&net, &records).unwrap();
        let obj = NetObjective::new(&net, &batch, hyper.lambda_l1, hyper.lambda_l2);
        // A cost of tens of dB leaves ~1e-8 of rounding in a 1e-6 difference quotient; 1e-5 keeps it well below the floor.
        let r = check_gradient(&obj, &obj.initial_point(), 1e-5, 1e-3).unwrap();
        nn_worst = nn_worst.max(r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        am_worst < 1e-6 && nn_worst < 1e-5 && secs < 60.0,
        format!("analytical {am_worst:.2e} (< 1e-6, {resampled} clipped draws resampled), network {nn_worst:.2e} (< 1e-5), {secs:.1} s (< 60 s)"),
    )
}

fn am_recovery() -> Verdict {
    let start = Instant::now();
    let cfg = ChipConfig { noise_sigma_db: 0.0, excess_self: 0.0, excess_adjacent: 0.0, ..ChipConfig::default() };
    let chip = VirtualChip::generate(&cfg, 0).unwrap();
    let ds = generate_dataset(&chip, &DatasetSpec::default(), 0).unwrap();
    let fit_cfg = AmFitConfig::default();
    let train = ds.select(Split::Train);
    let fit = fit_am_multistart(&train, &ds.select(Split::Validation), &MeshTopology::crossbar(), &fit_cfg, 0).unwrap();
    let rmse = evaluate(&fit.model, &ds.select(Split::Test)).rmse_db;
    let secs = start.elapsed().as_secs_f64();
    check(
        rmse < 0.1 && secs < 600.0 && fit_cfg.restarts == 8 && train.len() == 4400,
        format!("test RMSE {rmse:.2e} dB (< 0.1), {} restarts on {} points, {secs:.0} s (< 600 s)", fit_cfg.restarts, train.len()),
    )
}

fn single_mzi(er: f64, sign: f64, phi: f64) -> f64 {
    let paths: Vec<Vec<usize>> = (0..N_WEIGHTS).map(|k| vec![k]).collect();
    let mut signs: Vec<Vec<f64>> = (0..N_WEIGHTS).map(|_| vec![-1.0]).collect();
    signs[0] = vec![sign];
    let topo = MeshTopology::new(paths, signs).unwrap();
    let mut phi0 = [0.0; N_MZI];
    phi0[0] = phi;
    let params = AnalyticalModelParams { alpha: [1.0; N_WEIGHTS], er, phi0, phi2: [[0.0; N_MZI]; N_MZI] };
    eval_am(&params, &topo, &VoltageVector::splat(0.0).unwrap()).unwrap().get(0, 0)
}

fn spot_values() -> Verdict {
    // ¼(1 + r)² = (1 − 1/(√ER + 1))² for the constructive case.
    let constructive = single_mzi(1e12, 1.0, 0.0);
    let expected = 20.0 * (1.0 - 1.0 / (1e6f64 + 1.0)).log10();
    let destructive = single_mzi(1e12, 1.0, PI);
    // 10·log10(¼·(9/11 − 1)²), evaluated by a separate script.
    let cross = single_mzi(100.0, -1.0, 0.0);
    check(
        constructive.abs() < 1e-5 && (constructive - expected).abs() < 1e-12 && destructive == DB_FLOOR && (cross + 20.827853703164504).abs() < 1e-12,
        format!("constructive {constructive:.3e} dB, destructive {destructive} dB (floor), ER 100 cross port {cross:.12} dB"),
    )
}

fn protocol_counts() -> Verdict {
    let chip = VirtualChip::generate(&ChipConfig::default(), 0).unwrap();
    let sweep = sweep_protocol(&chip, &SweepSpec::default(), &mut stream(0, DRAWS)).unwrap();
    let ds = generate_dataset(&chip, &DatasetSpec::default(), 0).unwrap();
    let train = ds.select(Split::Train);
    let in_train = sweep.records().iter().filter(|s| train.iter().any(|r| r.v == s.v)).count();
    check(
        sweep.len() == 189 && train.len() == 4400 && ds.count(Split::Test) == 700 && in_train == 189,
        format!(
            "sweep {} records, dataset {} train + {} test (+ {} validation), {in_train} of the sweep points in train",
            sweep.len(),
            train.len(),
            ds.count(Split::Test),
            ds.count(Split::Validation)
        ),
    )
}

fn synthetic_filter() -> Verdict {
    let cfg = desk();
    let (chip, ds) = realistic();
    let fit = fit_am_multistart(&ds.select(Split::Train), &ds.select(Split::Validation), &MeshTopology::crossbar(), &cfg.am, cfg.seed).unwrap();
    let (_, report) = generate_synthetic(&fit.model, 50_000, chip.v_max, -60.0, &mut stream(cfg.seed, DRAWS)).unwrap();
    let (_, open) = generate_synthetic(&fit.model, 50_000, chip.v_max, f64::NEG_INFINITY, &mut stream(cfg.seed, DRAWS)).unwrap();
    check(
        report.drop_fraction < 0.05 && open.dropped == 0,
        format!(
            "floor -60 dB dropped {} of 50000 ({:.3}%, < 5%), unbounded floor dropped {}",
            report.dropped,
            100.0 * report.drop_fraction,
            open.dropped
        ),
    )
}

fn scarcity() -> &'static (ScarcityReport, Duration) {
    static REPORT: OnceLock<(ScarcityReport, Duration)> = OnceLock::new();
    REPORT.get_or_init(|| {
        let start = Instant::now();
        let report = run_scarcity(&desk(), &realistic_inputs()).unwrap();
        (report, start.elapsed())
    })
}

fn scarcity_trends() -> Verdict {
    let cfg = desk();
    let (report, elapsed) = scarcity();
    let m = |f, n| report.median(f, n).unwrap_or(f64::NAN);
    let complete = report.summary.iter().all(|s| s.failures == 0 && s.count == cfg.scarcity.seeds);
    let (am, nn, tl) = (Family::Am, Family::Nn, Family::TlNn);
    let a = m(am, 400) < m(nn, 400);
    let b = m(nn, 4400) < m(am, 4400);
    let c = [400, 1000, 4400].iter().all(|&n| m(tl, n) < m(am, n));
    let d = m(tl, 1000) <= m(nn, 4400) + 0.3;
    let mut table = String::new();
    for f in [am, nn, tl] {
        table += &format!(" {}:", f.name());
        for n in [400, 1000, 4400] {
            table += &format!(" {:.3}", m(f, n));
        }
    }
    let hours = elapsed.as_secs_f64() / 3600.0;
    check(
        a && b && c && d && complete && cfg.scarcity.seeds >= 10 && hours <= 2.0,
        format!("(a) {a} (b) {b} (c) {c} (d) {d}; medians at 400/1000/4400:{table}; {} seeds, {:.0} min", cfg.scarcity.seeds, hours * 60.0),
    )
}

fn headline() -> Verdict {
    let (report, _) = scarcity();
    let nn = report.median(Family::Nn, 4400).unwrap_or(f64::NAN);
    let tl = report.median(Family::TlNn, 1000).unwrap_or(f64::NAN);
    check(nn < 1.0 && tl < 1.0, format!("median NN(4400) {nn:.3} dB, TL-NN(1000) {tl:.3} dB (both < 1 dB)"))
}

fn ensemble_trends() -> Verdict {
    let cfg = desk();
    let start = Instant::now();
    let report: StudyReport = run_ensemble(&cfg, &realistic_inputs()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let m = |c, k| report.median(c, k).unwrap_or(f64::NAN);
    let mut ok = report.failures.is_empty() && cfg.ensemble.runs >= 20 && cfg.ensemble.k_max >= 20;
    let mut detail = String::new();
    for c in [Combiner::Simple, Combiner::Weighted] {
        let (k1, k10, k20) = (m(c, 1), m(c, 10), m(c, 20));
        let a = k10 <= k1;
        let b = k1 > k10 && (k10 - k20) < 0.3 * (k1 - k10);
        ok &= a && b;
        detail += &format!("{c}: K1 {k1:.4} K10 {k10:.4} K20 {k20:.4} (a) {a} (b) {b}; ");
    }
    let worst = (1..=cfg.ensemble.k_max).map(|k| m(Combiner::Weighted, k) - m(Combiner::Simple, k)).fold(f64::NEG_INFINITY, f64::max);
    ok &= worst <= 0.02;
    detail += &format!("(c) max weighted - simple {worst:+.4} dB (<= 0.02); {} runs, {secs:.0} s", cfg.ensemble.runs);
    check(ok, detail)
}

/// Minimize ‖Xc − y‖² + λ‖c‖² by gradient descent with a 1/L step.
fn descend(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let k = x.len();
    let lip = 2.0 * (x.iter().map(|col| col.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() + lambda);
    let mut c = vec![0.0; k];
    for _ in 0..5_000_000 {
        let resid: Vec<f64> = (0..y.len()).map(|r| (0..k).map(|j| x[j][r] * c[j]).sum::<f64>() - y[r]).collect();
        let g: Vec<f64> = (0..k).map(|j| 2.0 * x[j].iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>() + 2.0 * lambda * c[j]).collect();
        if g.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-10 {
            break;
        }
        c.iter_mut().zip(&g).for_each(|(c, g)| *c -= g / lip);
    }
    c
}

fn ridge_oracle() -> Verdict {
    let mut worst = 0.0f64;
    let mut problems = 0;
    for trial in 0..10u64 {
        let mut rng = stream(trial, DRAWS);
        let (k, n) = (rng.random_range(2..=4), rng.random_range(8..20));
        let preds: Vec<Vec<[f64; N_WEIGHTS]>> =
            (0..k).map(|_| (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-30.0..-1.0))).collect()).collect();
        let mix: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let truth: Vec<Record> = (0..n)
            .map(|l| {
                let w = std::array::from_fn(|e| (0..k).map(|j| mix[j] * preds[j][l][e]).sum::<f64>() + rng.random_range(-1.0..1.0));
                Record { v: VoltageVector::splat(1.0).unwrap(), w: WeightMatrixDb::new(w).unwrap(), split: Split::Validation }
            })
            .collect();
        let x: Vec<Vec<f64>> = preds.iter().map(|p| p.iter().flatten().copied().collect()).collect();
        let y: Vec<f64> = truth.iter().flat_map(|r| *r.w.as_array()).collect();
        for lambda in [0.0, 0.1, 10.0] {
            let cfg = RidgeConfig { grid: vec![lambda], per_entry: false, selection: LambdaSelection::InSample };
            let fit = fit_weights(&preds, &truth, &cfg).unwrap();
            for (a, b) in fit.coefficients.values.iter().zip(descend(&x, &y, lambda)) {
                worst = worst.max((a - b).abs());
            }
            problems += 1;
        }
    }
    check(worst < 1e-8, format!("max coefficient difference {worst:.2e} over {problems} problems (< 1e-8)"))
}

fn numbers(v: &serde_json::Value, path: String, out: &mut Vec<(String, f64)>) {
    match v {
        serde_json::Value::Number(n) => out.push((path, n.as_f64().unwrap())),
        serde_json::Value::Array(a) => a.iter().enumerate().for_each(|(i, x)| numbers(x, format!("{path}[{i}]"), out)),
        serde_json::Value::Object(o) => o.iter().for_each(|(k, x)| numbers(x, format!("{path}.{k}"), out)),
        _ => {}
    }
}

fn run_commands(dir: &Path, config: &Path, commands: &[&str]) -> Result<(), String> {
    for cmd in commands {
        let out = Command::new(env!("CARGO_BIN_EXE_mzimesh")).arg("--config").arg(config).arg("--out").arg(dir).arg(cmd).output().unwrap();
        if !out.status.success() {
            return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = desk();
    cfg.train_size = 400;
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, toml::to_string(&cfg).unwrap()).unwrap();
    let commands = ["chip-new", "dataset-gen", "fit-am", "train-nn", "train-tl"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_commands(&a, &config, &commands)?;
    run_commands(&b, &config, &commands)?;
    let mut compared = 0;
    let mut worst = 0.0f64;
    for cmd in &commands[2..] {
        let read = |root: &Path| -> serde_json::Value {
            serde_json::from_str(&std::fs::read_to_string(root.join(cmd).join("metrics.json")).unwrap()).unwrap()
        };
        let (mut x, mut y) = (Vec::new(), Vec::new());
        numbers(&read(&a), String::new(), &mut x);
        numbers(&read(&b), String::new(), &mut y);
        if x.len() != y.len() || x.is_empty() {
            return Err(format!("{cmd}: metrics.json differs in shape"));
        }
        for ((p, u), (q, w)) in x.iter().zip(&y) {
            if p != q {
                return Err(format!("{cmd}: {p} vs {q}"));
            }
            worst = worst.max((u - w).abs());
            compared += 1;
        }
    }
    let same_data = ["chip.json", "train.csv", "test.csv"].iter().all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    check(
        worst <= 1e-9 && same_data,
        format!("{compared} metric values from {} commands, max difference {worst:.1e} (<= 1e-9), generated data byte-identical: {same_data}", commands.len() - 2),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient correctness", gradients),
        ("analytical model recovery", am_recovery),
        ("analytical model spot values", spot_values),
        ("protocol counts", protocol_counts),
        ("synthetic record filter", synthetic_filter),
        ("data-scarcity trends", scarcity_trends),
        ("headline accuracy", headline),
        ("ensemble trends", ensemble_trends),
        ("ridge weights oracle", ridge_oracle),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&number)) {
            continue;
        }
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("[PASS] {number:>2} {name} ({secs:.1} s): {d}"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {number:>2} {name} ({secs:.1} s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
