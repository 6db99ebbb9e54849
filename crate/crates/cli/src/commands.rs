//! One function per subcommand. Outputs go under `cfg.out`; reruns with the same
//! config and seed write identical bytes except for each command's meta.json.

use crate::config::RunConfig;
use crate::error::{data, CliError};
use crate::experiments::{self, Inputs};
use mzimesh::chip::{generate_dataset, VirtualChip};
use mzimesh::dataset::{Dataset, Record, Split};
use mzimesh::mesh::{N_INPUTS, N_MZI, N_OUTPUTS};
use mzimesh::neural::{write_history_csv, SurrogateNet, NET_KIND};
use mzimesh::predict::{evaluate, AnalyticalModel, Predictor, RmseReport};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

fn guard(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(data(dir.display()))?;
    }
    std::fs::write(path, text).map_err(data(path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(data(path.display()))?;
    write_text(path, &(text + "\n"))
}

/// The only file carrying wall-clock information.
fn write_meta(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = serde_json::json!({
        "command": command,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "finished_unix_s": secs,
    });
    write_json(&dir.join("meta.json"), &meta)
}

fn run_dir(cfg: &RunConfig, command: &str, force: bool) -> Result<PathBuf, CliError> {
    let dir = cfg.out.join(command);
    guard(&dir.join("metrics.json"), force)?;
    std::fs::create_dir_all(&dir).map_err(data(dir.display()))?;
    Ok(dir)
}

#[derive(Debug, Clone, Serialize)]
struct Metrics {
    command: &'static str,
    seed: u64,
    train_size: usize,
    train_rmse_db: f64,
    validation_rmse_db: Option<f64>,
    test_rmse_db: f64,
    test_per_entry_db: [f64; 9],
}

fn report_line(label: &str, r: &RmseReport) {
    println!("{label}: {:.4} dB over {} records", r.rmse_db, r.count);
}

pub fn chip_new(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let path = cfg.chip_path();
    guard(&path, force)?;
    let chip = VirtualChip::generate(&cfg.chip, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(data(dir.display()))?;
    }
    chip.save(&path).map_err(data(path.display()))?;
    println!(
        "chip: {N_INPUTS}x{N_OUTPUTS} mesh, {N_MZI} MZIs, drive range [0, {}] V, seed {} -> {}",
        chip.v_max,
        cfg.seed,
        path.display()
    );
    Ok(())
}

pub fn dataset_gen(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let chip_path = cfg.chip_path();
    let chip = VirtualChip::load(&chip_path).map_err(data(chip_path.display()))?;
    let ds = generate_dataset(&chip, &cfg.dataset, cfg.seed).map_err(data("dataset generation"))?;
    if cfg.dataset.sweep_only {
        let path = cfg.out.join("sweep.csv");
        guard(&path, force)?;
        ds.save(&path).map_err(data(path.display()))?;
        println!("sweep: {} records -> {}", ds.len(), path.display());
        return Ok(());
    }
    let (train_path, test_path) = (cfg.train_path(), cfg.test_path());
    guard(&train_path, force)?;
    guard(&test_path, force)?;
    let pool = ds.filter(Split::Train).concat(ds.filter(Split::Validation)).map_err(data("dataset"))?;
    for (path, part) in [(&train_path, &pool), (&test_path, &ds.filter(Split::Test))] {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(data(dir.display()))?;
        }
        part.save(path).map_err(data(path.display()))?;
    }
    println!(
        "dataset: {} train ({} sweep), {} validation -> {}; {} test -> {}",
        ds.count(Split::Train),
        ds.sweep_len(),
        ds.count(Split::Validation),
        train_path.display(),
        ds.count(Split::Test),
        test_path.display()
    );
    Ok(())
}

fn metrics(command: &'static str, cfg: &RunConfig, subset: &Dataset, model: &dyn Predictor, test: &[Record]) -> Metrics {
    let train = evaluate(model, &subset.select(Split::Train));
    let validation = subset.select(Split::Validation);
    let t = evaluate(model, test);
    report_line("train RMSE", &train);
    if !validation.is_empty() {
        report_line("validation RMSE", &evaluate(model, &validation));
    }
    report_line("test RMSE", &t);
    Metrics {
        command,
        seed: cfg.seed,
        train_size: subset.count(Split::Train),
        train_rmse_db: train.rmse_db,
        validation_rmse_db: (!validation.is_empty()).then(|| evaluate(model, &validation).rmse_db),
        test_rmse_db: t.rmse_db,
        test_per_entry_db: t.per_entry_db,
    }
}

pub fn fit_am(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let dir = run_dir(cfg, "fit-am", force)?;
    let inputs = Inputs::load(cfg)?;
    let subset = inputs.subset(cfg.train_size, cfg.seed)?;
    let fit = experiments::fit_am(cfg, &subset, cfg.seed)?;
    write_json(&dir.join("am.json"), &fit.model)?;
    write_json(&dir.join("restarts.json"), &fit.restarts)?;
    write_json(&dir.join("metrics.json"), &metrics("fit-am", cfg, &subset, &fit.model, &inputs.test))?;
    write_meta(&dir, "fit-am", cfg)
}

pub fn train_nn(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let dir = run_dir(cfg, "train-nn", force)?;
    let inputs = Inputs::load(cfg)?;
    let subset = inputs.subset(cfg.train_size, cfg.seed)?;
    let out = experiments::train_nn(cfg, &subset, cfg.seed)?;
    out.net.save(&dir.join("model.json")).map_err(data("model.json"))?;
    write_history_csv(&out.history, &dir.join("history.csv")).map_err(data("history.csv"))?;
    write_json(&dir.join("metrics.json"), &metrics("train-nn", cfg, &subset, &out.net, &inputs.test))?;
    write_meta(&dir, "train-nn", cfg)
}

pub fn train_tl(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let dir = run_dir(cfg, "train-tl", force)?;
    let inputs = Inputs::load(cfg)?;
    let subset = inputs.subset(cfg.train_size, cfg.seed)?;
    let out = experiments::train_tl(cfg, &subset, cfg.seed, None)?;
    let m = out.save_artifacts(&dir, &inputs.test, cfg.tl.dump_synthetic).map_err(data("artifacts"))?;
    write_history_csv(&out.pretrained.history, &dir.join("pretrain_history.csv")).map_err(data("history"))?;
    write_history_csv(&out.final_.history, &dir.join("retrain_history.csv")).map_err(data("history"))?;
    println!(
        "synthetic: kept {} of {} records ({:.2}% dropped)",
        m.synth_filter.kept,
        m.synth_filter.requested,
        100.0 * m.synth_filter.drop_fraction
    );
    println!("analytical model test RMSE: {:.4} dB", m.am_test_rmse_db.unwrap_or(f64::NAN));
    println!("train RMSE: {:.4} dB", m.train_rmse_db);
    println!("test RMSE: {:.4} dB", m.test_rmse_db.unwrap_or(f64::NAN));
    write_meta(&dir, "train-tl", cfg)
}

pub fn experiment_scarcity(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let dir = run_dir(cfg, "experiment-scarcity", force)?;
    let inputs = Inputs::load(cfg)?;
    let report = experiments::run_scarcity(cfg, &inputs)?;
    report.write(&dir)?;
    println!("family  size  count  p10     p25     p50     p75     p90");
    for s in &report.summary {
        match s.percentiles {
            Some(p) => println!(
                "{:<6} {:>5} {:>6}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
                s.family.name(),
                s.size,
                s.count,
                p.p10,
                p.p25,
                p.p50,
                p.p75,
                p.p90
            ),
            None => println!("{:<6} {:>5}      0  (all {} failed)", s.family.name(), s.size, s.failures),
        }
    }
    write_meta(&dir, "experiment-scarcity", cfg)
}

pub fn experiment_ensemble(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let dir = run_dir(cfg, "experiment-ensemble", force)?;
    let inputs = Inputs::load(cfg)?;
    let report = experiments::run_ensemble(cfg, &inputs)?;
    experiments::write_ensemble(&report, &dir)?;
    println!("combiner  K   p25     p50     p75");
    for s in &report.summary {
        let p = s.percentiles;
        println!("{:<9} {:>2}  {:.4}  {:.4}  {:.4}", s.combiner.to_string(), s.k, p.p25, p.p50, p.p75);
    }
    if !report.failures.is_empty() {
        println!("{} member trainings failed and were excluded", report.failures.len());
    }
    write_meta(&dir, "experiment-ensemble", cfg)
}

/// A model file of any supported kind.
pub enum LoadedModel {
    Net(SurrogateNet),
    Analytical(AnalyticalModel),
    Chip(VirtualChip),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(data(path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(data(path.display()))?;
        let schema = |e: &dyn std::fmt::Display| CliError::Data(format!("{}: {e}", path.display()));
        if value.get("kind").and_then(|k| k.as_str()) == Some(NET_KIND) {
            return SurrogateNet::from_json(&text).map(LoadedModel::Net).map_err(|e| schema(&e));
        }
        if value.get("excess_crosstalk").is_some() {
            let chip = VirtualChip::load(path).map_err(|e| schema(&e))?;
            return Ok(LoadedModel::Chip(chip));
        }
        let am: AnalyticalModel = serde_json::from_value(value).map_err(|e| schema(&e))?;
        am.params.validate().map_err(|e| schema(&e))?;
        Ok(LoadedModel::Analytical(am))
    }

    pub fn evaluate(&self, records: &[Record]) -> RmseReport {
        match self {
            LoadedModel::Net(n) => evaluate(n, records),
            LoadedModel::Analytical(a) => evaluate(a, records),
            LoadedModel::Chip(c) => evaluate(&c.oracle(), records),
        }
    }
}

pub fn eval(model: &Path, dataset: &Path, split: Option<Split>) -> Result<RmseReport, CliError> {
    let model = LoadedModel::load(model)?;
    let ds = Dataset::load(dataset).map_err(data(dataset.display()))?;
    let records = match split {
        Some(s) => ds.select(s),
        None => ds.records().to_vec(),
    };
    if records.is_empty() {
        return Err(CliError::Data(format!("{} has no matching records", dataset.display())));
    }
    let r = model.evaluate(&records);
    report_line("RMSE", &r);
    println!("per entry (dB):");
    for i in 0..N_OUTPUTS {
        let row: Vec<String> = (0..N_INPUTS).map(|j| format!("{:>8.4}", r.per_entry_db[i * N_INPUTS + j])).collect();
        println!("  w{}j: {}", i + 1, row.join(" "));
    }
    Ok(r)
}
