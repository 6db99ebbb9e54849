//! Single-model training helpers shared by the commands, and the repeated-seed
//! data-scarcity and ensemble experiments.

use crate::config::{Family, RunConfig};
use crate::error::{data, training, CliError};
use mzimesh::dataset::{subsample_train, Dataset, Record, Split};
use mzimesh::ensemble::{percentile_report, run_ensemble_study, Percentiles, StudyConfig, StudyReport};
use mzimesh::mesh::MeshTopology;
use mzimesh::neural::{init_params, train, SurrogateNet, TrainOutcome};
use mzimesh::optim::{fit_am_multistart, AmFit};
use mzimesh::predict::evaluate;
use mzimesh::rng::{derive_seed, stream, tags};
use mzimesh::transfer::{train_tl_nn_from_am, TlOutcome};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// The measured training pool (train and validation records) and the test records.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub pool: Dataset,
    pub test: Vec<Record>,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let (train_path, test_path) = (cfg.train_path(), cfg.test_path());
        let pool = Dataset::load(&train_path).map_err(data(train_path.display()))?;
        let test = Dataset::load(&test_path).map_err(data(test_path.display()))?.select(Split::Test);
        if pool.count(Split::Train) == 0 {
            return Err(CliError::Data(format!("{} has no training records", train_path.display())));
        }
        if test.is_empty() {
            return Err(CliError::Data(format!("{} has no test records", test_path.display())));
        }
        Ok(Self { pool: pool.filter(Split::Train).concat(pool.filter(Split::Validation)).map_err(data("pool"))?, test })
    }

    /// Training subset of `n` records (sweep included) plus all validation records.
    ///
    /// The draw depends only on `seed`, so every model and model seed sees the same subset.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset, CliError> {
        subsample_train(&self.pool, n, &mut stream(seed, tags::SUBSET)).map_err(data(format!("subset of {n}")))
    }
}

pub fn fit_am(cfg: &RunConfig, subset: &Dataset, seed: u64) -> Result<AmFit, CliError> {
    let train_set = subset.select(Split::Train);
    let validation = subset.select(Split::Validation);
    fit_am_multistart(&train_set, &validation, &MeshTopology::crossbar(), &cfg.am, seed).map_err(training("fit_am"))
}

pub fn train_nn(cfg: &RunConfig, subset: &Dataset, seed: u64) -> Result<TrainOutcome, CliError> {
    let n = subset.count(Split::Train);
    let hyper = cfg.nn.hyper_for(n);
    let mut net = init_params(&hyper, seed, cfg.nn.init_gain).map_err(training("init"))?;
    net.set_output_scaling(cfg.nn.output);
    let train_set = subset.select(Split::Train);
    let validation = subset.select(Split::Validation);
    train(&net, &train_set, &validation, &hyper, &cfg.nn.train).map_err(training("train_nn"))
}

/// Transfer pipeline on `subset`; an analytical model already fitted to the same subset may be supplied.
pub fn train_tl(cfg: &RunConfig, subset: &Dataset, seed: u64, am: Option<AmFit>) -> Result<TlOutcome, CliError> {
    let am = match am {
        Some(am) => am,
        None => fit_am(cfg, subset, seed)?,
    };
    let pipeline = cfg.tl.pipeline(&cfg.am, seed);
    train_tl_nn_from_am(subset, am, &cfg.tl.hyper, &pipeline).map_err(training("train_tl"))
}

/// Model seed of the `index`-th repetition; shared by every family and size.
pub fn model_seed(cfg: &RunConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, &[index as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub family: Family,
    pub size: usize,
    pub seed: usize,
    pub test_rmse_db: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub family: Family,
    pub size: usize,
    pub count: usize,
    pub failures: usize,
    pub percentiles: Option<Percentiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScarcityReport {
    pub cells: Vec<Cell>,
    pub summary: Vec<CellSummary>,
}

impl ScarcityReport {
    pub fn median(&self, family: Family, size: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.family == family && s.size == size)?.percentiles.map(|p| p.p50)
    }

    /// cells.csv, summary.csv and a full-precision metrics.json.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let err = data(dir.display());
        std::fs::create_dir_all(dir).map_err(data(dir.display()))?;
        let mut cells = String::from("family,size,seed,test_rmse_db,error\n");
        for c in &self.cells {
            let rmse = c.test_rmse_db.map(|r| format!("{r:.4}")).unwrap_or_default();
            let error = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            cells += &format!("{},{},{},{rmse},{error}\n", c.family.name(), c.size, c.seed);
        }
        let mut summary = String::from("family,size,count,failures,p10,p25,p50,p75,p90\n");
        for s in &self.summary {
            let p = s.percentiles.map_or(",,,,".to_string(), |p| {
                format!("{:.4},{:.4},{:.4},{:.4},{:.4}", p.p10, p.p25, p.p50, p.p75, p.p90)
            });
            summary += &format!("{},{},{},{},{p}\n", s.family.name(), s.size, s.count, s.failures);
        }
        let json = serde_json::to_string_pretty(self).map_err(data("metrics"))?;
        std::fs::write(dir.join("cells.csv"), cells)
            .and_then(|_| std::fs::write(dir.join("summary.csv"), summary))
            .and_then(|_| std::fs::write(dir.join("metrics.json"), json))
            .map_err(err)
    }
}

fn outcome(r: Result<f64, CliError>) -> (Option<f64>, Option<String>) {
    match r {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    }
}

/// Every configured family, size and seed. Training subsets are fixed per size;
/// the analytical model of each (size, seed) cell is also the starting point of
/// the transfer pipeline in that cell.
pub fn run_scarcity(cfg: &RunConfig, inputs: &Inputs) -> Result<ScarcityReport, CliError> {
    let sc = &cfg.scarcity;
    let subsets: Vec<(usize, Dataset)> =
        sc.sizes.iter().map(|&n| Ok((n, inputs.subset(n, cfg.seed)?))).collect::<Result<_, CliError>>()?;
    let jobs: Vec<(usize, usize)> = (0..subsets.len()).flat_map(|i| (0..sc.seeds).map(move |s| (i, s))).collect();
    let want = |f| sc.families.contains(&f);
    let cells: Vec<Vec<Cell>> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let (size, subset) = (&subsets[i].0, &subsets[i].1);
            let seed = model_seed(cfg, s);
            let mut out = Vec::new();
            let mut push = |family, r| {
                let (test_rmse_db, error) = outcome(r);
                if let Some(e) = &error {
                    log::warn!("{} size {size} seed {s}: {e}", Family::name(family));
                }
                out.push(Cell { family, size: *size, seed: s, test_rmse_db, error });
            };
            let am = (want(Family::Am) || want(Family::TlNn)).then(|| fit_am(cfg, subset, seed));
            if want(Family::Am) {
                let r = match &am {
                    Some(Ok(fit)) => Ok(evaluate(&fit.model, &inputs.test).rmse_db),
                    Some(Err(e)) => Err(CliError::Training(e.to_string())),
                    None => unreachable!(),
                };
                push(Family::Am, r);
            }
            if want(Family::Nn) {
                push(Family::Nn, train_nn(cfg, subset, seed).map(|o| evaluate(&o.net, &inputs.test).rmse_db));
            }
            if want(Family::TlNn) {
                let r = match am {
                    Some(Ok(fit)) => train_tl(cfg, subset, seed, Some(fit)).map(|o| evaluate(o.net(), &inputs.test).rmse_db),
                    _ => Err(CliError::Training("analytical model stage failed".into())),
                };
                push(Family::TlNn, r);
            }
            log::info!("scarcity cell size {size} seed {s} done");
            out
        })
        .collect();
    let mut cells: Vec<Cell> = cells.into_iter().flatten().collect();
    cells.sort_by_key(|c| (c.family, c.size, c.seed));

    let mut summary = Vec::new();
    for &family in &sc.families {
        for &size in &sc.sizes {
            let group: Vec<&Cell> = cells.iter().filter(|c| c.family == family && c.size == size).collect();
            let values: Vec<f64> = group.iter().filter_map(|c| c.test_rmse_db).collect();
            summary.push(CellSummary {
                family,
                size,
                count: values.len(),
                failures: group.len() - values.len(),
                percentiles: percentile_report(&values).ok(),
            });
        }
    }
    summary.sort_by_key(|s| (s.family, s.size));
    Ok(ScarcityReport { cells, summary })
}

/// Ensemble study over members of the configured family.
pub fn run_ensemble(cfg: &RunConfig, inputs: &Inputs) -> Result<StudyReport, CliError> {
    let ens = &cfg.ensemble;
    let mut member_cfg = cfg.clone();
    if let Some(h) = ens.hyper {
        member_cfg.nn.hyper_scarce = h;
        member_cfg.nn.hyper_full = h;
        member_cfg.tl.hyper = h;
    }
    if let Some(t) = &ens.train {
        member_cfg.nn.train = t.clone();
        member_cfg.tl.retrain = t.clone();
    }
    let pool = inputs.pool.clone().concat(Dataset::new(inputs.pool.provenance(), inputs.test.clone())).map_err(data("pool"))?;
    let study = StudyConfig { train_size: ens.train_size, k_max: ens.k_max, runs: ens.runs, ridge: ens.ridge.clone(), seed: cfg.seed };
    let family = ens.family;
    run_ensemble_study(&pool, &study, |subset, seed| -> Result<SurrogateNet, String> {
        match family {
            Family::TlNn => train_tl(&member_cfg, subset, seed, None).map(|o| o.final_.net),
            _ => train_nn(&member_cfg, subset, seed).map(|o| o.net),
        }
        .map_err(|e| e.to_string())
    })
    .map_err(training("ensemble"))
}

/// Study rows, percentile summary and a full-precision metrics.json.
pub fn write_ensemble(report: &StudyReport, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(data(dir.display()))?;
    report.write_rows_csv(&dir.join("rows.csv")).map_err(data("rows.csv"))?;
    report.write_summary_csv(&dir.join("summary.csv")).map_err(data("summary.csv"))?;
    let json = serde_json::json!({
        "rows": report.rows,
        "summary": report.summary,
        "failures": report.failures.iter().map(|(r, k, m)| serde_json::json!({"run": r, "member": k, "error": m})).collect::<Vec<_>>(),
    });
    let mut f = std::fs::File::create(dir.join("metrics.json")).map_err(data("metrics.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&json).map_err(data("metrics.json"))?).map_err(data("metrics.json"))
}
