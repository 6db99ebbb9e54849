//! Split-tagged collections of `(V, W)` measurements and their CSV form.
//!
//! CSV layout (one header line): `v1..v9` in volts and `w11..w33` in dB, both
//! with six decimals, followed by `split` and `provenance`. Sweep records are
//! always serialized first; on reading, the sweep block is recovered as the
//! leading run of records in which at most one heater departs from a common
//! rest level.

use crate::mesh::{MeshError, VoltageVector, WeightMatrixDb, N_MZI, N_WEIGHTS};
use crate::rng::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("line {line}: {source}")]
    Invalid { line: u64, source: MeshError },
    #[error("unexpected header {0:?}")]
    Header(Vec<String>),
    #[error("mixed provenance in one dataset")]
    MixedProvenance,
    #[error("need {needed} records but only {available} are available")]
    Insufficient { needed: usize, available: usize },
    #[error("training split of {train_n} cannot hold the {sweep} sweep records")]
    SweepDoesNotFit { train_n: usize, sweep: usize },
    #[error("empty dataset")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ExperimentalSim,
    Synthetic,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::ExperimentalSim => "experimental_sim",
            Provenance::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Provenance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "experimental_sim" => Ok(Provenance::ExperimentalSim),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(format!("unknown provenance {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub v: VoltageVector,
    pub w: WeightMatrixDb,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    provenance: Provenance,
    records: Vec<Record>,
    /// Leading records produced by the single-heater sweep.
    sweep_len: usize,
}

pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = (1..=N_MZI).map(|n| format!("v{n}")).collect();
    for i in 1..=3 {
        for j in 1..=3 {
            h.push(format!("w{i}{j}"));
        }
    }
    h.push("split".into());
    h.push("provenance".into());
    h
}

impl Dataset {
    pub fn new(provenance: Provenance, records: Vec<Record>) -> Self {
        Self { provenance, records, sweep_len: 0 }
    }

    pub fn with_sweep(provenance: Provenance, records: Vec<Record>, sweep_len: usize) -> Self {
        assert!(sweep_len <= records.len());
        Self { provenance, records, sweep_len }
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sweep_len(&self) -> usize {
        self.sweep_len
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Records carrying the given tag, order preserved.
    pub fn select(&self, split: Split) -> Vec<Record> {
        self.records.iter().filter(|r| r.split == split).copied().collect()
    }

    /// Records with the given tag as a dataset; the sweep prefix survives if it was entirely tagged `split`.
    pub fn filter(&self, split: Split) -> Dataset {
        let sweep_len = self.records[..self.sweep_len].iter().take_while(|r| r.split == split).count();
        Dataset { provenance: self.provenance, records: self.select(split), sweep_len }
    }

    pub fn tagged(mut self, split: Split) -> Dataset {
        self.records.iter_mut().for_each(|r| r.split = split);
        self
    }

    /// Appends `other` after `self`; the sweep prefix is kept from `self` only.
    pub fn concat(mut self, other: Dataset) -> Result<Dataset, DatasetError> {
        if self.provenance != other.provenance {
            return Err(DatasetError::MixedProvenance);
        }
        if self.sweep_len == self.records.len() && !other.records.is_empty() {
            self.sweep_len += other.sweep_len;
        }
        self.records.extend(other.records);
        Ok(self)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(csv_header())?;
        let prov = self.provenance.to_string();
        for r in &self.records {
            let mut row: Vec<String> = Vec::with_capacity(N_MZI + N_WEIGHTS + 2);
            row.extend(r.v.as_array().iter().map(|x| format!("{:.6}", x)));
            row.extend(r.w.as_array().iter().map(|x| format!("{:.6}", x)));
            row.push(r.split.to_string());
            row.push(prov.clone());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Dataset, DatasetError> {
        let mut rdr = csv::Reader::from_reader(input);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        if header != csv_header() {
            return Err(DatasetError::Header(header));
        }
        let mut provenance = None;
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let num = |idx: usize| -> Result<f64, DatasetError> {
                row[idx].parse::<f64>().map_err(|e| DatasetError::Parse { line, msg: format!("column {}: {e}", idx + 1) })
            };
            let mut v = [0.0; N_MZI];
            for (n, x) in v.iter_mut().enumerate() {
                *x = num(n)?;
            }
            let mut w = [0.0; N_WEIGHTS];
            for (k, x) in w.iter_mut().enumerate() {
                *x = num(N_MZI + k)?;
            }
            let split: Split = row[N_MZI + N_WEIGHTS].parse().map_err(|msg| DatasetError::Parse { line, msg })?;
            let prov: Provenance = row[N_MZI + N_WEIGHTS + 1].parse().map_err(|msg| DatasetError::Parse { line, msg })?;
            if *provenance.get_or_insert(prov) != prov {
                return Err(DatasetError::MixedProvenance);
            }
            let v = VoltageVector::new(v).map_err(|source| DatasetError::Invalid { line, source })?;
            let w = WeightMatrixDb::new(w).map_err(|source| DatasetError::Invalid { line, source })?;
            records.push(Record { v, w, split });
        }
        let provenance = provenance.ok_or(DatasetError::Empty)?;
        let sweep_len = infer_sweep_len(&records);
        Ok(Dataset { provenance, records, sweep_len })
    }

    pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// A sweep point holds all heaters but one at a shared rest level.
fn sweep_rest_level(v: &VoltageVector) -> Option<f64> {
    let a = v.as_array();
    // With at most one outlier, the rest level is the majority among the first three entries.
    let candidate = if a[0] == a[1] || a[0] == a[2] { a[0] } else { a[1] };
    let off = a.iter().filter(|&&x| x != candidate).count();
    (off <= 1).then_some(candidate)
}

fn infer_sweep_len(records: &[Record]) -> usize {
    let Some(rest) = records.first().and_then(|r| sweep_rest_level(&r.v)) else {
        return 0;
    };
    records.iter().take_while(|r| sweep_rest_level(&r.v) == Some(rest)).count()
}

/// Tag `train_n` training and `validation_n` validation records.
///
/// With `keep_sweep_in_train` every sweep record is tagged train and only the
/// remaining training slots are sampled. Validation is drawn first, from the
/// non-sweep pool, then training. Unselected records are dropped; the output
/// keeps the input order.
pub fn split(
    dataset: &Dataset,
    train_n: usize,
    validation_n: usize,
    keep_sweep_in_train: bool,
    rng: &mut Rng,
) -> Result<Dataset, DatasetError> {
    let total = dataset.len();
    if train_n + validation_n > total {
        return Err(DatasetError::Insufficient { needed: train_n + validation_n, available: total });
    }
    let sweep = if keep_sweep_in_train { dataset.sweep_len } else { 0 };
    if sweep > train_n {
        return Err(DatasetError::SweepDoesNotFit { train_n, sweep });
    }
    let mut tags: Vec<Option<Split>> = vec![None; total];
    tags[..sweep].iter_mut().for_each(|t| *t = Some(Split::Train));
    let mut pool: Vec<usize> = (sweep..total).collect();
    pool.shuffle(rng);
    let (val, rest) = pool.split_at(validation_n);
    for &i in val {
        tags[i] = Some(Split::Validation);
    }
    for &i in &rest[..train_n - sweep] {
        tags[i] = Some(Split::Train);
    }
    let mut records = Vec::with_capacity(train_n + validation_n);
    let mut sweep_len = 0;
    let mut prefix = true;
    for (i, (r, tag)) in dataset.records.iter().zip(&tags).enumerate() {
        if let Some(tag) = tag {
            records.push(Record { split: *tag, ..*r });
            if prefix && i < dataset.sweep_len {
                sweep_len += 1;
            }
        } else if i < dataset.sweep_len {
            prefix = false;
        }
    }
    Ok(Dataset { provenance: dataset.provenance, records, sweep_len })
}

/// Keep all validation records and subsample the training records down to `train_n`.
pub fn subsample_train(dataset: &Dataset, train_n: usize, rng: &mut Rng) -> Result<Dataset, DatasetError> {
    let train = dataset.filter(Split::Train);
    let picked = split(&train, train_n, 0, true, rng)?;
    picked.concat(dataset.filter(Split::Validation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn record(v: [f64; 9], w: f64) -> Record {
        Record { v: VoltageVector::new(v).unwrap(), w: WeightMatrixDb::new([w; 9]).unwrap(), split: Split::Train }
    }

    fn toy(sweep: usize, random: usize) -> Dataset {
        let mut recs = Vec::new();
        for k in 0..sweep {
            let mut v = [0.0; 9];
            v[k % 9] = 0.1 * (k / 9) as f64;
            recs.push(record(v, -(k as f64)));
        }
        for k in 0..random {
            let x = 0.01 + 1.9 * (k as f64 / random as f64);
            recs.push(record([x, 1.3, x * 0.5, 0.7, x, 0.2, 1.1, 0.4, 1.9], -1.0 - k as f64 * 0.01));
        }
        Dataset::with_sweep(Provenance::ExperimentalSim, recs, sweep)
    }

    #[test]
    fn csv_round_trip_recovers_sweep_prefix() {
        let ds = toy(27, 10);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("v1,v2,v3,v4,v5,v6,v7,v8,v9,w11,w12,w13,w21,w22,w23,w31,w32,w33,split,provenance\n"));
        assert!(text.lines().nth(1).unwrap().starts_with("0.000000,"));
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 37);
        assert_eq!(back.sweep_len(), 27);
        assert_eq!(back.provenance(), Provenance::ExperimentalSim);
    }

    #[test]
    fn csv_rejects_bad_input() {
        let bad_header = "v1,v2\n0,0\n";
        assert!(matches!(Dataset::read_csv(bad_header.as_bytes()), Err(DatasetError::Header(_))));
        let ds = toy(0, 2);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("train,experimental_sim", "train,synthetic", 1);
        assert!(matches!(Dataset::read_csv(text.as_bytes()), Err(DatasetError::MixedProvenance)));
        let text = text.replacen("1.300000", "2.500000", 1);
        assert!(matches!(Dataset::read_csv(text.as_bytes()), Err(DatasetError::Invalid { .. })));
    }

    #[test]
    fn split_keeps_sweep_in_train() {
        let ds = toy(18, 50);
        let s = split(&ds, 30, 10, true, &mut stream(1, 0)).unwrap();
        assert_eq!(s.count(Split::Train), 30);
        assert_eq!(s.count(Split::Validation), 10);
        assert_eq!(s.sweep_len(), 18);
        assert!(s.records()[..18].iter().all(|r| r.split == Split::Train));
        let only_sweep = split(&ds, 18, 0, true, &mut stream(1, 0)).unwrap();
        assert_eq!(only_sweep.records(), &ds.records()[..18]);
    }

    #[test]
    fn split_errors() {
        let ds = toy(18, 5);
        assert!(matches!(split(&ds, 20, 4, true, &mut stream(0, 0)), Err(DatasetError::Insufficient { .. })));
        assert!(matches!(split(&ds, 10, 0, true, &mut stream(0, 0)), Err(DatasetError::SweepDoesNotFit { .. })));
    }

    #[test]
    fn split_is_reproducible() {
        let ds = toy(9, 100);
        let a = split(&ds, 40, 20, false, &mut stream(3, 1)).unwrap();
        let b = split(&ds, 40, 20, false, &mut stream(3, 1)).unwrap();
        let c = split(&ds, 40, 20, false, &mut stream(4, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn subsample_preserves_validation() {
        let ds = split(&toy(18, 100), 80, 10, true, &mut stream(2, 0)).unwrap();
        let sub = subsample_train(&ds, 40, &mut stream(9, 9)).unwrap();
        assert_eq!(sub.count(Split::Train), 40);
        assert_eq!(sub.select(Split::Validation), ds.select(Split::Validation));
        assert_eq!(sub.sweep_len(), 18);
    }
}
