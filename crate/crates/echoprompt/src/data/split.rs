//! Patient-level train/val/test splitting.
//!
//! Patients, not images, are shuffled and partitioned, per dataset_id
//! independently, so no patient's images ever span partitions.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{io_err, DataError, ManifestRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            "test" => Some(Self::Test),
            _ => None,
        }
    }
}

/// record_id -> partition, every record assigned exactly once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    map: BTreeMap<String, Partition>,
}

impl SplitAssignment {
    pub fn partition_of(&self, record_id: &str) -> Option<Partition> {
        self.map.get(record_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Partition)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Seed the per-dataset shuffle independently of map iteration order.
fn dataset_seed(seed: u64, dataset_id: &str) -> u64 {
    // FNV-1a, fixed so splits are stable across runs and platforms
    let mut h: u64 = 0xcbf29ce484222325;
    for b in dataset_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

/// Largest-remainder allocation of `n` patients to the three ratios; each
/// partition's count deviates from `n * ratio` by less than 1.
fn allocate(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let r = [ratios.0, ratios.1, ratios.2];
    let exact: Vec<f64> = r.iter().map(|ri| ri * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: usize = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Shuffle patients per dataset and partition them as close to the ratios as
/// integer counts allow. Deterministic given the seed.
pub fn split_by_patient(
    records: &[ManifestRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, DataError> {
    if records.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let sum = ratios.0 + ratios.1 + ratios.2;
    if ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios(format!("{ratios:?}")));
    }
    for r in records {
        if r.patient_id.is_empty() {
            return Err(DataError::BadRecord {
                record: r.record_id.clone(),
                message: "empty patient_id".into(),
            });
        }
    }

    // dataset_id -> patient_id -> record_ids
    let mut datasets: BTreeMap<&str, BTreeMap<&str, Vec<&str>>> = BTreeMap::new();
    for r in records {
        datasets
            .entry(&r.dataset_id)
            .or_default()
            .entry(&r.patient_id)
            .or_default()
            .push(&r.record_id);
    }

    let mut map = BTreeMap::new();
    for (dataset_id, patients) in &datasets {
        let mut ids: Vec<&str> = patients.keys().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed(seed, dataset_id));
        ids.shuffle(&mut rng);
        let counts = allocate(ids.len(), ratios);
        let mut cursor = 0usize;
        for (part, &count) in [Partition::Train, Partition::Val, Partition::Test]
            .iter()
            .zip(&counts)
        {
            for patient in &ids[cursor..cursor + count] {
                for record_id in &patients[patient] {
                    map.insert(record_id.to_string(), *part);
                }
            }
            cursor += count;
        }
    }
    Ok(SplitAssignment { map })
}

/// Write `record_id<TAB>partition`, one line per record.
pub fn write_split(path: &Path, split: &SplitAssignment) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for (record_id, part) in split.iter() {
        writeln!(w, "{record_id}\t{}", part.name()).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn read_split(path: &Path) -> Result<SplitAssignment, DataError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut map = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (record_id, part) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: i + 1,
            message: "expected record_id<TAB>partition".into(),
        })?;
        let part = Partition::parse(part).ok_or_else(|| DataError::Parse {
            line: i + 1,
            message: format!("unknown partition {part:?}"),
        })?;
        map.insert(record_id.to_string(), part);
    }
    Ok(SplitAssignment { map })
}
