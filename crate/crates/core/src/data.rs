//! Dataset generation, CSV ingestion, and membership-inference splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeding;

pub const TRAIN: &str = "train";
pub const TEST: &str = "test";
pub const KNOWN_MEMBERS: &str = "known_members";
pub const KNOWN_NONMEMBERS: &str = "known_nonmembers";
pub const EVAL_MEMBERS: &str = "eval_members";
pub const EVAL_NONMEMBERS: &str = "eval_nonmembers";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Tabular,
}

/// Feature matrix, labels, and named index splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
    splits: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            provenance,
            splits: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn set_split(&mut self, name: &str, indices: Vec<usize>) -> Result<()> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!(
                "split {name:?} index {bad} out of range for {} rows",
                self.len()
            )));
        }
        self.splits.insert(name.to_string(), indices);
        Ok(())
    }

    /// Named split; missing or empty splits are errors.
    pub fn split(&self, name: &str) -> Result<&[usize]> {
        match self.splits.get(name) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(Error::EmptySplit(name.to_string())),
        }
    }

    pub fn has_split(&self, name: &str) -> bool {
        self.splits.get(name).is_some_and(|v| !v.is_empty())
    }

    pub fn splits(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.splits
    }

    /// Gather feature rows for the given indices.
    pub fn features_of(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (row, &idx) in indices.iter().enumerate() {
            out.row_mut(row).assign(&self.features.row(idx));
        }
        out
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// SHA-256 over features and labels, for split provenance records.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.features.iter() {
            hasher.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            hasher.update((l as u64).to_le_bytes());
        }
        hex_string(&hasher.finalize())
    }

    /// Standardize features to per-column mean 0 / variance 1, with the
    /// statistics computed on the train split only.
    pub fn standardize_from_train(&mut self) -> Result<()> {
        let train: Vec<usize> = self.split(TRAIN)?.to_vec();
        let d = self.dim();
        let n = train.len() as f64;
        let mut mean = Array1::zeros(d);
        for &i in &train {
            mean += &self.features.row(i);
        }
        mean.mapv_inplace(|v| v / n);
        let mut var: Array1<f64> = Array1::zeros(d);
        for &i in &train {
            let row = self.features.row(i);
            for (j, &v) in row.iter().enumerate() {
                let c = v - mean[j];
                var[j] += c * c;
            }
        }
        var.mapv_inplace(|v| v / n);
        let std = var.mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        for mut row in self.features.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) / std[j];
            }
        }
        Ok(())
    }

    /// Check the split-schema invariants (disjointness and containment).
    pub fn check_split_invariants(&self) -> Result<()> {
        let set = |name: &str| -> Result<BTreeSet<usize>> {
            Ok(self.split(name)?.iter().copied().collect())
        };
        let train = set(TRAIN)?;
        let test = set(TEST)?;
        if !train.is_disjoint(&test) {
            return Err(Error::Data("train and test overlap".into()));
        }
        for (name, pool) in [
            (KNOWN_MEMBERS, &train),
            (EVAL_MEMBERS, &train),
            (KNOWN_NONMEMBERS, &test),
            (EVAL_NONMEMBERS, &test),
        ] {
            if self.has_split(name) {
                let s = set(name)?;
                if !s.is_subset(pool) {
                    return Err(Error::Data(format!("split {name:?} escapes its pool")));
                }
            }
        }
        for (a, b) in [
            (KNOWN_MEMBERS, EVAL_MEMBERS),
            (KNOWN_NONMEMBERS, EVAL_NONMEMBERS),
        ] {
            if self.has_split(a) && self.has_split(b) {
                let sa = set(a)?;
                let sb = set(b)?;
                if !sa.is_disjoint(&sb) {
                    return Err(Error::Data(format!("splits {a:?} and {b:?} overlap")));
                }
            }
        }
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Generate `k` Gaussian clusters with unit-sphere centers.
///
/// Rows are laid out train-first (`per_class_train` rows per class) followed
/// by the test block; `train`/`test` splits are set accordingly. Identical
/// seeds reproduce the dataset bitwise.
pub fn gen_synthetic(
    num_classes: usize,
    dim: usize,
    per_class_train: usize,
    per_class_test: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Data("need at least two classes".into()));
    }
    if dim == 0 {
        return Err(Error::Data("feature dimension must be positive".into()));
    }
    if per_class_train == 0 || per_class_test == 0 {
        return Err(Error::Data("per-class sample counts must be positive".into()));
    }
    if cluster_spread < 0.0 {
        return Err(Error::Data("cluster spread must be nonnegative".into()));
    }
    let mut rng = seeding::rng_from(seed);
    let normal = StandardNormal;

    let mut centers: Array2<f64> = Array2::zeros((num_classes, dim));
    for mut row in centers.rows_mut() {
        let mut norm = 0.0f64;
        for v in row.iter_mut() {
            let sample: f64 = normal.sample(&mut rng);
            *v = sample;
            norm += *v * *v;
        }
        let norm = norm.sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }

    let n_train = num_classes * per_class_train;
    let n_test = num_classes * per_class_test;
    let mut features = Array2::zeros((n_train + n_test, dim));
    let mut labels = Vec::with_capacity(n_train + n_test);
    let mut row = 0;
    for (count, _block) in [(per_class_train, TRAIN), (per_class_test, TEST)] {
        for class in 0..num_classes {
            for _ in 0..count {
                for (j, v) in features.row_mut(row).iter_mut().enumerate() {
                    let noise: f64 = normal.sample(&mut rng);
                    *v = centers[[class, j]] + cluster_spread * noise;
                }
                labels.push(class);
                row += 1;
            }
        }
    }

    let mut dataset = Dataset::new(features, labels, num_classes, Provenance::Synthetic)?;
    dataset.set_split(TRAIN, (0..n_train).collect())?;
    dataset.set_split(TEST, (n_train..n_train + n_test).collect())?;
    Ok(dataset)
}

/// Load a CSV with a header. The column named `label` carries nonnegative
/// integer classes; every other column is a numeric feature.
pub fn load_tabular(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("bad header: {e}")))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Data("no column named \"label\"".into()))?;
    let width = headers.len();
    if width < 2 {
        return Err(Error::Data("need at least one feature column".into()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1; // 1-based data rows, header excluded
        let record = record.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        if record.len() != width {
            return Err(Error::Data(format!(
                "ragged row {row}: {} cells, expected {width}",
                record.len()
            )));
        }
        let mut feats = Vec::with_capacity(width - 1);
        for (col_idx, cell) in record.iter().enumerate() {
            let col = col_idx + 1;
            if col_idx == label_col {
                let value: f64 = cell.trim().parse().map_err(|_| Error::CsvCell {
                    row,
                    col,
                    message: format!("unparsable label {cell:?}"),
                })?;
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::CsvCell {
                        row,
                        col,
                        message: format!("label {cell:?} is not a nonnegative integer"),
                    });
                }
                labels.push(value as usize);
            } else {
                let value: f64 = cell.trim().parse().map_err(|_| Error::CsvCell {
                    row,
                    col,
                    message: format!("unparsable numeric cell {cell:?}"),
                })?;
                feats.push(value);
            }
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::Data("csv has no data rows".into()));
    }
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let dim = width - 1;
    let mut features = Array2::zeros((rows.len(), dim));
    for (i, feats) in rows.iter().enumerate() {
        for (j, &v) in feats.iter().enumerate() {
            features[[i, j]] = v;
        }
    }
    Dataset::new(features, labels, num_classes, Provenance::Tabular)
}

/// Sizes of the membership splits.
///
/// When `train_size`/`test_size` are absent the dataset's existing
/// `train`/`test` splits are used as the pools.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub test_size: Option<usize>,
    pub known_members: usize,
    pub known_nonmembers: usize,
    pub eval_members: usize,
    pub eval_nonmembers: usize,
}

/// Carve the attacker-known and evaluation splits out of train/test.
///
/// The two evaluation sides are forced to equal size by truncating the
/// larger request; known and eval sets on the same side are disjoint.
pub fn make_mia_splits(dataset: &mut Dataset, cfg: &SplitConfig, seed: u64) -> Result<()> {
    let mut rng = seeding::rng_from(seed);

    let (train_pool, test_pool) = match (cfg.train_size, cfg.test_size) {
        (Some(tr), Some(te)) => {
            if tr + te > dataset.len() {
                return Err(Error::Data(format!(
                    "requested train {tr} + test {te} exceeds {} rows (short by {})",
                    dataset.len(),
                    tr + te - dataset.len()
                )));
            }
            if tr == 0 || te == 0 {
                return Err(Error::Data("train and test sizes must be positive".into()));
            }
            let mut all: Vec<usize> = (0..dataset.len()).collect();
            all.shuffle(&mut rng);
            let train: Vec<usize> = all[..tr].to_vec();
            let test: Vec<usize> = all[tr..tr + te].to_vec();
            (train, test)
        }
        (None, None) => (
            dataset.split(TRAIN)?.to_vec(),
            dataset.split(TEST)?.to_vec(),
        ),
        _ => {
            return Err(Error::Data(
                "train_size and test_size must be given together or omitted together".into(),
            ))
        }
    };

    let eval_each = cfg.eval_members.min(cfg.eval_nonmembers);
    if eval_each == 0 {
        return Err(Error::Data("evaluation splits must be nonempty".into()));
    }
    for (side, pool, known, eval) in [
        ("member", &train_pool, cfg.known_members, eval_each),
        ("non-member", &test_pool, cfg.known_nonmembers, eval_each),
    ] {
        if known + eval > pool.len() {
            return Err(Error::Data(format!(
                "{side} side needs {} samples but the pool has {} (short by {})",
                known + eval,
                pool.len(),
                known + eval - pool.len()
            )));
        }
    }

    let mut members = train_pool.clone();
    members.shuffle(&mut rng);
    let known_members = members[..cfg.known_members].to_vec();
    let eval_members = members[cfg.known_members..cfg.known_members + eval_each].to_vec();

    let mut nonmembers = test_pool.clone();
    nonmembers.shuffle(&mut rng);
    let known_nonmembers = nonmembers[..cfg.known_nonmembers].to_vec();
    let eval_nonmembers =
        nonmembers[cfg.known_nonmembers..cfg.known_nonmembers + eval_each].to_vec();

    dataset.set_split(TRAIN, train_pool)?;
    dataset.set_split(TEST, test_pool)?;
    dataset.set_split(KNOWN_MEMBERS, known_members)?;
    dataset.set_split(KNOWN_NONMEMBERS, known_nonmembers)?;
    dataset.set_split(EVAL_MEMBERS, eval_members)?;
    dataset.set_split(EVAL_NONMEMBERS, eval_nonmembers)?;
    dataset.check_split_invariants()
}
