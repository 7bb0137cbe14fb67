//! Tabular intrusion data: CSV ingestion, label encoding and the seeded
//! partitions that feed the federated setup.
//!
//! Partitioning follows the chain `data -> (train, test)`,
//! `train -> (server, client pool)` and `client pool -> per-client shares`.
//! Every partition is stratified per class where the class counts allow it,
//! row-disjoint, and a pure function of its inputs and seed.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("input file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv has no header row")]
    MissingHeader,
    #[error("ragged row {row}: expected {expected} cells, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("label column '{0}' not found in header")]
    MissingLabelColumn(String),
    #[error("empty label in row {0}")]
    EmptyLabel(usize),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("partition would leave the {0} side empty")]
    EmptyPartition(&'static str),
    #[error("cannot split {rows} rows among {clients} clients")]
    TooManyClients { clients: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A CSV file as text: header plus row-major cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Name of the class label column, when one has been identified.
    pub label_column: Option<String>,
}

impl RawTable {
    pub fn new(column_names: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        let width = column_names.len();
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
            return Err(DataError::RaggedRow {
                row: i + 1,
                expected: width,
                found: row.len(),
            });
        }
        Ok(Self {
            column_names,
            rows,
            label_column: None,
        })
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn col_count(&self) -> usize {
        self.column_names.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn column(&self, idx: usize) -> impl Iterator<Item = &str> {
        self.rows.iter().map(move |r| r[idx].as_str())
    }

    /// Index of the label column, if set and present.
    pub fn label_index(&self) -> Option<usize> {
        self.label_column
            .as_deref()
            .and_then(|l| self.column_index(l))
    }
}

/// Reads a header-first, comma-separated UTF-8 file. Quoted fields are
/// supported; cell text is preserved verbatim.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<RawTable> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    read_csv(File::open(path)?, label_column)
}

pub fn read_csv<R: Read>(reader: R, label_column: &str) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::None)
        .from_reader(reader);
    let mut records = rdr.records();
    let header: Vec<String> = match records.next() {
        Some(rec) => rec?.iter().map(str::to_owned).collect(),
        None => return Err(DataError::MissingHeader),
    };
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(DataError::RaggedRow {
                row: i + 1,
                expected: header.len(),
                found: rec.len(),
            });
        }
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    if !header.iter().any(|h| h == label_column) {
        return Err(DataError::MissingLabelColumn(label_column.to_owned()));
    }
    let mut table = RawTable::new(header, rows)?;
    table.label_column = Some(label_column.to_owned());
    Ok(table)
}

/// Maps each label string to its index in the lexicographically sorted list of
/// distinct labels.
pub fn encode_labels(table: &RawTable, label_column: &str) -> Result<(Vec<usize>, Vec<String>)> {
    let idx = table
        .column_index(label_column)
        .ok_or_else(|| DataError::MissingLabelColumn(label_column.to_owned()))?;
    let mut names = BTreeSet::new();
    for (i, cell) in table.column(idx).enumerate() {
        if cell.trim().is_empty() {
            return Err(DataError::EmptyLabel(i + 1));
        }
        names.insert(cell);
    }
    let names: Vec<String> = names.into_iter().map(str::to_owned).collect();
    let labels = table
        .column(idx)
        .map(|cell| names.binary_search_by(|n| n.as_str().cmp(cell)).unwrap())
        .collect();
    Ok((labels, names))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    CategoricalEncoded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureMeta {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numeric,
        }
    }
}

/// Numeric feature matrix with integer class labels.
///
/// `row_ids` tracks each row's position in the dataset it was originally
/// built from, so partitions can be checked for disjointness.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    feature_meta: Vec<FeatureMeta>,
    label_names: Vec<String>,
    row_ids: Vec<usize>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        feature_meta: Vec<FeatureMeta>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        let row_ids = (0..labels.len()).collect();
        Self::with_row_ids(
            features,
            n_features,
            labels,
            feature_meta,
            label_names,
            row_ids,
        )
    }

    pub fn with_row_ids(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        feature_meta: Vec<FeatureMeta>,
        label_names: Vec<String>,
        row_ids: Vec<usize>,
    ) -> Result<Self> {
        let invalid = |m: String| Err(DataError::InvalidDataset(m));
        if feature_meta.len() != n_features {
            return invalid(format!(
                "{} feature names for {} features",
                feature_meta.len(),
                n_features
            ));
        }
        if features.len() != labels.len() * n_features {
            return invalid(format!(
                "feature buffer of {} values does not match {} rows x {} features",
                features.len(),
                labels.len(),
                n_features
            ));
        }
        if row_ids.len() != labels.len() {
            return invalid("row id count differs from label count".into());
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return invalid(format!(
                "non-finite feature value at row {}",
                pos / n_features.max(1)
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= label_names.len()) {
            return invalid(format!(
                "label {} outside {} classes",
                bad,
                label_names.len()
            ));
        }
        Ok(Self {
            features,
            n_features,
            labels,
            feature_meta,
            label_names,
            row_ids,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature_meta(&self) -> &[FeatureMeta] {
        &self.feature_meta
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.feature_meta.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_samples())
            .map(|i| self.features[i * self.n_features + j])
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, in the given order. Row ids are carried over.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            n_features: self.n_features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_meta: self.feature_meta.clone(),
            label_names: self.label_names.clone(),
            row_ids: indices.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }

    /// Keeps only the feature columns at `columns`, in that order.
    pub fn select_columns(&self, columns: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(self.n_samples() * columns.len());
        for i in 0..self.n_samples() {
            let row = self.row(i);
            features.extend(columns.iter().map(|&j| row[j]));
        }
        Dataset {
            features,
            n_features: columns.len(),
            labels: self.labels.clone(),
            feature_meta: columns
                .iter()
                .map(|&j| self.feature_meta[j].clone())
                .collect(),
            label_names: self.label_names.clone(),
            row_ids: self.row_ids.clone(),
        }
    }

    /// Same rows and labels with a replacement feature matrix.
    pub fn with_features(&self, features: Vec<f64>) -> Result<Dataset> {
        Dataset::with_row_ids(
            features,
            self.n_features,
            self.labels.clone(),
            self.feature_meta.clone(),
            self.label_names.clone(),
            self.row_ids.clone(),
        )
    }

    /// Writes the features plus a trailing `label` column holding class names.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names();
        header.push("label");
        w.write_record(&header)?;
        for i in 0..self.n_samples() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.label_names[self.labels[i]].clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// How the client pool is divided among clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ShareMode {
    /// Equal-sized shares with near-identical class mix.
    #[default]
    Iid,
    /// Per-class proportions drawn from a symmetric Dirichlet(alpha).
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub server_fraction: f64,
    pub n_clients: usize,
    pub seed: u64,
    pub client_shares: ShareMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            server_fraction: 0.5,
            n_clients: 2,
            seed: 0,
            client_shares: ShareMode::Iid,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSplit(m.to_owned()));
        if !(self.test_fraction > 0.0 && self.test_fraction < 0.5) {
            return bad("test_fraction must lie in (0, 0.5) so that train outnumbers test");
        }
        if !(self.server_fraction > 0.0 && self.server_fraction < 1.0) {
            return bad("server_fraction must lie in (0, 1)");
        }
        if self.n_clients == 0 {
            return bad("n_clients must be at least 1");
        }
        if let ShareMode::Dirichlet { alpha } = self.client_shares {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return bad("dirichlet alpha must be positive and finite");
            }
        }
        Ok(())
    }
}

/// Two row-disjoint halves of a dataset plus any warnings raised while
/// splitting.
#[derive(Debug, Clone)]
pub struct Partition {
    pub first: Dataset,
    pub second: Dataset,
    pub warnings: Vec<String>,
}

/// Distributes `total` across classes proportionally to `counts` using
/// largest remainders, never exceeding `caps`. Ties go to the lower class index.
fn apportion(counts: &[usize], caps: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let mut alloc = vec![0usize; counts.len()];
    if n == 0 || total == 0 {
        return alloc;
    }
    let mut rems = Vec::with_capacity(counts.len());
    for (c, &count) in counts.iter().enumerate() {
        let exact = total as u128 * count as u128;
        let floor = (exact / n as u128) as usize;
        alloc[c] = floor.min(caps[c]);
        rems.push((exact % n as u128, c));
    }
    let mut remaining = total - alloc.iter().sum::<usize>().min(total);
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in &rems {
        if remaining == 0 {
            break;
        }
        if alloc[c] < caps[c] {
            alloc[c] += 1;
            remaining -= 1;
        }
    }
    for c in 0..counts.len() {
        let room = caps[c] - alloc[c];
        let take = room.min(remaining);
        alloc[c] += take;
        remaining -= take;
    }
    alloc
}

/// Row indices grouped by class, each group shuffled by `rng`.
fn shuffled_class_groups<R: Rng>(data: &Dataset, rng: &mut R) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); data.n_classes()];
    for (i, &l) in data.labels().iter().enumerate() {
        groups[l].push(i);
    }
    for g in &mut groups {
        g.shuffle(rng);
    }
    groups
}

/// Takes `alloc[c]` rows of each class into the first side.
fn take_stratified(data: &Dataset, groups: &[Vec<usize>], alloc: &[usize]) -> (Dataset, Dataset) {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (g, &k) in groups.iter().zip(alloc) {
        first.extend_from_slice(&g[..k]);
        second.extend_from_slice(&g[k..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (data.subset(&first), data.subset(&second))
}

/// Seeded stratified train/test split. `first` is the train side (U rows),
/// `second` the test side (V rows), with U > V.
pub fn split_train_test(data: &Dataset, spec: &SplitSpec) -> Result<Partition> {
    spec.validate()?;
    let n = data.n_samples();
    if n < 2 {
        return Err(DataError::InvalidDataset(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    let counts = data.class_counts();
    let mut warnings = Vec::new();
    let caps: Vec<usize> = counts
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            if k == 1 {
                warnings.push(format!(
                    "class '{}' has a single sample; kept in train",
                    data.label_names()[c]
                ));
            }
            k.saturating_sub(1)
        })
        .collect();
    let wanted = (spec.test_fraction * n as f64).round() as usize;
    let test_total = wanted.min((n - 1) / 2).min(caps.iter().sum());
    let alloc = apportion(&counts, &caps, test_total);

    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::stream::SPLIT]));
    let groups = shuffled_class_groups(data, &mut rng);
    let (test, train) = take_stratified(data, &groups, &alloc);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Partition {
        first: train,
        second: test,
        warnings,
    })
}

/// Splits training data into server data (`first`, round(server_fraction * U)
/// rows) and the client pool (`second`).
pub fn partition_client_server(train: &Dataset, spec: &SplitSpec) -> Result<Partition> {
    spec.validate()?;
    let u = train.n_samples();
    if u == 0 {
        return Err(DataError::InvalidDataset("training data is empty".into()));
    }
    let server_total = (spec.server_fraction * u as f64).round() as usize;
    if server_total == 0 {
        return Err(DataError::EmptyPartition("server"));
    }
    if server_total >= u {
        return Err(DataError::EmptyPartition("client"));
    }
    let counts = train.class_counts();
    let alloc = apportion(&counts, &counts, server_total);
    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::stream::SERVER_CLIENT]));
    let groups = shuffled_class_groups(train, &mut rng);
    let (server, clients) = take_stratified(train, &groups, &alloc);
    Ok(Partition {
        first: server,
        second: clients,
        warnings: Vec::new(),
    })
}

/// Divides the client pool into `n_clients` row-disjoint shares whose union is
/// the pool.
pub fn partition_among_clients(
    pool: &Dataset,
    n_clients: usize,
    seed_value: u64,
    mode: ShareMode,
) -> Result<Vec<Dataset>> {
    if n_clients == 0 {
        return Err(DataError::InvalidSplit(
            "n_clients must be at least 1".into(),
        ));
    }
    if pool.is_empty() {
        return Err(DataError::InvalidDataset("client pool is empty".into()));
    }
    if n_clients > pool.n_samples() {
        return Err(DataError::TooManyClients {
            clients: n_clients,
            rows: pool.n_samples(),
        });
    }
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::stream::CLIENT_SHARES]));
    let groups = shuffled_class_groups(pool, &mut rng);
    let mut shares: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    match mode {
        ShareMode::Iid => {
            // Dealing the class-ordered rows round-robin keeps sizes within one
            // of each other and the class mix near-identical.
            for (pos, &row) in groups.iter().flatten().enumerate() {
                shares[pos % n_clients].push(row);
            }
        }
        ShareMode::Dirichlet { alpha } => {
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| DataError::InvalidSplit(format!("dirichlet alpha: {e}")))?;
            for g in &groups {
                if g.is_empty() {
                    continue;
                }
                let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
                let sum: f64 = draws.iter().sum();
                // Scale to integer weights so apportionment stays exact.
                let weights: Vec<usize> = draws
                    .iter()
                    .map(|d| {
                        if sum > 0.0 {
                            (d / sum * 1e9).round() as usize
                        } else {
                            1
                        }
                    })
                    .collect();
                let caps = vec![g.len(); n_clients];
                let alloc = apportion(&weights, &caps, g.len());
                let mut start = 0;
                for (share, k) in shares.iter_mut().zip(alloc) {
                    share.extend_from_slice(&g[start..start + k]);
                    start += k;
                }
            }
            if shares.iter().any(Vec::is_empty) {
                return Err(DataError::EmptyPartition("client share"));
            }
        }
    }
    Ok(shares
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            pool.subset(&s)
        })
        .collect())
}

/// Isotropic Gaussian clusters, one per class, for synthetic experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Class centres are drawn uniformly from `[-center_box, center_box]^d`.
    pub center_box: f64,
    pub cluster_std: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            n_samples: 2500,
            n_features: 10,
            n_classes: 3,
            center_box: 5.0,
            cluster_std: 1.0,
            seed: 0,
        }
    }
}

pub fn gaussian_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.n_classes < 1 || spec.n_features < 1 || spec.n_samples < spec.n_classes {
        return Err(DataError::InvalidDataset(
            "blob spec needs >= 1 class, >= 1 feature and at least one sample per class".into(),
        ));
    }
    let normal = Normal::new(0.0, spec.cluster_std)
        .map_err(|e| DataError::InvalidDataset(format!("cluster_std: {e}")))?;
    let mut rng = seed::rng(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.n_features)
                .map(|_| rng.random_range(-spec.center_box..=spec.center_box))
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..spec.n_samples).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(spec.n_samples * spec.n_features);
    for &l in &labels {
        features.extend(centers[l].iter().map(|c| c + normal.sample(&mut rng)));
    }
    Dataset::new(
        features,
        spec.n_features,
        labels,
        (0..spec.n_features)
            .map(|j| FeatureMeta::numeric(format!("f{j}")))
            .collect(),
        (0..spec.n_classes).map(|c| format!("class{c}")).collect(),
    )
}
