//! Raw table to model-ready dataset: column cleaning, ordinal encoding,
//! correlation-based feature selection and min-max scaling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{
    self, DataError, Dataset, FeatureKind, FeatureMeta, Partition, RawTable, SplitSpec,
};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("table has no data rows")]
    EmptyTable,
    #[error("every feature column was dropped during cleaning")]
    AllColumnsDropped,
    #[error("every row was dropped because of non-finite cells")]
    NoRowsLeft,
    #[error(
        "column '{column}' has {distinct} distinct values (max {max}); add it to exclude_columns"
    )]
    HighCardinality {
        column: String,
        distinct: usize,
        max: usize,
    },
    #[error("column '{0}' has zero variance; it should have been removed by cleaning")]
    ZeroVariance(String),
    #[error("no feature has |correlation with label| >= {0}; lower label_threshold")]
    NoFeaturesSelected(f64),
    #[error("feature count mismatch: scaler has {expected}, data has {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    /// Named in the configuration's exclusion list.
    Excluded,
    Constant,
    NonFinite,
    LowCorrelation,
    /// Near-duplicate of a feature that correlates more strongly with the label.
    Redundant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: DropReason,
}

impl DroppedColumn {
    fn new(name: &str, reason: DropReason) -> Self {
        Self {
            name: name.to_owned(),
            reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Minimum |rho(feature, label)| to keep a feature.
    pub label_threshold: f64,
    /// Feature pairs with |rho| above this are treated as redundant.
    pub redundancy_threshold: f64,
    /// Columns whose non-finite cell fraction exceeds this are dropped.
    pub nonfinite_threshold: f64,
    pub max_cardinality: usize,
    pub exclude_columns: Vec<String>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            label_threshold: 0.05,
            redundancy_threshold: 0.95,
            nonfinite_threshold: 0.0,
            max_cardinality: 256,
            exclude_columns: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Cell<'a> {
    Finite(f64),
    NonFinite,
    Text(&'a str),
}

fn parse_cell(s: &str) -> Cell<'_> {
    let t = s.trim();
    if t.is_empty() {
        return Cell::NonFinite;
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Cell::Finite(v),
        Ok(_) => Cell::NonFinite,
        Err(_) => Cell::Text(t),
    }
}

fn is_constant<'a>(cells: impl Iterator<Item = &'a str>) -> bool {
    let mut cells = cells.map(parse_cell);
    match cells.next() {
        Some(first) => cells.all(|c| c == first),
        None => true,
    }
}

/// Outcome of [`clean_columns`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CleanReport {
    pub dropped: Vec<DroppedColumn>,
    pub dropped_rows: usize,
}

/// Drops excluded, mostly non-finite and constant feature columns, then any
/// remaining rows that still carry a non-finite cell. The label column is
/// never touched.
pub fn clean_columns(table: &RawTable, cfg: &PreprocessConfig) -> Result<(RawTable, CleanReport)> {
    if table.row_count() == 0 {
        return Err(PreprocessError::EmptyTable);
    }
    let label_idx = table.label_index();
    let rows = table.row_count() as f64;
    let mut report = CleanReport::default();
    let mut keep: Vec<usize> = Vec::new();
    for (j, name) in table.column_names.iter().enumerate() {
        if Some(j) == label_idx {
            continue;
        }
        if cfg.exclude_columns.iter().any(|c| c == name) {
            report
                .dropped
                .push(DroppedColumn::new(name, DropReason::Excluded));
            continue;
        }
        let bad = table
            .column(j)
            .filter(|c| parse_cell(c) == Cell::NonFinite)
            .count();
        if bad as f64 / rows > cfg.nonfinite_threshold {
            report
                .dropped
                .push(DroppedColumn::new(name, DropReason::NonFinite));
        } else if is_constant(table.column(j)) {
            report
                .dropped
                .push(DroppedColumn::new(name, DropReason::Constant));
        } else {
            keep.push(j);
        }
    }

    let good_rows: Vec<&Vec<String>> = table
        .rows
        .iter()
        .filter(|r| keep.iter().all(|&j| parse_cell(&r[j]) != Cell::NonFinite))
        .collect();
    report.dropped_rows = table.row_count() - good_rows.len();
    if good_rows.is_empty() {
        return Err(PreprocessError::NoRowsLeft);
    }
    if report.dropped_rows > 0 {
        log::warn!("dropped {} rows with non-finite cells", report.dropped_rows);
        keep.retain(|&j| {
            let constant = is_constant(good_rows.iter().map(|r| r[j].as_str()));
            if constant {
                report.dropped.push(DroppedColumn::new(
                    &table.column_names[j],
                    DropReason::Constant,
                ));
            }
            !constant
        });
    }
    if keep.is_empty() {
        return Err(PreprocessError::AllColumnsDropped);
    }

    let mut cols = keep.clone();
    if let Some(l) = label_idx {
        cols.push(l);
        cols.sort_unstable();
    }
    let cleaned = RawTable {
        column_names: cols
            .iter()
            .map(|&j| table.column_names[j].clone())
            .collect(),
        rows: good_rows
            .iter()
            .map(|r| cols.iter().map(|&j| r[j].clone()).collect())
            .collect(),
        label_column: table.label_column.clone(),
    };
    Ok((cleaned, report))
}

/// Feature columns of a cleaned table as reals.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeatures {
    pub features: Vec<f64>,
    pub feature_meta: Vec<FeatureMeta>,
    /// Per categorical column, value -> ordinal code.
    pub encoding_maps: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Parses numeric columns and replaces non-numeric ones with lexicographic
/// ordinal codes. The label column is skipped.
pub fn encode_categorical(table: &RawTable, max_cardinality: usize) -> Result<EncodedFeatures> {
    let label_idx = table.label_index();
    let n = table.row_count();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut feature_meta = Vec::new();
    let mut encoding_maps = BTreeMap::new();
    for (j, name) in table.column_names.iter().enumerate() {
        if Some(j) == label_idx {
            continue;
        }
        let parsed: Option<Vec<f64>> = table
            .column(j)
            .map(|c| match parse_cell(c) {
                Cell::Finite(v) => Some(v),
                _ => None,
            })
            .collect();
        match parsed {
            Some(values) => {
                columns.push(values);
                feature_meta.push(FeatureMeta::numeric(name.clone()));
            }
            None => {
                let distinct: BTreeSet<&str> = table.column(j).map(str::trim).collect();
                if distinct.len() > max_cardinality {
                    return Err(PreprocessError::HighCardinality {
                        column: name.clone(),
                        distinct: distinct.len(),
                        max: max_cardinality,
                    });
                }
                let map: BTreeMap<String, usize> = distinct
                    .iter()
                    .enumerate()
                    .map(|(code, v)| ((*v).to_owned(), code))
                    .collect();
                columns.push(table.column(j).map(|c| map[c.trim()] as f64).collect());
                feature_meta.push(FeatureMeta {
                    name: name.clone(),
                    kind: FeatureKind::CategoricalEncoded,
                });
                encoding_maps.insert(name.clone(), map);
            }
        }
    }
    let mut features = Vec::with_capacity(n * columns.len());
    for i in 0..n {
        features.extend(columns.iter().map(|c| c[i]));
    }
    Ok(EncodedFeatures {
        features,
        feature_meta,
        encoding_maps,
    })
}

/// Pearson correlations over the feature columns plus a trailing `label`
/// entry (class index cast to real).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim() + j]
    }

    pub fn label_index(&self) -> usize {
        self.dim() - 1
    }
}

pub const LABEL_ENTRY: &str = "label";

/// Population-form Pearson correlation of every feature pair and every
/// feature against the label.
pub fn pearson_correlation_matrix(data: &Dataset) -> Result<CorrelationMatrix> {
    let mut names: Vec<String> = data
        .feature_names()
        .iter()
        .map(|s| (*s).to_owned())
        .collect();
    names.push(LABEL_ENTRY.to_owned());
    let mut columns: Vec<Vec<f64>> = (0..data.n_features()).map(|j| data.column(j)).collect();
    columns.push(data.labels().iter().map(|&l| l as f64).collect());

    let n = data.n_samples() as f64;
    let mut norms = Vec::with_capacity(columns.len());
    for (col, name) in columns.iter_mut().zip(&names) {
        let mean = col.iter().sum::<f64>() / n;
        col.iter_mut().for_each(|v| *v -= mean);
        let ss: f64 = col.iter().map(|v| v * v).sum();
        if ss <= 0.0 {
            return Err(PreprocessError::ZeroVariance(name.clone()));
        }
        norms.push(ss.sqrt());
    }

    let k = columns.len();
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        values[i * k + i] = 1.0;
        for j in i + 1..k {
            let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
            let rho = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * k + j] = rho;
            values[j * k + i] = rho;
        }
    }
    Ok(CorrelationMatrix { names, values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionPolicy {
    pub label_threshold: f64,
    pub redundancy_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Surviving features in their original order.
    pub selected: Vec<String>,
    pub dropped: Vec<DroppedColumn>,
}

/// Two-stage selection: drop features weakly correlated with the label, then
/// resolve redundant pairs in favour of the stronger label correlate.
pub fn select_features(corr: &CorrelationMatrix, policy: &SelectionPolicy) -> Result<Selection> {
    let label = corr.label_index();
    let mut dropped = Vec::new();
    let mut candidates: Vec<usize> = Vec::new();
    for f in 0..label {
        if corr.get(f, label).abs() < policy.label_threshold {
            dropped.push(DroppedColumn::new(
                &corr.names[f],
                DropReason::LowCorrelation,
            ));
        } else {
            candidates.push(f);
        }
    }
    if candidates.is_empty() {
        return Err(PreprocessError::NoFeaturesSelected(policy.label_threshold));
    }

    // Strongest label correlates claim their redundancy group first.
    candidates.sort_by(|&a, &b| {
        corr.get(b, label)
            .abs()
            .total_cmp(&corr.get(a, label).abs())
            .then_with(|| corr.names[a].cmp(&corr.names[b]))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &f in &candidates {
        if kept
            .iter()
            .any(|&k| corr.get(f, k).abs() > policy.redundancy_threshold)
        {
            dropped.push(DroppedColumn::new(&corr.names[f], DropReason::Redundant));
        } else {
            kept.push(f);
        }
    }
    kept.sort_unstable();
    Ok(Selection {
        selected: kept.iter().map(|&f| corr.names[f].clone()).collect(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn fit_minmax_scaler(train: &Dataset) -> Result<ScalerParams> {
    if train.is_empty() {
        return Err(DataError::InvalidDataset("cannot fit scaler on empty data".into()).into());
    }
    let d = train.n_features();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for i in 0..train.n_samples() {
        for (j, &v) in train.row(i).iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(ScalerParams { min, max })
}

/// Maps each feature through `(x - min) / (max - min)`. Values outside the
/// fitted range are not clamped; degenerate features map to 0.
pub fn apply_scaler(data: &Dataset, params: &ScalerParams) -> Result<Dataset> {
    check_dims(data, params)?;
    let d = data.n_features();
    let scaled = data
        .features()
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let (lo, hi) = (params.min[k % d], params.max[k % d]);
            if hi > lo {
                (x - lo) / (hi - lo)
            } else {
                0.0
            }
        })
        .collect();
    Ok(data.with_features(scaled)?)
}

/// Inverse of [`apply_scaler`] for non-degenerate features.
pub fn invert_scaler(data: &Dataset, params: &ScalerParams) -> Result<Dataset> {
    check_dims(data, params)?;
    let d = data.n_features();
    let raw = data
        .features()
        .iter()
        .enumerate()
        .map(|(k, &x)| x * (params.max[k % d] - params.min[k % d]) + params.min[k % d])
        .collect();
    Ok(data.with_features(raw)?)
}

fn check_dims(data: &Dataset, params: &ScalerParams) -> Result<()> {
    if data.n_features() != params.min.len() || params.min.len() != params.max.len() {
        return Err(PreprocessError::DimensionMismatch {
            expected: params.min.len(),
            found: data.n_features(),
        });
    }
    Ok(())
}

/// Audit trail of the full pipeline. Every non-label input column appears
/// exactly once in either `dropped_columns` or `selected_features`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub label_column: String,
    pub original_columns: Vec<String>,
    pub dropped_columns: Vec<DroppedColumn>,
    pub dropped_rows: usize,
    pub encoding_maps: BTreeMap<String, BTreeMap<String, usize>>,
    pub label_names: Vec<String>,
    pub selected_features: Vec<String>,
    pub scaler: ScalerParams,
    pub train_rows: usize,
    pub test_rows: usize,
    pub warnings: Vec<String>,
}

impl PreprocessReport {
    /// True when every original column is accounted for exactly once.
    pub fn accounting_is_total(&self) -> bool {
        let mut seen: Vec<&str> = self
            .dropped_columns
            .iter()
            .map(|d| d.name.as_str())
            .chain(self.selected_features.iter().map(String::as_str))
            .collect();
        seen.sort_unstable();
        let mut orig: Vec<&str> = self.original_columns.iter().map(String::as_str).collect();
        orig.sort_unstable();
        seen == orig
    }
}

/// Scaled, feature-selected train and test data plus the audit report.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub report: PreprocessReport,
}

/// Cleans and encodes a raw table, then runs [`prepare_dataset`].
pub fn prepare_table(
    table: &RawTable,
    cfg: &PreprocessConfig,
    split: &SplitSpec,
) -> Result<Prepared> {
    let label_column = table
        .label_column
        .clone()
        .ok_or_else(|| DataError::MissingLabelColumn(String::new()))?;
    let (cleaned, clean) = clean_columns(table, cfg)?;
    let encoded = encode_categorical(&cleaned, cfg.max_cardinality)?;
    let (labels, label_names) = dataset_io::encode_labels(&cleaned, &label_column)?;
    let n_features = encoded.feature_meta.len();
    let data = Dataset::new(
        encoded.features,
        n_features,
        labels,
        encoded.feature_meta,
        label_names,
    )?;
    let original_columns = table
        .column_names
        .iter()
        .filter(|c| **c != label_column)
        .cloned()
        .collect();
    prepare_dataset(
        &data,
        cfg,
        split,
        PipelineContext {
            label_column,
            original_columns,
            dropped_columns: clean.dropped,
            dropped_rows: clean.dropped_rows,
            encoding_maps: encoded.encoding_maps,
        },
    )
}

/// What earlier pipeline stages contribute to the report.
#[derive(Debug, Clone, Default)]
pub struct PipelineContext {
    pub label_column: String,
    pub original_columns: Vec<String>,
    pub dropped_columns: Vec<DroppedColumn>,
    pub dropped_rows: usize,
    pub encoding_maps: BTreeMap<String, BTreeMap<String, usize>>,
}

impl PipelineContext {
    /// Context for data that was numeric from the start.
    pub fn for_dataset(data: &Dataset) -> Self {
        Self {
            label_column: LABEL_ENTRY.to_owned(),
            original_columns: data
                .feature_names()
                .iter()
                .map(|s| (*s).to_owned())
                .collect(),
            ..Self::default()
        }
    }
}

/// Train/test split, then feature selection and scaler fitting on the train
/// side only; the test side reuses both.
pub fn prepare_dataset(
    data: &Dataset,
    cfg: &PreprocessConfig,
    split: &SplitSpec,
    ctx: PipelineContext,
) -> Result<Prepared> {
    let Partition {
        first: train,
        second: test,
        warnings,
    } = dataset_io::split_train_test(data, split)?;
    let mut dropped_columns = ctx.dropped_columns;

    // A column can be constant within the train side even if not overall.
    let varying: Vec<usize> = (0..train.n_features())
        .filter(|&j| {
            let col = train.column(j);
            let constant = col.iter().all(|&v| v == col[0]);
            if constant {
                dropped_columns.push(DroppedColumn::new(
                    &train.feature_meta()[j].name,
                    DropReason::Constant,
                ));
            }
            !constant
        })
        .collect();
    if varying.is_empty() {
        return Err(PreprocessError::AllColumnsDropped);
    }
    let train = train.select_columns(&varying);

    let corr = pearson_correlation_matrix(&train)?;
    let selection = select_features(
        &corr,
        &SelectionPolicy {
            label_threshold: cfg.label_threshold,
            redundancy_threshold: cfg.redundancy_threshold,
        },
    )?;
    dropped_columns.extend(selection.dropped);
    let names = train.feature_names();
    let keep: Vec<usize> = selection
        .selected
        .iter()
        .map(|s| names.iter().position(|n| n == s).unwrap())
        .collect();
    let train = train.select_columns(&keep);
    let test_keep: Vec<usize> = selection
        .selected
        .iter()
        .map(|s| test.feature_names().iter().position(|n| n == s).unwrap())
        .collect();
    let test = test.select_columns(&test_keep);

    let scaler = fit_minmax_scaler(&train)?;
    let train = apply_scaler(&train, &scaler)?;
    let test = apply_scaler(&test, &scaler)?;
    let report = PreprocessReport {
        label_column: ctx.label_column,
        original_columns: ctx.original_columns,
        dropped_columns,
        dropped_rows: ctx.dropped_rows,
        encoding_maps: ctx.encoding_maps,
        label_names: data.label_names().to_vec(),
        selected_features: selection.selected,
        scaler,
        train_rows: train.n_samples(),
        test_rows: test.n_samples(),
        warnings,
    };
    Ok(Prepared {
        train,
        test,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::read_csv;

    fn table(csv: &str) -> RawTable {
        read_csv(csv.as_bytes(), "label").unwrap()
    }

    fn numeric(cols: &[&[f64]], labels: &[usize]) -> Dataset {
        let n = labels.len();
        let mut f = Vec::new();
        for i in 0..n {
            f.extend(cols.iter().map(|c| c[i]));
        }
        let classes = labels.iter().max().unwrap() + 1;
        Dataset::new(
            f,
            cols.len(),
            labels.to_vec(),
            (0..cols.len())
                .map(|j| FeatureMeta::numeric(format!("x{j}")))
                .collect(),
            (0..classes).map(|c| c.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_column_dropped() {
        let t = table("a,b,label\n5.0,1,x\n5.0,2,y\n5.0,3,x\n");
        let (clean, rep) = clean_columns(&t, &PreprocessConfig::default()).unwrap();
        assert_eq!(
            rep.dropped,
            vec![DroppedColumn::new("a", DropReason::Constant)]
        );
        assert_eq!(clean.column_names, vec!["b", "label"]);
    }

    #[test]
    fn single_inf_drops_column_at_zero_threshold() {
        let t = table("a,b,label\n1,inf,x\n2,3,y\n3,4,x\n");
        let (_, rep) = clean_columns(&t, &PreprocessConfig::default()).unwrap();
        assert_eq!(
            rep.dropped,
            vec![DroppedColumn::new("b", DropReason::NonFinite)]
        );
        assert_eq!(rep.dropped_rows, 0);
    }

    #[test]
    fn tolerated_non_finite_drops_rows() {
        let cfg = PreprocessConfig {
            nonfinite_threshold: 0.5,
            ..PreprocessConfig::default()
        };
        let t = table("a,b,label\n1,NaN,x\n2,3,y\n3,4,x\n4,5,y\n");
        let (clean, rep) = clean_columns(&t, &cfg).unwrap();
        assert_eq!(rep.dropped_rows, 1);
        assert_eq!(clean.row_count(), 3);
        assert!(rep.dropped.is_empty());
    }

    #[test]
    fn two_constant_of_ten_leaves_eight() {
        let header = (0..10)
            .map(|j| format!("c{j}"))
            .collect::<Vec<_>>()
            .join(",");
        let mut csv = format!("{header},label\n");
        for i in 0..6 {
            let row: Vec<String> = (0..10)
                .map(|j| match j {
                    3 => "7".to_owned(),
                    8 => "tcp".to_owned(),
                    _ => format!("{}", i * (j + 1)),
                })
                .collect();
            csv.push_str(&format!(
                "{},{}\n",
                row.join(","),
                if i % 2 == 0 { "a" } else { "b" }
            ));
        }
        let (clean, rep) = clean_columns(&table(&csv), &PreprocessConfig::default()).unwrap();
        assert_eq!(clean.col_count() - 1, 8);
        assert_eq!(rep.dropped.len(), 2);
        assert!(rep.dropped.iter().all(|d| d.reason == DropReason::Constant));
    }

    #[test]
    fn all_dropped_is_error() {
        let t = table("a,label\n1,x\n1,y\n");
        assert!(matches!(
            clean_columns(&t, &PreprocessConfig::default()),
            Err(PreprocessError::AllColumnsDropped)
        ));
    }

    #[test]
    fn excluded_columns_are_reported() {
        let cfg = PreprocessConfig {
            exclude_columns: vec!["ip".into()],
            ..PreprocessConfig::default()
        };
        let t = table("ip,a,label\n1.2.3.4,1,x\n5.6.7.8,2,y\n");
        let (clean, rep) = clean_columns(&t, &cfg).unwrap();
        assert_eq!(
            rep.dropped,
            vec![DroppedColumn::new("ip", DropReason::Excluded)]
        );
        assert_eq!(clean.column_names, vec!["a", "label"]);
    }

    #[test]
    fn categorical_codes_are_lexicographic() {
        let t = table("proto,n,label\ntcp,1.5,x\nudp,2,y\ntcp,3,x\n");
        let enc = encode_categorical(&t, 256).unwrap();
        assert_eq!(enc.features, vec![0.0, 1.5, 1.0, 2.0, 0.0, 3.0]);
        let map = &enc.encoding_maps["proto"];
        assert_eq!(map.len(), 2);
        assert_eq!((map["tcp"], map["udp"]), (0, 1));
        assert_eq!(enc.feature_meta[1].kind, FeatureKind::Numeric);
        assert!(!enc.encoding_maps.contains_key("n"));
    }

    #[test]
    fn cardinality_limit() {
        let t = table("id,label\na,x\nb,y\nc,x\n");
        assert!(matches!(
            encode_categorical(&t, 2),
            Err(PreprocessError::HighCardinality { distinct: 3, .. })
        ));
    }

    #[test]
    fn correlation_hand_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let d = numeric(&[&x, &x, &neg, &y], &[0, 0, 1, 1]);
        let c = pearson_correlation_matrix(&d).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((c.get(0, 2) + 1.0).abs() < 1e-12);
        // Hand Pearson: centred x = (-1.5,-.5,.5,1.5), y = (-1.5,.5,-.5,1.5);
        // dot = 4, |x|^2 = |y|^2 = 5 -> 0.8.
        assert!((c.get(0, 3) - 0.8).abs() < 1e-12);
        assert_eq!(c.names.last().map(String::as_str), Some(LABEL_ENTRY));
    }

    #[test]
    fn zero_variance_rejected() {
        let d = numeric(&[&[1.0, 1.0, 1.0]], &[0, 1, 0]);
        assert!(matches!(
            pearson_correlation_matrix(&d),
            Err(PreprocessError::ZeroVariance(ref n)) if n == "x0"
        ));
    }

    fn policy(l: f64, r: f64) -> SelectionPolicy {
        SelectionPolicy {
            label_threshold: l,
            redundancy_threshold: r,
        }
    }

    #[test]
    fn vacuous_threshold_keeps_all() {
        let d = numeric(
            &[&[1.0, 2.0, 3.0, 5.0], &[2.0, 1.0, 2.0, 1.0]],
            &[0, 0, 1, 1],
        );
        let c = pearson_correlation_matrix(&d).unwrap();
        let s = select_features(&c, &policy(0.0, 1.0)).unwrap();
        assert_eq!(s.selected, vec!["x0", "x1"]);
        assert!(s.dropped.is_empty());
    }

    #[test]
    fn weak_feature_dropped() {
        let c = CorrelationMatrix {
            names: vec!["a".into(), "b".into(), LABEL_ENTRY.into()],
            values: vec![1.0, 0.0, 0.9, 0.0, 1.0, 0.01, 0.9, 0.01, 1.0],
        };
        let s = select_features(&c, &policy(0.05, 0.95)).unwrap();
        assert_eq!(s.selected, vec!["a"]);
        assert_eq!(
            s.dropped,
            vec![DroppedColumn::new("b", DropReason::LowCorrelation)]
        );
        assert!(matches!(
            select_features(&c, &policy(0.95, 0.95)),
            Err(PreprocessError::NoFeaturesSelected(_))
        ));
    }

    #[test]
    fn duplicate_pair_keeps_one() {
        let x = [0.1, 0.5, 0.2, 0.9, 0.7, 0.3];
        let noise = [0.3, 0.1, 0.4, 0.2, 0.6, 0.5];
        let d = numeric(&[&x, &noise, &x], &[0, 1, 0, 1, 1, 0]);
        let c = pearson_correlation_matrix(&d).unwrap();
        let s = select_features(&c, &policy(0.0, 0.95)).unwrap();
        let dup_kept = s
            .selected
            .iter()
            .filter(|n| *n == "x0" || *n == "x2")
            .count();
        assert_eq!(dup_kept, 1);
        // Equal label correlation: lexicographically first wins.
        assert!(s.selected.contains(&"x0".to_owned()));
        assert_eq!(
            s.dropped,
            vec![DroppedColumn::new("x2", DropReason::Redundant)]
        );
    }

    #[test]
    fn scaler_basics() {
        let d = numeric(&[&[2.0, 4.0, 6.0]], &[0, 1, 0]);
        let p = fit_minmax_scaler(&d).unwrap();
        assert_eq!((p.min[0], p.max[0]), (2.0, 6.0));
        assert_eq!(apply_scaler(&d, &p).unwrap().features(), &[0.0, 0.5, 1.0]);

        let test = numeric(&[&[8.0]], &[0]);
        assert_eq!(apply_scaler(&test, &p).unwrap().features(), &[1.5]);

        let single = fit_minmax_scaler(&test).unwrap();
        assert_eq!(single.min, single.max);
        assert_eq!(apply_scaler(&test, &single).unwrap().features(), &[0.0]);

        let wide = numeric(&[&[1.0], &[2.0]], &[0]);
        assert!(matches!(
            apply_scaler(&wide, &p),
            Err(PreprocessError::DimensionMismatch {
                expected: 1,
                found: 2
            })
        ));
    }

    #[test]
    fn pipeline_accounts_for_every_column() {
        let mut csv = String::from("proto,a,b,dup,flat,label\n");
        for i in 0..40 {
            let proto = ["tcp", "udp", "icmp"][i % 3];
            let label = if i % 2 == 0 { "normal" } else { "dos" };
            let a = i as f64 + if i % 2 == 0 { 0.0 } else { 30.0 };
            csv.push_str(&format!("{proto},{a},{},{a},1,{label}\n", (i * 7) % 5));
        }
        let t = table(&csv);
        let split = SplitSpec::default();
        let p = prepare_table(&t, &PreprocessConfig::default(), &split).unwrap();
        assert!(p.report.accounting_is_total());
        assert_eq!(p.report.original_columns.len(), 5);
        assert!(p
            .report
            .dropped_columns
            .contains(&DroppedColumn::new("flat", DropReason::Constant)));
        assert!(p
            .report
            .dropped_columns
            .contains(&DroppedColumn::new("dup", DropReason::Redundant)));
        assert_eq!(p.train.n_samples() + p.test.n_samples(), 40);
        let again = prepare_table(&t, &PreprocessConfig::default(), &split).unwrap();
        assert_eq!(p.report, again.report);
        assert_eq!(p.train, again.train);
    }
}
