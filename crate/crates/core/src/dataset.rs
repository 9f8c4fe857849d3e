//! Multivariate time series tables: CSV loading, z-score normalization,
//! sliding windows and chronological splits.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations below this are treated as constant channels.
pub const MIN_STD: f64 = 1e-8;

/// `K` entities observed over `L` timesteps, plus per-timestep anomaly labels
/// that are only ever used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTable {
    /// `K × L`, one row per entity.
    pub values: Array2<f64>,
    pub labels: Vec<u8>,
    pub entity_names: Vec<String>,
    pub sample_period: Option<f64>,
}

impl TimeSeriesTable {
    pub fn new(values: Array2<f64>, labels: Vec<u8>, entity_names: Vec<String>) -> Result<Self> {
        let (k, l) = values.dim();
        if k == 0 || l == 0 {
            return Err(Error::EmptyInput(format!("table of shape {k}x{l}")));
        }
        if labels.len() != l {
            return Err(Error::config(format!(
                "{} labels for {l} timesteps",
                labels.len()
            )));
        }
        if entity_names.len() != k {
            return Err(Error::config(format!(
                "{} entity names for {k} entities",
                entity_names.len()
            )));
        }
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::config("labels must be 0 or 1"));
        }
        if let Some(((e, t), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::config(format!(
                "non-finite value for entity {e} at timestep {t}"
            )));
        }
        Ok(Self {
            values,
            labels,
            entity_names,
            sample_period: None,
        })
    }

    /// Table with default entity names `e0, e1, ...` and all-zero labels.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let (k, l) = values.dim();
        let names = (0..k).map(|i| format!("e{i}")).collect();
        Self::new(values, vec![0; l], names)
    }

    pub fn num_entities(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// Timesteps `start..end` of every entity.
    pub fn slice_time(&self, start: usize, end: usize) -> Self {
        Self {
            values: self.values.slice(s![.., start..end]).to_owned(),
            labels: self.labels[start..end].to_vec(),
            entity_names: self.entity_names.clone(),
            sample_period: self.sample_period,
        }
    }

    /// Write the table in the CSV layout accepted by [`load_csv`], with the
    /// labels in a trailing `label` column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.entity_names.clone();
        header.push("label".to_string());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut record: Vec<String> = self.values.column(t).iter().map(f64::to_string).collect();
            record.push(self.labels[t].to_string());
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Read a CSV with a header row, one numeric column per entity and an
/// optional 0/1 label column.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<TimeSeriesTable> {
    load_csv_with(path, label_column, &[])
}

/// Trimmed header names of a CSV file.
pub fn csv_headers(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    Ok(reader.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

fn parse_label(cell: &str, row: usize, column: &str) -> Result<u8> {
    let cell = cell.trim();
    match cell.parse::<f64>() {
        Ok(0.0) => Ok(0),
        Ok(1.0) => Ok(1),
        _ => Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("label `{cell}` is not 0 or 1"),
        }),
    }
}

/// The 0/1 column `column` of a CSV, ignoring every other column.
pub fn load_labels(path: &Path, column: &str) -> Result<Vec<u8>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let idx = reader
        .headers()?
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| Error::config(format!("label column `{column}` not found in {}", path.display())))?;
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let cell = record.get(idx).ok_or_else(|| Error::Parse {
            row: i + 2,
            column: column.to_string(),
            message: "missing field".into(),
        })?;
        labels.push(parse_label(cell, i + 2, column)?);
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput(format!("{}: no data rows", path.display())));
    }
    Ok(labels)
}

/// As [`load_csv`], skipping the named columns (timestamps and the like).
pub fn load_csv_with(
    path: &Path,
    label_column: Option<&str>,
    ignore_columns: &[String],
) -> Result<TimeSeriesTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::EmptyInput(format!("{}: no header", path.display())));
    }
    let label_idx = match label_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::config(format!("label column `{name}` not found in {}", path.display()))
        })?),
        None => None,
    };
    let entity_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| Some(i) != label_idx && !ignore_columns.contains(&headers[i]))
        .collect();
    if entity_cols.is_empty() {
        return Err(Error::EmptyInput(format!("{}: no entity columns", path.display())));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); entity_cols.len()];
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (col, &ci) in columns.iter_mut().zip(&entity_cols) {
            let cell = record[ci].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[ci].clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[ci].clone(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            col.push(v);
        }
        if let Some(li) = label_idx {
            labels.push(parse_label(&record[li], row, &headers[li])?);
        }
    }
    let l = columns[0].len();
    if l == 0 {
        return Err(Error::EmptyInput(format!("{}: no data rows", path.display())));
    }
    if label_idx.is_none() {
        labels = vec![0; l];
    }
    let k = columns.len();
    let flat: Vec<f64> = columns.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((k, l), flat).expect("rectangular by construction");
    let names = entity_cols.iter().map(|&i| headers[i].clone()).collect();
    TimeSeriesTable::new(values, labels, names)
}

/// Per-entity z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population (`1/L`) standard deviation.
    pub std: Vec<f64>,
    /// Entities whose standard deviation fell below [`MIN_STD`]; they are
    /// mapped to all zeros.
    pub constant_entities: Vec<usize>,
}

impl NormStats {
    pub fn fit(table: &TimeSeriesTable) -> Self {
        let l = table.len() as f64;
        let mut mean = Vec::with_capacity(table.num_entities());
        let mut std = Vec::with_capacity(table.num_entities());
        let mut constant_entities = Vec::new();
        for (k, row) in table.values.axis_iter(Axis(0)).enumerate() {
            let mu = row.sum() / l;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / l;
            let sd = var.sqrt();
            if sd < MIN_STD {
                log::warn!("entity `{}` is constant; normalized to zeros", table.entity_names[k]);
                constant_entities.push(k);
            }
            mean.push(mu);
            std.push(sd);
        }
        Self {
            mean,
            std,
            constant_entities,
        }
    }

    pub fn apply(&self, table: &TimeSeriesTable) -> Result<TimeSeriesTable> {
        if table.num_entities() != self.mean.len() {
            return Err(Error::config(format!(
                "normalization fitted on {} entities, table has {}",
                self.mean.len(),
                table.num_entities()
            )));
        }
        let mut out = table.clone();
        for (k, mut row) in out.values.axis_iter_mut(Axis(0)).enumerate() {
            if self.std[k] < MIN_STD {
                row.fill(0.0);
            } else {
                let (mu, sd) = (self.mean[k], self.std[k]);
                row.mapv_inplace(|v| (v - mu) / sd);
            }
        }
        Ok(out)
    }
}

/// Z-score each entity with its own mean and population standard deviation.
pub fn zscore_normalize(table: &TimeSeriesTable) -> Result<(TimeSeriesTable, NormStats)> {
    if table.len() < 2 {
        return Err(Error::config("z-score normalization needs at least 2 timesteps"));
    }
    let stats = NormStats::fit(table);
    let out = stats.apply(table)?;
    Ok((out, stats))
}

/// Sliding windows over a table. Windows are views into the shared series.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    values: Array2<f64>,
    pub window_starts: Vec<usize>,
    pub window_labels: Vec<u8>,
    pub window_size: usize,
    pub stride: usize,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.window_starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_starts.is_empty()
    }

    pub fn num_entities(&self) -> usize {
        self.values.nrows()
    }

    /// `K × M` view of window `i`.
    pub fn window(&self, i: usize) -> ArrayView2<'_, f64> {
        let start = self.window_starts[i];
        self.values.slice(s![.., start..start + self.window_size])
    }

    pub fn windows(&self) -> impl Iterator<Item = ArrayView2<'_, f64>> {
        (0..self.len()).map(move |i| self.window(i))
    }

    /// Sub-batch holding the given window indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            values: self.values.clone(),
            window_starts: indices.iter().map(|&i| self.window_starts[i]).collect(),
            window_labels: indices.iter().map(|&i| self.window_labels[i]).collect(),
            window_size: self.window_size,
            stride: self.stride,
        }
    }
}

/// Windows of size `m` every `s` steps: `N = ⌊(L − m)/s⌋ + 1`. A window is
/// labelled anomalous iff any timestep it covers is.
pub fn make_windows(table: &TimeSeriesTable, m: usize, s: usize) -> Result<WindowBatch> {
    if m == 0 || s == 0 {
        return Err(Error::config(format!(
            "window size and stride must be positive (got {m}, {s})"
        )));
    }
    let l = table.len();
    let (starts, labels) = if m > l {
        log::warn!("window size {m} exceeds series length {l}; no windows");
        (Vec::new(), Vec::new())
    } else {
        let n = (l - m) / s + 1;
        let starts: Vec<usize> = (0..n).map(|i| i * s).collect();
        let labels = starts
            .iter()
            .map(|&st| u8::from(table.labels[st..st + m].contains(&1)))
            .collect();
        (starts, labels)
    };
    Ok(WindowBatch {
        values: table.values.clone(),
        window_starts: starts,
        window_labels: labels,
        window_size: m,
        stride: s,
    })
}

/// Chronological train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.6,
            valid_frac: 0.2,
            test_frac: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn new(train_frac: f64, valid_frac: f64, test_frac: f64) -> Result<Self> {
        let spec = Self {
            train_frac,
            valid_frac,
            test_frac,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.valid_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config(format!("split fractions out of [0, 1]: {fracs:?}")));
        }
        let total: f64 = fracs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Boundaries `(train_end, valid_end)` for a series of length `l`.
    pub fn boundaries(&self, l: usize) -> (usize, usize) {
        let train_end = ((self.train_frac * l as f64).round() as usize).min(l);
        let valid_end =
            (((self.train_frac + self.valid_frac) * l as f64).round() as usize).clamp(train_end, l);
        (train_end, valid_end)
    }
}

/// Contiguous, chronological `(train, valid, test)` partitions.
pub fn split(
    table: &TimeSeriesTable,
    spec: &SplitSpec,
) -> Result<(TimeSeriesTable, TimeSeriesTable, TimeSeriesTable)> {
    spec.validate()?;
    let (a, b) = spec.boundaries(table.len());
    Ok((
        table.slice_time(0, a),
        table.slice_time(a, b),
        table.slice_time(b, table.len()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_without_labels() {
        let f = write_tmp("a,b,c\n1,2,3\n4,5,6\n7,8,9\n1,1,1\n2,2,2\n");
        let t = load_csv(f.path(), None).unwrap();
        assert_eq!(t.num_entities(), 3);
        assert_eq!(t.len(), 5);
        assert_eq!(t.labels, vec![0; 5]);
        assert_eq!(t.values.row(1).to_vec(), vec![2.0, 5.0, 8.0, 1.0, 2.0]);
    }

    #[test]
    fn load_with_label_column() {
        let f = write_tmp("a,b,label\n1,2,0\n3,4,1\n5,6,0\n");
        let t = load_csv(f.path(), Some("label")).unwrap();
        assert_eq!(t.num_entities(), 2);
        assert_eq!(t.entity_names, vec!["a", "b"]);
        assert_eq!(t.labels, vec![0, 1, 0]);
    }

    #[test]
    fn label_column_alone() {
        let f = write_tmp("label\n0\n1\n1\n");
        assert_eq!(load_labels(f.path(), "label").unwrap(), vec![0, 1, 1]);
        let f = write_tmp("label\n0\n2\n");
        assert!(matches!(load_labels(f.path(), "label"), Err(Error::Parse { row: 3, .. })));
        assert!(matches!(load_labels(f.path(), "y"), Err(Error::Config(_))));
    }

    #[test]
    fn load_reports_bad_cell() {
        let f = write_tmp("a,b\n1,2\n3,abc\n");
        match load_csv(f.path(), None) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "b");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_rejects_empty_and_missing_values() {
        let f = write_tmp("");
        assert!(matches!(load_csv(f.path(), None), Err(Error::EmptyInput(_))));
        let f = write_tmp("a,b\n");
        assert!(matches!(load_csv(f.path(), None), Err(Error::EmptyInput(_))));
        let f = write_tmp("a,b\n1,\n");
        assert!(matches!(load_csv(f.path(), None), Err(Error::Parse { .. })));
        let f = write_tmp("a,b\n1,NaN\n");
        assert!(matches!(load_csv(f.path(), None), Err(Error::Parse { .. })));
    }

    #[test]
    fn load_ignores_named_columns() {
        let f = write_tmp("time,a,label\n2020-01-01,1,0\n2020-01-02,2,1\n");
        let t = load_csv_with(f.path(), Some("label"), &["time".to_string()]).unwrap();
        assert_eq!(t.entity_names, vec!["a"]);
    }

    #[test]
    fn csv_round_trip() {
        let t = TimeSeriesTable::new(
            array![[1.5, -2.0, 0.1], [3.0, 4.25, 1e-3]],
            vec![0, 1, 0],
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        t.write_csv(f.path()).unwrap();
        assert_eq!(load_csv(f.path(), Some("label")).unwrap(), t);
    }

    #[test]
    fn zscore_of_one_two_three() {
        let t = TimeSeriesTable::from_values(array![[1.0, 2.0, 3.0]]).unwrap();
        let (n, _) = zscore_normalize(&t).unwrap();
        // population std is sqrt(2/3)
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((n.values[[0, 0]] + expected).abs() < 1e-12);
        assert!(n.values[[0, 1]].abs() < 1e-12);
        assert!((n.values[[0, 2]] - expected).abs() < 1e-12);
        assert!((expected - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn zscore_constant_entity_becomes_zero() {
        let t = TimeSeriesTable::from_values(array![[5.0, 5.0, 5.0], [1.0, 2.0, 4.0]]).unwrap();
        let (n, stats) = zscore_normalize(&t).unwrap();
        assert_eq!(n.values.row(0).to_vec(), vec![0.0; 3]);
        assert_eq!(stats.constant_entities, vec![0]);
        assert!(zscore_normalize(&t.slice_time(0, 1)).is_err());
    }

    #[test]
    fn zscore_is_idempotent() {
        let t = TimeSeriesTable::from_values(array![[0.3, -1.0, 2.0, 7.0, 1.0]]).unwrap();
        let (once, _) = zscore_normalize(&t).unwrap();
        let (twice, _) = zscore_normalize(&once).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn window_count_and_starts() {
        let t = TimeSeriesTable::from_values(Array2::zeros((2, 100))).unwrap();
        let w = make_windows(&t, 60, 10).unwrap();
        assert_eq!(w.window_starts, vec![0, 10, 20, 30, 40]);
        assert!(w.window_labels.iter().all(|&v| v == 0));
        assert_eq!(w.window(0).dim(), (2, 60));
    }

    #[test]
    fn window_labels_from_single_anomaly() {
        let mut labels = vec![0; 100];
        labels[65] = 1;
        let t = TimeSeriesTable::new(Array2::zeros((1, 100)), labels, vec!["a".into()]).unwrap();
        let w = make_windows(&t, 60, 10).unwrap();
        assert_eq!(w.window_labels, vec![0, 1, 1, 1, 1]);
    }

    #[test]
    fn oversized_window_gives_empty_batch() {
        let t = TimeSeriesTable::from_values(Array2::zeros((1, 10))).unwrap();
        let w = make_windows(&t, 11, 1).unwrap();
        assert!(w.is_empty());
        assert!(make_windows(&t, 0, 1).is_err());
        assert!(make_windows(&t, 5, 0).is_err());
    }

    #[test]
    fn split_lengths() {
        let t = TimeSeriesTable::from_values(Array2::zeros((1, 10))).unwrap();
        let (a, b, c) = split(&t, &SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (6, 2, 2));
        let (a, b, c) = split(&t, &SplitSpec { train_frac: 1.0, valid_frac: 0.0, test_frac: 0.0 }).unwrap();
        assert_eq!(a, t);
        assert!(b.is_empty() && c.is_empty());
        assert!(SplitSpec::new(0.6, 0.2, 0.3).is_err());
        assert!(SplitSpec::new(1.2, -0.2, 0.0).is_err());
    }

    fn table_strategy() -> impl Strategy<Value = TimeSeriesTable> {
        (1usize..4, 2usize..50).prop_flat_map(|(k, l)| {
            (
                proptest::collection::vec(-100.0f64..100.0, k * l),
                proptest::collection::vec(0u8..2, l),
            )
                .prop_map(move |(vals, labels)| {
                    let values = Array2::from_shape_vec((k, l), vals).unwrap();
                    let names = (0..k).map(|i| format!("e{i}")).collect();
                    TimeSeriesTable::new(values, labels, names).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn windows_match_brute_force(t in table_strategy(), m in 1usize..50, s in 1usize..20) {
            let w = make_windows(&t, m, s).unwrap();
            let l = t.len();
            let mut expected = Vec::new();
            let mut start = 0;
            while start + m <= l {
                let label = (start..start + m).any(|i| t.labels[i] == 1);
                expected.push((start, u8::from(label)));
                start += s;
            }
            let got: Vec<(usize, u8)> =
                w.window_starts.iter().copied().zip(w.window_labels.iter().copied()).collect();
            prop_assert_eq!(got, expected);
            for i in 0..w.len() {
                prop_assert!(w.window_starts[i] + m <= l);
            }
        }

        #[test]
        fn normalization_commutes_with_entity_permutation(t in table_strategy()) {
            let k = t.num_entities();
            let perm: Vec<usize> = (0..k).rev().collect();
            let permuted = TimeSeriesTable::new(
                t.values.select(Axis(0), &perm),
                t.labels.clone(),
                perm.iter().map(|&i| t.entity_names[i].clone()).collect(),
            ).unwrap();
            let (a, _) = zscore_normalize(&t).unwrap();
            let (b, _) = zscore_normalize(&permuted).unwrap();
            prop_assert_eq!(a.values.select(Axis(0), &perm), b.values);
            prop_assert_eq!(a.labels, t.labels);
        }

        #[test]
        fn normalized_rows_have_unit_population_std(t in table_strategy()) {
            let (n, stats) = zscore_normalize(&t).unwrap();
            for (k, row) in n.values.axis_iter(Axis(0)).enumerate() {
                if stats.constant_entities.contains(&k) { continue; }
                let l = row.len() as f64;
                let mu = row.sum() / l;
                let sd = (row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / l).sqrt();
                prop_assert!(mu.abs() < 1e-6);
                prop_assert!((sd - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn split_concatenation_reproduces_input(t in table_strategy(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let train = a;
            let valid = (1.0 - a) * b;
            let spec = SplitSpec { train_frac: train, valid_frac: valid, test_frac: 1.0 - train - valid };
            let (x, y, z) = split(&t, &spec).unwrap();
            let views = [x.values.view(), y.values.view(), z.values.view()];
            let joined = ndarray::concatenate(Axis(1), &views).unwrap();
            prop_assert_eq!(joined, t.values.clone());
            prop_assert_eq!([x.labels, y.labels, z.labels].concat(), t.labels.clone());
        }
    }
}
