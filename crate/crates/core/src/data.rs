//! Dataset loading and feature binning.
//!
//! Two on-disk formats are understood:
//!
//! * CSV: label in the first column, numeric features after it, optionally
//!   preceded by a single header line.
//! * LIBSVM: `<label> <index>:<value> ...` with 1-based feature indices.
//!   Absent entries are densified to `0.0`.
//!
//! Labels are arbitrary integers on disk and are remapped to `0..K` by the
//! sorted order of the distinct values observed.
//!
//! Real-valued features are turned into small integer bins by [`fit_bins`],
//! which the tree builder scans as histograms. A [`BinMap`] stores inclusive
//! upper bin edges; a value maps to the first edge that is `>=` it, and
//! anything above the last edge lands in the last bin.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_BINS: usize = 256;

/// Largest supported bin count per feature; bin ids are stored as `u16`.
pub const MAX_SUPPORTED_BINS: usize = u16::MAX as usize + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Libsvm,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "libsvm" | "svm" => Ok(Format::Libsvm),
            other => Err(Error::Config(format!("unknown data format `{other}`"))),
        }
    }
}

impl Format {
    /// Guess the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("svm") | Some("libsvm") => Format::Libsvm,
            _ => Format::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Skip the first line of a CSV file.
    pub skip_header: bool,
    /// Accept a file with no samples instead of failing.
    pub allow_empty: bool,
}

/// Dense labeled samples as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    n_features: usize,
    /// Row-major, `n_samples * n_features`.
    features: Vec<f64>,
    raw_labels: Vec<i64>,
    /// Distinct raw labels, ascending. Position is the class id.
    classes: Vec<i64>,
    labels: Vec<u32>,
}

impl RawDataset {
    /// Build a dataset from row-major features and raw integer labels.
    pub fn from_rows(features: Vec<f64>, n_features: usize, raw_labels: Vec<i64>) -> Result<Self> {
        if features.len() != raw_labels.len() * n_features {
            return Err(Error::FeatureMismatch {
                expected: raw_labels.len() * n_features,
                found: features.len(),
            });
        }
        let features = features
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v + 0.0 })
            .collect();
        let mut classes = raw_labels.clone();
        classes.sort_unstable();
        classes.dedup();
        let labels = map_labels(&raw_labels, &classes)?;
        Ok(RawDataset {
            n_features,
            features,
            raw_labels,
            classes,
            labels,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.raw_labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Class ids in `0..K`.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn raw_labels(&self) -> &[i64] {
        &self.raw_labels
    }

    /// Observed raw label values; index `k` holds the value for class `k`.
    pub fn classes(&self) -> &[i64] {
        &self.classes
    }

    /// Map this dataset's raw labels through another class list, e.g. the
    /// one recorded when a model was trained.
    pub fn labels_for(&self, classes: &[i64]) -> Result<Vec<u32>> {
        map_labels(&self.raw_labels, classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }
}

fn map_labels(raw: &[i64], classes: &[i64]) -> Result<Vec<u32>> {
    raw.iter()
        .map(|y| {
            classes
                .binary_search(y)
                .map(|k| k as u32)
                .map_err(|_| Error::UnknownLabel(*y))
        })
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>, format: Format, options: LoadOptions) -> Result<RawDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), format, options).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_dataset<R: BufRead>(reader: R, format: Format, options: LoadOptions) -> Result<RawDataset> {
    let mut labels = Vec::new();
    let mut features = Vec::new();
    let n_features = match format {
        Format::Csv => read_csv(reader, options.skip_header, &mut labels, &mut features)?,
        Format::Libsvm => read_libsvm(reader, &mut labels, &mut features)?,
    };
    if labels.is_empty() && !options.allow_empty {
        return Err(Error::EmptyDataset);
    }
    RawDataset::from_rows(features, n_features, labels)
}

fn parse_label(field: &str, line: usize) -> Result<i64> {
    let field = field.trim();
    if let Ok(v) = field.parse::<i64>() {
        return Ok(v);
    }
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(v as i64),
        Ok(_) => Err(Error::parse(line, format!("label `{field}` is not an integer"))),
        Err(_) => Err(Error::parse(line, format!("non-numeric label `{field}`"))),
    }
}

fn parse_value(field: &str, line: usize) -> Result<f64> {
    let field = field.trim();
    if field.is_empty() || field == "?" || field.eq_ignore_ascii_case("na") {
        return Ok(0.0);
    }
    field
        .parse::<f64>()
        .map_err(|_| Error::parse(line, format!("invalid feature value `{field}`")))
}

fn read_csv<R: BufRead>(
    reader: R,
    skip_header: bool,
    labels: &mut Vec<i64>,
    features: &mut Vec<f64>,
) -> Result<usize> {
    let mut width: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if idx == 0 && skip_header {
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = parse_label(fields.next().unwrap_or(""), lineno)?;
        let start = features.len();
        for field in fields {
            features.push(parse_value(field, lineno)?);
        }
        let n = features.len() - start;
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(Error::parse(
                    lineno,
                    format!("expected {w} features, found {n}"),
                ))
            }
            _ => {}
        }
        labels.push(label);
    }
    Ok(width.unwrap_or(0))
}

fn read_libsvm<R: BufRead>(reader: R, labels: &mut Vec<i64>, features: &mut Vec<f64>) -> Result<usize> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut n_features = 0;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_ascii_whitespace();
        let label = parse_label(tokens.next().unwrap_or(""), lineno)?;
        let mut entries = Vec::new();
        for token in tokens {
            let (i, v) = token
                .split_once(':')
                .ok_or_else(|| Error::parse(lineno, format!("expected `index:value`, found `{token}`")))?;
            let i: usize = i
                .parse()
                .map_err(|_| Error::parse(lineno, format!("invalid feature index `{i}`")))?;
            if i == 0 {
                return Err(Error::parse(lineno, "feature indices are 1-based"));
            }
            let v = parse_value(v, lineno)?;
            n_features = n_features.max(i);
            entries.push((i - 1, v));
        }
        labels.push(label);
        rows.push(entries);
    }
    features.reserve(rows.len() * n_features);
    for entries in rows {
        let start = features.len();
        features.resize(start + n_features, 0.0);
        for (i, v) in entries {
            features[start + i] = v;
        }
    }
    Ok(n_features)
}

/// Per-feature inclusive upper bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMap {
    pub max_bins: usize,
    pub boundaries: Vec<Vec<f64>>,
}

impl BinMap {
    pub fn n_features(&self) -> usize {
        self.boundaries.len()
    }

    pub fn n_bins(&self, feature: usize) -> usize {
        self.boundaries[feature].len().max(1)
    }

    /// Bin id for a raw value of `feature`.
    #[inline]
    pub fn bin_value(&self, feature: usize, value: f64) -> u16 {
        let edges = &self.boundaries[feature];
        let value = if value.is_nan() { 0.0 } else { value };
        let idx = edges.partition_point(|&edge| edge < value);
        idx.min(edges.len().saturating_sub(1)) as u16
    }

    /// Bin a row-major block of rows.
    pub fn bin_rows(&self, features: &[f64], n_features: usize) -> Result<Vec<u16>> {
        if n_features != self.n_features() {
            return Err(Error::FeatureMismatch {
                expected: self.n_features(),
                found: n_features,
            });
        }
        if n_features == 0 {
            return Ok(Vec::new());
        }
        Ok(features
            .chunks_exact(n_features)
            .flat_map(|row| row.iter().enumerate().map(|(f, &v)| self.bin_value(f, v)))
            .collect())
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for (f, edges) in self.boundaries.iter().enumerate() {
            if edges.is_empty() || edges.len() > MAX_SUPPORTED_BINS {
                return Err(Error::Model(format!("feature {f} has {} bin edges", edges.len())));
            }
            if edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
                return Err(Error::Model(format!("bin edges of feature {f} are not increasing")));
            }
        }
        Ok(())
    }
}

/// Fit equal-frequency bins per feature.
///
/// A feature with at most `max_bins` distinct values gets one bin per value.
/// Otherwise edges are placed at the distinct values whose cumulative sample
/// count lies closest to each `j * n / max_bins` rank target.
pub fn fit_bins(data: &RawDataset, max_bins: usize) -> Result<BinMap> {
    if !(2..=MAX_SUPPORTED_BINS).contains(&max_bins) {
        return Err(Error::Config(format!(
            "max_bins must be in 2..={MAX_SUPPORTED_BINS}, got {max_bins}"
        )));
    }
    if data.n_samples() == 0 {
        return Err(Error::EmptyDataset);
    }
    let n_features = data.n_features();
    let boundaries = (0..n_features)
        .into_par_iter()
        .map(|f| {
            let column: Vec<f64> = (0..data.n_samples()).map(|i| data.features[i * n_features + f]).collect();
            feature_edges(column, max_bins)
        })
        .collect();
    Ok(BinMap { max_bins, boundaries })
}

fn feature_edges(mut column: Vec<f64>, max_bins: usize) -> Vec<f64> {
    column.sort_unstable_by(f64::total_cmp);
    let mut distinct: Vec<f64> = Vec::new();
    // cumulative[j] = number of samples <= distinct[j]
    let mut cumulative: Vec<usize> = Vec::new();
    for (i, &v) in column.iter().enumerate() {
        if distinct.last() == Some(&v) {
            *cumulative.last_mut().unwrap() = i + 1;
        } else {
            distinct.push(v);
            cumulative.push(i + 1);
        }
    }
    if distinct.len() <= max_bins {
        return distinct;
    }

    let n = column.len() as f64;
    let mut edges: Vec<f64> = Vec::with_capacity(max_bins);
    for j in 1..max_bins {
        let target = j as f64 * n / max_bins as f64;
        let hi = cumulative.partition_point(|&c| (c as f64) < target);
        let pick = if hi == 0 {
            0
        } else if hi >= cumulative.len() {
            cumulative.len() - 1
        } else if target - cumulative[hi - 1] as f64 <= cumulative[hi] as f64 - target {
            hi - 1
        } else {
            hi
        };
        let edge = distinct[pick];
        if edges.last().is_none_or(|&last| edge > last) {
            edges.push(edge);
        }
    }
    let max = *distinct.last().unwrap();
    if edges.last().is_none_or(|&last| max > last) {
        edges.push(max);
    }
    edges
}

/// Samples with integer-binned features and class ids in `0..K`.
#[derive(Debug, Clone)]
pub struct BinnedDataset {
    n_features: usize,
    /// Row-major, `n_samples * n_features`.
    bins: Vec<u16>,
    n_bins: Vec<usize>,
    labels: Vec<u32>,
    num_classes: usize,
}

impl BinnedDataset {
    pub fn new(
        bins: Vec<u16>,
        n_features: usize,
        n_bins: Vec<usize>,
        labels: Vec<u32>,
        num_classes: usize,
    ) -> Result<Self> {
        if n_bins.len() != n_features || bins.len() != labels.len() * n_features {
            return Err(Error::FeatureMismatch {
                expected: labels.len() * n_features,
                found: bins.len(),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::Config(format!("label {y} outside 0..{num_classes}")));
        }
        if n_features > 0 {
            for row in bins.chunks_exact(n_features) {
                for (f, &b) in row.iter().enumerate() {
                    if b as usize >= n_bins[f] {
                        return Err(Error::Config(format!(
                            "bin {b} of feature {f} exceeds its bin count {}",
                            n_bins[f]
                        )));
                    }
                }
            }
        }
        Ok(BinnedDataset {
            n_features,
            bins,
            n_bins,
            labels,
            num_classes,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn n_bins(&self) -> &[usize] {
        &self.n_bins
    }

    pub fn bins(&self) -> &[u16] {
        &self.bins
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u16] {
        &self.bins[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }
}

/// Bin a dataset with its own label mapping.
pub fn apply_bins(data: &RawDataset, bins: &BinMap) -> Result<BinnedDataset> {
    let binned = bins.bin_rows(data.features(), data.n_features())?;
    let n_bins = (0..bins.n_features()).map(|f| bins.n_bins(f)).collect();
    BinnedDataset::new(
        binned,
        data.n_features(),
        n_bins,
        data.labels().to_vec(),
        data.num_classes(),
    )
}

/// Bin a dataset whose labels must be interpreted through `classes`, the
/// class list of the training data.
pub fn apply_bins_with_classes(data: &RawDataset, bins: &BinMap, classes: &[i64]) -> Result<BinnedDataset> {
    let labels = data.labels_for(classes)?;
    let binned = bins.bin_rows(data.features(), data.n_features())?;
    let n_bins = (0..bins.n_features()).map(|f| bins.n_bins(f)).collect();
    BinnedDataset::new(binned, data.n_features(), n_bins, labels, classes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> RawDataset {
        let labels = (0..values.len()).map(|i| (i % 2) as i64).collect();
        RawDataset::from_rows(values.to_vec(), 1, labels).unwrap()
    }

    fn csv(text: &str) -> Result<RawDataset> {
        read_dataset(text.as_bytes(), Format::Csv, LoadOptions::default())
    }

    #[test]
    fn csv_remaps_labels_by_sorted_value() {
        let data = csv("7,1.0,2.0\n-3,0.5,0.25\n7,3,4\n12,0,0\n").unwrap();
        assert_eq!(data.n_samples(), 4);
        assert_eq!(data.n_features(), 2);
        assert_eq!(data.classes(), &[-3, 7, 12]);
        assert_eq!(data.labels(), &[1, 0, 1, 2]);
        assert_eq!(data.row(1), &[0.5, 0.25]);
    }

    #[test]
    fn single_row_csv_is_accepted() {
        let data = csv("1,0.5,2.0").unwrap();
        assert_eq!(data.n_samples(), 1);
        assert_eq!(data.n_features(), 2);
        assert_eq!(data.num_classes(), 1);
    }

    #[test]
    fn csv_header_and_missing_values() {
        let opts = LoadOptions {
            skip_header: true,
            ..Default::default()
        };
        let data = read_dataset("y,a,b\n0,,?\n1,NA,2\n".as_bytes(), Format::Csv, opts).unwrap();
        assert_eq!(data.features(), &[0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        match csv("0,1,2\n1,3\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match csv("0,1\nabc,2\n") {
            Err(Error::Parse { line: 2, message }) => assert!(message.contains("non-numeric")),
            other => panic!("unexpected {other:?}"),
        }
        match csv("0,1\n1,x\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input() {
        assert!(matches!(csv(""), Err(Error::EmptyDataset)));
        let opts = LoadOptions {
            allow_empty: true,
            ..Default::default()
        };
        let data = read_dataset("\n".as_bytes(), Format::Libsvm, opts).unwrap();
        assert_eq!(data.n_samples(), 0);
    }

    #[test]
    fn libsvm_densifies_with_zeros() {
        let text = "2 1:0.5 3:1.5\n+1 2:-1 # comment\n";
        let data = read_dataset(text.as_bytes(), Format::Libsvm, LoadOptions::default()).unwrap();
        assert_eq!(data.n_features(), 3);
        assert_eq!(data.features(), &[0.5, 0.0, 1.5, 0.0, -1.0, 0.0]);
        assert_eq!(data.labels(), &[1, 0]);
        let bad = read_dataset("1 0:3\n".as_bytes(), Format::Libsvm, LoadOptions::default());
        assert!(matches!(bad, Err(Error::Parse { line: 1, .. })));
        let bad = read_dataset("1 2\n".as_bytes(), Format::Libsvm, LoadOptions::default());
        assert!(matches!(bad, Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn labels_for_rejects_unseen_labels() {
        let data = csv("5,1\n9,2\n").unwrap();
        assert_eq!(data.labels_for(&[1, 5, 9]).unwrap(), vec![1, 2]);
        assert!(matches!(data.labels_for(&[5]), Err(Error::UnknownLabel(9))));
    }

    #[test]
    fn distinct_values_get_their_own_bins() {
        let data = column(&[3.2, 3.2, 7.5, 10.0]);
        let map = fit_bins(&data, 256).unwrap();
        assert_eq!(map.n_bins(0), 3);
        let binned = apply_bins(&data, &map).unwrap();
        assert_eq!(binned.bins(), &[0, 0, 1, 2]);
    }

    #[test]
    fn constant_feature_has_one_bin() {
        let data = column(&[5.0, 5.0, 5.0]);
        let map = fit_bins(&data, 256).unwrap();
        assert_eq!(map.n_bins(0), 1);
        assert_eq!(apply_bins(&data, &map).unwrap().bins(), &[0, 0, 0]);
    }

    #[test]
    fn equal_frequency_bins() {
        // Deterministic shuffle of 1000 distinct values.
        let values: Vec<f64> = (0..1000).map(|i| ((i * 617) % 1000) as f64 / 7.0).collect();
        let data = column(&values);
        let map = fit_bins(&data, 10).unwrap();
        assert_eq!(map.n_bins(0), 10);
        let binned = apply_bins(&data, &map).unwrap();
        let mut counts = [0usize; 10];
        for &b in binned.bins() {
            counts[b as usize] += 1;
        }
        for c in counts {
            assert!((99..=101).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn test_values_clamp_to_the_outer_bins() {
        let data = column(&[1.0, 2.0, 3.0]);
        let map = fit_bins(&data, 256).unwrap();
        assert_eq!(map.bin_value(0, -100.0), 0);
        assert_eq!(map.bin_value(0, 100.0), 2);
        // boundary is an inclusive upper edge
        assert_eq!(map.bin_value(0, 2.0), 1);
        assert_eq!(map.bin_value(0, 2.5), 2);
    }

    #[test]
    fn rebinning_training_data_is_idempotent() {
        let values: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64 * 0.3).collect();
        let data = column(&values);
        let map = fit_bins(&data, 16).unwrap();
        let first = apply_bins(&data, &map).unwrap();
        let again = map.bin_rows(data.features(), 1).unwrap();
        assert_eq!(first.bins(), again.as_slice());
    }

    #[test]
    fn apply_bins_checks_feature_count() {
        let data = column(&[1.0, 2.0]);
        let map = fit_bins(&data, 4).unwrap();
        let wide = RawDataset::from_rows(vec![1.0, 2.0], 2, vec![0]).unwrap();
        assert!(matches!(apply_bins(&wide, &map), Err(Error::FeatureMismatch { .. })));
    }

    #[test]
    fn max_bins_must_be_at_least_two() {
        let data = column(&[1.0, 2.0]);
        assert!(matches!(fit_bins(&data, 1), Err(Error::Config(_))));
    }
}
