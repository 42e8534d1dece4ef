//! Sample containers, group bookkeeping, the Craft simulated dataset, CSV
//! ingestion and GReaT-style text records.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Rows of real features with a binary label.
///
/// Features are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    feature_names: Vec<String>,
    label_name: String,
    features: Vec<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        label_name: impl Into<String>,
        rows: Vec<Vec<f64>>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let d = feature_names.len();
        let mut features = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return invalid(format!("row {i} has {} values, expected {d}", row.len()));
            }
            features.extend_from_slice(row);
        }
        Self::from_flat(feature_names, label_name, features, labels)
    }

    /// Build from a row-major feature buffer.
    pub fn from_flat(
        feature_names: Vec<String>,
        label_name: impl Into<String>,
        features: Vec<f64>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let label_name = label_name.into();
        let d = feature_names.len();
        if d == 0 {
            return invalid("dataset needs at least one feature");
        }
        if features.len() != d * labels.len() {
            return invalid(format!(
                "{} feature values do not fill {} rows of width {d}",
                features.len(),
                labels.len()
            ));
        }
        let mut seen = BTreeSet::new();
        for name in feature_names.iter().chain(std::iter::once(&label_name)) {
            if !seen.insert(name.as_str()) {
                return invalid(format!("duplicate column name {name:?}"));
            }
        }
        if let Some(y) = labels.iter().find(|&&y| y > 1) {
            return invalid(format!("label {y} is not binary"));
        }
        Ok(Self {
            feature_names,
            label_name,
            features,
            labels,
        })
    }

    /// An empty dataset with the same schema.
    pub fn empty_like(&self) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            label_name: self.label_name.clone(),
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn label_name(&self) -> &str {
        &self.label_name
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.n_features())
    }

    pub fn flat_features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn push(&mut self, row: &[f64], label: u8) -> Result<()> {
        if row.len() != self.n_features() {
            return invalid(format!(
                "row of width {} pushed into dataset of width {}",
                row.len(),
                self.n_features()
            ));
        }
        if label > 1 {
            return invalid(format!("label {label} is not binary"));
        }
        self.features.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    /// Rows at `indices`, in order, repeats allowed.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = self.empty_like();
        for &i in indices {
            out.features.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Append all rows of `other`; schemas must match.
    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.feature_names != self.feature_names || other.label_name != self.label_name {
            return invalid("cannot concatenate datasets with different schemas");
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }
}

/// The Craft simulated dataset: nine features and a median-thresholded label.
///
/// For even `n` exactly half the labels are 1.
pub fn make_craft(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return invalid(format!("craft needs n >= 2, got {n}"));
    }
    let mut rng = crate::rng::stream(seed, &[0xC8AF7]);
    let mut features = Vec::with_capacity(9 * n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let mut g = || -> f64 { rng.sample(StandardNormal) };
        let x1 = g();
        let x2 = g();
        let e3 = g();
        let e4 = g();
        let e5 = g();
        let x7 = g();
        let eps = g();
        let x6 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let x3 = 0.5 * x1 + 0.3 * x2 + 0.5 * e3;
        let x4 = x1 * e4;
        let x5 = 0.5 * x3 + e5;
        let x8 = x2 * x3;
        let x9 = x1 * x2;
        features.extend_from_slice(&[x1, x2, x3, x4, x5, x6, x7, x8, x9]);
        z.push(1.5 + 0.7 * x1 - 0.6 * x2 + 0.8 * x3 + 0.4 * x9 + eps);
    }
    let mut sorted = z.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(n - 1) / 2];
    let labels = z.iter().map(|&v| u8::from(v > median)).collect();
    let names = (1..=9).map(|i| format!("X{i}")).collect();
    Dataset::from_flat(names, "Y", features, labels)
}

/// Identifies a group: the label, optionally paired with a spurious value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroupKey {
    pub label: u8,
    pub spurious: Option<f64>,
}

impl GroupKey {
    pub fn label(label: u8) -> Self {
        Self {
            label,
            spurious: None,
        }
    }

    pub fn with_spurious(label: u8, value: f64) -> Self {
        Self {
            label,
            spurious: Some(value),
        }
    }

    fn spurious_bits(&self) -> Option<u64> {
        // -0.0 and 0.0 are the same group
        self.spurious.map(|v| if v == 0.0 { 0 } else { v.to_bits() })
    }
}

impl PartialEq for GroupKey {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label && self.spurious_bits() == other.spurious_bits()
    }
}

impl Eq for GroupKey {}

impl std::hash::Hash for GroupKey {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.label.hash(state);
        self.spurious_bits().hash(state);
    }
}

impl Ord for GroupKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.label.cmp(&other.label).then_with(|| match (self.spurious, other.spurious) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(a), Some(b)) => (a + 0.0).total_cmp(&(b + 0.0)),
        })
    }
}

impl PartialOrd for GroupKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.spurious {
            None => write!(f, "{}", self.label),
            Some(s) => write!(f, "({},{})", self.label, s),
        }
    }
}

/// A binary spurious feature used to split each class in two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousSpec {
    pub feature_name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroupMode {
    ByLabel,
    ByLabelAndSpurious(SpuriousSpec),
}

/// Assignment of every sample to one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    pub group_of: Vec<GroupKey>,
    pub groups: Vec<GroupKey>,
}

impl GroupPartition {
    pub fn indices(&self, g: &GroupKey) -> Vec<usize> {
        self.group_of
            .iter()
            .enumerate()
            .filter(|(_, k)| *k == g)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn counts(&self) -> BTreeMap<GroupKey, usize> {
        let mut counts: BTreeMap<GroupKey, usize> = self.groups.iter().map(|g| (*g, 0)).collect();
        for g in &self.group_of {
            *counts.entry(*g).or_default() += 1;
        }
        counts
    }

    /// Sub-partition for the rows at `indices`, keeping the group set.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            group_of: indices.iter().map(|&i| self.group_of[i]).collect(),
            groups: self.groups.clone(),
        }
    }
}

/// Split samples by label, or by (label, spurious value).
///
/// In spurious mode the feature must take exactly two values and all four
/// groups must be non-empty.
pub fn partition_groups(ds: &Dataset, mode: &GroupMode) -> Result<GroupPartition> {
    let group_of: Vec<GroupKey> = match mode {
        GroupMode::ByLabel => ds.labels().iter().map(|&y| GroupKey::label(y)).collect(),
        GroupMode::ByLabelAndSpurious(spec) => {
            let j = ds.feature_index(&spec.feature_name).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown spurious feature {:?}", spec.feature_name))
            })?;
            let values = ds.column(j);
            let mut distinct: Vec<f64> = Vec::new();
            for &v in &values {
                if !v.is_finite() {
                    return invalid(format!("spurious feature {:?} has a non-finite value", spec.feature_name));
                }
                if !distinct.iter().any(|&u| u == v) {
                    distinct.push(v);
                }
            }
            if distinct.len() > 2 {
                return invalid(format!(
                    "spurious feature {:?} takes {} distinct values, expected 2",
                    spec.feature_name,
                    distinct.len()
                ));
            }
            values
                .iter()
                .zip(ds.labels())
                .map(|(&v, &y)| GroupKey::with_spurious(y, v + 0.0))
                .collect()
        }
    };
    let groups: Vec<GroupKey> = match mode {
        GroupMode::ByLabel => vec![GroupKey::label(0), GroupKey::label(1)],
        GroupMode::ByLabelAndSpurious(_) => {
            let mut values: Vec<f64> = group_of.iter().filter_map(|g| g.spurious).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            let mut gs = Vec::new();
            for y in 0..=1u8 {
                for &v in &values {
                    gs.push(GroupKey::with_spurious(y, v));
                }
            }
            if values.len() < 2 {
                return invalid("spurious feature takes a single value, so two groups are empty");
            }
            gs
        }
    };
    let part = GroupPartition { group_of, groups };
    for (g, c) in part.counts() {
        if c == 0 {
            return invalid(format!("group {g} is empty"));
        }
    }
    Ok(part)
}

/// Group counts and imbalance ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceProfile<K: Ord> {
    pub counts: BTreeMap<K, usize>,
    pub rho: BTreeMap<K, f64>,
    pub rho_avg: f64,
}

impl<K: Ord> ImbalanceProfile<K> {
    pub fn max_count(&self) -> usize {
        self.counts.values().copied().max().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// `rho_g = (max n - n_g) / max n` and their mean.
pub fn imbalance_profile<K: Ord + Clone + fmt::Display>(
    counts: &BTreeMap<K, usize>,
) -> Result<ImbalanceProfile<K>> {
    if counts.is_empty() {
        return invalid("no groups");
    }
    if let Some((g, _)) = counts.iter().find(|(_, &c)| c == 0) {
        return invalid(format!("group {g} has zero samples"));
    }
    let max = *counts.values().max().expect("non-empty") as f64;
    let rho: BTreeMap<K, f64> = counts
        .iter()
        .map(|(g, &c)| (g.clone(), (max - c as f64) / max))
        .collect();
    let rho_avg = rho.values().sum::<f64>() / rho.len() as f64;
    Ok(ImbalanceProfile {
        counts: counts.clone(),
        rho,
        rho_avg,
    })
}

const GREAT_FIELD_SEP: &str = ", ";
const GREAT_KV_SEP: &str = " is ";

fn check_great_name(name: &str) -> Result<()> {
    if name.contains(',') || name.contains(GREAT_KV_SEP) || name.is_empty() {
        return invalid(format!("name {name:?} cannot be used in a text record"));
    }
    Ok(())
}

/// One "f is v, ..." record per row, label last.
///
/// Values use Rust's shortest round-trip decimal rendering.
pub fn serialize_great(ds: &Dataset) -> Result<Vec<String>> {
    for name in ds.feature_names() {
        check_great_name(name)?;
    }
    check_great_name(ds.label_name())?;
    Ok((0..ds.n_rows())
        .map(|i| {
            let mut fields: Vec<String> = ds
                .feature_names()
                .iter()
                .zip(ds.row(i))
                .map(|(f, v)| format!("{f}{GREAT_KV_SEP}{v}"))
                .collect();
            fields.push(format!("{}{GREAT_KV_SEP}{}", ds.label_name(), ds.label(i)));
            fields.join(GREAT_FIELD_SEP)
        })
        .collect())
}

/// Parse records produced by [`serialize_great`].
///
/// The feature order is taken from the first record; later records may list
/// fields in any order but must carry the same set.
pub fn deserialize_great<S: AsRef<str>>(records: &[S], label_name: &str) -> Result<Dataset> {
    let mut names: Option<Vec<String>> = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        let fields = parse_fields(rec.as_ref(), ri)?;
        let schema = names.get_or_insert_with(|| {
            fields
                .iter()
                .map(|(k, _)| k.to_string())
                .filter(|k| k != label_name)
                .collect()
        });
        let index: HashMap<&str, usize> = schema.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut row = vec![None; schema.len()];
        let mut label = None;
        for (ti, (key, value)) in fields.iter().enumerate() {
            let token = ti + 1;
            let err = |reason: String| Error::Parse {
                record: ri,
                token,
                reason,
            };
            if *key == label_name {
                let y = match *value {
                    "0" => 0,
                    "1" => 1,
                    other => return Err(err(format!("label value {other:?} is not 0 or 1"))),
                };
                if label.replace(y).is_some() {
                    return Err(err("label given twice".into()));
                }
                continue;
            }
            let j = *index
                .get(key)
                .ok_or_else(|| err(format!("unknown feature {key:?}")))?;
            let v: f64 = value
                .parse()
                .map_err(|_| err(format!("value {value:?} is not a number")))?;
            if row[j].replace(v).is_some() {
                return Err(err(format!("feature {key:?} given twice")));
            }
        }
        let missing = |what: &str| Error::Parse {
            record: ri,
            token: fields.len() + 1,
            reason: format!("missing field {what:?}"),
        };
        for (j, v) in row.iter().enumerate() {
            features.push(v.ok_or_else(|| missing(&schema[j]))?);
        }
        labels.push(label.ok_or_else(|| missing(label_name))?);
    }
    let names = names.ok_or_else(|| Error::InvalidArgument("no records".into()))?;
    Dataset::from_flat(names, label_name, features, labels)
}

fn parse_fields(rec: &str, record: usize) -> Result<Vec<(&str, &str)>> {
    rec.split(GREAT_FIELD_SEP)
        .enumerate()
        .map(|(ti, field)| {
            field.split_once(GREAT_KV_SEP).ok_or_else(|| Error::Parse {
                record,
                token: ti + 1,
                reason: format!("field {field:?} lacks \"{}\"", GREAT_KV_SEP.trim()),
            })
        })
        .collect()
}

/// Read a headed CSV; every column other than `label_column` is a feature.
pub fn read_csv<R: Read>(reader: R, label_column: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(0, "", e))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Csv {
            row: 0,
            column: label_column.into(),
            reason: "label column missing from header".into(),
        })?;
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (ri, rec) in rdr.records().enumerate() {
        let row = ri + 1;
        let rec = rec.map_err(|e| csv_err(row, "", e))?;
        if rec.len() != header.len() {
            return Err(Error::Csv {
                row,
                column: String::new(),
                reason: format!("{} cells, header has {}", rec.len(), header.len()),
            });
        }
        for (ci, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if ci == label_idx {
                let y = match cell.parse::<f64>() {
                    Ok(v) if v == 0.0 => 0,
                    Ok(v) if v == 1.0 => 1,
                    _ => {
                        return Err(Error::Csv {
                            row,
                            column: header[ci].clone(),
                            reason: format!("label {cell:?} is not 0 or 1"),
                        })
                    }
                };
                labels.push(y);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Csv {
                    row,
                    column: header[ci].clone(),
                    reason: format!("{cell:?} is not numeric"),
                })?;
                features.push(v);
            }
        }
    }
    Dataset::from_flat(names, label_column, features, labels)
}

fn csv_err(row: usize, column: &str, e: csv::Error) -> Error {
    Error::Csv {
        row,
        column: column.into(),
        reason: e.to_string(),
    }
}

/// Write features then the label column. Floats round-trip exactly.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    write_csv_with(ds, writer, None)
}

/// Like [`write_csv`] with an optional trailing text column.
pub(crate) fn write_csv_with<W: Write>(
    ds: &Dataset,
    writer: W,
    extra: Option<(&str, &[String])>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = ds.feature_names().iter().map(String::as_str).collect();
    header.push(ds.label_name());
    if let Some((name, _)) = extra {
        header.push(name);
    }
    w.write_record(&header).map_err(|e| csv_err(0, "", e))?;
    for i in 0..ds.n_rows() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.label(i).to_string());
        if let Some((_, col)) = extra {
            rec.push(col[i].clone());
        }
        w.write_record(&rec).map_err(|e| csv_err(i + 1, "", e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?, label_column)
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(ds, std::io::BufWriter::new(std::fs::File::create(path)?))
}
