//! Oversampling plans and methods: pool selection from a synthetic pool,
//! random oversampling, SMOTE, ADASYN, and assembly of the augmented set.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_csv_with, Dataset, GroupKey, GroupPartition, ImbalanceProfile};
use crate::error::{invalid, Error, Result};

/// Oversampling counts per group, augmentation size per group, and the
/// weight of augmented data in the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPlan<K: Ord> {
    pub m: BTreeMap<K, usize>,
    pub n_aug: usize,
    pub alpha: f64,
}

impl<K: Ord> AugmentationPlan<K> {
    pub fn m_total(&self) -> usize {
        self.m.values().sum()
    }
}

/// Top every group up to the largest one: `m_g = max n - n_g`.
pub fn plan_balancing<K: Ord + Clone>(
    profile: &ImbalanceProfile<K>,
    n_aug: usize,
    alpha: f64,
) -> Result<AugmentationPlan<K>> {
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("alpha = {alpha} outside [0, 1]"));
    }
    if profile.counts.values().any(|&c| c == 0) {
        return invalid("every group needs at least one sample");
    }
    let max = profile.max_count();
    Ok(AugmentationPlan {
        m: profile.counts.iter().map(|(g, &c)| (g.clone(), max - c)).collect(),
        n_aug,
        alpha,
    })
}

/// Generated samples with their group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPool {
    pub dataset: Dataset,
    pub group_of: Vec<GroupKey>,
    pub provenance: String,
}

/// Rows assigned to groups, remembering where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSet {
    pub dataset: Dataset,
    pub group_of: Vec<GroupKey>,
    /// Row index in the source pool, when drawn from one.
    pub source: Vec<usize>,
}

impl GroupedSet {
    pub fn empty(schema: &Dataset) -> Self {
        Self {
            dataset: schema.empty_like(),
            group_of: Vec::new(),
            source: Vec::new(),
        }
    }

    /// Every row of `ds` belongs to group `g`.
    pub fn single_group(ds: Dataset, g: GroupKey) -> Self {
        let n = ds.n_rows();
        Self {
            dataset: ds,
            group_of: vec![g; n],
            source: (0..n).collect(),
        }
    }

    pub fn extend(&mut self, other: &GroupedSet) -> Result<()> {
        self.dataset.extend(&other.dataset)?;
        self.group_of.extend_from_slice(&other.group_of);
        self.source.extend_from_slice(&other.source);
        Ok(())
    }

    pub fn count(&self, g: &GroupKey) -> usize {
        self.group_of.iter().filter(|k| *k == g).count()
    }
}

/// Draw disjoint oversampling and augmentation sets from the pool, uniformly
/// without replacement within each group.
pub fn pool_select<R: Rng + ?Sized>(
    pool: &SyntheticPool,
    plan: &AugmentationPlan<GroupKey>,
    rng: &mut R,
) -> Result<(GroupedSet, GroupedSet)> {
    if pool.group_of.len() != pool.dataset.n_rows() {
        return invalid("pool group labels do not match its rows");
    }
    let mut ovs_idx = Vec::new();
    let mut aug_idx = Vec::new();
    for (g, &m) in &plan.m {
        let members: Vec<usize> = (0..pool.group_of.len()).filter(|&i| pool.group_of[i] == *g).collect();
        let need = m + plan.n_aug;
        if members.len() < need {
            return Err(Error::InsufficientPool {
                group: g.to_string(),
                shortfall: need - members.len(),
            });
        }
        let picked = sample_indices(rng, members.len(), need).into_vec();
        ovs_idx.extend(picked[..m].iter().map(|&p| members[p]));
        aug_idx.extend(picked[m..].iter().map(|&p| members[p]));
    }
    let take = |idx: Vec<usize>| GroupedSet {
        dataset: pool.dataset.select(&idx),
        group_of: idx.iter().map(|&i| pool.group_of[i]).collect(),
        source: idx,
    };
    Ok((take(ovs_idx), take(aug_idx)))
}

/// Random oversampling: `m` rows drawn with replacement from the group.
pub fn ros<R: Rng + ?Sized>(ds: &Dataset, group: &[usize], m: usize, rng: &mut R) -> Result<Dataset> {
    if group.is_empty() {
        return invalid("cannot oversample an empty group");
    }
    let picks: Vec<usize> = (0..m).map(|_| group[rng.random_range(0..group.len())]).collect();
    Ok(ds.select(&picks))
}

/// Neighbor search options shared by SMOTE and ADASYN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborConfig {
    pub k: usize,
    /// Scale every feature by its standard deviation before measuring distance.
    pub standardize: bool,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        Self { k: 5, standardize: false }
    }
}

fn feature_scales(ds: &Dataset, rows: &[usize], standardize: bool) -> Vec<f64> {
    let d = ds.n_features();
    if !standardize || rows.len() < 2 {
        return vec![1.0; d];
    }
    (0..d)
        .map(|j| {
            let n = rows.len() as f64;
            let mean = rows.iter().map(|&i| ds.row(i)[j]).sum::<f64>() / n;
            let var = rows.iter().map(|&i| (ds.row(i)[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            if var > 0.0 {
                1.0 / var.sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

/// The `k` nearest candidates to row `q`, excluding `q`; ties go to the
/// lower index.
pub fn nearest_neighbors(ds: &Dataset, q: usize, candidates: &[usize], k: usize, scales: &[f64]) -> Vec<usize> {
    let x = ds.row(q);
    let mut dist: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|&&c| c != q)
        .map(|&c| {
            let d2 = ds
                .row(c)
                .iter()
                .zip(x)
                .zip(scales)
                .map(|((a, b), s)| ((a - b) * s).powi(2))
                .sum::<f64>();
            (d2, c)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dist.truncate(k);
    dist.into_iter().map(|(_, c)| c).collect()
}

fn interpolate<R: Rng + ?Sized>(out: &mut Dataset, ds: &Dataset, base: usize, nn: usize, rng: &mut R) -> Result<()> {
    let lambda: f64 = rng.random();
    let x = ds.row(base);
    let row: Vec<f64> = x.iter().zip(ds.row(nn)).map(|(a, b)| a + lambda * (b - a)).collect();
    out.push(&row, ds.label(base))
}

/// SMOTE: interpolate between a random group point and one of its `k`
/// nearest in-group neighbors.
pub fn smote<R: Rng + ?Sized>(
    ds: &Dataset,
    group: &[usize],
    m: usize,
    cfg: NeighborConfig,
    rng: &mut R,
) -> Result<Dataset> {
    if group.len() < 2 {
        return invalid(format!("smote needs at least 2 group points, got {}", group.len()));
    }
    if cfg.k < 1 || cfg.k >= group.len() {
        return invalid(format!("k = {} must lie in [1, {})", cfg.k, group.len()));
    }
    let scales = feature_scales(ds, group, cfg.standardize);
    let neighbors: Vec<Vec<usize>> = group
        .iter()
        .map(|&i| nearest_neighbors(ds, i, group, cfg.k, &scales))
        .collect();
    let mut out = ds.empty_like();
    for _ in 0..m {
        let b = rng.random_range(0..group.len());
        let nn = neighbors[b][rng.random_range(0..cfg.k)];
        interpolate(&mut out, ds, group[b], nn, rng)?;
    }
    Ok(out)
}

/// Split `m` proportionally to `r` with largest-remainder rounding; uniform
/// when all weights are zero. Remainder ties go to the lower index.
pub fn adasyn_allocation(r: &[f64], m: usize) -> Result<Vec<usize>> {
    if r.is_empty() {
        return invalid("no points to allocate to");
    }
    if r.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return invalid("hardness values must be finite and nonnegative");
    }
    let total: f64 = r.iter().sum();
    let shares: Vec<f64> = if total > 0.0 {
        r.iter().map(|&v| m as f64 * v / total).collect()
    } else {
        vec![m as f64 / r.len() as f64; r.len()]
    };
    let mut alloc: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(m.saturating_sub(assigned)) {
        alloc[i] += 1;
    }
    Ok(alloc)
}

/// Hardness of each group point: fraction of majority rows among its `k`
/// nearest neighbors in group ∪ majority.
pub fn adasyn_hardness(ds: &Dataset, group: &[usize], majority: &[usize], cfg: NeighborConfig) -> Vec<f64> {
    let all: Vec<usize> = group.iter().chain(majority).copied().collect();
    let scales = feature_scales(ds, &all, cfg.standardize);
    let is_major: std::collections::HashSet<usize> = majority.iter().copied().collect();
    group
        .iter()
        .map(|&i| {
            let nn = nearest_neighbors(ds, i, &all, cfg.k, &scales);
            nn.iter().filter(|c| is_major.contains(c)).count() as f64 / cfg.k as f64
        })
        .collect()
}

/// ADASYN: allocate more synthetic points to group points surrounded by the
/// majority, then interpolate toward in-group neighbors as in SMOTE.
pub fn adasyn<R: Rng + ?Sized>(
    ds: &Dataset,
    group: &[usize],
    majority: &[usize],
    m: usize,
    cfg: NeighborConfig,
    rng: &mut R,
) -> Result<Dataset> {
    if group.len() < 2 {
        return invalid(format!("adasyn needs at least 2 group points, got {}", group.len()));
    }
    if cfg.k < 1 {
        return invalid("k must be at least 1");
    }
    let hardness = adasyn_hardness(ds, group, majority, cfg);
    let alloc = adasyn_allocation(&hardness, m)?;
    let k_min = cfg.k.min(group.len() - 1);
    let scales = feature_scales(ds, group, cfg.standardize);
    let mut out = ds.empty_like();
    for (pos, &i) in group.iter().enumerate() {
        if alloc[pos] == 0 {
            continue;
        }
        let nn = nearest_neighbors(ds, i, group, k_min, &scales);
        for _ in 0..alloc[pos] {
            let j = nn[rng.random_range(0..nn.len())];
            interpolate(&mut out, ds, i, j, rng)?;
        }
    }
    Ok(out)
}

/// Where a row of the assembled dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Raw,
    Oversampled,
    Augmented,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Raw => "raw",
            Origin::Oversampled => "oversampled",
            Origin::Augmented => "augmented",
        })
    }
}

/// Raw, oversampled and augmented rows with their groups and origins.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedDataset {
    pub dataset: Dataset,
    pub group_of: Vec<GroupKey>,
    pub origin: Vec<Origin>,
    pub groups: Vec<GroupKey>,
}

impl TaggedDataset {
    pub fn count(&self, g: &GroupKey, o: Origin) -> usize {
        self.group_of
            .iter()
            .zip(&self.origin)
            .filter(|(k, oo)| *k == g && **oo == o)
            .count()
    }

    pub fn group_size(&self, g: &GroupKey) -> usize {
        self.group_of.iter().filter(|k| *k == g).count()
    }

    /// CSV with a trailing "origin" column.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let tags: Vec<String> = self.origin.iter().map(Origin::to_string).collect();
        write_csv_with(&self.dataset, w, Some(("origin", &tags)))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Stack raw rows, then the oversampled set, then the augmentation set, and
/// check per-group counts against the plan.
pub fn assemble(
    raw: &Dataset,
    partition: &GroupPartition,
    oversampled: &GroupedSet,
    augmented: &GroupedSet,
    plan: &AugmentationPlan<GroupKey>,
) -> Result<TaggedDataset> {
    for (name, set) in [("oversampled", oversampled), ("augmented", augmented)] {
        if set.dataset.n_features() != raw.n_features() {
            return invalid(format!(
                "{name} rows have width {}, raw rows have width {}",
                set.dataset.n_features(),
                raw.n_features()
            ));
        }
        if set.group_of.len() != set.dataset.n_rows() {
            return invalid(format!("{name} group labels do not match its rows"));
        }
    }
    if partition.group_of.len() != raw.n_rows() {
        return invalid("partition does not match raw rows");
    }
    for g in &partition.groups {
        let want_m = plan.m.get(g).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("plan has no entry for group {g}"))
        })?;
        if oversampled.count(g) != want_m {
            return invalid(format!(
                "group {g}: {} oversampled rows, plan says {want_m}",
                oversampled.count(g)
            ));
        }
        if augmented.count(g) != plan.n_aug {
            return invalid(format!(
                "group {g}: {} augmented rows, plan says {}",
                augmented.count(g),
                plan.n_aug
            ));
        }
    }
    let mut dataset = raw.clone();
    let mut group_of = partition.group_of.clone();
    let mut origin = vec![Origin::Raw; raw.n_rows()];
    for (set, tag) in [(oversampled, Origin::Oversampled), (augmented, Origin::Augmented)] {
        append_rows(&mut dataset, &set.dataset)?;
        group_of.extend_from_slice(&set.group_of);
        origin.extend(std::iter::repeat_n(tag, set.dataset.n_rows()));
    }
    Ok(TaggedDataset {
        dataset,
        group_of,
        origin,
        groups: partition.groups.clone(),
    })
}

// Synthetic rows may carry a different label column name; only widths must agree.
fn append_rows(dst: &mut Dataset, src: &Dataset) -> Result<()> {
    for i in 0..src.n_rows() {
        dst.push(src.row(i), src.label(i))?;
    }
    Ok(())
}
