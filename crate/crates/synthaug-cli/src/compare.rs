//! Oversampling comparison: for each imbalance ratio, method and seed,
//! balance the training split, fit a logistic model on the combined
//! objective and score it on a held-out split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use synthaug::balance::{
    adasyn, assemble, plan_balancing, pool_select, ros, smote, AugmentationPlan, GroupedSet, NeighborConfig,
    SyntheticPool,
};
use synthaug::data::{imbalance_profile, make_craft, partition_groups, Dataset, GroupKey, GroupMode};
use synthaug::dgp::{sample_world_filtered, BoundDomain, LatentWorld, PairSampler, WorldConfig};
use synthaug::risk::{combined_weights, evaluate, fit_logistic, FitConfig, FitStatus, LossKind, Objective};
use synthaug::rng::{derive_seed, stream, Rng};
use synthaug::tfgen::{build_generator, default_omega, encode_tokens, generated_distribution, TransformerStack};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Raw,
    Ros,
    Smote,
    Adasyn,
    OracleLlm,
    TfGen,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Ros => "ros",
            Method::Smote => "smote",
            Method::Adasyn => "adasyn",
            Method::OracleLlm => "oracle_llm",
            Method::TfGen => "tf_gen",
        }
    }
}

/// Rows are `(u_X, u_Y)` pairs drawn from a latent world; label `y` uses
/// subject `y` and function `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldData {
    #[serde(default = "default_world")]
    pub world: WorldConfig,
    #[serde(default)]
    pub min_subject_margin: f64,
    #[serde(default)]
    pub min_function_margin: f64,
    #[serde(default = "default_tries")]
    pub max_world_tries: usize,
    /// At most this many seed pairs go into the generator's context.
    #[serde(default = "default_context")]
    pub context_max: usize,
}

pub fn default_world() -> WorldConfig {
    WorldConfig {
        d: 64,
        r: 4,
        n_subjects: 2,
        n_functions: 2,
        l0: 1,
        r0: 8,
        eta: 0.5,
        bound: BoundDomain::Tokens,
    }
}

fn default_tries() -> usize {
    1000
}

fn default_context() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Craft,
    World(WorldData),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub dataset: DataSource,
    #[serde(default = "default_n_min")]
    pub n_min: usize,
    /// Majority-to-minority size ratios.
    pub ratios: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Augmentation size per group.
    #[serde(default)]
    pub n_aug: usize,
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub fit: Option<FitConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_min() -> usize {
    100
}

fn default_alpha() -> f64 {
    1.0 / 3.0
}

fn default_holdout() -> f64 {
    0.3
}

fn default_k() -> usize {
    5
}

impl CompareConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.ratios.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return bad("ratios, methods and seeds must be non-empty".into());
        }
        if self.ratios.contains(&0) {
            return bad("ratios must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha = {} outside [0, 1]", self.alpha));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return bad(format!("holdout = {} outside (0, 1)", self.holdout));
        }
        if self.n_min < 4 {
            return bad("n_min must be at least 4".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if let DataSource::World(w) = &self.dataset {
            if w.world.n_subjects < 2 || w.world.n_functions < 2 {
                return bad("world data needs two subjects and two functions".into());
            }
            if w.context_max == 0 {
                return bad("context_max must be positive".into());
            }
        } else if self.methods.contains(&Method::TfGen) {
            return bad("tf_gen needs world data".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub ratio: usize,
    pub method: Method,
    pub seed: u64,
    pub balanced_ce: f64,
    pub minority_ce: f64,
    pub status: FitStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub ratio: usize,
    pub method: Method,
    pub runs: usize,
    pub minority_mean: f64,
    pub minority_std: f64,
    pub balanced_mean: f64,
    pub balanced_std: f64,
}

const MINORITY: u8 = 1;

/// Training and test splits, with token pairs when the rows come from a world.
struct Split {
    train: Dataset,
    train_pairs: Option<Vec<(usize, usize)>>,
    test: Dataset,
}

struct Context {
    world: Option<(LatentWorld, TransformerStack, WorldData)>,
}

fn rt(e: synthaug::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn world_rows(world: &LatentWorld, pairs: &[(usize, usize)], labels: Vec<u8>) -> Result<Dataset, CliError> {
    let r = world.r;
    let mut names: Vec<String> = (0..r).map(|i| format!("ux{i}")).collect();
    names.extend((0..r).map(|i| format!("uy{i}")));
    let rows = pairs
        .iter()
        .map(|&(x, y)| world.u.row(x).iter().chain(world.u.row(y)).copied().collect())
        .collect();
    Dataset::new(names, "y", rows, labels).map_err(rt)
}

fn world_draw(world: &LatentWorld, y: u8, n: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>, CliError> {
    let table = synthaug::dgp::joint_table(world, y as usize, y as usize).map_err(rt)?;
    let s = PairSampler::new(&table).map_err(rt)?;
    Ok((0..n).map(|_| s.sample(rng)).collect())
}

fn split(cfg: &CompareConfig, ctx: &Context, ratio: usize, seed: u64) -> Result<Split, CliError> {
    let n_maj = ratio * cfg.n_min;
    let counts = [n_maj, cfg.n_min];
    let mut rng = stream(cfg.seed, &[seed, ratio as u64, 0]);
    let (all, pairs) = match &ctx.world {
        None => {
            let n = 2 * n_maj.max(cfg.n_min) + 2;
            let craft = make_craft(n, derive_seed(cfg.seed, &[seed, ratio as u64, 1])).map_err(rt)?;
            let mut idx = Vec::new();
            for (y, &c) in counts.iter().enumerate() {
                idx.extend((0..craft.n_rows()).filter(|&i| craft.label(i) == y as u8).take(c));
            }
            (craft.select(&idx), None)
        }
        Some((world, _, _)) => {
            let mut pairs = Vec::new();
            let mut labels = Vec::new();
            for (y, &c) in counts.iter().enumerate() {
                pairs.extend(world_draw(world, y as u8, c, &mut rng)?);
                labels.extend(std::iter::repeat_n(y as u8, c));
            }
            (world_rows(world, &pairs, labels)?, Some(pairs))
        }
    };
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for y in 0..=1u8 {
        let mut members: Vec<usize> = (0..all.n_rows()).filter(|&i| all.label(i) == y).collect();
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * cfg.holdout).ceil() as usize).clamp(1, members.len() - 1);
        test_idx.extend_from_slice(&members[..n_test]);
        train_idx.extend_from_slice(&members[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(Split {
        train: all.select(&train_idx),
        train_pairs: pairs.map(|p| train_idx.iter().map(|&i| p[i]).collect()),
        test: all.select(&test_idx),
    })
}

/// Synthetic rows for every group: `m_g` for oversampling then `N` for augmentation.
fn synthesize(
    cfg: &CompareConfig,
    ctx: &Context,
    method: Method,
    data: &Split,
    plan: &AugmentationPlan<GroupKey>,
    rng: &mut Rng,
) -> Result<(GroupedSet, GroupedSet), CliError> {
    let train = &data.train;
    let mut ovs = GroupedSet::empty(train);
    let mut aug = GroupedSet::empty(train);
    if method == Method::OracleLlm {
        let mut rows = train.empty_like();
        let mut group_of = Vec::new();
        for (g, &m) in &plan.m {
            let need = m + plan.n_aug;
            let drawn = match &ctx.world {
                Some((world, _, _)) => world_rows(world, &world_draw(world, g.label, need, rng)?, vec![g.label; need])?,
                None => {
                    let craft = make_craft(2 * need + 2, rand::Rng::random(rng)).map_err(rt)?;
                    let idx: Vec<usize> = (0..craft.n_rows()).filter(|&i| craft.label(i) == g.label).take(need).collect();
                    craft.select(&idx)
                }
            };
            rows.extend(&drawn).map_err(rt)?;
            group_of.extend(std::iter::repeat_n(*g, need));
        }
        let pool = SyntheticPool {
            dataset: rows,
            group_of,
            provenance: "true law".into(),
        };
        return pool_select(&pool, plan, rng).map_err(rt);
    }
    for (g, &m) in &plan.m {
        let need = m + plan.n_aug;
        if need == 0 {
            continue;
        }
        let group: Vec<usize> = (0..train.n_rows()).filter(|&i| train.label(i) == g.label).collect();
        let others: Vec<usize> = (0..train.n_rows()).filter(|&i| train.label(i) != g.label).collect();
        let nb = NeighborConfig {
            k: cfg.k.min(group.len().saturating_sub(1)).max(1),
            standardize: false,
        };
        let rows = match method {
            Method::Ros => ros(train, &group, need, rng).map_err(rt)?,
            Method::Smote => smote(train, &group, need, nb, rng).map_err(rt)?,
            Method::Adasyn => adasyn(train, &group, &others, need, nb, rng).map_err(rt)?,
            Method::TfGen => {
                let (world, stack, spec) = ctx.world.as_ref().expect("validated");
                let pairs = data.train_pairs.as_ref().expect("world data");
                let seeds: Vec<(usize, usize)> = group.iter().take(spec.context_max).map(|&i| pairs[i]).collect();
                let h = encode_tokens(&seeds, world).map_err(rt)?;
                let law = generated_distribution(stack, &h, world, world.eta).map_err(rt)?;
                let s = PairSampler::new(&law.table).map_err(rt)?;
                let drawn: Vec<(usize, usize)> = (0..need).map(|_| s.sample(rng)).collect();
                world_rows(world, &drawn, vec![g.label; need])?
            }
            Method::Raw | Method::OracleLlm => unreachable!(),
        };
        let head: Vec<usize> = (0..m).collect();
        let tail: Vec<usize> = (m..need).collect();
        ovs.extend(&GroupedSet::single_group(rows.select(&head), *g)).map_err(rt)?;
        aug.extend(&GroupedSet::single_group(rows.select(&tail), *g)).map_err(rt)?;
    }
    Ok((ovs, aug))
}

fn run_cell(cfg: &CompareConfig, ctx: &Context, ratio: usize, method: Method, seed: u64) -> Result<CompareRow, CliError> {
    let data = split(cfg, ctx, ratio, seed)?;
    let part = partition_groups(&data.train, &GroupMode::ByLabel).map_err(rt)?;
    let fit_cfg = cfg.fit.unwrap_or_default();
    let (objective_data, weights) = if method == Method::Raw {
        let n = data.train.n_rows();
        (data.train.clone(), vec![1.0 / n as f64; n])
    } else {
        let profile = imbalance_profile(&part.counts()).map_err(rt)?;
        let alpha = if cfg.n_aug > 0 { cfg.alpha } else { 0.0 };
        let plan = plan_balancing(&profile, cfg.n_aug, alpha).map_err(rt)?;
        let mut rng = stream(cfg.seed, &[seed, ratio as u64, 2, method as u64]);
        let (ovs, aug) = synthesize(cfg, ctx, method, &data, &plan, &mut rng)?;
        let tagged = assemble(&data.train, &part, &ovs, &aug, &plan).map_err(rt)?;
        let w = combined_weights(&tagged, alpha).map_err(rt)?;
        (tagged.dataset, w)
    };
    let obj = Objective::new(LossKind::Logistic, &objective_data, weights, true).map_err(rt)?;
    let fit = fit_logistic(&obj, &fit_cfg).map_err(rt)?;
    let test_part = partition_groups(&data.test, &GroupMode::ByLabel).map_err(rt)?;
    let report = evaluate(&fit.theta, &data.test, &test_part, Some(GroupKey::label(MINORITY))).map_err(rt)?;
    Ok(CompareRow {
        ratio,
        method,
        seed,
        balanced_ce: report.balanced,
        minority_ce: report.minority,
        status: fit.status,
    })
}

/// Every (ratio, method, seed) cell, ordered by ratio, then method as
/// listed, then seed as listed.
pub fn run_compare(cfg: &CompareConfig) -> Result<Vec<CompareRow>, CliError> {
    cfg.validate()?;
    let world = match &cfg.dataset {
        DataSource::Craft => None,
        DataSource::World(spec) => {
            let (world, _) = sample_world_filtered(
                &spec.world,
                spec.min_subject_margin,
                spec.min_function_margin,
                spec.max_world_tries,
                derive_seed(cfg.seed, &[0x3011D]),
            )
            .map_err(rt)?;
            let stack = build_generator(&world, default_omega(world.d, world.r)).map_err(rt)?;
            Some((world, stack, spec.clone()))
        }
    };
    let ctx = Context { world };
    let mut cells = Vec::new();
    for &ratio in &cfg.ratios {
        for &method in &cfg.methods {
            for &seed in &cfg.seeds {
                cells.push((ratio, method, seed));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(ratio, method, seed)| run_cell(cfg, &ctx, ratio, method, seed))
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean and sample standard deviation over seeds per (ratio, method).
pub fn summarize(rows: &[CompareRow]) -> Vec<CompareSummary> {
    let mut groups: BTreeMap<(usize, Method), Vec<&CompareRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.ratio, r.method)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((ratio, method), rs)| {
            let (minority_mean, minority_std) = mean_std(&rs.iter().map(|r| r.minority_ce).collect::<Vec<_>>());
            let (balanced_mean, balanced_std) = mean_std(&rs.iter().map(|r| r.balanced_ce).collect::<Vec<_>>());
            CompareSummary {
                ratio,
                method,
                runs: rs.len(),
                minority_mean,
                minority_std,
                balanced_mean,
                balanced_std,
            }
        })
        .collect()
}
