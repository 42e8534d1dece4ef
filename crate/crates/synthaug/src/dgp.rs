//! Latent token world: embeddings, subjects, discriminative ReLU maps, exact
//! joint tables, sampling, KL divergence, and quantile discretization.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::rng::stream;

/// Row-major real matrix, used for weights and embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged matrix rows");
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// One layer `v -> W2 relu(W1 v)` with `W1: r0 x r` and `W2: r x r0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluLayer {
    pub w1: Mat,
    pub w2: Mat,
}

/// A discriminative function: a composition of [`ReluLayer`]s on the
/// embedding space. Having no biases it is positively homogeneous.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluMap {
    pub layers: Vec<ReluLayer>,
}

impl ReluMap {
    pub fn eval(&self, u: &[f64]) -> Vec<f64> {
        let mut v = u.to_vec();
        for layer in &self.layers {
            let hidden: Vec<f64> = layer.w1.matvec(&v).into_iter().map(relu).collect();
            v = layer.w2.matvec(&hidden);
        }
        v
    }

    fn scale(&mut self, c: f64) {
        if let Some(last) = self.layers.last_mut() {
            last.w2.data.iter_mut().for_each(|w| *w *= c);
        }
    }
}

/// Set on which the functions are normalized to norm at most one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundDomain {
    /// The ball of radius `log d`.
    Ball,
    /// The realized token embeddings only.
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub d: usize,
    pub r: usize,
    pub n_subjects: usize,
    pub n_functions: usize,
    pub l0: usize,
    pub r0: usize,
    pub eta: f64,
    #[serde(default = "default_bound")]
    pub bound: BoundDomain,
}

fn default_bound() -> BoundDomain {
    BoundDomain::Ball
}

const BALL_SAMPLES: usize = 10_000;
const SAFETY: f64 = 1.05;

/// Ground-truth generative model over `d` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentWorld {
    pub d: usize,
    pub r: usize,
    pub eta: f64,
    /// `d x r`, row `x` is the embedding `u_x`.
    pub u: Mat,
    pub subjects: Vec<Vec<f64>>,
    pub functions: Vec<ReluMap>,
}

fn unit_gaussian<R: Rng + ?Sized>(r: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draw a world: `U` rows i.i.d. `N(0, I/r)`, unit subject vectors, and
/// random ReLU maps rescaled so their norm is at most one on the bound domain.
pub fn sample_world(cfg: &WorldConfig, seed: u64) -> Result<LatentWorld> {
    let WorldConfig {
        d,
        r,
        n_subjects,
        n_functions,
        l0,
        r0,
        eta,
        bound,
    } = *cfg;
    if d < 2 || r < 1 || l0 < 1 || r0 < 1 {
        return invalid(format!("need d >= 2, r, L0, r0 >= 1; got d={d}, r={r}, L0={l0}, r0={r0}"));
    }
    if n_subjects < 1 || n_functions < n_subjects {
        return invalid(format!(
            "need n_functions >= n_subjects >= 1, got {n_functions} and {n_subjects}"
        ));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return invalid(format!("eta must be positive, got {eta}"));
    }
    let mut rng = stream(seed, &[0xD6F]);
    let u = Mat::random(d, r, (1.0 / r as f64).sqrt(), &mut rng);
    let subjects = (0..n_subjects).map(|_| unit_gaussian(r, &mut rng)).collect();
    let mut functions: Vec<ReluMap> = (0..n_functions)
        .map(|_| ReluMap {
            layers: (0..l0)
                .map(|_| ReluLayer {
                    w1: Mat::random(r0, r, (1.0 / r as f64).sqrt(), &mut rng),
                    w2: Mat::random(r, r0, (1.0 / r0 as f64).sqrt(), &mut rng),
                })
                .collect(),
        })
        .collect();
    // The maps are positively homogeneous, so the sup over the ball is
    // attained on its boundary sphere.
    let probes: Vec<Vec<f64>> = match bound {
        BoundDomain::Ball => {
            let radius = (d as f64).ln();
            (0..BALL_SAMPLES)
                .map(|_| unit_gaussian(r, &mut rng).into_iter().map(|x| x * radius).collect())
                .collect()
        }
        BoundDomain::Tokens => (0..d).map(|x| u.row(x).to_vec()).collect(),
    };
    for f in &mut functions {
        let sup = probes
            .iter()
            .map(|p| norm(&f.eval(p)))
            .fold(0.0, f64::max);
        if sup > 0.0 {
            f.scale(1.0 / (SAFETY * sup));
        }
    }
    Ok(LatentWorld {
        d,
        r,
        eta,
        u,
        subjects,
        functions,
    })
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Probability table over `(x, y)` token pairs, row-major in `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub d: usize,
    pub probs: Vec<f64>,
}

impl JointTable {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probs[x * self.d + y]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.probs.chunks(self.d).map(|row| row.iter().sum()).collect()
    }

    /// `P(x) = softmax(x_logits)`, `P(y | x) = softmax(y_logits(x))`.
    pub fn from_logits(x_logits: &[f64], mut y_logits: impl FnMut(usize) -> Vec<f64>) -> Self {
        let d = x_logits.len();
        let px = softmax(x_logits);
        let mut probs = Vec::with_capacity(d * d);
        for (x, &p) in px.iter().enumerate() {
            let row = softmax(&y_logits(x));
            debug_assert_eq!(row.len(), d);
            probs.extend(row.into_iter().map(|q| p * q));
        }
        Self { d, probs }
    }
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Logits `<u_x, v> / temp` for every token.
pub fn token_logits(u: &Mat, v: &[f64], temp: f64) -> Vec<f64> {
    (0..u.rows).map(|x| dot(u.row(x), v) / temp).collect()
}

impl LatentWorld {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_functions(&self) -> usize {
        self.functions.len()
    }

    pub fn l0(&self) -> usize {
        self.functions.first().map_or(0, |f| f.layers.len())
    }

    pub fn r0(&self) -> usize {
        self.functions
            .first()
            .and_then(|f| f.layers.first())
            .map_or(0, |l| l.w1.rows)
    }

    /// `f^(m)(u_x)` for every token.
    pub fn function_values(&self, m: usize) -> Vec<Vec<f64>> {
        (0..self.d).map(|x| self.functions[m].eval(self.u.row(x))).collect()
    }

    fn check(&self, t: usize, m: usize) -> Result<()> {
        if t >= self.n_subjects() || m >= self.n_functions() {
            return invalid(format!(
                "subject {t} / function {m} out of range ({} / {})",
                self.n_subjects(),
                self.n_functions()
            ));
        }
        Ok(())
    }

    pub fn marginal_x(&self, t: usize) -> Vec<f64> {
        softmax(&token_logits(&self.u, &self.subjects[t], self.eta))
    }
}

/// Exact `P(X = x, Y = y)` for subject `t` and function `m`.
pub fn joint_table(world: &LatentWorld, t: usize, m: usize) -> Result<JointTable> {
    world.check(t, m)?;
    let xl = token_logits(&world.u, &world.subjects[t], world.eta);
    let f = &world.functions[m];
    Ok(JointTable::from_logits(&xl, |x| {
        token_logits(&world.u, &f.eval(world.u.row(x)), world.eta)
    }))
}

/// Sampler over the `d^2` cells of a table.
pub struct PairSampler {
    d: usize,
    index: WeightedIndex<f64>,
}

impl PairSampler {
    pub fn new(table: &JointTable) -> Result<Self> {
        let index = WeightedIndex::new(&table.probs).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Self { d: table.d, index })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let c = self.index.sample(rng);
        (c / self.d, c % self.d)
    }
}

pub fn sample_pair<R: Rng + ?Sized>(world: &LatentWorld, t: usize, m: usize, rng: &mut R) -> Result<(usize, usize)> {
    Ok(PairSampler::new(&joint_table(world, t, m)?)?.sample(rng))
}

/// `n` i.i.d. seed pairs.
pub fn sample_seed_data<R: Rng + ?Sized>(
    world: &LatentWorld,
    t: usize,
    m: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return invalid("seed data needs n >= 1");
    }
    let sampler = PairSampler::new(&joint_table(world, t, m)?)?;
    Ok((0..n).map(|_| sampler.sample(rng)).collect())
}

/// `KL(p || q)`. Returns `f64::INFINITY` when `p` puts mass where `q` has none.
pub fn kl(p: &JointTable, q: &JointTable) -> Result<f64> {
    if p.d != q.d || p.probs.len() != q.probs.len() {
        return invalid(format!("table sizes differ: {} vs {}", p.d, q.d));
    }
    let mut s = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s.max(0.0))
}

/// `1 - max_{t' != t} <z_t, z_t'>`; `+inf` for a single subject.
pub fn subject_margin(world: &LatentWorld, t: usize) -> f64 {
    let zt = &world.subjects[t];
    1.0 - world
        .subjects
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != t)
        .map(|(_, z)| dot(zt, z))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `E||f_m(u_X)||^2 - max_{m' != m} E<f_m'(u_X), f_m(u_X)>` with `X` drawn
/// from the marginal of subject `t`, computed exactly over the tokens.
pub fn function_margin(world: &LatentWorld, t: usize, m: usize) -> f64 {
    let px = world.marginal_x(t);
    let values: Vec<Vec<Vec<f64>>> = (0..world.n_functions()).map(|k| world.function_values(k)).collect();
    let expect = |a: usize, b: usize| -> f64 { (0..world.d).map(|x| px[x] * dot(&values[a][x], &values[b][x])).sum() };
    let own = expect(m, m);
    own - (0..world.n_functions())
        .filter(|&k| k != m)
        .map(|k| expect(k, m))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest subject and function margins over all `(t, m)`.
pub fn world_margins(world: &LatentWorld) -> (f64, f64) {
    let dt = (0..world.n_subjects())
        .map(|t| subject_margin(world, t))
        .fold(f64::INFINITY, f64::min);
    let dm = (0..world.n_subjects())
        .flat_map(|t| (0..world.n_functions()).map(move |m| (t, m)))
        .map(|(t, m)| function_margin(world, t, m))
        .fold(f64::INFINITY, f64::min);
    (dt, dm)
}

/// Resample worlds until both margins reach their thresholds. Returns the
/// world and the number of draws it took.
pub fn sample_world_filtered(
    cfg: &WorldConfig,
    min_subject_margin: f64,
    min_function_margin: f64,
    max_tries: usize,
    seed: u64,
) -> Result<(LatentWorld, usize)> {
    for k in 0..max_tries {
        let w = sample_world(cfg, crate::rng::derive_seed(seed, &[k as u64]))?;
        let (dt, dm) = world_margins(&w);
        if dt >= min_subject_margin && dm >= min_function_margin {
            return Ok((w, k + 1));
        }
    }
    invalid(format!(
        "no world with margins >= ({min_subject_margin}, {min_function_margin}) in {max_tries} draws"
    ))
}

/// Per-feature quantile edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub feature_names: Vec<String>,
    /// Interior bin boundaries; a value `v` maps to the number of edges `<= v`.
    pub edges: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    pub feature_names: Vec<String>,
    /// Row-major bin ids.
    pub tokens: Vec<u32>,
    pub labels: Vec<u8>,
}

impl TokenDataset {
    pub fn row(&self, i: usize) -> &[u32] {
        let p = self.feature_names.len();
        &self.tokens[i * p..(i + 1) * p]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub tokens: TokenDataset,
    pub codebook: Codebook,
    /// Features that collapsed to a single bin.
    pub warnings: Vec<String>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Codebook {
    pub fn bin(&self, j: usize, v: f64) -> u32 {
        self.edges[j].partition_point(|&e| e <= v) as u32
    }

    pub fn apply(&self, ds: &Dataset) -> Result<TokenDataset> {
        if ds.feature_names() != self.feature_names.as_slice() {
            return invalid("dataset features do not match the codebook");
        }
        let tokens = ds
            .rows()
            .flat_map(|row| row.iter().enumerate().map(|(j, &v)| self.bin(j, v)).collect::<Vec<_>>())
            .collect();
        Ok(TokenDataset {
            feature_names: self.feature_names.clone(),
            tokens,
            labels: ds.labels().to_vec(),
        })
    }
}

/// Quantile binning of every feature into at most `bins` bins.
pub fn discretize(ds: &Dataset, bins: usize) -> Result<Discretized> {
    if bins < 2 {
        return invalid(format!("need at least 2 bins, got {bins}"));
    }
    if ds.is_empty() {
        return invalid("cannot discretize an empty dataset");
    }
    let mut edges = Vec::new();
    let mut warnings = Vec::new();
    for j in 0..ds.n_features() {
        let mut col = ds.column(j);
        col.sort_by(f64::total_cmp);
        let mut e: Vec<f64> = (1..bins).map(|k| quantile(&col, k as f64 / bins as f64)).collect();
        e.dedup();
        // An edge at the minimum would leave the lowest bin empty.
        e.retain(|&x| x > col[0]);
        if e.is_empty() {
            warnings.push(format!("feature {:?} is constant; using one bin", ds.feature_names()[j]));
        }
        edges.push(e);
    }
    let codebook = Codebook {
        feature_names: ds.feature_names().to_vec(),
        edges,
    };
    let tokens = codebook.apply(ds)?;
    Ok(Discretized {
        tokens,
        codebook,
        warnings,
    })
}

/// Named arrays stored as a JSON header plus a little-endian `f64` blob.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bundle {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Mat)>,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    format: String,
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

const BUNDLE_FORMAT: &str = "synthaug-bundle";
const BUNDLE_VERSION: u32 = 1;

impl Bundle {
    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::InvalidArgument(format!("bundle has no array {name:?}")))
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let mut offset = 0;
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        for (name, m) in &self.arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                rows: m.rows,
                cols: m.cols,
                offset,
            });
            offset += m.data.len();
            for v in &m.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = BundleHeader {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            meta: self.meta.clone(),
            arrays: entries,
        };
        fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&header)?)?;
        fs::File::create(stem.with_extension("bin"))?.write_all(&blob)?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let header: BundleHeader = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
        if header.format != BUNDLE_FORMAT || header.version != BUNDLE_VERSION {
            return invalid(format!(
                "unsupported bundle {:?} version {}",
                header.format, header.version
            ));
        }
        let mut raw = Vec::new();
        fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut raw)?;
        if raw.len() % 8 != 0 {
            return invalid("bundle blob length is not a multiple of 8");
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut arrays = Vec::new();
        for e in header.arrays {
            let end = e.offset + e.rows * e.cols;
            if end > values.len() {
                return invalid(format!("array {:?} runs past the blob", e.name));
            }
            arrays.push((
                e.name,
                Mat {
                    rows: e.rows,
                    cols: e.cols,
                    data: values[e.offset..end].to_vec(),
                },
            ));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }
}

impl LatentWorld {
    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut arrays = vec![
            ("U".to_string(), self.u.clone()),
            ("subjects".to_string(), Mat::from_rows(&self.subjects)?),
        ];
        for (m, f) in self.functions.iter().enumerate() {
            for (k, l) in f.layers.iter().enumerate() {
                arrays.push((format!("f{m}.w1.{k}"), l.w1.clone()));
                arrays.push((format!("f{m}.w2.{k}"), l.w2.clone()));
            }
        }
        Ok(Bundle {
            meta: serde_json::json!({
                "kind": "latent_world",
                "d": self.d,
                "r": self.r,
                "eta": self.eta,
                "n_functions": self.n_functions(),
                "l0": self.l0(),
            }),
            arrays,
        })
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let field = |k: &str| {
            b.meta
                .get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("bundle meta lacks {k:?}")))
        };
        if field("kind")?.as_str() != Some("latent_world") {
            return invalid("bundle does not hold a latent world");
        }
        let as_usize = |k: &str| -> Result<usize> {
            field(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("meta {k:?} is not an integer")))
        };
        let eta = field("eta")?
            .as_f64()
            .ok_or_else(|| Error::InvalidArgument("meta \"eta\" is not a number".into()))?;
        let (d, r, nf, l0) = (as_usize("d")?, as_usize("r")?, as_usize("n_functions")?, as_usize("l0")?);
        let u = b.get("U")?.clone();
        let s = b.get("subjects")?;
        if u.rows != d || u.cols != r || s.cols != r {
            return invalid("bundle shapes disagree with its metadata");
        }
        let subjects = (0..s.rows).map(|i| s.row(i).to_vec()).collect();
        let mut functions = Vec::new();
        for m in 0..nf {
            let mut layers = Vec::new();
            for k in 0..l0 {
                layers.push(ReluLayer {
                    w1: b.get(&format!("f{m}.w1.{k}"))?.clone(),
                    w2: b.get(&format!("f{m}.w2.{k}"))?.clone(),
                });
            }
            functions.push(ReluMap { layers });
        }
        Ok(Self {
            d,
            r,
            eta,
            u,
            subjects,
            functions,
        })
    }

    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        self.to_bundle()?.save(stem)
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle(&Bundle::load(stem)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, r: usize) -> WorldConfig {
        WorldConfig {
            d,
            r,
            n_subjects: 2,
            n_functions: 2,
            l0: 2,
            r0: 3,
            eta: 1.0,
            bound: BoundDomain::Ball,
        }
    }

    fn hand_world() -> LatentWorld {
        let id = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        LatentWorld {
            d: 3,
            r: 2,
            eta: 0.5,
            u: Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]]).unwrap(),
            subjects: vec![vec![0.6, 0.8]],
            functions: vec![ReluMap {
                layers: vec![ReluLayer { w1: id.clone(), w2: id }],
            }],
        }
    }

    #[test]
    fn world_is_deterministic_and_normalized() {
        let a = sample_world(&cfg(20, 3), 5).unwrap();
        let b = sample_world(&cfg(20, 3), 5).unwrap();
        assert_eq!(a, b);
        for z in &a.subjects {
            assert!((norm(z) - 1.0).abs() < 1e-12);
        }
        let radius = 20f64.ln();
        let mut rng = stream(1, &[]);
        for f in &a.functions {
            for _ in 0..200 {
                let p: Vec<f64> = unit_gaussian(3, &mut rng).into_iter().map(|x| x * radius).collect();
                assert!(norm(&f.eval(&p)) <= 1.0);
            }
        }
    }

    #[test]
    fn embedding_norms_match_chi_square_mean() {
        let w = sample_world(&cfg(500, 64), 2).unwrap();
        let mean = (0..500).map(|x| dot(w.u.row(x), w.u.row(x))).sum::<f64>() / 500.0;
        assert!((mean - 1.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn hand_table_matches_enumeration() {
        let w = hand_world();
        let t = joint_table(&w, 0, 0).unwrap();
        let u = [[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]];
        let z = [0.6, 0.8];
        let px: Vec<f64> = u.iter().map(|v| ((v[0] * z[0] + v[1] * z[1]) / 0.5f64).exp()).collect();
        let spx: f64 = px.iter().sum();
        for x in 0..3 {
            let fx = [u[x][0].max(0.0), u[x][1].max(0.0)];
            let py: Vec<f64> = u.iter().map(|v| ((v[0] * fx[0] + v[1] * fx[1]) / 0.5f64).exp()).collect();
            let spy: f64 = py.iter().sum();
            for y in 0..3 {
                let want = px[x] / spx * py[y] / spy;
                assert!((t.get(x, y) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_subject_gives_uniform_marginal() {
        let mut w = hand_world();
        w.u = Mat::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![-3.0, 0.0]]).unwrap();
        w.subjects = vec![vec![0.0, 1.0]];
        for p in joint_table(&w, 0, 0).unwrap().marginal_x() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_temperature_gives_uniform_table() {
        let mut w = sample_world(&cfg(6, 2), 3).unwrap();
        w.eta = 1e9;
        let t = joint_table(&w, 0, 1).unwrap();
        assert!(t.probs.iter().all(|p| (p - 1.0 / 36.0).abs() < 1e-6));
        assert!((t.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_frequencies_pass_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let w = sample_world(&cfg(4, 2), 9).unwrap();
        let table = joint_table(&w, 1, 0).unwrap();
        let mut rng = stream(11, &[]);
        let n = 100_000;
        let draws = sample_seed_data(&w, 1, 0, n, &mut rng).unwrap();
        let mut counts = vec![0.0; 16];
        for (x, y) in draws {
            counts[x * 4 + y] += 1.0;
        }
        let stat: f64 = counts
            .iter()
            .zip(&table.probs)
            .map(|(c, p)| (c - n as f64 * p).powi(2) / (n as f64 * p))
            .sum();
        let p = 1.0 - ChiSquared::new(15.0).unwrap().cdf(stat);
        assert!(p > 0.001, "chi2 = {stat}, p = {p}");
    }

    #[test]
    fn degenerate_world_concentrates() {
        let mut w = hand_world();
        w.eta = 1e-3;
        let mut rng = stream(4, &[]);
        let draws = sample_seed_data(&w, 0, 0, 100, &mut rng).unwrap();
        // u_2 maximizes <z, u>; then f(u_2) = u_2 favours y = 2.
        assert!(draws.iter().all(|&p| p == (1, 1)));
    }

    #[test]
    fn kl_hand_values() {
        let p = JointTable {
            d: 2,
            probs: vec![0.1, 0.2, 0.3, 0.4],
        };
        let q = JointTable {
            d: 2,
            probs: vec![0.25; 4],
        };
        let want: f64 = [0.1f64, 0.2, 0.3, 0.4].iter().map(|a| a * (a / 0.25).ln()).sum();
        assert!((kl(&p, &q).unwrap() - want).abs() < 1e-15);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        let z = JointTable {
            d: 2,
            probs: vec![0.0, 0.5, 0.5, 0.0],
        };
        assert_eq!(kl(&p, &z).unwrap(), f64::INFINITY);
        assert!(kl(&z, &p).unwrap().is_finite());
    }

    #[test]
    fn margins_of_hand_world() {
        let mut w = hand_world();
        w.subjects.push(vec![0.8, 0.6]);
        assert!((subject_margin(&w, 0) - (1.0 - 0.96)).abs() < 1e-12);
        w.functions.push(w.functions[0].clone());
        assert!(function_margin(&w, 0, 0).abs() < 1e-12);
    }

    #[test]
    fn quartile_edges_on_uniform_data() {
        let n = 4001;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / (n - 1) as f64, 1.0]).collect();
        let ds = Dataset::new(vec!["a".into(), "c".into()], "y", rows, vec![0; n]).unwrap();
        let out = discretize(&ds, 4).unwrap();
        for (e, q) in out.codebook.edges[0].iter().zip([0.25, 0.5, 0.75]) {
            assert!((e - q).abs() < 1e-3);
        }
        assert!(out.codebook.edges[1].is_empty());
        assert_eq!(out.warnings.len(), 1);
        assert!(out.tokens.tokens.chunks(2).all(|r| r[1] == 0));
        assert_eq!(out.codebook.apply(&ds).unwrap(), out.tokens);
    }

    #[test]
    fn bundle_round_trip() {
        let w = sample_world(&cfg(7, 2), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("world");
        w.save(&stem).unwrap();
        assert_eq!(LatentWorld::load(&stem).unwrap(), w);
    }
}
