//! Losses, the α-weighted combined objective, a logistic-regression trainer,
//! group-wise evaluation, and the bias/quality diagnostics of synthetic data.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::balance::{Origin, TaggedDataset};
use crate::data::{Dataset, GroupKey, GroupPartition};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Rng};

/// Probability clamp used by cross-entropy.
pub const CE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `log(1 + exp(-y θᵀx))` with labels {0,1} mapped to ∓1.
    Logistic,
    /// `½ (y − θᵀx)²`.
    Squared,
    /// `1{prediction ≠ y}` with prediction `1{θᵀx ≥ 0}`.
    Misclassification,
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(theta: &[f64], x: &[f64]) -> Result<()> {
    if theta.len() != x.len() {
        return invalid(format!("theta has {} entries, x has {}", theta.len(), x.len()));
    }
    Ok(())
}

fn pm(y: f64) -> f64 {
    if y > 0.5 {
        1.0
    } else {
        -1.0
    }
}

pub fn loss_value(kind: LossKind, theta: &[f64], x: &[f64], y: f64) -> Result<f64> {
    check_dims(theta, x)?;
    let t = dot(theta, x);
    Ok(match kind {
        LossKind::Logistic => softplus(-pm(y) * t),
        LossKind::Squared => 0.5 * (y - t).powi(2),
        LossKind::Misclassification => f64::from(u8::from((t >= 0.0) != (y > 0.5))),
    })
}

pub fn loss_gradient(kind: LossKind, theta: &[f64], x: &[f64], y: f64) -> Result<Vec<f64>> {
    check_dims(theta, x)?;
    let t = dot(theta, x);
    let c = match kind {
        LossKind::Logistic => {
            let s = pm(y);
            -s * sigmoid(-s * t)
        }
        LossKind::Squared => t - y,
        LossKind::Misclassification => return invalid("misclassification loss has no gradient"),
    };
    Ok(x.iter().map(|v| c * v).collect())
}

pub fn loss_hessian(kind: LossKind, theta: &[f64], x: &[f64], _y: f64) -> Result<DMatrix<f64>> {
    check_dims(theta, x)?;
    let c = match kind {
        LossKind::Logistic => {
            let s = sigmoid(dot(theta, x));
            s * (1.0 - s)
        }
        LossKind::Squared => 1.0,
        LossKind::Misclassification => return invalid("misclassification loss has no hessian"),
    };
    let v = DVector::from_column_slice(x);
    Ok(&v * v.transpose() * c)
}

/// Fitted coefficients. With an intercept the last entry is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub coef: Vec<f64>,
    pub intercept: bool,
}

impl Theta {
    pub fn zeros(n_features: usize, intercept: bool) -> Self {
        Self {
            coef: vec![0.0; n_features + usize::from(intercept)],
            intercept,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let d = self.coef.len() - usize::from(self.intercept);
        let bias = if self.intercept { self.coef[d] } else { 0.0 };
        dot(&self.coef[..d], x) + bias
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.score(x))
    }
}

/// Append a constant 1 when the model has an intercept.
pub fn design_row(x: &[f64], intercept: bool) -> Vec<f64> {
    let mut v = x.to_vec();
    if intercept {
        v.push(1.0);
    }
    v
}

/// A weighted empirical risk `Σ wᵢ ℓ(θ; xᵢ, yᵢ)` over a fixed design.
#[derive(Debug, Clone)]
pub struct Objective {
    pub kind: LossKind,
    pub dim: usize,
    pub intercept: bool,
    design: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Objective {
    pub fn new(kind: LossKind, ds: &Dataset, weights: Vec<f64>, intercept: bool) -> Result<Self> {
        if weights.len() != ds.n_rows() {
            return invalid("one weight per row required");
        }
        let dim = ds.n_features() + usize::from(intercept);
        let mut design = Vec::with_capacity(dim * ds.n_rows());
        for r in ds.rows() {
            design.extend(design_row(r, intercept));
        }
        let y = ds.labels().iter().map(|&v| f64::from(v)).collect();
        Ok(Self {
            kind,
            dim,
            intercept,
            design,
            y,
            w: weights,
        })
    }

    /// Regression objective from real-valued targets.
    pub fn from_rows(kind: LossKind, rows: &[Vec<f64>], y: &[f64], weights: Vec<f64>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != y.len() || rows.len() != weights.len() || rows.iter().any(|r| r.len() != dim) {
            return invalid("rows, targets and weights disagree in size");
        }
        Ok(Self {
            kind,
            dim,
            intercept: false,
            design: rows.concat(),
            y: y.to_vec(),
            w: weights,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn x(&self, i: usize) -> &[f64] {
        &self.design[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        (0..self.n())
            .filter(|&i| self.w[i] != 0.0)
            .map(|i| self.w[i] * loss_value(self.kind, theta, self.x(i), self.y[i]).expect("dims checked"))
            .sum()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for i in 0..self.n() {
            if self.w[i] == 0.0 {
                continue;
            }
            let x = self.x(i);
            let t = dot(theta, x);
            let c = self.w[i]
                * match self.kind {
                    LossKind::Logistic => {
                        let s = pm(self.y[i]);
                        -s * sigmoid(-s * t)
                    }
                    LossKind::Squared => t - self.y[i],
                    LossKind::Misclassification => 0.0,
                };
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += c * xj;
            }
        }
        g
    }

    pub fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.n() {
            if self.w[i] == 0.0 {
                continue;
            }
            let x = self.x(i);
            let c = self.w[i]
                * match self.kind {
                    LossKind::Logistic => {
                        let s = sigmoid(dot(theta, x));
                        s * (1.0 - s)
                    }
                    _ => 1.0,
                };
            for a in 0..self.dim {
                for b in 0..self.dim {
                    h[(a, b)] += c * x[a] * x[b];
                }
            }
        }
        h
    }

    /// Smallest signed margin `(2y−1)θᵀx` over positively weighted rows.
    fn min_margin(&self, theta: &[f64]) -> f64 {
        (0..self.n())
            .filter(|&i| self.w[i] > 0.0)
            .map(|i| pm(self.y[i]) * dot(theta, self.x(i)))
            .fold(f64::INFINITY, f64::min)
    }
}

fn mean_loss(kind: LossKind, theta: &Theta, ds: &Dataset) -> Result<f64> {
    let mut s = 0.0;
    for (r, &y) in ds.rows().zip(ds.labels()) {
        s += loss_value(kind, &theta.coef, &design_row(r, theta.intercept), f64::from(y))?;
    }
    Ok(s)
}

/// `(1−α)·R̂_ovs + α·R̂_aug`, where R̂_ovs averages raw and oversampled rows
/// over `n_tot + m_tot` and R̂_aug averages the augmented rows over `N·|G|`.
pub fn combined_empirical_risk(
    kind: LossKind,
    theta: &Theta,
    raw: &Dataset,
    oversampled: &Dataset,
    augmented: &Dataset,
    alpha: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("alpha = {alpha} outside [0, 1]"));
    }
    if alpha > 0.0 && augmented.is_empty() {
        return invalid("alpha > 0 needs augmented samples");
    }
    let n_ovs = raw.n_rows() + oversampled.n_rows();
    let r_ovs = if n_ovs > 0 {
        (mean_loss(kind, theta, raw)? + mean_loss(kind, theta, oversampled)?) / n_ovs as f64
    } else {
        0.0
    };
    let r_aug = if augmented.is_empty() {
        0.0
    } else {
        mean_loss(kind, theta, augmented)? / augmented.n_rows() as f64
    };
    Ok((1.0 - alpha) * r_ovs + alpha * r_aug)
}

/// Per-row weights that turn the combined risk into `Σ wᵢ ℓᵢ`.
pub fn combined_weights(tagged: &TaggedDataset, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("alpha = {alpha} outside [0, 1]"));
    }
    let n_aug = tagged.origin.iter().filter(|&&o| o == Origin::Augmented).count();
    let n_ovs = tagged.origin.len() - n_aug;
    if alpha > 0.0 && n_aug == 0 {
        return invalid("alpha > 0 needs augmented samples");
    }
    Ok(tagged
        .origin
        .iter()
        .map(|o| match o {
            Origin::Augmented => alpha / n_aug as f64,
            _ if n_ovs > 0 => (1.0 - alpha) / n_ovs as f64,
            _ => 0.0,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Initial step of the backtracking line search.
    pub step: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls to this level.
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            step: 1.0,
            max_iters: 20_000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIters,
    /// The data are separated by the iterate and the norm keeps growing.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Theta,
    pub status: FitStatus,
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Full-batch gradient descent with Armijo backtracking.
pub fn fit_logistic(obj: &Objective, cfg: &FitConfig) -> Result<FitResult> {
    if obj.kind != LossKind::Logistic {
        return invalid("fit_logistic needs a logistic objective");
    }
    let labels_present = |v: f64| (0..obj.n()).any(|i| obj.w[i] > 0.0 && (obj.y[i] > 0.5) == (v > 0.5));
    if !labels_present(0.0) || !labels_present(1.0) {
        return invalid("both labels must carry positive weight");
    }
    gradient_descent(obj, cfg)
}

fn gradient_descent(obj: &Objective, cfg: &FitConfig) -> Result<FitResult> {
    let mut theta = vec![0.0; obj.dim];
    let mut f = obj.value(&theta);
    let mut g = obj.gradient(&theta);
    let mut step = cfg.step;
    let mut status = FitStatus::MaxIters;
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        iterations = it;
        let gn2: f64 = g.iter().map(|x| x * x).sum();
        if gn2.sqrt() <= cfg.tol {
            status = FitStatus::Converged;
            break;
        }
        let mut accepted = false;
        while step > 1e-300 {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - step * gi).collect();
            let fc = obj.value(&cand);
            if fc <= f - 1e-4 * step * gn2 {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        g = obj.gradient(&theta);
        step *= 2.0;
        iterations = it + 1;
    }
    let grad_norm = norm(&g);
    if grad_norm <= cfg.tol {
        status = FitStatus::Converged;
    }
    // Separable data has no finite minimizer even when the gradient vanishes numerically.
    if obj.kind == LossKind::Logistic && obj.min_margin(&theta) > 0.0 {
        status = FitStatus::Diverged;
    }
    Ok(FitResult {
        theta: Theta {
            coef: theta,
            intercept: obj.intercept,
        },
        status,
        iterations,
        grad_norm,
        objective: f,
    })
}

/// Weighted least squares via the normal equations.
pub fn fit_least_squares(obj: &Objective) -> Result<Theta> {
    if obj.kind != LossKind::Squared {
        return invalid("fit_least_squares needs a squared-loss objective");
    }
    let h = obj.hessian(&vec![0.0; obj.dim]);
    let g0 = DVector::from_vec(obj.gradient(&vec![0.0; obj.dim]));
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularHessian(min_eigenvalue(&h)))?;
    Ok(Theta {
        coef: chol.solve(&(-g0)).iter().copied().collect(),
        intercept: obj.intercept,
    })
}

/// Group-wise cross-entropy on a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub per_group: BTreeMap<String, f64>,
    pub balanced: f64,
    pub minority: f64,
    pub objective: Option<f64>,
}

pub fn cross_entropy(p: f64, y: u8) -> f64 {
    let p = p.clamp(CE_EPS, 1.0 - CE_EPS);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean cross-entropy per group, their unweighted mean, and the loss of
/// `minority` (by default the smallest test group).
pub fn evaluate(
    theta: &Theta,
    test: &Dataset,
    partition: &GroupPartition,
    minority: Option<GroupKey>,
) -> Result<RiskReport> {
    let probs: Vec<f64> = test.rows().map(|r| theta.prob(r)).collect();
    evaluate_probs(&probs, test.labels(), partition, minority)
}

/// [`evaluate`] on precomputed probabilities.
pub fn evaluate_probs(
    probs: &[f64],
    labels: &[u8],
    partition: &GroupPartition,
    minority: Option<GroupKey>,
) -> Result<RiskReport> {
    if probs.len() != labels.len() || partition.group_of.len() != labels.len() {
        return invalid("predictions, labels and partition disagree in size");
    }
    let mut sums: BTreeMap<GroupKey, (f64, usize)> = partition.groups.iter().map(|g| (*g, (0.0, 0))).collect();
    for ((p, &y), g) in probs.iter().zip(labels).zip(&partition.group_of) {
        let e = sums.entry(*g).or_default();
        e.0 += cross_entropy(*p, y);
        e.1 += 1;
    }
    if let Some((g, _)) = sums.iter().find(|(_, (_, c))| *c == 0) {
        return invalid(format!("test group {g} is empty"));
    }
    let means: BTreeMap<GroupKey, f64> = sums.iter().map(|(g, (s, c))| (*g, s / *c as f64)).collect();
    let minority_key = match minority {
        Some(g) => g,
        None => *sums.iter().min_by_key(|(_, (_, c))| *c).expect("non-empty").0,
    };
    let minority = *means
        .get(&minority_key)
        .ok_or_else(|| Error::InvalidArgument(format!("minority group {minority_key} not in partition")))?;
    Ok(RiskReport {
        balanced: means.values().sum::<f64>() / means.len() as f64,
        per_group: means.iter().map(|(g, v)| (g.to_string(), *v)).collect(),
        minority,
        objective: None,
    })
}

pub fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(h.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Draws one design row and target from a law.
pub trait Sampler: Sync {
    fn sample(&self, rng: &mut Rng) -> (Vec<f64>, f64);
}

/// Raw and synthetic laws of one group, and its imbalance ratio.
pub struct GroupLaw<'a> {
    pub name: String,
    pub rho: f64,
    pub raw: &'a dyn Sampler,
    pub synthetic: &'a dyn Sampler,
}

/// Monte-Carlo budget for [`quality_term`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// Draws per group and per law.
    pub samples: usize,
    /// Batches used for the jackknife standard error.
    pub batches: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            batches: 20,
            seed: 0,
        }
    }
}

/// Gradients of group risks and biases at θ_bal, the bias direction `b`,
/// the balanced Hessian and the quality terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDiagnostics {
    pub groups: Vec<String>,
    pub grad_risk: Vec<Vec<f64>>,
    pub grad_bias: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub q: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
}

/// Monte-Carlo diagnostics with jackknife standard errors of `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub diagnostics: BiasDiagnostics,
    pub q_se: Vec<f64>,
    /// Logistic only: the same quantities through the moments
    /// E[x σ(xᵀθ)], E[xy] and E[x xᵀ σ(1−σ)].
    pub moment_q: Option<Vec<f64>>,
}

#[derive(Clone)]
struct Moments {
    grad_raw: Vec<DVector<f64>>,
    grad_syn: Vec<DVector<f64>>,
    hess: Vec<DMatrix<f64>>,
    s_raw: Vec<DVector<f64>>,
    s_syn: Vec<DVector<f64>>,
    mu_raw: Vec<DVector<f64>>,
    mu_syn: Vec<DVector<f64>>,
}

impl Moments {
    fn zeros(g: usize, d: usize) -> Self {
        let v = || vec![DVector::zeros(d); g];
        Self {
            grad_raw: v(),
            grad_syn: v(),
            hess: vec![DMatrix::zeros(d, d); g],
            s_raw: v(),
            s_syn: v(),
            mu_raw: v(),
            mu_syn: v(),
        }
    }

    fn add_scaled(&mut self, o: &Moments, c: f64) {
        for g in 0..self.grad_raw.len() {
            self.grad_raw[g] += &o.grad_raw[g] * c;
            self.grad_syn[g] += &o.grad_syn[g] * c;
            self.hess[g] += &o.hess[g] * c;
            self.s_raw[g] += &o.s_raw[g] * c;
            self.s_syn[g] += &o.s_syn[g] * c;
            self.mu_raw[g] += &o.mu_raw[g] * c;
            self.mu_syn[g] += &o.mu_syn[g] * c;
        }
    }
}

fn batch_moments(laws: &[GroupLaw<'_>], theta: &[f64], kind: LossKind, n: usize, rng: &mut Rng) -> Result<Moments> {
    let d = theta.len();
    let mut m = Moments::zeros(laws.len(), d);
    let inv = 1.0 / n as f64;
    for (g, law) in laws.iter().enumerate() {
        for _ in 0..n {
            let (x, y) = law.raw.sample(rng);
            check_dims(theta, &x)?;
            let xv = DVector::from_vec(x);
            let t = xv.dot(&DVector::from_column_slice(theta));
            m.grad_raw[g] += DVector::from_vec(loss_gradient(kind, theta, xv.as_slice(), y)?) * inv;
            m.hess[g] += loss_hessian(kind, theta, xv.as_slice(), y)? * inv;
            m.s_raw[g] += &xv * (sigmoid(t) * inv);
            m.mu_raw[g] += &xv * (y * inv);

            let (x, y) = law.synthetic.sample(rng);
            check_dims(theta, &x)?;
            let xv = DVector::from_vec(x);
            let t = xv.dot(&DVector::from_column_slice(theta));
            m.grad_syn[g] += DVector::from_vec(loss_gradient(kind, theta, xv.as_slice(), y)?) * inv;
            m.s_syn[g] += &xv * (sigmoid(t) * inv);
            m.mu_syn[g] += &xv * (y * inv);
        }
    }
    Ok(m)
}

fn q_from_moments(laws: &[GroupLaw<'_>], m: &Moments, moment_form: bool) -> Result<BiasDiagnostics> {
    let g_count = laws.len() as f64;
    let d = m.grad_raw[0].len();
    let (grad_risk, grad_bias): (Vec<DVector<f64>>, Vec<DVector<f64>>) = if moment_form {
        (0..laws.len())
            .map(|g| {
                let gr = &m.s_raw[g] - &m.mu_raw[g];
                let gb = (&m.s_syn[g] - &m.s_raw[g]) - (&m.mu_syn[g] - &m.mu_raw[g]);
                (gr, gb)
            })
            .unzip()
    } else {
        (0..laws.len())
            .map(|g| (m.grad_raw[g].clone(), &m.grad_syn[g] - &m.grad_raw[g]))
            .unzip()
    };
    let mut h = DMatrix::zeros(d, d);
    for hg in &m.hess {
        h += hg / g_count;
    }
    let h = (&h + h.transpose()) * 0.5;
    let mut b = DVector::zeros(d);
    for (law, gb) in laws.iter().zip(&grad_bias) {
        b += gb * (law.rho / g_count);
    }
    let chol = h.clone().cholesky().ok_or_else(|| Error::SingularHessian(min_eigenvalue(&h)))?;
    let hinv_b = chol.solve(&b);
    let q = grad_risk.iter().map(|gr| gr.dot(&hinv_b)).collect();
    Ok(BiasDiagnostics {
        groups: laws.iter().map(|l| l.name.clone()).collect(),
        grad_risk: grad_risk.iter().map(|v| v.iter().copied().collect()).collect(),
        grad_bias: grad_bias.iter().map(|v| v.iter().copied().collect()).collect(),
        b: b.iter().copied().collect(),
        q,
        hessian: (0..d).map(|i| h.row(i).iter().copied().collect()).collect(),
    })
}

/// Monte-Carlo estimate of `q⁽ᵍ⁾ = ∇R⁽ᵍ⁾(θ_bal)ᵀ H_bal⁻¹ b`.
///
/// Draws are split into batches, each on its own RNG stream, so the result
/// does not depend on how batches are scheduled. The standard error is the
/// delete-one-batch jackknife.
pub fn quality_term(laws: &[GroupLaw<'_>], theta_bal: &[f64], kind: LossKind, mc: &McConfig) -> Result<QualityReport> {
    if laws.is_empty() {
        return invalid("no groups");
    }
    if kind == LossKind::Misclassification {
        return invalid("quality term needs a smooth loss");
    }
    if mc.batches < 2 || mc.samples < mc.batches {
        return invalid("need at least two batches and one draw per batch");
    }
    let per = mc.samples / mc.batches;
    let batches: Vec<Moments> = (0..mc.batches)
        .map(|b| batch_moments(laws, theta_bal, kind, per, &mut stream(mc.seed, &[b as u64])))
        .collect::<Result<_>>()?;
    let nb = batches.len() as f64;
    let mut total = Moments::zeros(laws.len(), theta_bal.len());
    for b in &batches {
        total.add_scaled(b, 1.0 / nb);
    }
    let diagnostics = q_from_moments(laws, &total, false)?;
    let mut loo = Vec::with_capacity(batches.len());
    for b in &batches {
        let mut m = total.clone();
        m.add_scaled(b, -1.0 / nb);
        let mut scaled = Moments::zeros(laws.len(), theta_bal.len());
        scaled.add_scaled(&m, nb / (nb - 1.0));
        loo.push(q_from_moments(laws, &scaled, false)?.q);
    }
    let q_se = (0..laws.len())
        .map(|g| {
            let mean = loo.iter().map(|q| q[g]).sum::<f64>() / nb;
            ((nb - 1.0) / nb * loo.iter().map(|q| (q[g] - mean).powi(2)).sum::<f64>()).sqrt()
        })
        .collect();
    let moment_q = if kind == LossKind::Logistic {
        Some(q_from_moments(laws, &total, true)?.q)
    } else {
        None
    };
    Ok(QualityReport {
        diagnostics,
        q_se,
        moment_q,
    })
}

/// One group of a linear-regression world: `x ~ N(0, S)`, `y = xᵀθ + σε`
/// for raw data and the tilde quantities for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGroup {
    pub theta: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub cov_tilde: Vec<Vec<f64>>,
    pub noise_sd: f64,
    pub rho: f64,
}

fn mat(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

/// Closed-form θ_bal and quality terms for squared loss.
pub fn linear_quality_closed_form(groups: &[LinearGroup]) -> Result<(Vec<f64>, BiasDiagnostics)> {
    if groups.is_empty() {
        return invalid("no groups");
    }
    let d = groups[0].theta.len();
    let gc = groups.len() as f64;
    let s: Vec<DMatrix<f64>> = groups.iter().map(|g| mat(&g.cov)).collect();
    let st: Vec<DMatrix<f64>> = groups.iter().map(|g| mat(&g.cov_tilde)).collect();
    let th: Vec<DVector<f64>> = groups.iter().map(|g| DVector::from_vec(g.theta.clone())).collect();
    let tt: Vec<DVector<f64>> = groups.iter().map(|g| DVector::from_vec(g.theta_tilde.clone())).collect();
    let mut h = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for g in 0..groups.len() {
        h += &s[g] / gc;
        rhs += &s[g] * &th[g] / gc;
    }
    let chol = h.clone().cholesky().ok_or_else(|| Error::SingularHessian(min_eigenvalue(&h)))?;
    let theta_bal = chol.solve(&rhs);
    let grad_risk: Vec<DVector<f64>> = (0..groups.len()).map(|g| &s[g] * (&theta_bal - &th[g])).collect();
    let grad_bias: Vec<DVector<f64>> = (0..groups.len())
        .map(|g| &st[g] * (&theta_bal - &tt[g]) - &grad_risk[g])
        .collect();
    let mut b = DVector::zeros(d);
    for (g, gb) in grad_bias.iter().enumerate() {
        b += gb * (groups[g].rho / gc);
    }
    let hinv_b = chol.solve(&b);
    let q = grad_risk.iter().map(|gr| gr.dot(&hinv_b)).collect();
    let vecs = |v: &[DVector<f64>]| v.iter().map(|x| x.iter().copied().collect()).collect();
    Ok((
        theta_bal.iter().copied().collect(),
        BiasDiagnostics {
            groups: (0..groups.len()).map(|g| g.to_string()).collect(),
            grad_risk: vecs(&grad_risk),
            grad_bias: vecs(&grad_bias),
            b: b.iter().copied().collect(),
            q,
            hessian: (0..d).map(|i| h.row(i).iter().copied().collect()).collect(),
        },
    ))
}

/// Shared-covariance simplification:
/// `q⁽ᵍ⁾ = −(1/|G|) Σ_{g'} ρ_{g'} (θ_bal − θ⁽ᵍ⁾)ᵀ S (θ̃⁽ᵍ'⁾ − θ⁽ᵍ'⁾)`.
pub fn linear_quality_shared(
    cov: &[Vec<f64>],
    thetas: &[Vec<f64>],
    theta_tildes: &[Vec<f64>],
    rhos: &[f64],
) -> Result<Vec<f64>> {
    if thetas.is_empty() || thetas.len() != theta_tildes.len() || thetas.len() != rhos.len() {
        return invalid("one theta, theta_tilde and rho per group");
    }
    let s = mat(cov);
    let gc = thetas.len() as f64;
    let th: Vec<DVector<f64>> = thetas.iter().map(|t| DVector::from_vec(t.clone())).collect();
    let mut theta_bal = DVector::zeros(s.nrows());
    for t in &th {
        theta_bal += t / gc;
    }
    let mut dir = DVector::zeros(s.nrows());
    for g in 0..th.len() {
        dir += (DVector::from_vec(theta_tildes[g].clone()) - &th[g]) * rhos[g];
    }
    let sdir = &s * dir;
    Ok(th.iter().map(|t| -(&theta_bal - t).dot(&sdir) / gc).collect())
}

/// Population squared-loss risk of group `g` at θ:
/// `½ (θ − θ_g)ᵀ S (θ − θ_g) + ½ σ²`.
pub fn linear_group_risk(group: &LinearGroup, theta: &[f64]) -> f64 {
    let s = mat(&group.cov);
    let diff = DVector::from_column_slice(theta) - DVector::from_column_slice(&group.theta);
    0.5 * diff.dot(&(&s * &diff)) + 0.5 * group.noise_sd.powi(2)
}

/// Samples `(x, xᵀθ + σε)` with `x = L z`, `L Lᵀ = S`.
pub struct LinearSampler {
    chol: DMatrix<f64>,
    theta: DVector<f64>,
    noise_sd: f64,
}

impl LinearSampler {
    pub fn new(cov: &[Vec<f64>], theta: &[f64], noise_sd: f64) -> Result<Self> {
        let s = mat(cov);
        let l = s.clone().cholesky().ok_or_else(|| Error::SingularHessian(min_eigenvalue(&s)))?;
        Ok(Self {
            chol: l.l(),
            theta: DVector::from_column_slice(theta),
            noise_sd,
        })
    }

    pub fn raw(group: &LinearGroup) -> Result<Self> {
        Self::new(&group.cov, &group.theta, group.noise_sd)
    }

    pub fn synthetic(group: &LinearGroup) -> Result<Self> {
        Self::new(&group.cov_tilde, &group.theta_tilde, group.noise_sd)
    }
}

impl Sampler for LinearSampler {
    fn sample(&self, rng: &mut Rng) -> (Vec<f64>, f64) {
        use rand::Rng as _;
        let z = DVector::from_fn(self.theta.len(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let x = &self.chol * z;
        let e: f64 = rng.sample(rand_distr::StandardNormal);
        let y = x.dot(&self.theta) + self.noise_sd * e;
        (x.iter().copied().collect(), y)
    }
}
