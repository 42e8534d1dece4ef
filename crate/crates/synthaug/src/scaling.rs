//! Scaling-law simulators: a Gaussian sequence model and a Fourier
//! white-noise model, both estimated in closed form by coordinatewise
//! shrinkage of weighted group means, plus log-log slope fitting.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid, Error, Result};
use crate::rng::stream;

/// Penalty level: a fixed value, or `c * R^exponent` from the sample sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda {
    Fixed(f64),
    Auto { c: f64 },
}

impl Default for Lambda {
    fn default() -> Self {
        Lambda::Auto { c: 1.0 }
    }
}

/// Rate regime for the penalty schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Gaussian { p: u32, r: u32 },
    Fourier { p: u32, r: u32, d: u32 },
}

impl Regime {
    pub fn r_prime(&self) -> u32 {
        match *self {
            Regime::Gaussian { p, r } => p.min(r),
            Regime::Fourier { p, r, .. } => (2 * p).min(r),
        }
    }

    /// Predicted decay exponent of the parameter risk.
    pub fn beta(&self) -> f64 {
        let rp = self.r_prime() as f64;
        match *self {
            Regime::Gaussian { .. } => 2.0 * rp / (2.0 * rp + 1.0),
            Regime::Fourier { d, .. } => 2.0 * rp / (2.0 * rp + d as f64),
        }
    }

    /// Exponent of `R` in the penalty schedule.
    pub fn lambda_exponent(&self) -> f64 {
        let rp = self.r_prime() as f64;
        match *self {
            Regime::Gaussian { p, .. } => p as f64 / (2.0 * rp + 1.0),
            Regime::Fourier { p, d, .. } => 2.0 * p as f64 / (2.0 * rp + d as f64),
        }
    }
}

/// `lambda = c * R^exponent`.
pub fn lambda_schedule(rate: f64, regime: Regime, c: f64) -> Result<f64> {
    if !(rate > 0.0) {
        return invalid(format!("rate must be positive, got {rate}"));
    }
    Ok(c * rate.powf(regime.lambda_exponent()))
}

/// Sample sizes and noise shared by both simulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    /// Raw count per group.
    pub n: Vec<usize>,
    /// Augmentation size per group.
    pub n_aug: usize,
    pub alpha: f64,
    pub sigma: Vec<f64>,
    pub sigma_tilde: Vec<f64>,
}

impl Design {
    fn validate(&self) -> Result<()> {
        let g = self.n.len();
        if g == 0 || self.sigma.len() != g || self.sigma_tilde.len() != g {
            return invalid("counts and noise scales need one entry per group");
        }
        if self.n.contains(&0) {
            return invalid("every group needs a positive raw count");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid(format!("alpha = {} outside [0, 1]", self.alpha));
        }
        if self.alpha > 0.0 && self.n_aug == 0 {
            return invalid("alpha > 0 needs a positive augmentation size");
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.n.len()
    }

    pub fn max_n(&self) -> usize {
        self.n.iter().copied().max().unwrap_or(0)
    }

    pub fn m(&self, g: usize) -> usize {
        self.max_n() - self.n[g]
    }

    pub fn rho(&self, g: usize) -> f64 {
        self.m(g) as f64 / self.max_n() as f64
    }

    /// Weights of the raw, oversampled and augmentation means of group `g`.
    pub fn mean_weights(&self, g: usize) -> [f64; 3] {
        let rho = self.rho(g);
        [(1.0 - self.alpha) * (1.0 - rho), (1.0 - self.alpha) * rho, self.alpha]
    }

    /// Variance of the weighted mean of group `g`, per coordinate.
    pub fn group_variance(&self, g: usize) -> f64 {
        let [a, b, c] = self.mean_weights(g);
        let mut v = a * a * self.sigma[g].powi(2) / self.n[g] as f64;
        if self.m(g) > 0 {
            v += b * b * self.sigma_tilde[g].powi(2) / self.m(g) as f64;
        }
        if self.n_aug > 0 {
            v += c * c * self.sigma_tilde[g].powi(2) / self.n_aug as f64;
        }
        v
    }

    /// Variance of the average of the weighted group means.
    pub fn mean_variance(&self) -> f64 {
        let g = self.groups() as f64;
        (0..self.groups()).map(|k| self.group_variance(k)).sum::<f64>() / (g * g)
    }

    /// `R = (1-a)^2 s^2 (1-rho) / n_tot + a^2 s'^2 / (N |G|)`.
    pub fn rate(&self) -> f64 {
        let g = self.groups() as f64;
        let n_tot: usize = self.n.iter().sum();
        let m_tot: usize = (0..self.groups()).map(|k| self.m(k)).sum();
        let rho = m_tot as f64 / (n_tot + m_tot) as f64;
        let s2 = (0..self.groups())
            .map(|k| (1.0 - self.rho(k)) * self.sigma[k].powi(2) + self.rho(k) * self.sigma_tilde[k].powi(2))
            .sum::<f64>()
            / g;
        let s2p = self.sigma_tilde.iter().map(|s| s * s).sum::<f64>() / g;
        let mut r = (1.0 - self.alpha).powi(2) * s2 * (1.0 - rho) / n_tot as f64;
        if self.n_aug > 0 {
            r += self.alpha.powi(2) * s2p / (self.n_aug as f64 * g);
        }
        r
    }

    /// One draw of the weighted group means' noise, averaged over groups.
    fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = self.groups() as f64;
        let mut e = 0.0;
        for k in 0..self.groups() {
            let [a, b, c] = self.mean_weights(k);
            e += a * self.sigma[k] / (self.n[k] as f64).sqrt() * rng.sample::<f64, _>(StandardNormal);
            if self.m(k) > 0 {
                e += b * self.sigma_tilde[k] / (self.m(k) as f64).sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            if self.n_aug > 0 {
                e += c * self.sigma_tilde[k] / (self.n_aug as f64).sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        e / g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSeqConfig {
    pub theta_star: Vec<f64>,
    pub theta_tilde_star: Vec<f64>,
    pub r: u32,
    pub p: u32,
    pub lambda: Lambda,
    pub design: Design,
}

/// Sequence truncation for the default configuration.
pub const GAUSSIAN_J: usize = 2048;

impl GaussianSeqConfig {
    /// `theta*_j = 0.9 j^-(r + 1/2)` and `theta~* = theta* + delta e_1`.
    pub fn standard(r: u32, p: u32, delta: f64, design: Design) -> Self {
        let theta_star: Vec<f64> = (1..=GAUSSIAN_J).map(|j| 0.9 * (j as f64).powf(-(r as f64 + 0.5))).collect();
        let mut theta_tilde_star = theta_star.clone();
        theta_tilde_star[0] += delta;
        Self {
            theta_star,
            theta_tilde_star,
            r,
            p,
            lambda: Lambda::default(),
            design,
        }
    }

    pub fn regime(&self) -> Regime {
        Regime::Gaussian { p: self.p, r: self.r }
    }

    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        if self.p < 2 || self.p == self.r {
            return invalid(format!("need p >= 2 and p != r, got p = {}, r = {}", self.p, self.r));
        }
        if self.theta_star.is_empty() || self.theta_star.len() != self.theta_tilde_star.len() {
            return invalid("theta sequences must be non-empty and of equal length");
        }
        if let Lambda::Fixed(l) = self.lambda {
            if !(l >= 0.0) {
                return invalid(format!("lambda must be >= 0, got {l}"));
            }
        }
        Ok(())
    }

    pub fn resolve_lambda(&self) -> Result<f64> {
        match self.lambda {
            Lambda::Fixed(l) => Ok(l),
            Lambda::Auto { c } => lambda_schedule(self.design.rate(), self.regime(), c),
        }
    }

    fn shrink(&self, lambda: f64) -> Vec<f64> {
        (1..=self.theta_star.len())
            .map(|j| 1.0 / (1.0 + lambda * (j as f64).powi(self.p as i32)))
            .collect()
    }

    /// Mean of the weighted group means: `theta* + w (theta~* - theta*)`.
    fn target(&self) -> Vec<f64> {
        let w = bias_weight(&self.design);
        self.theta_star
            .iter()
            .zip(&self.theta_tilde_star)
            .map(|(t, tt)| t + w * (tt - t))
            .collect()
    }
}

/// `(1/|G|) sum_g ((1 - alpha) rho_g + alpha)`.
fn bias_weight(d: &Design) -> f64 {
    (0..d.groups()).map(|g| (1.0 - d.alpha) * d.rho(g) + d.alpha).sum::<f64>() / d.groups() as f64
}

/// Closed-form shrinkage estimate from one draw of the group means.
pub fn gaussian_estimate<R: Rng + ?Sized>(cfg: &GaussianSeqConfig, rng: &mut R) -> Result<Vec<f64>> {
    cfg.validate()?;
    let lambda = cfg.resolve_lambda()?;
    let s = cfg.shrink(lambda);
    Ok(cfg
        .target()
        .iter()
        .zip(&s)
        .map(|(t, sj)| sj * (t + cfg.design.noise(rng)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianRisks {
    pub param_risk: f64,
    pub excess_misclass: f64,
    /// The estimate was zero, so the misclassification error was set to 1/2.
    pub degenerate: bool,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Parameter risk and excess balanced misclassification error.
pub fn gaussian_risks(theta_hat: &[f64], cfg: &GaussianSeqConfig) -> Result<GaussianRisks> {
    if theta_hat.len() != cfg.theta_star.len() {
        return invalid("estimate length differs from theta*");
    }
    let ts = &cfg.theta_star;
    let param_risk = theta_hat.iter().zip(ts).map(|(a, b)| (a - b).powi(2)).sum();
    let nh = theta_hat.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ns = ts.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cross: f64 = theta_hat.iter().zip(ts).map(|(a, b)| a * b).sum();
    let groups = cfg.design.groups() as f64;
    let mut excess = 0.0;
    for &s in &cfg.design.sigma {
        let best = normal_cdf(-ns / s);
        let err = if nh > 0.0 { normal_cdf(-cross / (s * nh)) } else { 0.5 };
        excess += (err - best) / groups;
    }
    Ok(GaussianRisks {
        param_risk,
        excess_misclass: excess,
        degenerate: nh == 0.0,
    })
}

/// Squared-bias and variance parts of the expected parameter risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskDecomposition {
    pub bias: f64,
    pub variance: f64,
}

impl RiskDecomposition {
    pub fn total(&self) -> f64 {
        self.bias + self.variance
    }
}

fn decomposition(target: &[f64], reference: &[f64], shrink: &[f64], var: f64) -> RiskDecomposition {
    let bias = target
        .iter()
        .zip(reference)
        .zip(shrink)
        .map(|((t, r), s)| (s * t - r).powi(2))
        .sum();
    let variance = shrink.iter().map(|s| s * s).sum::<f64>() * var;
    RiskDecomposition { bias, variance }
}

/// Exact `E||theta_hat - theta*||^2`.
pub fn gaussian_analytic_risk(cfg: &GaussianSeqConfig) -> Result<RiskDecomposition> {
    cfg.validate()?;
    let s = cfg.shrink(cfg.resolve_lambda()?);
    Ok(decomposition(&cfg.target(), &cfg.theta_star, &s, cfg.design.mean_variance()))
}

/// `||(1/|G|) sum_g ((1-alpha) rho_g + alpha)(theta_g - theta~_g)||^2`.
pub fn gaussian_bias_floor(cfg: &GaussianSeqConfig) -> f64 {
    let w = bias_weight(&cfg.design);
    cfg.theta_star
        .iter()
        .zip(&cfg.theta_tilde_star)
        .map(|(a, b)| (w * (a - b)).powi(2))
        .sum()
}

/// Which sample size a curve sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Augmentation size `N`.
    Augmentation,
    /// Total raw count; group counts keep their proportions.
    Raw,
}

fn with_size(design: &Design, axis: SweepAxis, size: usize) -> Result<Design> {
    let mut d = design.clone();
    match axis {
        SweepAxis::Augmentation => d.n_aug = size,
        SweepAxis::Raw => {
            let total: usize = design.n.iter().sum();
            d.n = design
                .n
                .iter()
                .map(|&c| ((c as f64 * size as f64 / total as f64).round() as usize).max(1))
                .collect();
        }
    }
    d.validate()?;
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub lambda: f64,
    pub mean: f64,
    pub std: f64,
    pub risks: Vec<f64>,
    /// Exact expected risk at this size.
    pub analytic: f64,
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

fn check_grid(grid: &[usize], replicates: usize) -> Result<()> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] == 0 {
        return invalid("grid must be positive and strictly increasing");
    }
    if replicates < 10 {
        return invalid(format!("need at least 10 replicates, got {replicates}"));
    }
    Ok(())
}

/// Trait shared by both simulators so curves are computed one way.
trait Simulator: Sync {
    fn at_size(&self, axis: SweepAxis, size: usize) -> Result<Self>
    where
        Self: Sized;
    fn lambda(&self) -> Result<f64>;
    fn draw_risk(&self, rng: &mut crate::rng::Rng) -> Result<f64>;
    fn analytic(&self) -> Result<f64>;
}

impl Simulator for GaussianSeqConfig {
    fn at_size(&self, axis: SweepAxis, size: usize) -> Result<Self> {
        Ok(Self {
            design: with_size(&self.design, axis, size)?,
            ..self.clone()
        })
    }
    fn lambda(&self) -> Result<f64> {
        self.resolve_lambda()
    }
    fn draw_risk(&self, rng: &mut crate::rng::Rng) -> Result<f64> {
        Ok(gaussian_risks(&gaussian_estimate(self, rng)?, self)?.param_risk)
    }
    fn analytic(&self) -> Result<f64> {
        Ok(gaussian_analytic_risk(self)?.total())
    }
}

fn curve<S: Simulator>(sim: &S, axis: SweepAxis, grid: &[usize], replicates: usize, seed: u64) -> Result<Vec<CurvePoint>> {
    check_grid(grid, replicates)?;
    grid.iter()
        .enumerate()
        .map(|(gi, &size)| {
            let at = sim.at_size(axis, size)?;
            let risks = (0..replicates)
                .into_par_iter()
                .map(|rep| at.draw_risk(&mut stream(seed, &[gi as u64, rep as u64])))
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&risks);
            Ok(CurvePoint {
                size,
                lambda: at.lambda()?,
                mean,
                std,
                risks,
                analytic: at.analytic()?,
            })
        })
        .collect()
}

/// Mean parameter risk over replicates at each grid size, with the penalty
/// rescheduled per size when it is automatic.
pub fn excess_curve(
    cfg: &GaussianSeqConfig,
    axis: SweepAxis,
    grid: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    curve(cfg, axis, grid, replicates, seed)
}

/// Fourier white-noise simulator on the lattice `q = 2 pi j`, `|j|_inf <= q_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierSimConfig {
    pub q_max: usize,
    pub dim: usize,
    /// Coefficients per group, in [`lattice`] order.
    pub theta: Vec<Vec<f64>>,
    pub theta_tilde: Vec<Vec<f64>>,
    pub p: u32,
    pub r: u32,
    pub lambda: Lambda,
    pub design: Design,
}

/// Lattice points `j in [-q_max, q_max]^dim`, lexicographic.
pub fn lattice(q_max: usize, dim: usize) -> Vec<Vec<i64>> {
    let side: Vec<i64> = (-(q_max as i64)..=q_max as i64).collect();
    let mut pts = vec![Vec::new()];
    for _ in 0..dim {
        pts = pts
            .into_iter()
            .flat_map(|p: Vec<i64>| {
                side.iter().map(move |&s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    pts
}

fn freq_norm(j: &[i64]) -> f64 {
    2.0 * std::f64::consts::PI * j.iter().map(|&x| (x * x) as f64).sum::<f64>().sqrt()
}

/// Parametric coefficient family used to build [`FourierSimConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierSpec {
    pub dim: usize,
    pub q_max: usize,
    pub r: u32,
    pub p: u32,
    /// Sobolev norm `sum (1 + |q|^2r) theta^2` of each group, at most 1.
    pub sobolev: Vec<f64>,
    /// Group contrast: group `g` gets `base * (1 + contrast_g * (-1)^{j_1})`.
    pub contrast: Vec<f64>,
    /// Added to the synthetic coefficient at `q = 0` per group.
    pub bias: Vec<f64>,
    pub lambda: Lambda,
    pub design: Design,
}

const TAIL_TOL: f64 = 1e-6;

fn fourier_base(spec: &FourierSpec, j: &[i64]) -> f64 {
    let q = freq_norm(j);
    let decay = -(spec.r as f64 + spec.dim as f64 / 2.0 + 0.5);
    (1.0 + q).powf(decay)
}

impl FourierSpec {
    /// `theta_g(j) = a_g (1 + |q|)^-(r + d/2 + 1/2) (1 + c_g (-1)^{j_1})`,
    /// scaled to the requested Sobolev norm; rejects lattices whose
    /// truncated tail holds more than `1e-6` of the mass.
    pub fn build(&self) -> Result<FourierSimConfig> {
        let g = self.design.groups();
        if self.sobolev.len() != g || self.contrast.len() != g || self.bias.len() != g {
            return invalid("sobolev, contrast and bias need one entry per group");
        }
        if self.dim == 0 || self.q_max == 0 {
            return invalid("need dim >= 1 and q_max >= 1");
        }
        if self.sobolev.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return invalid("Sobolev norms must lie in [0, 1]");
        }
        let pts = lattice(self.q_max, self.dim);
        let r2 = 2 * self.r as i32;
        let coef = |gi: usize, j: &[i64]| {
            let sign = if j[0] % 2 == 0 { 1.0 } else { -1.0 };
            fourier_base(self, j) * sign * (1.0 + self.contrast[gi] * sign)
        };
        // Tail beyond the lattice, summed over a much wider box.
        let wide = lattice(self.q_max * if self.dim == 1 { 256 } else { 8 }, self.dim);
        let mut theta = Vec::new();
        for gi in 0..g {
            let raw: Vec<f64> = pts.iter().map(|j| coef(gi, j)).collect();
            let norm: f64 = pts
                .iter()
                .zip(&raw)
                .map(|(j, t)| (1.0 + freq_norm(j).powi(r2)) * t * t)
                .sum();
            let inside: f64 = raw.iter().map(|t| t * t).sum();
            let tail: f64 = wide
                .iter()
                .filter(|j| j.iter().any(|&x| x.unsigned_abs() as usize > self.q_max))
                .map(|j| coef(gi, j).powi(2))
                .sum();
            if tail > TAIL_TOL * (inside + tail) {
                return Err(Error::TailMass(tail / (inside + tail)));
            }
            let scale = if norm > 0.0 { (self.sobolev[gi] / norm).sqrt() } else { 0.0 };
            theta.push(raw.into_iter().map(|t| t * scale).collect::<Vec<f64>>());
        }
        let zero = pts.iter().position(|j| j.iter().all(|&x| x == 0)).expect("lattice has the origin");
        let theta_tilde = theta
            .iter()
            .zip(&self.bias)
            .map(|(t, &b)| {
                let mut tt = t.clone();
                tt[zero] += b;
                tt
            })
            .collect();
        let cfg = FourierSimConfig {
            q_max: self.q_max,
            dim: self.dim,
            theta,
            theta_tilde,
            p: self.p,
            r: self.r,
            lambda: self.lambda,
            design: self.design.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FourierSimConfig {
    pub fn regime(&self) -> Regime {
        Regime::Fourier {
            p: self.p,
            r: self.r,
            d: self.dim as u32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        let len = (2 * self.q_max + 1).pow(self.dim as u32);
        let g = self.design.groups();
        if self.theta.len() != g || self.theta_tilde.len() != g {
            return invalid("need coefficients for every group");
        }
        if self.theta.iter().chain(&self.theta_tilde).any(|t| t.len() != len) {
            return invalid(format!("coefficient tables must have {len} entries"));
        }
        if 2 * self.p as usize <= self.dim {
            return invalid("need 2p > d");
        }
        Ok(())
    }

    pub fn resolve_lambda(&self) -> Result<f64> {
        match self.lambda {
            Lambda::Fixed(l) => Ok(l),
            Lambda::Auto { c } => lambda_schedule(self.design.rate(), self.regime(), c),
        }
    }

    /// `s(q) = 1 / (1 + lambda (1 + |q|^2p))`.
    pub fn shrink(&self, lambda: f64) -> Vec<f64> {
        lattice(self.q_max, self.dim)
            .iter()
            .map(|j| 1.0 / (1.0 + lambda * (1.0 + freq_norm(j).powi(2 * self.p as i32))))
            .collect()
    }

    /// `theta_w`: the unweighted group mean of the raw coefficients.
    pub fn theta_w(&self) -> Vec<f64> {
        let g = self.theta.len() as f64;
        (0..self.theta[0].len())
            .map(|q| self.theta.iter().map(|t| t[q]).sum::<f64>() / g)
            .collect()
    }

    fn target(&self) -> Vec<f64> {
        let d = &self.design;
        let g = d.groups() as f64;
        (0..self.theta[0].len())
            .map(|q| {
                (0..d.groups())
                    .map(|k| {
                        let [a, b, c] = d.mean_weights(k);
                        a * self.theta[k][q] + (b + c) * self.theta_tilde[k][q]
                    })
                    .sum::<f64>()
                    / g
            })
            .collect()
    }
}

pub fn fourier_estimate<R: Rng + ?Sized>(cfg: &FourierSimConfig, rng: &mut R) -> Result<Vec<f64>> {
    cfg.validate()?;
    let s = cfg.shrink(cfg.resolve_lambda()?);
    Ok(cfg
        .target()
        .iter()
        .zip(&s)
        .map(|(t, sq)| sq * (t + cfg.design.noise(rng)))
        .collect())
}

/// `||theta_hat - theta_w||^2`.
pub fn fourier_risk(theta_hat: &[f64], cfg: &FourierSimConfig) -> Result<f64> {
    let w = cfg.theta_w();
    if theta_hat.len() != w.len() {
        return invalid("estimate length differs from the lattice");
    }
    Ok(theta_hat.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum())
}

pub fn fourier_analytic_risk(cfg: &FourierSimConfig) -> Result<RiskDecomposition> {
    cfg.validate()?;
    let s = cfg.shrink(cfg.resolve_lambda()?);
    Ok(decomposition(&cfg.target(), &cfg.theta_w(), &s, cfg.design.mean_variance()))
}

impl Simulator for FourierSimConfig {
    fn at_size(&self, axis: SweepAxis, size: usize) -> Result<Self> {
        Ok(Self {
            design: with_size(&self.design, axis, size)?,
            ..self.clone()
        })
    }
    fn lambda(&self) -> Result<f64> {
        self.resolve_lambda()
    }
    fn draw_risk(&self, rng: &mut crate::rng::Rng) -> Result<f64> {
        fourier_risk(&fourier_estimate(self, rng)?, self)
    }
    fn analytic(&self) -> Result<f64> {
        Ok(fourier_analytic_risk(self)?.total())
    }
}

pub fn fourier_curve(
    cfg: &FourierSimConfig,
    axis: SweepAxis,
    grid: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    curve(cfg, axis, grid, replicates, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares of `log y` on `log x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return invalid(format!("slope fit needs at least 3 points, got {}", points.len()));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return invalid("slope fit needs positive coordinates");
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return invalid("slope fit needs distinct x values");
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(alpha: f64) -> Design {
        Design {
            n: vec![100, 600],
            n_aug: 64,
            alpha,
            sigma: vec![1.0, 1.0],
            sigma_tilde: vec![1.0, 1.0],
        }
    }

    #[test]
    fn noiseless_unpenalized_recovers_truth() {
        let mut d = design(0.3);
        d.sigma = vec![0.0, 0.0];
        d.sigma_tilde = vec![0.0, 0.0];
        let mut cfg = GaussianSeqConfig::standard(2, 3, 0.0, d);
        cfg.lambda = Lambda::Fixed(0.0);
        let est = gaussian_estimate(&cfg, &mut stream(1, &[])).unwrap();
        assert_eq!(est, cfg.theta_star);
        let risks = gaussian_risks(&est, &cfg).unwrap();
        assert_eq!(risks.param_risk, 0.0);
        assert!(risks.excess_misclass.abs() < 1e-15);
    }

    #[test]
    fn huge_penalty_shrinks_to_zero() {
        let mut cfg = GaussianSeqConfig::standard(2, 3, 0.0, design(0.3));
        cfg.lambda = Lambda::Fixed(1e12);
        let est = gaussian_estimate(&cfg, &mut stream(1, &[])).unwrap();
        assert!(est.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn one_coordinate_by_hand() {
        let d = Design {
            n: vec![4, 2],
            n_aug: 3,
            alpha: 0.5,
            sigma: vec![0.0, 0.0],
            sigma_tilde: vec![0.0, 0.0],
        };
        let cfg = GaussianSeqConfig {
            theta_star: vec![2.0],
            theta_tilde_star: vec![1.0],
            r: 2,
            p: 3,
            lambda: Lambda::Fixed(1.0),
            design: d,
        };
        // rho = (0, 1/2); weights (1-a)(1-rho), (1-a)rho, a.
        let g0 = 0.5 * 2.0 + 0.0 * 1.0 + 0.5 * 1.0;
        let g1 = 0.25 * 2.0 + 0.25 * 1.0 + 0.5 * 1.0;
        let want = 0.5 * (g0 + g1) / (1.0 + 1.0);
        let est = gaussian_estimate(&cfg, &mut stream(1, &[])).unwrap();
        assert!((est[0] - want).abs() < 1e-15);
    }

    #[test]
    fn misclassification_invariances() {
        let cfg = GaussianSeqConfig {
            theta_star: vec![1.0, 0.0],
            theta_tilde_star: vec![1.0, 0.0],
            r: 2,
            p: 3,
            lambda: Lambda::Fixed(0.0),
            design: Design {
                sigma: vec![1.0, 1.0],
                ..design(0.0)
            },
        };
        let scaled = gaussian_risks(&[3.0, 0.0], &cfg).unwrap();
        assert!(scaled.excess_misclass.abs() < 1e-15);
        let orth = gaussian_risks(&[0.0, 1.0], &cfg).unwrap();
        assert!((orth.excess_misclass - (0.5 - normal_cdf(-1.0))).abs() < 1e-15);
        let zero = gaussian_risks(&[0.0, 0.0], &cfg).unwrap();
        assert!(zero.degenerate);
    }

    #[test]
    fn schedule_exponents() {
        let g = Regime::Gaussian { p: 3, r: 2 };
        assert_eq!(g.r_prime(), 2);
        assert!((g.lambda_exponent() - 0.6).abs() < 1e-15);
        assert!((g.beta() - 0.8).abs() < 1e-15);
        let f = Regime::Fourier { p: 2, r: 2, d: 1 };
        assert_eq!(f.r_prime(), 2);
        assert!((f.beta() - 0.8).abs() < 1e-15);
        assert_eq!(lambda_schedule(1.0, g, 2.5).unwrap(), 2.5);
    }

    #[test]
    fn zero_frequency_shrinkage() {
        let spec = FourierSpec {
            dim: 1,
            q_max: 8,
            r: 2,
            p: 2,
            sobolev: vec![0.5, 0.5],
            contrast: vec![0.2, -0.2],
            bias: vec![0.0, 0.0],
            lambda: Lambda::Fixed(0.3),
            design: design(0.5),
        };
        let cfg = spec.build().unwrap();
        let s = cfg.shrink(0.3);
        assert!((s[8] - 1.0 / 1.3).abs() < 1e-15);
    }

    #[test]
    fn fourier_noiseless_is_exact() {
        let mut d = design(0.5);
        d.sigma = vec![0.0, 0.0];
        d.sigma_tilde = vec![0.0, 0.0];
        let spec = FourierSpec {
            dim: 1,
            q_max: 16,
            r: 2,
            p: 2,
            sobolev: vec![1.0, 0.8],
            contrast: vec![0.3, -0.3],
            bias: vec![0.0, 0.0],
            lambda: Lambda::Fixed(0.0),
            design: d,
        };
        let cfg = spec.build().unwrap();
        let est = fourier_estimate(&cfg, &mut stream(2, &[])).unwrap();
        assert!(fourier_risk(&est, &cfg).unwrap() < 1e-30);
    }

    #[test]
    fn three_frequency_risk_by_hand() {
        let d = Design {
            n: vec![5, 5],
            n_aug: 1,
            alpha: 0.0,
            sigma: vec![0.0, 0.0],
            sigma_tilde: vec![0.0, 0.0],
        };
        let cfg = FourierSimConfig {
            q_max: 1,
            dim: 1,
            theta: vec![vec![0.1, 0.5, 0.2], vec![0.3, 0.5, 0.0]],
            theta_tilde: vec![vec![0.1, 0.5, 0.2], vec![0.3, 0.5, 0.0]],
            p: 2,
            r: 2,
            lambda: Lambda::Fixed(0.5),
            design: d,
        };
        let est = fourier_estimate(&cfg, &mut stream(3, &[])).unwrap();
        let q4 = (2.0 * std::f64::consts::PI).powi(4);
        let s_edge = 1.0 / (1.0 + 0.5 * (1.0 + q4));
        // theta_w = (0.2, 0.5, 0.1); s(0) = 1 / 1.5.
        let want: f64 = (0.05 * (1.0 - s_edge) * (1.0 - s_edge)) + (0.5f64 / 3.0).powi(2);
        assert!((fourier_risk(&est, &cfg).unwrap() - want).abs() < 1e-15);
        let a = fourier_analytic_risk(&cfg).unwrap();
        assert!((a.bias - want).abs() < 1e-15 && a.variance == 0.0);
    }

    #[test]
    fn truncated_tail_is_checked() {
        let spec = FourierSpec {
            dim: 1,
            q_max: 1,
            r: 1,
            p: 2,
            sobolev: vec![1.0],
            contrast: vec![0.0],
            bias: vec![0.0],
            lambda: Lambda::Fixed(0.0),
            design: Design {
                n: vec![10],
                n_aug: 1,
                alpha: 0.0,
                sigma: vec![1.0],
                sigma_tilde: vec![1.0],
            },
        };
        assert!(matches!(spec.build(), Err(Error::TailMass(_))));
    }

    #[test]
    fn slope_fits() {
        let pts: Vec<(f64, f64)> = (1..=10).map(|i| (i as f64, (i as f64).powi(-2))).collect();
        let fit = fit_loglog_slope(&pts).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-12 && (fit.r2 - 1.0).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64, 3.0)).collect();
        assert!(fit_loglog_slope(&flat).unwrap().slope.abs() < 1e-12);
        assert!(fit_loglog_slope(&pts[..2]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn noisy_power_law_slope() {
        use rand::Rng as _;
        let mut rng = stream(9, &[]);
        let pts: Vec<(f64, f64)> = (0..20)
            .map(|i| {
                let x = 2f64.powf(i as f64 / 2.0 + 1.0);
                (x, 3.0 * x.powf(-0.8) * (1.0 + 0.01 * (rng.random::<f64>() * 2.0 - 1.0)))
            })
            .collect();
        assert!((fit_loglog_slope(&pts).unwrap().slope + 0.8).abs() < 0.05);
    }
}
