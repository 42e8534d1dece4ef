//! Subcommand configs and runners. Each runner validates its config,
//! computes, and writes CSV and JSON files into the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use synthaug::data::make_craft;
use synthaug::risk::{
    linear_quality_closed_form, linear_quality_shared, quality_term, GroupLaw, LinearGroup, LinearSampler, LossKind,
    McConfig, Sampler,
};
use synthaug::scaling::{
    excess_curve, fit_loglog_slope, fourier_curve, CurvePoint, Design, FourierSpec, GaussianSeqConfig, Lambda,
    SlopeFit, SweepAxis,
};
use synthaug::tfgen::{kl_decay_experiment, summarize_kl, KlExperimentConfig, KlSummary};

use crate::compare::{run_compare, summarize, CompareConfig, CompareSummary};
use crate::output::{config_hash, CsvMeta, JsonDoc, Table};
use crate::CliError;

fn rt(e: synthaug::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn cfg_err(e: synthaug::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// Files written by a subcommand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Written {
    pub config_hash: String,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CraftConfig {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

pub fn cmd_craft_gen(cfg: &CraftConfig, out: &Path) -> Result<Written, CliError> {
    if cfg.n < 2 {
        return Err(CliError::Config(format!("craft needs n >= 2, got {}", cfg.n)));
    }
    let hash = config_hash(cfg);
    let ds = make_craft(cfg.n, cfg.seed).map_err(rt)?;
    let mut header: Vec<&str> = ds.feature_names().iter().map(String::as_str).collect();
    header.push(ds.label_name());
    let mut t = Table::new(CsvMeta::new("craft", &hash), &header);
    for i in 0..ds.n_rows() {
        let mut row: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
        row.push(ds.label(i).to_string());
        t.push(row);
    }
    let path = out.join("craft.csv");
    t.save(&path)?;
    Ok(Written {
        config_hash: hash,
        files: vec![path],
    })
}

pub fn cmd_oversample_compare(cfg: &CompareConfig, out: &Path) -> Result<Written, CliError> {
    cfg.validate()?;
    let hash = config_hash(cfg);
    let rows = run_compare(cfg)?;
    let mut t = Table::new(
        CsvMeta::new("oversample", &hash),
        &["ratio", "method", "seed", "balanced_ce", "minority_ce", "fit_status"],
    );
    for r in &rows {
        t.push(vec![
            r.ratio.to_string(),
            r.method.name().to_string(),
            r.seed.to_string(),
            r.balanced_ce.to_string(),
            r.minority_ce.to_string(),
            serde_json::to_value(r.status)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
        ]);
    }
    let csv = out.join("oversample.csv");
    t.save(&csv)?;
    let json = out.join("oversample_summary.json");
    JsonDoc::<Vec<CompareSummary>>::new("oversample", &hash, summarize(&rows)).save(&json)?;
    Ok(Written {
        config_hash: hash,
        files: vec![csv, json],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_axis")]
    pub axis: SweepAxis,
    pub grid: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_axis() -> SweepAxis {
    SweepAxis::Augmentation
}

fn default_replicates() -> usize {
    100
}

fn default_grid() -> Vec<usize> {
    (6..=14).map(|k| 1 << k).collect()
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            axis: default_axis(),
            grid: default_grid(),
            replicates: default_replicates(),
        }
    }
}

impl SweepSpec {
    fn validate(&self) -> Result<(), CliError> {
        if self.grid.len() < 3 {
            return Err(CliError::Config(format!(
                "a slope fit needs a grid of at least 3 sizes, got {}",
                self.grid.len()
            )));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) || self.grid[0] == 0 {
            return Err(CliError::Config("grid must be positive and strictly increasing".into()));
        }
        if self.replicates < 10 {
            return Err(CliError::Config("need at least 10 replicates".into()));
        }
        Ok(())
    }
}

fn default_design() -> Design {
    Design {
        n: vec![1000, 1000],
        n_aug: 64,
        alpha: 1.0,
        sigma: vec![1.0, 1.0],
        sigma_tilde: vec![1.0, 1.0],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussScalingConfig {
    #[serde(default = "two")]
    pub r: u32,
    #[serde(default = "three")]
    pub p: u32,
    /// Shift of the first synthetic coefficient.
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub lambda: Lambda,
    #[serde(default = "default_design")]
    pub design: Design,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub seed: u64,
}

fn two() -> u32 {
    2
}

fn three() -> u32 {
    3
}

impl Default for GaussScalingConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl GaussScalingConfig {
    pub fn build(&self) -> Result<GaussianSeqConfig, CliError> {
        self.sweep.validate()?;
        let mut g = GaussianSeqConfig::standard(self.r, self.p, self.delta, self.design.clone());
        g.lambda = self.lambda;
        g.validate().map_err(cfg_err)?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSummary {
    pub beta: f64,
    pub fit: SlopeFit,
    pub analytic_fit: SlopeFit,
    pub points: Vec<PointSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub size: usize,
    pub lambda: f64,
    pub mean: f64,
    pub std: f64,
    pub analytic: f64,
}

fn scaling_outputs(kind: &str, hash: &str, beta: f64, curve: &[CurvePoint], out: &Path) -> Result<(ScalingSummary, Vec<PathBuf>), CliError> {
    let mut t = Table::new(CsvMeta::new(kind, hash), &["size", "replicate", "risk"]);
    for p in curve {
        for (i, r) in p.risks.iter().enumerate() {
            t.push(vec![p.size.to_string(), i.to_string(), r.to_string()]);
        }
    }
    let fit = fit_loglog_slope(&curve.iter().map(|p| (p.size as f64, p.mean)).collect::<Vec<_>>()).map_err(rt)?;
    let analytic_fit =
        fit_loglog_slope(&curve.iter().map(|p| (p.size as f64, p.analytic)).collect::<Vec<_>>()).map_err(rt)?;
    let summary = ScalingSummary {
        beta,
        fit,
        analytic_fit,
        points: curve
            .iter()
            .map(|p| PointSummary {
                size: p.size,
                lambda: p.lambda,
                mean: p.mean,
                std: p.std,
                analytic: p.analytic,
            })
            .collect(),
    };
    let csv = out.join(format!("{kind}_curve.csv"));
    t.save(&csv)?;
    let json = out.join(format!("{kind}_summary.json"));
    JsonDoc::new(kind, hash, summary.clone()).save(&json)?;
    Ok((summary, vec![csv, json]))
}

pub fn run_scaling_gauss(cfg: &GaussScalingConfig) -> Result<(GaussianSeqConfig, Vec<CurvePoint>), CliError> {
    let g = cfg.build()?;
    let curve = excess_curve(&g, cfg.sweep.axis, &cfg.sweep.grid, cfg.sweep.replicates, cfg.seed).map_err(rt)?;
    Ok((g, curve))
}

pub fn cmd_scaling_gauss(cfg: &GaussScalingConfig, out: &Path) -> Result<(Written, ScalingSummary), CliError> {
    let hash = config_hash(cfg);
    let (g, curve) = run_scaling_gauss(cfg)?;
    let (summary, files) = scaling_outputs("scaling_gauss", &hash, g.regime().beta(), &curve, out)?;
    Ok((Written { config_hash: hash, files }, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierScalingConfig {
    #[serde(default = "default_fourier")]
    pub spec: FourierSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_fourier() -> FourierSpec {
    FourierSpec {
        dim: 1,
        q_max: 64,
        r: 2,
        p: 2,
        sobolev: vec![1.0, 1.0],
        contrast: vec![0.2, -0.2],
        bias: vec![0.0, 0.0],
        lambda: Lambda::default(),
        design: default_design(),
    }
}

impl Default for FourierScalingConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

pub fn run_scaling_fourier(
    cfg: &FourierScalingConfig,
) -> Result<(synthaug::scaling::FourierSimConfig, Vec<CurvePoint>), CliError> {
    cfg.sweep.validate()?;
    let f = cfg.spec.build().map_err(cfg_err)?;
    let curve = fourier_curve(&f, cfg.sweep.axis, &cfg.sweep.grid, cfg.sweep.replicates, cfg.seed).map_err(rt)?;
    Ok((f, curve))
}

pub fn cmd_scaling_fourier(cfg: &FourierScalingConfig, out: &Path) -> Result<(Written, ScalingSummary), CliError> {
    let hash = config_hash(cfg);
    let (f, curve) = run_scaling_fourier(cfg)?;
    let (summary, files) = scaling_outputs("scaling_fourier", &hash, f.regime().beta(), &curve, out)?;
    Ok((Written { config_hash: hash, files }, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlConfig {
    pub experiment: KlExperimentConfig,
    #[serde(default)]
    pub seed: u64,
}

pub fn cmd_tf_kl(cfg: &KlConfig, out: &Path) -> Result<(Written, Vec<KlSummary>), CliError> {
    let e = &cfg.experiment;
    if e.n_grid.is_empty() || e.n_grid.contains(&0) || e.replicates == 0 {
        return Err(CliError::Config("n_grid must be non-empty and positive, replicates >= 1".into()));
    }
    let hash = config_hash(cfg);
    let records = kl_decay_experiment(e, cfg.seed).map_err(|err| match err {
        synthaug::Error::InvalidArgument(m) => CliError::Config(m),
        other => rt(other),
    })?;
    let mut t = Table::new(
        CsvMeta::new("tf_kl", &hash),
        &["n", "replicate", "kl", "subject_recovered", "function_recovered"],
    );
    for r in &records {
        t.push(vec![
            r.n.to_string(),
            r.replicate.to_string(),
            r.kl.to_string(),
            r.subject_recovered.to_string(),
            r.function_recovered.to_string(),
        ]);
    }
    let summary = summarize_kl(&records);
    let csv = out.join("tf_kl.csv");
    t.save(&csv)?;
    let json = out.join("tf_kl_summary.json");
    JsonDoc::new("tf_kl", &hash, summary.clone()).save(&json)?;
    Ok((Written { config_hash: hash, files: vec![csv, json] }, summary))
}

/// Linear-regression groups sharing one covariance, or each with its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityConfig {
    pub groups: Vec<LinearGroup>,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub theta_bal: Vec<f64>,
    pub q_closed_form: Vec<f64>,
    /// Present when every group shares the raw and synthetic covariance.
    pub q_shared: Option<Vec<f64>>,
    pub q_monte_carlo: Vec<f64>,
    pub q_se: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn run_quality(cfg: &QualityConfig) -> Result<QualitySummary, CliError> {
    if cfg.groups.is_empty() {
        return Err(CliError::Config("quality needs at least one group".into()));
    }
    let (theta_bal, closed) = linear_quality_closed_form(&cfg.groups).map_err(cfg_err)?;
    let shared_cov = cfg
        .groups
        .iter()
        .all(|g| g.cov == cfg.groups[0].cov && g.cov_tilde == cfg.groups[0].cov);
    let q_shared = if shared_cov {
        Some(
            linear_quality_shared(
                &cfg.groups[0].cov,
                &cfg.groups.iter().map(|g| g.theta.clone()).collect::<Vec<_>>(),
                &cfg.groups.iter().map(|g| g.theta_tilde.clone()).collect::<Vec<_>>(),
                &cfg.groups.iter().map(|g| g.rho).collect::<Vec<_>>(),
            )
            .map_err(rt)?,
        )
    } else {
        None
    };
    let raw: Vec<LinearSampler> = cfg.groups.iter().map(LinearSampler::raw).collect::<Result<_, _>>().map_err(cfg_err)?;
    let syn: Vec<LinearSampler> =
        cfg.groups.iter().map(LinearSampler::synthetic).collect::<Result<_, _>>().map_err(cfg_err)?;
    let laws: Vec<GroupLaw<'_>> = cfg
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| GroupLaw {
            name: i.to_string(),
            rho: g.rho,
            raw: &raw[i] as &dyn Sampler,
            synthetic: &syn[i] as &dyn Sampler,
        })
        .collect();
    let mc = McConfig {
        seed: synthaug::rng::derive_seed(cfg.seed, &[cfg.mc.seed]),
        ..cfg.mc
    };
    let report = quality_term(&laws, &theta_bal, LossKind::Squared, &mc).map_err(rt)?;
    Ok(QualitySummary {
        theta_bal,
        q_closed_form: closed.q,
        q_shared,
        q_monte_carlo: report.diagnostics.q,
        q_se: report.q_se,
        b: closed.b,
    })
}

pub fn cmd_quality(cfg: &QualityConfig, out: &Path) -> Result<(Written, QualitySummary), CliError> {
    let hash = config_hash(cfg);
    let summary = run_quality(cfg)?;
    let json = out.join("quality.json");
    JsonDoc::new("quality", &hash, summary.clone()).save(&json)?;
    Ok((Written { config_hash: hash, files: vec![json] }, summary))
}
