//! Configuration-driven pipeline. Each stage reads the artifacts of earlier
//! stages from the run directory and writes its own.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    convergence_ratios, coverage, error_norms, field_moments, laplace_posterior, linear_oracle, lpp,
    quantile_coverage, sample_covariance, ConvergenceCurve, CoordinateCurve, DiagnosticsReport,
};
use crate::error::{Error, Result};
use crate::gp::{
    clip_to_psd, condition_empirical, fit_hyperparameters, gpr_condition, kernel_matrix, mc_state_prior,
    truncated_eig, BasisProvenance, CkleBasis, HyperBounds, KernelParams, Observations, Truncation,
};
use crate::hmc::{run_hmc, HmcConfig};
use crate::io::{config_hash, field_rows, fmt_f64, read_csv, read_json, Artifacts, Stamp};
use crate::linalg::rel_frobenius;
use crate::mesh::{BoundaryConditions, Mesh, SideKinds, SideValues, StructuredMeshSpec};
use crate::model::{DarcyResidualModel, LinearModel, ResidualModel};
use crate::optim::OptimConfig;
use crate::pickle::{map_optimize, CoefficientPair, LossParams};
use crate::rpickle::{run_ensemble_from, MetropolisRule, PosteriorEnsemble, RpickleConfig};
use crate::seed::{rng_for, stream};
use crate::synthetic::{build_synthetic_case, SyntheticCase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    #[default]
    Darcy,
    /// Random linear residual `Aξ + Bη − c` with a closed-form posterior.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerChoice {
    #[default]
    Rpickle,
    Hmc,
    Both,
}

impl SamplerChoice {
    fn names(self) -> &'static [&'static str] {
        match self {
            SamplerChoice::Rpickle => &["rpickle"],
            SamplerChoice::Hmc => &["hmc"],
            SamplerChoice::Both => &["rpickle", "hmc"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    #[serde(default)]
    pub sides: SideKinds,
    /// Head on Dirichlet sides, flux on Neumann sides.
    pub bc_values: SideValues<f64>,
}

/// Kernel of the Gaussian field the reference `y` is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub sigma: f64,
    pub length_scale: f64,
    pub mean: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            length_scale: 0.3,
            mean: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Fit `(σ, l)` to the `y` observations; otherwise both must be given.
    pub fit: bool,
    pub sigma: Option<f64>,
    pub length_scale: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            fit: true,
            sigma: None,
            length_scale: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationConfig {
    /// Energy fraction used when the term count is not fixed.
    pub energy: f64,
    pub n_xi: Option<usize>,
    pub n_eta: Option<usize>,
    /// Energy retained by the `y` expansion that drives the Monte Carlo `u` prior.
    pub mc_energy: f64,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            energy: 0.95,
            n_xi: None,
            n_eta: None,
            mc_energy: 0.9999,
        }
    }
}

impl TruncationConfig {
    fn rule(&self, terms: Option<usize>) -> Truncation {
        terms.map_or(Truncation::Energy(self.energy), Truncation::Terms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    pub n_y_obs: usize,
    pub n_u_obs: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            n_y_obs: 10,
            n_u_obs: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpickleSection {
    pub n_ens: usize,
    /// `null` selects Metropolization automatically by problem size.
    pub metropolize: Option<bool>,
    pub metropolis_rule: MetropolisRule,
    pub warm_start: bool,
}

impl Default for RpickleSection {
    fn default() -> Self {
        Self {
            n_ens: 1000,
            metropolize: None,
            metropolis_rule: MetropolisRule::default(),
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub coverage_level: f64,
    /// Leading `ξ` coordinates whose convergence curves are reported.
    pub convergence_coordinates: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            coverage_level: 0.95,
            convergence_coordinates: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearSection {
    pub n: usize,
    pub n_xi: usize,
    pub n_eta: usize,
}

impl Default for LinearSection {
    fn default() -> Self {
        Self {
            n: 30,
            n_xi: 5,
            n_eta: 4,
        }
    }
}

/// Settings of the built-in linear-Gaussian check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub sigma_r_sq: f64,
    pub n_ens: usize,
    pub n_metropolis: usize,
    /// Allowed sample-mean error in Monte Carlo standard errors.
    pub mean_standard_errors: f64,
    /// Allowed relative Frobenius error of the sample covariance.
    pub covariance_tolerance: f64,
    pub map_tolerance: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            sigma_r_sq: 0.5,
            n_ens: 20_000,
            n_metropolis: 1000,
            mean_standard_errors: 3.0,
            covariance_tolerance: 0.05,
            map_tolerance: 1e-6,
        }
    }
}

/// Complete description of a run. Every manifest echoes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub problem: ProblemKind,
    #[serde(default)]
    pub mesh: Option<MeshConfig>,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub truncation: TruncationConfig,
    #[serde(default)]
    pub observations: ObservationConfig,
    #[serde(default)]
    pub smoothing_iterations: usize,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_grid")]
    pub sigma_r_sq_grid: Vec<f64>,
    #[serde(default)]
    pub sampler: SamplerChoice,
    #[serde(default)]
    pub rpickle: RpickleSection,
    #[serde(default)]
    pub hmc: HmcConfig,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub linear: LinearSection,
    #[serde(default)]
    pub oracle: OracleSection,
}

fn default_n_mc() -> usize {
    5000
}

fn default_grid() -> Vec<f64> {
    vec![1e-2]
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::invalid(format!("config {path}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::invalid(format!("{field}: {msg}")));
        if self.problem == ProblemKind::Darcy {
            let Some(m) = &self.mesh else {
                return bad("mesh", "required for the darcy problem");
            };
            if m.nx == 0 || m.ny == 0 || m.nx * m.ny < 2 {
                return bad("mesh.nx/mesh.ny", "grid needs at least two cells");
            }
            if !(m.lx > 0.0 && m.ly > 0.0) {
                return bad("mesh.lx/mesh.ly", "extents must be positive");
            }
            let s = &m.sides;
            if ![s.west, s.east, s.south, s.north].contains(&crate::mesh::BcKind::Dirichlet) {
                return bad("mesh.sides", "at least one side must be dirichlet");
            }
            let v = &m.bc_values;
            if ![v.west, v.east, v.south, v.north].iter().all(|x| x.is_finite()) {
                return bad("mesh.bc_values", "values must be finite");
            }
            let n = m.nx * m.ny;
            if self.observations.n_y_obs > n || self.observations.n_u_obs > n {
                return bad("observations", "more wells than cells");
            }
            if self.kernel.fit && self.observations.n_y_obs < 3 {
                return bad("observations.n_y_obs", "kernel fitting needs at least 3 observations");
            }
            if !self.kernel.fit && (self.kernel.sigma.is_none() || self.kernel.length_scale.is_none()) {
                return bad("kernel", "sigma and length_scale are required when fit is false");
            }
            for (f, t) in [("truncation.n_xi", self.truncation.n_xi), ("truncation.n_eta", self.truncation.n_eta)] {
                if let Some(k) = t {
                    if k == 0 || k > n {
                        return bad(f, "term count must lie in 1..=n_cells");
                    }
                }
            }
            if !(self.reference.sigma > 0.0 && self.reference.length_scale > 0.0) {
                return bad("reference", "sigma and length_scale must be positive");
            }
            if self.n_mc < 2 {
                return bad("n_mc", "need at least 2 Monte Carlo draws");
            }
        }
        if !(self.truncation.energy > 0.0 && self.truncation.energy <= 1.0) {
            return bad("truncation.energy", "must lie in (0, 1]");
        }
        if !(self.truncation.mc_energy > 0.0 && self.truncation.mc_energy <= 1.0) {
            return bad("truncation.mc_energy", "must lie in (0, 1]");
        }
        if self.sigma_r_sq_grid.is_empty() || self.sigma_r_sq_grid.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("sigma_r_sq_grid", "needs at least one positive value");
        }
        let mut labels: Vec<String> = self.sigma_r_sq_grid.iter().map(|&s| sigma_label(s)).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.sigma_r_sq_grid.len() {
            return bad("sigma_r_sq_grid", "values must be distinct");
        }
        if self.rpickle.n_ens == 0 {
            return bad("rpickle.n_ens", "must be at least 1");
        }
        self.hmc.validate().map_err(|e| Error::invalid(format!("hmc: {e}")))?;
        self.optimizer.validate().map_err(|e| Error::invalid(format!("optimizer: {e}")))?;
        crate::diagnostics::gaussian_z(self.diagnostics.coverage_level)
            .map_err(|_| Error::invalid("diagnostics.coverage_level: must lie in (0, 1)"))?;
        let l = &self.linear;
        if l.n == 0 || l.n_xi + l.n_eta == 0 {
            return bad("linear", "dimensions must be positive");
        }
        if !(self.oracle.sigma_r_sq > 0.0) || self.oracle.n_ens < 2 || self.oracle.n_metropolis == 0 {
            return bad("oracle", "sigma_r_sq must be positive, n_ens ≥ 2 and n_metropolis ≥ 1");
        }
        Ok(())
    }

    /// Hash of everything that affects results (the output location does not).
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        config_hash(&c)
    }
}

/// Directory name for one residual variance, e.g. `sigma_r_sq_1e-2`.
pub fn sigma_label(s: f64) -> String {
    format!("sigma_r_sq_{s:e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    BuildPrior,
    Map,
    SampleRpickle,
    SampleHmc,
    Diagnose,
    OracleCheck,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::BuildPrior,
        Stage::Map,
        Stage::SampleRpickle,
        Stage::SampleHmc,
        Stage::Diagnose,
        Stage::OracleCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::BuildPrior => "build-prior",
            Stage::Map => "map",
            Stage::SampleRpickle => "sample-rpickle",
            Stage::SampleHmc => "sample-hmc",
            Stage::Diagnose => "diagnose",
            Stage::OracleCheck => "oracle-check",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    /// Pass/fail verdict for checking stages.
    pub passed: Option<bool>,
}

/// One pass/fail check of the linear-Gaussian suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
    pub passed: bool,
}

/// Linear-Gaussian suite: MAP against the closed form, rPICKLE moments
/// against the closed form, Metropolis acceptance and Laplace exactness.
pub fn run_oracle_suite(
    linear: &LinearSection,
    oracle: &OracleSection,
    optimizer: &OptimConfig,
    seed: u64,
) -> Result<OracleReport> {
    let mut rng = rng_for(seed, stream::ORACLE, 0);
    let lm = LinearModel::<f64>::random(&mut rng, linear.n, linear.n_xi, linear.n_eta);
    let params = LossParams::new(oracle.sigma_r_sq);
    let (mu, sigma) = linear_oracle(&lm, &params)?;
    let mut checks = Vec::new();
    let mut check = |name: &str, value: f64, tolerance: f64, passed: bool| {
        checks.push(OracleCheck {
            name: name.to_string(),
            value,
            tolerance,
            passed,
        })
    };

    let zero = CoefficientPair::zeros(lm.n_xi(), lm.n_eta());
    let map = map_optimize(&lm, &params, &zero, optimizer)?;
    let map_err = (map.z.stacked() - &mu).amax();
    check("map_matches_posterior_mean", map_err, oracle.map_tolerance, map_err <= oracle.map_tolerance);

    let config = RpickleConfig {
        n_ens: oracle.n_ens,
        seed,
        metropolize: Some(false),
        warm_start: true,
        metropolis_rule: MetropolisRule::default(),
        optimizer: *optimizer,
    };
    let ens = run_ensemble_from(&lm, &params, &config, &map.z.stacked())?;
    let samples = ens.usable_stacked();
    let (mean, cov) = sample_covariance(&samples);
    let n = samples.len() as f64;
    let worst_se = (0..mu.len())
        .map(|k| (mean[k] - mu[k]).abs() / (sigma[(k, k)] / n).sqrt())
        .fold(0.0f64, f64::max);
    check(
        "sample_mean_standard_errors",
        worst_se,
        oracle.mean_standard_errors,
        worst_se <= oracle.mean_standard_errors,
    );
    let cov_err = rel_frobenius(&cov, &sigma);
    check(
        "sample_covariance_rel_frobenius",
        cov_err,
        oracle.covariance_tolerance,
        cov_err <= oracle.covariance_tolerance,
    );

    let mconfig = RpickleConfig {
        n_ens: oracle.n_metropolis,
        metropolize: Some(true),
        ..config
    };
    let mens = run_ensemble_from(&lm, &params, &mconfig, &map.z.stacked())?;
    let rate = mens.acceptance_rate.unwrap_or(0.0);
    check("metropolis_acceptance_rate", rate, 1.0, rate == 1.0);

    let lap = laplace_posterior(&lm, &params, &map.z)?;
    let lap_err = rel_frobenius(&lap.covariance, &sigma);
    check("laplace_covariance_exact", lap_err, 1e-8, lap_err <= 1e-8);

    let passed = checks.iter().all(|c| c.passed);
    Ok(OracleReport { checks, passed })
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    stage: &'static str,
    config: &'a RunConfig,
    #[serde(flatten)]
    details: serde_json::Value,
}

/// Coefficients and summary of one MAP run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub sigma_r_sq: f64,
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl MapRecord {
    pub fn coefficients(&self) -> CoefficientPair<f64> {
        CoefficientPair {
            xi: DVector::from_vec(self.xi.clone()),
            eta: DVector::from_vec(self.eta.clone()),
        }
    }
}

/// Everything the Darcy stages need after the prior is built.
pub struct DarcyContext {
    pub case: SyntheticCase<f64>,
    pub model: DarcyResidualModel<f64>,
}

/// Coefficient draws read back from an ensemble table.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTable {
    pub n_rows: usize,
    pub xi: Vec<DVector<f64>>,
    pub eta: Vec<DVector<f64>>,
}

impl EnsembleTable {
    pub fn stacked(&self) -> Vec<DVector<f64>> {
        self.xi
            .iter()
            .zip(&self.eta)
            .map(|(x, e)| CoefficientPair { xi: x.clone(), eta: e.clone() }.stacked())
            .collect()
    }
}

/// Reads the usable draws of an ensemble CSV.
pub fn read_ensemble(path: &Path) -> Result<EnsembleTable> {
    let (header, rows) = read_csv(path)?;
    let col = |name: &str| header.iter().position(|h| h == name);
    let xi_cols: Vec<usize> = (0..).map_while(|k| col(&format!("xi_{k}"))).collect();
    let eta_cols: Vec<usize> = (0..).map_while(|k| col(&format!("eta_{k}"))).collect();
    let usable = col("usable");
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::invalid(format!("{}: bad number {s:?}: {e}", path.display())))
    };
    let mut xi = Vec::new();
    let mut eta = Vec::new();
    for r in &rows {
        if let Some(u) = usable {
            if r[u] != "true" {
                continue;
            }
        }
        xi.push(DVector::from_vec(xi_cols.iter().map(|&c| parse(&r[c])).collect::<Result<_>>()?));
        eta.push(DVector::from_vec(eta_cols.iter().map(|&c| parse(&r[c])).collect::<Result<_>>()?));
    }
    Ok(EnsembleTable {
        n_rows: rows.len(),
        xi,
        eta,
    })
}

fn coefficient_header(n_xi: usize, n_eta: usize) -> Vec<String> {
    (0..n_xi)
        .map(|k| format!("xi_{k}"))
        .chain((0..n_eta).map(|k| format!("eta_{k}")))
        .collect()
}

fn push_coefficients(row: &mut Vec<String>, z: &CoefficientPair<f64>) {
    row.extend(z.xi.iter().chain(z.eta.iter()).map(|&v| fmt_f64(v)));
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(String::new, fmt_f64)
}

/// Runs pipeline stages for one configuration and output directory.
pub struct Pipeline {
    config: RunConfig,
    out: PathBuf,
    stamp: Stamp,
    threads: Option<usize>,
}

impl Pipeline {
    /// `out` and `seed` override the config's values; `threads` sizes the
    /// worker pool (results do not depend on it).
    pub fn new(
        mut config: RunConfig,
        out: Option<PathBuf>,
        seed: Option<u64>,
        threads: Option<usize>,
    ) -> Result<Self> {
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        let out = out
            .or_else(|| config.output_dir.clone())
            .ok_or_else(|| Error::invalid("output_dir: no output directory given"))?;
        if threads == Some(0) {
            return Err(Error::invalid("threads: must be at least 1"));
        }
        let stamp = Stamp {
            config_hash: config.hash()?,
            seed: config.seed,
        };
        Ok(Self {
            config,
            out,
            stamp,
            threads,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// Runs `stage` and records its wall time in `timing.json`.
    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        let start = Instant::now();
        let outcome = match self.threads {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("threads: {e}")))?
                .install(|| self.dispatch(stage)),
            None => self.dispatch(stage),
        }?;
        self.record_timing(stage, start.elapsed().as_secs_f64())?;
        Ok(outcome)
    }

    fn dispatch(&self, stage: Stage) -> Result<StageOutcome> {
        log::info!("running stage {stage}");
        let mut a = Artifacts::new(self.stamp.clone());
        let mut warnings = Vec::new();
        a.json("config.json", "run_config", &self.config)?;
        let passed = match stage {
            Stage::Generate => {
                self.generate(&mut a)?;
                None
            }
            Stage::BuildPrior => {
                self.build_prior(&mut a)?;
                None
            }
            Stage::Map => {
                self.map(&mut a)?;
                None
            }
            Stage::SampleRpickle => {
                self.sample_rpickle(&mut a)?;
                None
            }
            Stage::SampleHmc => {
                self.sample_hmc(&mut a)?;
                None
            }
            Stage::Diagnose => {
                self.diagnose(&mut a, &mut warnings)?;
                None
            }
            Stage::OracleCheck => Some(self.oracle_check(&mut a)?),
        };
        for w in &warnings {
            log::warn!("{w}");
        }
        let files = a.commit(&self.out)?;
        Ok(StageOutcome {
            stage,
            files,
            warnings,
            passed,
        })
    }

    fn record_timing(&self, stage: Stage, seconds: f64) -> Result<()> {
        let path = self.out.join("timing.json");
        let mut times: BTreeMap<String, f64> = std::fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
            .and_then(|v| serde_json::from_value(v["stages"].clone()).ok())
            .unwrap_or_default();
        times.insert(stage.name().to_string(), seconds);
        let doc = serde_json::json!({
            "config_hash": self.stamp.config_hash,
            "seed": self.stamp.seed,
            "stages": times,
        });
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(&path, serde_json::to_vec_pretty(&doc)?)?;
        Ok(())
    }

    fn manifest(&self, a: &mut Artifacts, rel: impl Into<PathBuf>, stage: &'static str, details: serde_json::Value) -> Result<()> {
        a.json(
            rel,
            "manifest",
            &Manifest {
                stage,
                config: &self.config,
                details,
            },
        )
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn mesh_config(&self) -> Result<&MeshConfig> {
        self.config
            .mesh
            .as_ref()
            .ok_or_else(|| Error::invalid("mesh: required for the darcy problem"))
    }

    fn build_mesh(&self) -> Result<(Mesh<f64>, BoundaryConditions<f64>)> {
        let m = self.mesh_config()?;
        let mesh = StructuredMeshSpec {
            nx: m.nx,
            ny: m.ny,
            lx: m.lx,
            ly: m.ly,
            sides: m.sides,
        }
        .build::<f64>()?;
        let bc = BoundaryConditions::from_side_values(&mesh, &m.bc_values);
        Ok((mesh, bc))
    }

    pub fn load_linear(&self) -> Result<LinearModel<f64>> {
        Ok(read_json(&self.path("linear_model.json"))?.data)
    }

    pub fn load_darcy(&self) -> Result<DarcyContext> {
        let (mesh, bc) = self.build_mesh()?;
        let case: SyntheticCase<f64> = read_json(&self.path("case.json"))?.data;
        let y_basis: CkleBasis<f64> = read_json(&self.path("y_basis.json"))?.data;
        let u_basis: CkleBasis<f64> = read_json(&self.path("u_basis.json"))?.data;
        let model = DarcyResidualModel::new(mesh, y_basis, u_basis, bc)?;
        Ok(DarcyContext { case, model })
    }

    pub fn load_map(&self, sigma: f64) -> Option<MapRecord> {
        let p = self.path(Path::new(&sigma_label(sigma)).join("map.json"));
        read_json::<MapRecord>(&p).ok().map(|e| e.data)
    }

    fn generate(&self, a: &mut Artifacts) -> Result<()> {
        let cfg = &self.config;
        match cfg.problem {
            ProblemKind::Linear => {
                let mut rng = rng_for(cfg.seed, stream::ORACLE, 1);
                let l = &cfg.linear;
                let lm = LinearModel::<f64>::random(&mut rng, l.n, l.n_xi, l.n_eta);
                a.json("linear_model.json", "linear_model", &lm)?;
                self.manifest(a, "generate.json", "generate", serde_json::json!({ "n": l.n, "n_xi": l.n_xi, "n_eta": l.n_eta }))
            }
            ProblemKind::Darcy => {
                let (mesh, bc) = self.build_mesh()?;
                let r = &cfg.reference;
                let params = KernelParams::new(r.sigma, r.length_scale);
                let cov = kernel_matrix(&mesh.cell_centers, &mesh.cell_centers, &params);
                let prior = CkleBasis::from_covariance(
                    DVector::from_element(mesh.n_cells(), r.mean),
                    &cov,
                    Truncation::Terms(mesh.n_cells()),
                    BasisProvenance {
                        source: "reference kernel".into(),
                        kernel: Some(params),
                        truncation: None,
                        seed: Some(cfg.seed),
                    },
                )?;
                let case = build_synthetic_case(
                    &mesh,
                    &bc,
                    &prior,
                    cfg.smoothing_iterations,
                    cfg.observations.n_y_obs,
                    cfg.observations.n_u_obs,
                    cfg.seed,
                )?;
                a.json("mesh.json", "mesh", &mesh)?;
                a.json("case.json", "synthetic_case", &case)?;
                a.csv(
                    "fields/reference.csv",
                    &["cell_index", "x", "y", "y_ref", "u_ref"].map(String::from),
                    &field_rows(&mesh.cell_centers, &[case.y_ref.as_slice(), case.u_ref.as_slice()]),
                )?;
                for (name, obs) in [("y_obs", &case.y_obs), ("u_obs", &case.u_obs)] {
                    a.csv(format!("fields/{name}.csv"), &["cell_index", "x", "y", "value"].map(String::from), &observation_rows(obs))?;
                }
                let var = {
                    let m = case.y_ref.mean();
                    case.y_ref.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (case.y_ref.len() - 1) as f64
                };
                self.manifest(
                    a,
                    "generate.json",
                    "generate",
                    serde_json::json!({
                        "n_cells": mesh.n_cells(),
                        "n_y_obs": case.y_obs.len(),
                        "n_u_obs": case.u_obs.len(),
                        "smoothing_iterations": cfg.smoothing_iterations,
                        "y_ref_variance": var,
                    }),
                )
            }
        }
    }

    fn build_prior(&self, a: &mut Artifacts) -> Result<()> {
        let cfg = &self.config;
        if cfg.problem == ProblemKind::Linear {
            return self.manifest(a, "prior.json", "build-prior", serde_json::json!({ "prior": "standard normal coefficients" }));
        }
        let (mesh, bc) = self.build_mesh()?;
        let case: SyntheticCase<f64> = read_json(&self.path("case.json"))?.data;

        // Constant mean from the data; the GP models the fluctuation.
        let offset = if case.y_obs.is_empty() {
            cfg.reference.mean
        } else {
            case.y_obs.values.iter().sum::<f64>() / case.y_obs.len() as f64
        };
        let centered = Observations {
            values: case.y_obs.values.iter().map(|v| v - offset).collect(),
            ..case.y_obs.clone()
        };
        let (params, fit) = if cfg.kernel.fit {
            let fit = fit_hyperparameters(&centered, &HyperBounds::for_mesh(&mesh))?;
            (fit.params, Some(fit))
        } else {
            let p = KernelParams::new(cfg.kernel.sigma.unwrap_or(1.0), cfg.kernel.length_scale.unwrap_or(1.0));
            p.validate()?;
            (p, None)
        };
        let gp = gpr_condition(&params, &centered, &mesh.cell_centers)?;
        let y_mean = gp.mean.add_scalar(offset);
        let provenance = |source: &str| BasisProvenance {
            source: source.into(),
            kernel: Some(params),
            truncation: None,
            seed: Some(cfg.seed),
        };
        let y_basis = CkleBasis::from_covariance(
            y_mean.clone(),
            &gp.covariance,
            cfg.truncation.rule(cfg.truncation.n_xi),
            provenance("conditional Gaussian process"),
        )?;
        let n_xi_95 = truncated_eig(&gp.covariance, Truncation::Energy(0.95))?.n_terms;
        let mc_basis = CkleBasis::from_covariance(
            y_mean,
            &gp.covariance,
            Truncation::Energy(cfg.truncation.mc_energy),
            provenance("conditional Gaussian process"),
        )?;
        let mc = mc_state_prior(&mesh, &mc_basis, &bc, cfg.n_mc, cfg.seed)?;
        let cov_u = clip_to_psd(&mc.covariance);
        let cond = condition_empirical(&mc.mean, &cov_u, &case.u_obs, crate::gp::DEFAULT_RELATIVE_NUGGET)?;
        let u_basis = CkleBasis::from_covariance(
            cond.mean,
            &cond.covariance,
            cfg.truncation.rule(cfg.truncation.n_eta),
            provenance("conditioned Monte Carlo state ensemble"),
        )?;
        a.json("y_basis.json", "ckle_basis", &y_basis)?;
        a.json("u_basis.json", "ckle_basis", &u_basis)?;
        a.csv(
            "fields/prior.csv",
            &["cell_index", "x", "y", "y_mean", "y_std", "u_mean", "u_std"].map(String::from),
            &field_rows(
                &mesh.cell_centers,
                &[
                    y_basis.mean().as_slice(),
                    y_basis.pointwise_variance().map(f64::sqrt).as_slice(),
                    u_basis.mean().as_slice(),
                    u_basis.pointwise_variance().map(f64::sqrt).as_slice(),
                ],
            ),
        )?;
        self.manifest(
            a,
            "prior.json",
            "build-prior",
            serde_json::json!({
                "kernel": params,
                "mean_offset": offset,
                "fit_neg_log_likelihood": fit.map(|f| f.neg_log_likelihood),
                "fit_degenerate": fit.map(|f| f.degenerate),
                "n_xi": y_basis.n_terms(),
                "n_eta": u_basis.n_terms(),
                "n_xi_95": n_xi_95,
                "y_energy_fraction": y_basis.energy_fraction(),
                "u_energy_fraction": u_basis.energy_fraction(),
                "mc_draws": mc.n_samples,
                "mc_failed": mc.n_failed,
                "mc_y_terms": mc_basis.n_terms(),
            }),
        )
    }

    fn map(&self, a: &mut Artifacts) -> Result<()> {
        let cfg = &self.config;
        let mut summary = Vec::new();
        match cfg.problem {
            ProblemKind::Linear => {
                let lm = self.load_linear()?;
                for &s in &cfg.sigma_r_sq_grid {
                    let params = LossParams::new(s);
                    let rec = self.map_one(&lm, s, a)?;
                    let (mu, _) = linear_oracle(&lm, &params)?;
                    let diff = (rec.coefficients().stacked() - mu).amax();
                    summary.push(vec![fmt_f64(s), fmt_f64(rec.loss), fmt_f64(rec.grad_norm), rec.iterations.to_string(), rec.converged.to_string(), fmt_f64(diff)]);
                }
                a.csv(
                    "map_summary.csv",
                    &["sigma_r_sq", "loss", "grad_norm", "iterations", "converged", "oracle_max_abs_diff"].map(String::from),
                    &summary,
                )?;
            }
            ProblemKind::Darcy => {
                let ctx = self.load_darcy()?;
                for &s in &cfg.sigma_r_sq_grid {
                    let rec = self.map_one(&ctx.model, s, a)?;
                    let z = rec.coefficients().stacked();
                    let (y, u) = ctx.model.fields(&z);
                    let (ye, yi) = error_norms(&y, &ctx.case.y_ref)?;
                    let (ue, ui) = error_norms(&u, &ctx.case.u_ref)?;
                    a.csv(
                        Path::new(&sigma_label(s)).join("map_fields.csv"),
                        &["cell_index", "x", "y", "y_map", "u_map", "y_ref", "u_ref"].map(String::from),
                        &field_rows(
                            &ctx.model.mesh.cell_centers,
                            &[y.as_slice(), u.as_slice(), ctx.case.y_ref.as_slice(), ctx.case.u_ref.as_slice()],
                        ),
                    )?;
                    summary.push(vec![
                        fmt_f64(s),
                        fmt_f64(rec.loss),
                        fmt_f64(rec.grad_norm),
                        rec.iterations.to_string(),
                        rec.converged.to_string(),
                        fmt_f64(ye),
                        fmt_f64(yi),
                        fmt_f64(ue),
                        fmt_f64(ui),
                    ]);
                }
                a.csv(
                    "map_summary.csv",
                    &["sigma_r_sq", "loss", "grad_norm", "iterations", "converged", "y_rel_l2", "y_l_inf", "u_rel_l2", "u_l_inf"]
                        .map(String::from),
                    &summary,
                )?;
            }
        }
        self.manifest(a, "map.json", "map", serde_json::json!({ "sigma_r_sq_grid": cfg.sigma_r_sq_grid }))
    }

    fn map_one<M: ResidualModel<f64>>(&self, model: &M, s: f64, a: &mut Artifacts) -> Result<MapRecord> {
        let params = LossParams::new(s);
        let zero = CoefficientPair::zeros(model.n_xi(), model.n_eta());
        let r = map_optimize(model, &params, &zero, &self.config.optimizer)?;
        let rec = MapRecord {
            sigma_r_sq: s,
            xi: r.z.xi.as_slice().to_vec(),
            eta: r.z.eta.as_slice().to_vec(),
            loss: r.loss,
            grad_norm: r.grad_norm,
            iterations: r.iterations,
            converged: r.converged,
        };
        a.json(Path::new(&sigma_label(s)).join("map.json"), "map_estimate", &rec)?;
        Ok(rec)
    }

    fn map_start<M: ResidualModel<f64>>(&self, model: &M, s: f64) -> Result<DVector<f64>> {
        if !self.config.rpickle.warm_start {
            return Ok(DVector::zeros(model.n_coeffs()));
        }
        if let Some(rec) = self.load_map(s) {
            let z = rec.coefficients().stacked();
            if z.len() == model.n_coeffs() {
                return Ok(z);
            }
        }
        let zero = CoefficientPair::zeros(model.n_xi(), model.n_eta());
        Ok(map_optimize(model, &LossParams::new(s), &zero, &self.config.optimizer)?.z.stacked())
    }

    fn sample_rpickle(&self, a: &mut Artifacts) -> Result<()> {
        match self.config.problem {
            ProblemKind::Linear => self.sample_rpickle_with(&self.load_linear()?, a),
            ProblemKind::Darcy => self.sample_rpickle_with(&self.load_darcy()?.model, a),
        }
    }

    fn sample_rpickle_with<M: ResidualModel<f64>>(&self, model: &M, a: &mut Artifacts) -> Result<()> {
        let cfg = &self.config;
        let mut runs = Vec::new();
        for &s in &cfg.sigma_r_sq_grid {
            let params = LossParams::new(s);
            let start = self.map_start(model, s)?;
            let rc = RpickleConfig {
                n_ens: cfg.rpickle.n_ens,
                seed: cfg.seed,
                metropolize: cfg.rpickle.metropolize,
                metropolis_rule: cfg.rpickle.metropolis_rule,
                warm_start: cfg.rpickle.warm_start,
                optimizer: cfg.optimizer,
            };
            let ens = run_ensemble_from(model, &params, &rc, &start)?;
            let dir = PathBuf::from(sigma_label(s));
            a.csv(dir.join("rpickle_ensemble.csv"), &rpickle_header(model), &rpickle_rows(&ens))?;
            let details = serde_json::json!({
                "sigma_r_sq": s,
                "n_ens": ens.len(),
                "n_failed": ens.n_failed,
                "metropolized": ens.metropolized,
                "metropolis_rule": cfg.rpickle.metropolis_rule,
                "acceptance_rate": ens.acceptance_rate,
            });
            self.manifest(a, dir.join("rpickle.json"), "sample-rpickle", details.clone())?;
            runs.push(details);
        }
        self.manifest(a, "sample_rpickle.json", "sample-rpickle", serde_json::json!({ "runs": runs }))
    }

    fn sample_hmc(&self, a: &mut Artifacts) -> Result<()> {
        match self.config.problem {
            ProblemKind::Linear => self.sample_hmc_with(&self.load_linear()?, a),
            ProblemKind::Darcy => self.sample_hmc_with(&self.load_darcy()?.model, a),
        }
    }

    fn sample_hmc_with<M: ResidualModel<f64>>(&self, model: &M, a: &mut Artifacts) -> Result<()> {
        let cfg = &self.config;
        let mut runs = Vec::new();
        for &s in &cfg.sigma_r_sq_grid {
            let run = run_hmc(model, &LossParams::new(s), &cfg.hmc, cfg.seed)?;
            let dir = PathBuf::from(sigma_label(s));
            let mut header = vec!["chain_id".to_string(), "draw".into(), "accepted".into()];
            header.extend(coefficient_header(model.n_xi(), model.n_eta()));
            let mut rows = Vec::new();
            let mut trace = Vec::new();
            for c in &run.chains {
                for (k, (z, acc)) in c.states.iter().zip(&c.accept_flags).enumerate() {
                    let mut row = vec![c.chain_id.to_string(), k.to_string(), acc.to_string()];
                    row.extend(z.iter().map(|&v| fmt_f64(v)));
                    rows.push(row);
                }
                for (k, eps) in c.adaptation_trace.iter().enumerate() {
                    trace.push(vec![c.chain_id.to_string(), k.to_string(), fmt_f64(*eps)]);
                }
            }
            a.csv(dir.join("hmc_ensemble.csv"), &header, &rows)?;
            a.csv(dir.join("hmc_adaptation.csv"), &["chain_id", "iteration", "step_size"].map(String::from), &trace)?;
            let details = serde_json::json!({
                "sigma_r_sq": s,
                "sampler": "hmc with fixed leapfrog count and dual-averaging step size (no NUTS)",
                "step_sizes": run.chains.iter().map(|c| c.adapted_step_size).collect::<Vec<_>>(),
                "acceptance_rates": run.chains.iter().map(|c| c.acceptance_rate()).collect::<Vec<_>>(),
                "n_divergent": run.chains.iter().map(|c| c.n_divergent).collect::<Vec<_>>(),
                "split_r_hat": run.r_hat.iter().map(|v| if v.is_finite() { Some(*v) } else { None }).collect::<Vec<_>>(),
            });
            self.manifest(a, dir.join("hmc.json"), "sample-hmc", details.clone())?;
            runs.push(details);
        }
        self.manifest(a, "sample_hmc.json", "sample-hmc", serde_json::json!({ "runs": runs }))
    }

    fn diagnose(&self, a: &mut Artifacts, warnings: &mut Vec<String>) -> Result<()> {
        match self.config.problem {
            ProblemKind::Linear => self.diagnose_linear(a, warnings),
            ProblemKind::Darcy => self.diagnose_darcy(a, warnings),
        }
    }

    fn ensemble_path(&self, s: f64, sampler: &str) -> PathBuf {
        self.path(Path::new(&sigma_label(s)).join(format!("{sampler}_ensemble.csv")))
    }

    fn diagnose_darcy(&self, a: &mut Artifacts, warnings: &mut Vec<String>) -> Result<()> {
        let cfg = &self.config;
        let ctx = self.load_darcy()?;
        let model = &ctx.model;
        let mut any = false;
        for &sampler in cfg.sampler.names() {
            let mut table = Vec::new();
            for &s in &cfg.sigma_r_sq_grid {
                let path = self.ensemble_path(s, sampler);
                if !path.exists() {
                    warnings.push(format!("{sampler} ensemble for sigma_r_sq={s:e} not found; skipped"));
                    continue;
                }
                any = true;
                let ens = read_ensemble(&path)?;
                let params = LossParams::new(s);
                let map = match self.load_map(s) {
                    Some(r) => r.coefficients(),
                    None => map_optimize(model, &params, &CoefficientPair::zeros(model.n_xi(), model.n_eta()), &cfg.optimizer)?.z,
                };
                let (spectrum, condition) = match laplace_posterior(model, &params, &map) {
                    Ok(l) => (l.spectrum.as_slice().to_vec(), Some(l.condition_number)),
                    Err(e) => {
                        warnings.push(format!("Laplace approximation at sigma_r_sq={s:e}: {e}"));
                        (Vec::new(), None)
                    }
                };
                let acceptance = self.acceptance_rate(s, sampler);
                let dir = PathBuf::from(sigma_label(s));
                if ens.xi.len() < 2 {
                    warnings.push(format!(
                        "{sampler} ensemble at sigma_r_sq={s:e} has {} usable sample(s); moments undefined",
                        ens.xi.len()
                    ));
                    let report = serde_json::json!({
                        "sampler": sampler,
                        "sigma_r_sq": s,
                        "n_samples": ens.xi.len(),
                        "moments_defined": false,
                        "laplace_spectrum": spectrum,
                        "condition_number": condition,
                    });
                    a.json(dir.join(format!("report_{sampler}.json")), "diagnostics_report", &report)?;
                    table.push(vec![fmt_f64(s), ens.xi.len().to_string(), String::new(), String::new(), String::new(), String::new(), String::new(), String::new(), opt_f64(condition), opt_f64(acceptance)]);
                    continue;
                }
                let y_fields: Vec<DVector<f64>> = ens.xi.iter().map(|x| model.y_basis.eval(x)).collect::<Result<_>>()?;
                let u_fields: Vec<DVector<f64>> = ens.eta.iter().map(|e| model.u_basis.eval(e)).collect::<Result<_>>()?;
                let (ym, ys) = field_moments(&y_fields);
                let (um, us) = field_moments(&u_fields);
                let level = cfg.diagnostics.coverage_level;
                let lpp_value = match lpp(&ym, &ys, &ctx.case.y_ref, None) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        warnings.push(format!("LPP at sigma_r_sq={s:e}: {e}"));
                        None
                    }
                };
                let cov = coverage(&ym, &ys, &ctx.case.y_ref, level)?;
                let qcov = quantile_coverage(&y_fields, &ctx.case.y_ref, level)?;
                let (rel, inf) = error_norms(&ym, &ctx.case.y_ref)?;
                let (urel, uinf) = error_norms(&um, &ctx.case.u_ref)?;
                let curves = self.curves(&ens)?;
                let report = DiagnosticsReport {
                    sampler: sampler.into(),
                    sigma_r_sq: s,
                    n_samples: ens.xi.len(),
                    mean_field: ym.as_slice().to_vec(),
                    std_field: ys.as_slice().to_vec(),
                    lpp: lpp_value,
                    coverage: cov,
                    quantile_coverage: Some(qcov),
                    rel_l2: rel,
                    l_inf: inf,
                    u_rel_l2: Some(urel),
                    u_l_inf: Some(uinf),
                    laplace_spectrum: spectrum.clone(),
                    condition_number: condition,
                    acceptance_rate: acceptance,
                    convergence_curves: curves.clone(),
                };
                a.json(dir.join(format!("report_{sampler}.json")), "diagnostics_report", &report)?;
                a.csv(
                    dir.join(format!("fields_{sampler}.csv")),
                    &["cell_index", "x", "y", "y_mean", "y_std", "u_mean", "u_std", "y_ref", "u_ref"].map(String::from),
                    &field_rows(
                        &model.mesh.cell_centers,
                        &[ym.as_slice(), ys.as_slice(), um.as_slice(), us.as_slice(), ctx.case.y_ref.as_slice(), ctx.case.u_ref.as_slice()],
                    ),
                )?;
                a.csv(
                    dir.join("laplace_spectrum.csv"),
                    &["index", "covariance_eigenvalue"].map(String::from),
                    &spectrum.iter().enumerate().map(|(k, v)| vec![k.to_string(), fmt_f64(*v)]).collect::<Vec<_>>(),
                )?;
                self.write_curves(a, dir.join(format!("convergence_{sampler}.csv")), &curves)?;
                table.push(vec![
                    fmt_f64(s),
                    ens.xi.len().to_string(),
                    opt_f64(lpp_value),
                    fmt_f64(cov),
                    fmt_f64(rel),
                    fmt_f64(inf),
                    fmt_f64(urel),
                    fmt_f64(uinf),
                    opt_f64(condition),
                    opt_f64(acceptance),
                ]);
            }
            a.csv(
                format!("diagnostics_{sampler}.csv"),
                &["sigma_r_sq", "n_samples", "lpp", "coverage", "y_rel_l2", "y_l_inf", "u_rel_l2", "u_l_inf", "condition_number", "acceptance_rate"]
                    .map(String::from),
                &table,
            )?;
        }
        if !any {
            return Err(Error::invalid("diagnose: no ensembles found; run a sampling stage first"));
        }
        self.manifest(a, "diagnose.json", "diagnose", serde_json::json!({ "warnings": warnings }))
    }

    fn diagnose_linear(&self, a: &mut Artifacts, warnings: &mut Vec<String>) -> Result<()> {
        let cfg = &self.config;
        let lm = self.load_linear()?;
        let mut any = false;
        for &sampler in cfg.sampler.names() {
            let mut table = Vec::new();
            for &s in &cfg.sigma_r_sq_grid {
                let path = self.ensemble_path(s, sampler);
                if !path.exists() {
                    warnings.push(format!("{sampler} ensemble for sigma_r_sq={s:e} not found; skipped"));
                    continue;
                }
                any = true;
                let ens = read_ensemble(&path)?;
                let (mu, sigma) = linear_oracle(&lm, &LossParams::new(s))?;
                let samples = ens.stacked();
                if samples.len() < 2 {
                    warnings.push(format!(
                        "{sampler} ensemble at sigma_r_sq={s:e} has {} usable sample(s); moments undefined",
                        samples.len()
                    ));
                    table.push(vec![fmt_f64(s), samples.len().to_string(), String::new(), String::new()]);
                    continue;
                }
                let (mean, cov) = sample_covariance(&samples);
                let n = samples.len() as f64;
                let worst = (0..mu.len())
                    .map(|k| (mean[k] - mu[k]).abs() / (sigma[(k, k)] / n).sqrt())
                    .fold(0.0f64, f64::max);
                let cov_err = rel_frobenius(&cov, &sigma);
                let curves = self.curves(&ens)?;
                let dir = PathBuf::from(sigma_label(s));
                a.json(
                    dir.join(format!("report_{sampler}.json")),
                    "linear_diagnostics_report",
                    &serde_json::json!({
                        "sampler": sampler,
                        "sigma_r_sq": s,
                        "n_samples": samples.len(),
                        "sample_mean": mean.as_slice(),
                        "oracle_mean": mu.as_slice(),
                        "max_mean_standard_errors": worst,
                        "covariance_rel_frobenius": cov_err,
                        "convergence_curves": curves,
                    }),
                )?;
                table.push(vec![fmt_f64(s), samples.len().to_string(), fmt_f64(worst), fmt_f64(cov_err)]);
            }
            a.csv(
                format!("diagnostics_{sampler}.csv"),
                &["sigma_r_sq", "n_samples", "max_mean_standard_errors", "covariance_rel_frobenius"].map(String::from),
                &table,
            )?;
        }
        if !any {
            return Err(Error::invalid("diagnose: no ensembles found; run a sampling stage first"));
        }
        self.manifest(a, "diagnose.json", "diagnose", serde_json::json!({ "warnings": warnings }))
    }

    fn acceptance_rate(&self, s: f64, sampler: &str) -> Option<f64> {
        let p = self.path(Path::new(&sigma_label(s)).join(format!("{sampler}.json")));
        let v: serde_json::Value = read_json::<serde_json::Value>(&p).ok()?.data;
        match sampler {
            "rpickle" => v["acceptance_rate"].as_f64(),
            _ => {
                let rates: Vec<f64> = v["acceptance_rates"].as_array()?.iter().filter_map(|x| x.as_f64()).collect();
                (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
            }
        }
    }

    fn curves(&self, ens: &EnsembleTable) -> Result<Vec<CoordinateCurve>> {
        let n = ens.xi.len();
        let k = self.config.diagnostics.convergence_coordinates.min(ens.xi.first().map_or(0, |x| x.len()));
        (0..k)
            .map(|c| {
                let series: Vec<f64> = ens.xi.iter().map(|x| x[c]).collect();
                Ok(CoordinateCurve {
                    coordinate: c,
                    curve: convergence_ratios(&series, n)?,
                })
            })
            .collect()
    }

    fn write_curves(&self, a: &mut Artifacts, rel: PathBuf, curves: &[CoordinateCurve]) -> Result<()> {
        let mut header = vec!["m".to_string()];
        for c in curves {
            header.push(format!("xi_{}_mean_ratio", c.coordinate));
            header.push(format!("xi_{}_std_ratio", c.coordinate));
        }
        let len = curves
            .iter()
            .flat_map(|c| [c.curve.mean_ratio.as_ref(), c.curve.std_ratio.as_ref()])
            .flatten()
            .map(Vec::len)
            .max()
            .unwrap_or(0);
        let cell = |s: &Option<Vec<f64>>, m: usize| s.as_ref().map_or(String::new(), |v| fmt_f64(v[m]));
        let rows: Vec<Vec<String>> = (0..len)
            .map(|m| {
                let mut row = vec![(m + 1).to_string()];
                for c in curves {
                    let ConvergenceCurve { mean_ratio, std_ratio } = &c.curve;
                    row.push(cell(mean_ratio, m));
                    row.push(cell(std_ratio, m));
                }
                row
            })
            .collect();
        a.csv(rel, &header, &rows)
    }

    fn oracle_check(&self, a: &mut Artifacts) -> Result<bool> {
        let cfg = &self.config;
        let report = run_oracle_suite(&cfg.linear, &cfg.oracle, &cfg.optimizer, cfg.seed)?;
        a.json("oracle_check.json", "oracle_report", &report)?;
        a.csv(
            "oracle_check.csv",
            &["check", "value", "tolerance", "passed"].map(String::from),
            &report
                .checks
                .iter()
                .map(|c| vec![c.name.clone(), fmt_f64(c.value), fmt_f64(c.tolerance), c.passed.to_string()])
                .collect::<Vec<_>>(),
        )?;
        Ok(report.passed)
    }
}

fn observation_rows(obs: &Observations<f64>) -> Vec<Vec<String>> {
    (0..obs.len())
        .map(|k| {
            vec![
                obs.cell_indices[k].to_string(),
                fmt_f64(obs.locations[k][0]),
                fmt_f64(obs.locations[k][1]),
                fmt_f64(obs.values[k]),
            ]
        })
        .collect()
}

fn rpickle_header<M: ResidualModel<f64>>(model: &M) -> Vec<String> {
    let mut h: Vec<String> = [
        "sample",
        "source_index",
        "seed",
        "accepted",
        "converged",
        "usable",
        "loss",
        "grad_norm",
        "iterations",
        "log_det_j",
    ]
    .map(String::from)
    .to_vec();
    h.extend(coefficient_header(model.n_xi(), model.n_eta()));
    h
}

fn rpickle_rows(ens: &PosteriorEnsemble<f64>) -> Vec<Vec<String>> {
    ens.samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut row = vec![
                k.to_string(),
                s.source_index.to_string(),
                s.seed.to_string(),
                s.accepted.to_string(),
                s.optimizer_converged.to_string(),
                s.is_usable().to_string(),
                fmt_f64(s.loss),
                fmt_f64(s.grad_norm),
                s.iterations.to_string(),
                opt_f64(s.log_det_j),
            ];
            push_coefficients(&mut row, &s.z_star);
            row
        })
        .collect()
}

/// Dense covariance of coefficient draws, exposed for reports.
pub fn coefficient_covariance(samples: &[DVector<f64>]) -> DMatrix<f64> {
    sample_covariance(samples).1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn darcy_json() -> String {
        r#"{
            "seed": 3,
            "mesh": {"nx": 4, "ny": 4, "lx": 1.0, "ly": 1.0,
                     "bc_values": {"west": 1.0, "east": 0.0, "south": 0.0, "north": 0.0}},
            "observations": {"n_y_obs": 5, "n_u_obs": 5},
            "truncation": {"n_xi": 3, "n_eta": 3},
            "n_mc": 50,
            "rpickle": {"n_ens": 20}
        }"#
        .to_string()
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = RunConfig::from_json(&darcy_json()).unwrap();
        assert_eq!(cfg.sigma_r_sq_grid, vec![1e-2]);
        assert_eq!(cfg.hmc.n_chains, 3);
        let missing = darcy_json().replace(r#""west": 1.0, "#, "");
        let err = RunConfig::from_json(&missing).unwrap_err().to_string();
        assert!(err.contains("mesh.bc_values") && err.contains("west"), "{err}");
        let neumann_only = darcy_json().replace(
            r#""lx": 1.0,"#,
            r#""lx": 1.0, "sides": {"west": "neumann", "east": "neumann", "south": "neumann", "north": "neumann"},"#,
        );
        let err = RunConfig::from_json(&neumann_only).unwrap_err().to_string();
        assert!(err.contains("mesh.sides"), "{err}");
        assert!(RunConfig::from_json(r#"{"mesh_typo": 1}"#).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut a = RunConfig::from_json(&darcy_json()).unwrap();
        let h = a.hash().unwrap();
        a.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash().unwrap(), h);
        a.seed = 4;
        assert_ne!(a.hash().unwrap(), h);
    }

    #[test]
    fn labels() {
        assert_eq!(sigma_label(1e-2), "sigma_r_sq_1e-2");
        assert_eq!(sigma_label(0.5), "sigma_r_sq_5e-1");
    }
}
