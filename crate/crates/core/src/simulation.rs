//! Monte-Carlo study of the estimators under controlled confounding.
//!
//! Covariates are standard normal, abundances are x_ij = h_x(z_i) + τ_ij with
//! τ_i ~ N(0, Φ), and outcomes follow y = f(z) + βᵀx + ε, w = g(z) + γᵀx + δ
//! with standard normal noise. β and γ are built so that the true microbial
//! correlation is a chosen value.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{calibrated_with, FullSampleFit, SplitPlan};
use crate::error::{Error, Result};
use crate::inference::{derive_seed, median, test_statistics};
use crate::model::{
    microbial_correlation, ExternalDataset, PairedDataset, SmootherConfig, DEFAULT_KERNEL_ORDER,
};
use crate::plm::estimate_phi_external;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfounderFamily {
    Linear,
    Exponential,
    Triangular,
}

impl ConfounderFamily {
    pub const ALL: [ConfounderFamily; 3] = [Self::Linear, Self::Exponential, Self::Triangular];

    /// (h_x, f, g) evaluated at s = Σ_j z_j.
    pub fn effects(self, s: f64) -> (f64, f64, f64) {
        match self {
            Self::Linear => (s, s, s),
            Self::Exponential => {
                let e = (-0.5 * s * s).exp();
                (e, e, e)
            }
            Self::Triangular => (s.sin(), s.sin(), s.cos()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Exponential => "exponential",
            Self::Triangular => "triangular",
        }
    }
}

impl std::str::FromStr for ConfounderFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "exponential" => Ok(Self::Exponential),
            "triangular" => Ok(Self::Triangular),
            other => Err(Error::InvalidConfig(format!(
                "unknown confounder family {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiScenario {
    Identity,
    UpperTriangularD,
}

impl PhiScenario {
    pub const ALL: [PhiScenario; 2] = [Self::Identity, Self::UpperTriangularD];

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::UpperTriangularD => "upper-triangular-d",
        }
    }
}

impl std::str::FromStr for PhiScenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Self::Identity),
            "upper-triangular-d" | "dd" | "ddt" => Ok(Self::UpperTriangularD),
            other => Err(Error::InvalidConfig(format!(
                "unknown phi scenario {other}"
            ))),
        }
    }
}

fn default_p() -> usize {
    6
}
fn default_q() -> usize {
    2
}
fn default_external_factor() -> f64 {
    10.0
}
fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_external_factor")]
    pub external_factor: f64,
    pub confounder_family: ConfounderFamily,
    pub phi_scenario: PhiScenario,
    pub r0_true: f64,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Overrides the default bandwidth schedule.
    #[serde(default)]
    pub smoother: Option<SmootherConfig>,
}

impl ScenarioConfig {
    pub fn new(
        n: usize,
        family: ConfounderFamily,
        phi_scenario: PhiScenario,
        r0_true: f64,
        replications: usize,
        seed: u64,
    ) -> Self {
        Self {
            n,
            p: 6,
            q: 2,
            external_factor: 10.0,
            confounder_family: family,
            phi_scenario,
            r0_true,
            replications,
            seed,
            alpha: 0.05,
            smoother: None,
        }
    }

    pub fn external_n(&self) -> usize {
        (self.n as f64 * self.external_factor).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.replications < 1 {
            return Err(Error::InvalidConfig(
                "n and replications must be >= 1".into(),
            ));
        }
        if !(self.r0_true.abs() < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "true correlation must satisfy |R| < 1, got {}",
                self.r0_true
            )));
        }
        if self.p != 6 {
            return Err(Error::Dimension(format!(
                "controlled coefficients need p = 6, got {}",
                self.p
            )));
        }
        if self.q < 1 {
            return Err(Error::InvalidConfig("q must be >= 1".into()));
        }
        if !(self.external_factor > 0.0) || self.external_n() < 1 {
            return Err(Error::InvalidConfig(
                "external cohort would be empty".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if let Some(s) = &self.smoother {
            s.validate(self.q)?;
        }
        Ok(())
    }

    pub fn smoother_config(&self) -> SmootherConfig {
        self.smoother.unwrap_or_else(|| {
            SmootherConfig::default_schedule(
                self.n,
                self.external_n(),
                self.q,
                DEFAULT_KERNEL_ORDER,
            )
        })
    }
}

/// Upper triangular D with unit diagonal and 0.5 above it.
pub fn upper_triangular_d(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => 1.0,
        std::cmp::Ordering::Less => 0.5,
        std::cmp::Ordering::Greater => 0.0,
    })
}

pub fn build_phi(scenario: PhiScenario, p: usize) -> DMatrix<f64> {
    match scenario {
        PhiScenario::Identity => DMatrix::identity(p, p),
        PhiScenario::UpperTriangularD => {
            let d = upper_triangular_d(p);
            &d * d.transpose()
        }
    }
}

/// β, γ with microbial correlation exactly `r0` under [`build_phi`].
///
/// For Φ = DDᵀ both base vectors are mapped through D⁻ᵀ, which makes
/// βᵀΦγ equal to the Euclidean product of the base vectors.
pub fn construct_coefficients(
    r0: f64,
    scenario: PhiScenario,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(r0.abs() <= 1.0) {
        return Err(Error::InvalidConfig(format!("|r0| must be <= 1, got {r0}")));
    }
    let s3 = 3f64.sqrt();
    let base_beta = DVector::from_vec(vec![s3 / 3.0, s3 / 3.0, s3 / 3.0, 0.0, 0.0, 0.0]);
    let a = r0 / s3;
    let c = ((1.0 - r0 * r0) / 3.0).max(0.0).sqrt();
    let base_gamma = DVector::from_vec(vec![a, a, a, c, c, c]);
    match scenario {
        PhiScenario::Identity => Ok((base_beta, base_gamma)),
        PhiScenario::UpperTriangularD => {
            // solve Dᵀ v = base (Dᵀ is lower triangular)
            let dt = upper_triangular_d(6).transpose();
            let solve = |b: &DVector<f64>| {
                dt.solve_lower_triangular(b)
                    .ok_or_else(|| Error::InternalConsistency("D is singular".into()))
            };
            Ok((solve(&base_beta)?, solve(&base_gamma)?))
        }
    }
}

/// Draws, truth, and generating parameters for one replication.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub paired: PairedDataset,
    pub external: ExternalDataset,
    pub truth: f64,
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub phi: DMatrix<f64>,
}

/// Symmetric square root of a PSD matrix (negative round-off eigenvalues → 0).
fn psd_sqrt(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(phi.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

struct Draws {
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    f: DVector<f64>,
    g: DVector<f64>,
}

fn draw_block<R: Rng>(
    rows: usize,
    q: usize,
    root: &DMatrix<f64>,
    family: ConfounderFamily,
    rng: &mut R,
) -> Draws {
    let p = root.nrows();
    let mut z = DMatrix::zeros(rows, q);
    let mut x = DMatrix::zeros(rows, p);
    let mut f = DVector::zeros(rows);
    let mut g = DVector::zeros(rows);
    let mut tau = DVector::zeros(p);
    for i in 0..rows {
        for c in 0..q {
            z[(i, c)] = rng.sample::<f64, _>(StandardNormal);
        }
        for c in 0..p {
            tau[c] = rng.sample::<f64, _>(StandardNormal);
        }
        let noise = root * &tau;
        let s: f64 = z.row(i).sum();
        let (hx, fi, gi) = family.effects(s);
        for c in 0..p {
            x[(i, c)] = hx + noise[c];
        }
        f[i] = fi;
        g[i] = gi;
    }
    Draws { z, x, f, g }
}

/// Generates paired and external cohorts from explicit parameters.
#[allow(clippy::too_many_arguments)]
pub fn generate_from_parts<R: Rng>(
    n: usize,
    big_n: usize,
    q: usize,
    family: ConfounderFamily,
    phi: &DMatrix<f64>,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    rng: &mut R,
) -> Result<(PairedDataset, ExternalDataset)> {
    let root = psd_sqrt(phi);
    let d = draw_block(n, q, &root, family, rng);
    let mut y = &d.x * beta + &d.f;
    let mut w = &d.x * gamma + &d.g;
    for i in 0..n {
        y[i] += rng.sample::<f64, _>(StandardNormal);
        w[i] += rng.sample::<f64, _>(StandardNormal);
    }
    let paired = PairedDataset::new(d.z, d.x, y, w)?;
    let e = draw_block(big_n, q, &root, family, rng);
    let external = ExternalDataset::new(e.z, e.x)?;
    Ok((paired, external))
}

pub fn generate_scenario<R: Rng>(config: &ScenarioConfig, rng: &mut R) -> Result<SimulatedData> {
    config.validate()?;
    let phi = build_phi(config.phi_scenario, config.p);
    let (beta, gamma) = construct_coefficients(config.r0_true, config.phi_scenario)?;
    let truth = microbial_correlation(&beta, &gamma, &phi)?;
    let (paired, external) = generate_from_parts(
        config.n,
        config.external_n(),
        config.q,
        config.confounder_family,
        &phi,
        &beta,
        &gamma,
        rng,
    )?;
    Ok(SimulatedData {
        paired,
        external,
        truth,
        beta,
        gamma,
        phi,
    })
}

/// Generator for replication `index`: an independent ChaCha stream.
pub fn replication_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Per-replication record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub truth: f64,
    pub r_plugin: f64,
    pub r_calibrated: f64,
    pub std_err: f64,
    pub p_value: f64,
    pub rejected: bool,
}

pub fn run_one(config: &ScenarioConfig, r0_test: f64, index: usize) -> Result<ReplicationRecord> {
    let mut rng = replication_rng(config.seed, index as u64);
    let sim = generate_scenario(config, &mut rng)?;
    let smoother = config.smoother_config();
    let full = FullSampleFit::new(&sim.paired, &smoother)?;
    let r_plugin = full.plugin_estimate()?.r_hat;
    let phi_ss = estimate_phi_external(sim.external.x(), sim.external.z(), &smoother)?;
    let split = SplitPlan::random(config.n, derive_seed(rng.random(), 0));
    let est = calibrated_with(&sim.paired, &phi_ss, &full, &smoother, &split)?;
    let test = test_statistics(&est, config.n, r0_test)?;
    Ok(ReplicationRecord {
        index,
        truth: sim.truth,
        r_plugin,
        r_calibrated: est.r_hat,
        std_err: est.std_err.unwrap_or(f64::NAN),
        p_value: test.p_value,
        rejected: test.p_value < config.alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub truth: f64,
    pub r0_test: f64,
    pub completed: usize,
    pub failures: usize,
    pub rejection_rate: f64,
    /// R̂ − R for each completed replication, in replication order.
    pub biases: Vec<f64>,
    pub median_bias: f64,
    pub median_abs_bias: f64,
    pub mean_std_err: f64,
    pub sd_calibrated: f64,
    pub records: Vec<ReplicationRecord>,
}

impl ReplicationSummary {
    pub fn from_records(
        truth: f64,
        r0_test: f64,
        total: usize,
        records: Vec<ReplicationRecord>,
    ) -> Self {
        let completed = records.len();
        let biases: Vec<f64> = records.iter().map(|r| r.r_plugin - r.truth).collect();
        let abs: Vec<f64> = biases.iter().map(|b| b.abs()).collect();
        let rejections = records.iter().filter(|r| r.rejected).count();
        let k = completed.max(1) as f64;
        let mean_std_err = records.iter().map(|r| r.std_err).sum::<f64>() / k;
        let mean_rc = records.iter().map(|r| r.r_calibrated).sum::<f64>() / k;
        let var_rc = records
            .iter()
            .map(|r| (r.r_calibrated - mean_rc).powi(2))
            .sum::<f64>()
            / (completed.max(2) - 1) as f64;
        Self {
            truth,
            r0_test,
            completed,
            failures: total - completed,
            rejection_rate: rejections as f64 / k,
            median_bias: median(&biases),
            median_abs_bias: median(&abs),
            biases,
            mean_std_err,
            sd_calibrated: var_rc.sqrt(),
            records,
        }
    }
}

/// Runs every replication of `config` (in parallel) and summarizes. Failed
/// replications are counted, not fatal.
pub fn run_replications(config: &ScenarioConfig, r0_test: f64) -> Result<ReplicationSummary> {
    config.validate()?;
    if !(0.0..1.0).contains(&r0_test) {
        return Err(Error::InvalidR0(r0_test));
    }
    let truth = {
        let phi = build_phi(config.phi_scenario, config.p);
        let (b, g) = construct_coefficients(config.r0_true, config.phi_scenario)?;
        microbial_correlation(&b, &g, &phi)?
    };
    let results: Vec<Result<ReplicationRecord>> = (0..config.replications)
        .into_par_iter()
        .map(|i| run_one(config, r0_test, i))
        .collect();
    let total = results.len();
    let mut records = Vec::with_capacity(total);
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => log::warn!("replication failed: {e}"),
        }
    }
    Ok(ReplicationSummary::from_records(
        truth, r0_test, total, records,
    ))
}

/// One row of a simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub family: ConfounderFamily,
    pub phi_scenario: PhiScenario,
    pub n: usize,
    pub r_true: f64,
    pub summary: ReplicationSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationGrid {
    pub families: Vec<ConfounderFamily>,
    pub phi_scenarios: Vec<PhiScenario>,
    pub sample_sizes: Vec<usize>,
    pub r_values: Vec<f64>,
    pub r0_test: f64,
    pub replications: usize,
    pub seed: u64,
    pub alpha: f64,
    pub external_factor: f64,
    #[serde(default)]
    pub smoother: Option<SmootherConfig>,
}

impl Default for SimulationGrid {
    fn default() -> Self {
        Self {
            families: ConfounderFamily::ALL.to_vec(),
            phi_scenarios: PhiScenario::ALL.to_vec(),
            sample_sizes: vec![100, 300, 500],
            r_values: (-5..=5).map(|k| k as f64 / 10.0).collect(),
            r0_test: 0.0,
            replications: 500,
            seed: 20240501,
            alpha: 0.05,
            external_factor: 10.0,
            smoother: None,
        }
    }
}

impl SimulationGrid {
    /// Cells in a fixed order; each gets a seed derived from its position.
    pub fn cells(&self) -> Vec<ScenarioConfig> {
        let mut out = Vec::new();
        for &family in &self.families {
            for &phi in &self.phi_scenarios {
                for &n in &self.sample_sizes {
                    for &r in &self.r_values {
                        let idx = out.len() as u64;
                        let mut c = ScenarioConfig::new(
                            n,
                            family,
                            phi,
                            r,
                            self.replications,
                            derive_seed(self.seed, idx),
                        );
                        c.alpha = self.alpha;
                        c.external_factor = self.external_factor;
                        c.smoother = self.smoother;
                        out.push(c);
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.r0_test) {
            return Err(Error::InvalidR0(self.r0_test));
        }
        for c in self.cells() {
            c.validate().map_err(|e| {
                Error::InvalidConfig(format!(
                    "cell ({}, {}, n = {}, R = {}): {e}",
                    c.confounder_family.name(),
                    c.phi_scenario.name(),
                    c.n,
                    c.r0_true
                ))
            })?;
        }
        Ok(())
    }

    pub fn run(&self) -> Result<Vec<GridCell>> {
        self.validate()?;
        self.cells()
            .into_iter()
            .map(|c| {
                let summary = run_replications(&c, self.r0_test)?;
                Ok(GridCell {
                    family: c.confounder_family,
                    phi_scenario: c.phi_scenario,
                    n: c.n,
                    r_true: c.r0_true,
                    summary,
                })
            })
            .collect()
    }
}
