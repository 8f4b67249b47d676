//! Plug-in and sample-split calibrated estimators of the microbial
//! correlation, and the asymptotic variance of the calibrated one.
//!
//! The calibrated estimator fits β on one half of the paired sample, γ on the
//! other, and takes Φ from an external cohort, so the three pieces are
//! mutually independent. Its variance follows from the delta method applied
//! to (β̂ᵀΦγ̂, β̂ᵀΦβ̂, γ̂ᵀΦγ̂) with Var(β̂) = σ²_ε Φ⁻¹ / n_A and
//! Var(γ̂) = σ²_δ Φ⁻¹ / n_B; Φ̂_ss is treated as fixed.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    bilinear, microbial_correlation, positive_form, CorrelationEstimate, ExternalDataset,
    PairedDataset, SmootherConfig,
};
use crate::plm::{estimate_phi_external, PhiEstimate, PlmDesign};

/// A partition of the paired rows into two halves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub seed: u64,
    pub indices_a: Vec<usize>,
    pub indices_b: Vec<usize>,
}

impl SplitPlan {
    /// Uniformly random halves; half A gets ⌊n/2⌋ rows.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let indices_b = idx.split_off(n / 2);
        let mut indices_a = idx;
        indices_a.sort_unstable();
        let mut indices_b = indices_b;
        indices_b.sort_unstable();
        Self {
            seed,
            indices_a,
            indices_b,
        }
    }

    pub fn from_indices(
        n: usize,
        seed: u64,
        indices_a: Vec<usize>,
        indices_b: Vec<usize>,
    ) -> Result<Self> {
        let plan = Self {
            seed,
            indices_a,
            indices_b,
        };
        plan.validate(n)?;
        Ok(plan)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.indices_a.iter().chain(&self.indices_b) {
            if i >= n || seen[i] {
                return Err(Error::InvalidConfig(format!(
                    "split index {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidConfig(
                "split does not cover every row".into(),
            ));
        }
        if self.indices_a.len().abs_diff(self.indices_b.len()) > 1 {
            return Err(Error::InvalidConfig(format!(
                "split halves have sizes {} and {}",
                self.indices_a.len(),
                self.indices_b.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub(crate) fn select(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |i, _| v[rows[i]])
}

/// R̂ from full-sample Φ̂, β̂ and γ̂. Carries no standard error.
pub fn estimate_r_plugin(
    data: &PairedDataset,
    config: &SmootherConfig,
) -> Result<CorrelationEstimate> {
    let fits = FullSampleFit::new(data, config)?;
    fits.plugin_estimate()
}

/// Full-sample quantities: Φ̂, β̂, γ̂ and the residual variances. They give the
/// plug-in estimate and the inputs to σ̂²_{R̂_ss}.
#[derive(Debug, Clone)]
pub struct FullSampleFit {
    pub phi: PhiEstimate,
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub sigma2_eps: f64,
    pub sigma2_delta: f64,
    pub n: usize,
}

impl FullSampleFit {
    pub fn new(data: &PairedDataset, config: &SmootherConfig) -> Result<Self> {
        let design = PlmDesign::new(data.x(), data.z(), config)?;
        Self::from_design(&design, data.y(), data.w())
    }

    pub fn from_design(design: &PlmDesign, y: &DVector<f64>, w: &DVector<f64>) -> Result<Self> {
        let fy = design.fit(y)?;
        let fw = design.fit(w)?;
        Ok(Self {
            phi: design.phi().clone(),
            beta: fy.coefficients,
            gamma: fw.coefficients,
            sigma2_eps: fy.residual_variance,
            sigma2_delta: fw.residual_variance,
            n: design.n(),
        })
    }

    pub fn plugin_estimate(&self) -> Result<CorrelationEstimate> {
        Ok(CorrelationEstimate {
            r_hat: microbial_correlation(&self.beta, &self.gamma, &self.phi.matrix)?,
            std_err: None,
            n_effective: self.phi.retained_count,
            split_seed: None,
            phi_condition_number: self.phi.condition_number(),
        })
    }

    /// σ̂²_{R̂_ss} for halves of sizes `n_a` and `n_b`.
    pub fn sigma2_calibrated(&self, n_a: usize, n_b: usize) -> Result<f64> {
        sigma_r_with_halves(
            &self.beta,
            &self.gamma,
            &self.phi.matrix,
            self.sigma2_eps,
            self.sigma2_delta,
            self.n,
            n_a,
            n_b,
        )
    }
}

/// R̂_ss from independent halves and an external Φ̂_ss, with std_err from the
/// full-sample plug-in quantities.
pub fn estimate_r_calibrated(
    data: &PairedDataset,
    external: &ExternalDataset,
    config: &SmootherConfig,
    split: &SplitPlan,
) -> Result<CorrelationEstimate> {
    external.check_conforms(data)?;
    config.validate(data.q())?;
    let phi_ss = estimate_phi_external(external.x(), external.z(), config)?;
    let full = FullSampleFit::new(data, config)?;
    calibrated_with(data, &phi_ss, &full, config, split)
}

/// Calibrated estimate reusing a precomputed Φ̂_ss and full-sample fit; this
/// is the path taken by repeated splits and pairwise analyses.
pub fn calibrated_with(
    data: &PairedDataset,
    phi_ss: &PhiEstimate,
    full: &FullSampleFit,
    config: &SmootherConfig,
    split: &SplitPlan,
) -> Result<CorrelationEstimate> {
    let (beta, gamma) = split_coefficients(data, config, split)?;
    assemble_calibrated(&beta, &gamma, phi_ss, full, split)
}

/// R̂_ss and its standard error from half-sample coefficients already in hand.
pub fn assemble_calibrated(
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    phi_ss: &PhiEstimate,
    full: &FullSampleFit,
    split: &SplitPlan,
) -> Result<CorrelationEstimate> {
    let r_hat = calibrated_ratio(beta, gamma, &phi_ss.matrix)?;
    let sigma2 = full.sigma2_calibrated(split.indices_a.len(), split.indices_b.len())?;
    Ok(CorrelationEstimate {
        r_hat,
        std_err: Some((sigma2 / full.n as f64).sqrt()),
        n_effective: full.n,
        split_seed: Some(split.seed),
        phi_condition_number: phi_ss.condition_number(),
    })
}

/// β̂_ss from half A on y and γ̂_ss from half B on w.
pub fn split_coefficients(
    data: &PairedDataset,
    config: &SmootherConfig,
    split: &SplitPlan,
) -> Result<(DVector<f64>, DVector<f64>)> {
    split.validate(data.n())?;
    let half = |rows: &[usize], outcome: &DVector<f64>| -> Result<DVector<f64>> {
        let design = PlmDesign::new(
            &select_rows(data.x(), rows),
            &select_rows(data.z(), rows),
            config,
        )?;
        Ok(design.fit(&select(outcome, rows))?.coefficients)
    };
    let beta = half(&split.indices_a, data.y())?;
    let gamma = half(&split.indices_b, data.w())?;
    Ok((beta, gamma))
}

/// β̂ᵀΦγ̂ / √(β̂ᵀΦβ̂ · γ̂ᵀΦγ̂) with Φ = Φ̂_ss.
pub fn calibrated_ratio(
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    phi_ss: &DMatrix<f64>,
) -> Result<f64> {
    microbial_correlation(beta, gamma, phi_ss)
}

/// Asymptotic variance of √n(R̂_ss − R) for equal halves (each of size n/2).
pub fn sigma_r(
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    phi: &DMatrix<f64>,
    sigma2_eps: f64,
    sigma2_delta: f64,
) -> Result<f64> {
    sigma_r_scaled(beta, gamma, phi, sigma2_eps, sigma2_delta, 2.0, 2.0)
}

/// As [`sigma_r`] with the exact half sizes: n·Var(β̂) = (n / n_a) σ²_ε Φ⁻¹.
#[allow(clippy::too_many_arguments)]
pub fn sigma_r_with_halves(
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    phi: &DMatrix<f64>,
    sigma2_eps: f64,
    sigma2_delta: f64,
    n: usize,
    n_a: usize,
    n_b: usize,
) -> Result<f64> {
    if n_a == 0 || n_b == 0 {
        return Err(Error::InvalidConfig("empty split half".into()));
    }
    let ka = n as f64 / n_a as f64;
    let kb = n as f64 / n_b as f64;
    sigma_r_scaled(beta, gamma, phi, sigma2_eps, sigma2_delta, ka, kb)
}

/// Covariance blocks Σ_ij of √n·(S₁, S₂, S₃) with S₁ = β̂ᵀΦγ̂,
/// S₂ = β̂ᵀΦβ̂, S₃ = γ̂ᵀΦγ̂, where n·Var(β̂) = ka·σ²_ε Φ⁻¹ and
/// n·Var(γ̂) = kb·σ²_δ Φ⁻¹.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaBlocks {
    pub s11: f64,
    pub s22: f64,
    pub s33: f64,
    pub s12: f64,
    pub s13: f64,
    pub s23: f64,
}

impl SigmaBlocks {
    pub fn new(bb: f64, gg: f64, bg: f64, ve: f64, vd: f64) -> Self {
        Self {
            s11: ve * gg + vd * bb,
            s22: 4.0 * ve * bb,
            s33: 4.0 * vd * gg,
            s12: 2.0 * ve * bg,
            s13: 2.0 * vd * bg,
            s23: 0.0,
        }
    }
}

fn sigma_r_scaled(
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    phi: &DMatrix<f64>,
    sigma2_eps: f64,
    sigma2_delta: f64,
    ka: f64,
    kb: f64,
) -> Result<f64> {
    let p = beta.len();
    if gamma.len() != p || phi.nrows() != p || phi.ncols() != p {
        return Err(Error::Dimension(
            "beta, gamma and phi are not conformable".into(),
        ));
    }
    if !(sigma2_eps >= 0.0 && sigma2_delta >= 0.0) {
        return Err(Error::InvalidConfig(
            "noise variances must be nonnegative".into(),
        ));
    }
    let bb = positive_form(beta, phi)?;
    let gg = positive_form(gamma, phi)?;
    let bg = bilinear(beta, phi, gamma);
    let s = SigmaBlocks::new(bb, gg, bg, ka * sigma2_eps, kb * sigma2_delta);
    let v = s.s11 / (gg * bb)
        + bg * bg / (4.0 * bb.powi(3) * gg) * s.s22
        + bg * bg / (4.0 * gg.powi(3) * bb) * s.s33
        - bg / (bb * bb * gg) * s.s12
        - bg / (bb * gg * gg) * s.s13
        + bg * bg / (2.0 * bb * bb * gg * gg) * s.s23;
    // exact zero at |R| = 1; cancellation can leave a tiny negative
    let scale = s.s11 / (gg * bb);
    if v < 0.0 && v > -1e-9 * scale.max(f64::MIN_POSITIVE) {
        return Ok(0.0);
    }
    if !(v >= 0.0) {
        return Err(Error::InternalConsistency(format!("negative variance {v}")));
    }
    Ok(v)
}
