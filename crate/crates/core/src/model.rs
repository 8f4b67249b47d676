//! Shared domain types and the closed-form correlation measures.
//!
//! Every estimator in the crate consumes or produces the types defined here.
//! All of them are plain values: once constructed they are never mutated.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Round-off allowance before a correlation outside [-1, 1] is treated as a bug.
pub const CLAMP_SLACK: f64 = 1e-12;

/// Relative positivity tolerance for βᵀΦβ, scaled by trace(Φ)·‖β‖².
pub const POSITIVITY_TOL: f64 = 1e-12;

fn check_finite(block: &'static str, m: &DMatrix<f64>) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite {
                    block,
                    row: r,
                    col: c,
                });
            }
        }
    }
    Ok(())
}

fn check_finite_vec(block: &'static str, v: &DVector<f64>) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(row) => Err(Error::NonFinite { block, row, col: 0 }),
        None => Ok(()),
    }
}

/// Paired microbiome–metabolome data: confounders `z` (n × q), log-ratio
/// abundances `x` (n × p) and two metabolite outcomes `y`, `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    w: DVector<f64>,
}

impl PairedDataset {
    pub fn new(z: DMatrix<f64>, x: DMatrix<f64>, y: DVector<f64>, w: DVector<f64>) -> Result<Self> {
        let n = z.nrows();
        if n == 0 {
            return Err(Error::Dimension("paired dataset has no rows".into()));
        }
        if x.nrows() != n || y.len() != n || w.len() != n {
            return Err(Error::Dimension(format!(
                "row counts differ: z {}, x {}, y {}, w {}",
                n,
                x.nrows(),
                y.len(),
                w.len()
            )));
        }
        if z.ncols() == 0 || x.ncols() == 0 {
            return Err(Error::Dimension("need q >= 1 and p >= 1".into()));
        }
        check_finite("z", &z)?;
        check_finite("x", &x)?;
        check_finite_vec("y", &y)?;
        check_finite_vec("w", &w)?;
        Ok(Self { z, x, y, w })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.z.ncols()
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn w(&self) -> &DVector<f64> {
        &self.w
    }

    /// Same covariates and abundances with the two outcomes exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            z: self.z.clone(),
            x: self.x.clone(),
            y: self.w.clone(),
            w: self.y.clone(),
        }
    }

    /// Same covariates and abundances with new outcomes.
    pub fn with_outcomes(&self, y: DVector<f64>, w: DVector<f64>) -> Result<Self> {
        Self::new(self.z.clone(), self.x.clone(), y, w)
    }

    pub fn covariates_only(&self) -> ExternalDataset {
        ExternalDataset {
            z: self.z.clone(),
            x: self.x.clone(),
        }
    }
}

/// A covariate-and-abundance cohort without metabolite measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalDataset {
    z: DMatrix<f64>,
    x: DMatrix<f64>,
}

impl ExternalDataset {
    pub fn new(z: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::Dimension("external dataset has no rows".into()));
        }
        if x.nrows() != z.nrows() {
            return Err(Error::Dimension(format!(
                "external row counts differ: z {}, x {}",
                z.nrows(),
                x.nrows()
            )));
        }
        if z.ncols() == 0 || x.ncols() == 0 {
            return Err(Error::Dimension("need q >= 1 and p >= 1".into()));
        }
        check_finite("external z", &z)?;
        check_finite("external x", &x)?;
        Ok(Self { z, x })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.z.ncols()
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn check_conforms(&self, paired: &PairedDataset) -> Result<()> {
        if self.p() != paired.p() || self.q() != paired.q() {
            return Err(Error::Dimension(format!(
                "external cohort has p = {}, q = {}; paired cohort has p = {}, q = {}",
                self.p(),
                self.q(),
                paired.p(),
                paired.q()
            )));
        }
        Ok(())
    }
}

/// Multiplier on the standard-normal peak density used for the default paired
/// cutoff.
///
/// The admissible rates only fix exponents; a cutoff of `n^{-1/24}` without a
/// scale would exceed any density of standardized covariates and truncate
/// every subject.
pub const DEFAULT_CUTOFF_SCALE: f64 = 0.25;

/// Same, for the external cohort.
pub const DEFAULT_EXTERNAL_CUTOFF_SCALE: f64 = 0.05;

/// Multiplier on the default paired bandwidth rate, for standardized covariates.
pub const DEFAULT_BANDWIDTH_SCALE: f64 = 1.0;

/// Multiplier on the default external bandwidth rate. The external cohort only
/// feeds Φ̂_ss, where smoothing bias enters every coordinate with the same sign,
/// so it gets a narrower window than the paired halves.
pub const DEFAULT_EXTERNAL_BANDWIDTH_SCALE: f64 = 0.5;

/// Kernel order used when none is given. With m = 2 the half-sample smoothing
/// bias of β̂ and γ̂ forces bandwidths small enough that the split estimator's
/// spread exceeds its plug-in standard error; a fourth-order kernel removes
/// the leading bias term and allows the wider window.
pub const DEFAULT_KERNEL_ORDER: usize = 4;

/// Kernel order, bandwidths and density cutoffs for the paired (`bandwidth`,
/// `cutoff`) and external (`external_bandwidth`, `external_cutoff`) cohorts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    pub kernel_order: usize,
    pub bandwidth: f64,
    pub cutoff: f64,
    pub external_bandwidth: f64,
    pub external_cutoff: f64,
    /// Drop the j = i term from every kernel sum.
    #[serde(default)]
    pub leave_one_out: bool,
}

impl SmootherConfig {
    pub fn validate(&self, q: usize) -> Result<()> {
        let m = self.kernel_order;
        if m < 2 || !m.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel order must be even and >= 2, got {m}"
            )));
        }
        if 2 * m <= q {
            return Err(Error::InvalidConfig(format!(
                "kernel order {m} must exceed q/2 = {}",
                q as f64 / 2.0
            )));
        }
        for (name, v) in [
            ("bandwidth", self.bandwidth),
            ("cutoff", self.cutoff),
            ("external_bandwidth", self.external_bandwidth),
            ("external_cutoff", self.external_cutoff),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Default rates for paired size `n`, external size `big_n`, `q`
    /// standardized covariates and kernel order `m`.
    pub fn default_schedule(n: usize, big_n: usize, q: usize, m: usize) -> Self {
        let (alpha_a, alpha_b) = paired_rate_exponents(q, m);
        let (alpha_ass, alpha_bss) = external_rate_exponents(q, m);
        let peak = (2.0 * std::f64::consts::PI).powf(-(q as f64) / 2.0);
        let n = n.max(2) as f64;
        let big_n = big_n.max(2) as f64;
        Self {
            kernel_order: m,
            bandwidth: DEFAULT_BANDWIDTH_SCALE * n.powf(-alpha_a),
            cutoff: DEFAULT_CUTOFF_SCALE * peak * n.powf(-alpha_b),
            external_bandwidth: DEFAULT_EXTERNAL_BANDWIDTH_SCALE * big_n.powf(-alpha_ass),
            external_cutoff: DEFAULT_EXTERNAL_CUTOFF_SCALE * peak * big_n.powf(-alpha_bss),
            leave_one_out: false,
        }
    }
}

/// Exponents (α_a, α_b) with a = n^{-α_a}, b = n^{-α_b}, chosen inside the
/// region where n·a^{2q}·b⁴ → ∞, n·a^{4m}·b⁻⁴ → 0, a^m·b⁻² → 0 and b → 0.
///
/// For q = 2 this returns the worked pair (1/6, 1/24), which stays inside the
/// region for every m ≥ 2.
pub fn paired_rate_exponents(q: usize, m: usize) -> (f64, f64) {
    if q == 2 && m >= 2 {
        return (1.0 / 6.0, 1.0 / 24.0);
    }
    let (q, m) = (q as f64, m as f64);
    // largest α_b for which the α_a interval is nonempty, then halve it
    let alpha_b_max = (4.0 * m - 2.0 * q) / (8.0 * q + 16.0 * m);
    let alpha_b = 0.5 * alpha_b_max.max(0.0);
    let lower = ((1.0 + 4.0 * alpha_b) / (4.0 * m)).max(2.0 * alpha_b / m);
    let upper = (1.0 - 4.0 * alpha_b) / (2.0 * q);
    (0.5 * (lower + upper), alpha_b)
}

/// Exponents (α_a, α_b) for the external cohort, a_ss = N^{-α_a}, b_ss = N^{-α_b}.
///
/// For q = 2 this is (1/5, 1/20).
pub fn external_rate_exponents(q: usize, m: usize) -> (f64, f64) {
    if q == 2 && m >= 2 {
        return (0.2, 0.05);
    }
    let (q, m) = (q as f64, m as f64);
    let lower = 1.0 / (4.0 * m);
    let upper = 1.0 / (2.0 * q);
    let alpha_a = if lower < upper {
        0.5 * (lower + upper)
    } else {
        upper
    };
    let alpha_b = ((1.0 - 2.0 * q * alpha_a) / 8.0).max(0.0);
    (alpha_a, alpha_b)
}

/// Output of a truncated partially-linear fit for one outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct PLMFit {
    pub coefficients: DVector<f64>,
    pub residual_variance: f64,
    pub retained_count: usize,
    /// ĥ_o(z_i) for the outcome at every sample.
    pub fitted_confounder_effect: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub r_hat: f64,
    /// σ̂/√n; `None` for the plug-in estimator, which has no usable limit law.
    pub std_err: Option<f64>,
    pub n_effective: usize,
    pub split_seed: Option<u64>,
    pub phi_condition_number: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRow {
    pub metabolite_1: String,
    pub metabolite_2: String,
    pub r_median: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub significant: bool,
    pub n_splits: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResultTable {
    pub rows: Vec<PairwiseRow>,
}

impl PairwiseResultTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
    pub fn significant(&self) -> impl Iterator<Item = &PairwiseRow> {
        self.rows.iter().filter(|r| r.significant)
    }
}

/// uᵀ M v
pub fn bilinear(u: &DVector<f64>, m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    u.dot(&(m * v))
}

fn check_conformable(beta: &DVector<f64>, gamma: &DVector<f64>, phi: &DMatrix<f64>) -> Result<()> {
    let p = beta.len();
    if gamma.len() != p || phi.nrows() != p || phi.ncols() != p {
        return Err(Error::Dimension(format!(
            "beta {}, gamma {}, phi {}x{}",
            p,
            gamma.len(),
            phi.nrows(),
            phi.ncols()
        )));
    }
    Ok(())
}

/// Checks βᵀΦβ against the scale-free positivity tolerance and returns it.
pub(crate) fn positive_form(v: &DVector<f64>, phi: &DMatrix<f64>) -> Result<f64> {
    let value = bilinear(v, phi, v);
    let tolerance = POSITIVITY_TOL * phi.trace().abs() * v.norm_squared();
    if !(value > tolerance) {
        return Err(Error::DegenerateDirection { value, tolerance });
    }
    Ok(value)
}

pub(crate) fn clamp_correlation(r: f64) -> Result<f64> {
    if !r.is_finite() {
        return Err(Error::InternalConsistency(format!("correlation is {r}")));
    }
    if r.abs() <= 1.0 {
        Ok(r)
    } else if r.abs() <= 1.0 + CLAMP_SLACK {
        Ok(r.signum())
    } else {
        Err(Error::InternalConsistency(format!(
            "correlation {r} lies outside [-1, 1]; covariance is not PSD"
        )))
    }
}

/// βᵀΦγ / √(βᵀΦβ · γᵀΦγ): the correlation of the microbe-driven parts of two
/// outcomes when the confounder-adjusted abundances have covariance Φ.
pub fn microbial_correlation(
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    phi: &DMatrix<f64>,
) -> Result<f64> {
    check_conformable(beta, gamma, phi)?;
    let bb = positive_form(beta, phi)?;
    let gg = positive_form(gamma, phi)?;
    let bg = 0.5 * (bilinear(beta, phi, gamma) + bilinear(gamma, phi, beta));
    clamp_correlation(bg / (bb * gg).sqrt())
}

/// Cosine of the Euclidean angle between β and γ.
pub fn genetic_r1(beta: &DVector<f64>, gamma: &DVector<f64>) -> Result<f64> {
    if beta.len() != gamma.len() {
        return Err(Error::Dimension(format!(
            "beta {}, gamma {}",
            beta.len(),
            gamma.len()
        )));
    }
    let (nb, ng) = (beta.norm_squared(), gamma.norm_squared());
    if nb == 0.0 || ng == 0.0 {
        return Err(Error::ZeroVector);
    }
    clamp_correlation(beta.dot(gamma) / (nb * ng).sqrt())
}

/// Correlation of βᵀx and γᵀx under the total covariance of x (Φ + Σ),
/// ignoring confounding.
pub fn genetic_r2(
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    sigma_total: &DMatrix<f64>,
) -> Result<f64> {
    microbial_correlation(beta, gamma, sigma_total)
}
