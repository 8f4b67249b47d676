//! Partially linear model estimation with density truncation.
//!
//! Confounder effects are removed by Nadaraya–Watson smoothing of the
//! abundances and the outcome on `z`; the slope is then the least-squares
//! coefficient of the outcome residuals on the abundance residuals, restricted
//! to subjects whose estimated covariate density exceeds the cutoff `b`. Both
//! the covariance and the cross-product carry the divisor `n`, not the number
//! of retained subjects.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernel::{KernelFunction, KernelSmoother};
use crate::model::{PLMFit, SmootherConfig};

/// Largest condition number of Φ̂ accepted for inversion.
pub const PHI_CONDITION_LIMIT: f64 = 1e10;

/// Truncated covariance of the confounder-adjusted abundances.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiEstimate {
    pub matrix: DMatrix<f64>,
    pub retained_count: usize,
    pub cutoff_used: f64,
    pub bandwidth_used: f64,
}

impl PhiEstimate {
    /// λ_max / λ_min, or +∞ when the smallest eigenvalue is not positive.
    pub fn condition_number(&self) -> f64 {
        condition_number(&self.matrix)
    }

    pub fn p(&self) -> usize {
        self.matrix.nrows()
    }

    fn factor(&self) -> Result<Cholesky<f64, Dyn>> {
        let condition = self.condition_number();
        if !(condition <= PHI_CONDITION_LIMIT) {
            return Err(Error::SingularPhi { condition });
        }
        Cholesky::new(self.matrix.clone()).ok_or(Error::SingularPhi { condition })
    }
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

fn smoother<'a>(
    z: &'a DMatrix<f64>,
    bandwidth: f64,
    kernel_order: usize,
    leave_one_out: bool,
) -> Result<KernelSmoother<'a>> {
    Ok(
        KernelSmoother::new(z, bandwidth, KernelFunction::new(kernel_order)?)?
            .leave_one_out(leave_one_out),
    )
}

/// n⁻¹ Σ_{retained} r_i r_iᵀ
fn truncated_covariance(resid: &DMatrix<f64>, retained: &[bool]) -> DMatrix<f64> {
    let n = resid.nrows();
    let p = resid.ncols();
    let mut phi = DMatrix::zeros(p, p);
    for i in (0..n).filter(|&i| retained[i]) {
        for a in 0..p {
            let ra = resid[(i, a)];
            for b in a..p {
                phi[(a, b)] += ra * resid[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            let v = phi[(a, b)] / n as f64;
            phi[(a, b)] = v;
            phi[(b, a)] = v;
        }
    }
    phi
}

fn check_rows(x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != z.nrows() {
        return Err(Error::Dimension(format!(
            "x has {} rows, z has {}",
            x.nrows(),
            z.nrows()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Dimension("no rows".into()));
    }
    Ok(())
}

/// Φ̂ with an explicit bandwidth and cutoff; used for both cohorts.
pub fn estimate_phi_with(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    bandwidth: f64,
    cutoff: f64,
    kernel_order: usize,
    leave_one_out: bool,
) -> Result<PhiEstimate> {
    check_rows(x, z)?;
    let fit = smoother(z, bandwidth, kernel_order, leave_one_out)?.fit(x)?;
    let retained: Vec<bool> = fit.density.iter().map(|&l| l > cutoff).collect();
    let retained_count = retained.iter().filter(|&&r| r).count();
    if retained_count == 0 {
        return Err(Error::AllTruncated { cutoff });
    }
    let resid = x - &fit.fitted;
    Ok(PhiEstimate {
        matrix: truncated_covariance(&resid, &retained),
        retained_count,
        cutoff_used: cutoff,
        bandwidth_used: bandwidth,
    })
}

/// Φ̂ on the paired cohort using `config.bandwidth` and `config.cutoff`.
pub fn estimate_phi(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    config: &SmootherConfig,
) -> Result<PhiEstimate> {
    config.validate(z.ncols())?;
    estimate_phi_with(
        x,
        z,
        config.bandwidth,
        config.cutoff,
        config.kernel_order,
        config.leave_one_out,
    )
}

/// Φ̂_ss on an external cohort using the external bandwidth and cutoff.
pub fn estimate_phi_external(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    config: &SmootherConfig,
) -> Result<PhiEstimate> {
    config.validate(z.ncols())?;
    estimate_phi_with(
        x,
        z,
        config.external_bandwidth,
        config.external_cutoff,
        config.kernel_order,
        config.leave_one_out,
    )
}

/// Truncated least squares of `outcome` on `x` given a previously estimated Φ̂.
pub fn fit_plm(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    outcome: &DVector<f64>,
    config: &SmootherConfig,
    phi: &PhiEstimate,
) -> Result<PLMFit> {
    check_rows(x, z)?;
    if outcome.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "outcome has {} entries, x has {} rows",
            outcome.len(),
            x.nrows()
        )));
    }
    if phi.p() != x.ncols() {
        return Err(Error::Dimension(format!(
            "phi is {0}x{0}, x has {1} columns",
            phi.p(),
            x.ncols()
        )));
    }
    config.validate(z.ncols())?;
    let chol = phi.factor()?;
    let p = x.ncols();
    let mut targets = DMatrix::zeros(x.nrows(), p + 1);
    targets.columns_mut(0, p).copy_from(x);
    targets.set_column(p, outcome);
    let fit = smoother(
        z,
        config.bandwidth,
        config.kernel_order,
        config.leave_one_out,
    )?
    .fit(&targets)?;
    let retained: Vec<bool> = fit.density.iter().map(|&l| l > config.cutoff).collect();
    let x_resid = x - fit.fitted.columns(0, p);
    let h_o = fit.fitted.column(p).into_owned();
    let o_resid = outcome - &h_o;
    solve_truncated(&x_resid, &o_resid, &retained, &chol, h_o, config.cutoff)
}

fn solve_truncated(
    x_resid: &DMatrix<f64>,
    o_resid: &DVector<f64>,
    retained: &[bool],
    chol: &Cholesky<f64, Dyn>,
    fitted_confounder_effect: DVector<f64>,
    cutoff: f64,
) -> Result<PLMFit> {
    let n = x_resid.nrows();
    let p = x_resid.ncols();
    let retained_count = retained.iter().filter(|&&r| r).count();
    if retained_count == 0 {
        return Err(Error::AllTruncated { cutoff });
    }
    let mut cross = DVector::zeros(p);
    for i in (0..n).filter(|&i| retained[i]) {
        for a in 0..p {
            cross[a] += x_resid[(i, a)] * o_resid[i];
        }
    }
    cross /= n as f64;
    let coefficients = chol.solve(&cross);
    let mut sse = 0.0;
    for i in (0..n).filter(|&i| retained[i]) {
        let r = o_resid[i] - x_resid.row(i).transpose().dot(&coefficients);
        sse += r * r;
    }
    Ok(PLMFit {
        coefficients,
        residual_variance: sse / retained_count as f64,
        retained_count,
        fitted_confounder_effect,
    })
}

/// Smoothing weights, abundance residuals and Φ̂ for one sample, reusable
/// across any number of outcomes.
#[derive(Debug, Clone)]
pub struct PlmDesign {
    /// Row-normalized kernel weights: ĥ(z_i) = Σ_j weights[i, j] t_j.
    weights: DMatrix<f64>,
    x_resid: DMatrix<f64>,
    retained: Vec<bool>,
    phi: PhiEstimate,
    chol: Cholesky<f64, Dyn>,
}

impl PlmDesign {
    pub fn new(x: &DMatrix<f64>, z: &DMatrix<f64>, config: &SmootherConfig) -> Result<Self> {
        check_rows(x, z)?;
        config.validate(z.ncols())?;
        let s = smoother(
            z,
            config.bandwidth,
            config.kernel_order,
            config.leave_one_out,
        )?;
        let mut weights = s.kernel_matrix();
        let n = x.nrows();
        let scale = 1.0 / (n as f64 * config.bandwidth.powi(z.ncols() as i32));
        let mut retained = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = weights.row_mut(i);
            let den: f64 = row.iter().sum();
            let mass: f64 = row.iter().map(|v| v.abs()).sum();
            if !den.is_finite() || den.abs() < f64::MIN_POSITIVE || den.abs() <= 1e-10 * mass {
                return Err(Error::VanishingDenominator { index: i });
            }
            retained.push(den * scale > config.cutoff);
            row /= den;
        }
        let retained_count = retained.iter().filter(|&&r| r).count();
        if retained_count == 0 {
            return Err(Error::AllTruncated {
                cutoff: config.cutoff,
            });
        }
        let x_resid = x - &weights * x;
        let phi = PhiEstimate {
            matrix: truncated_covariance(&x_resid, &retained),
            retained_count,
            cutoff_used: config.cutoff,
            bandwidth_used: config.bandwidth,
        };
        let chol = phi.factor()?;
        Ok(Self {
            weights,
            x_resid,
            retained,
            phi,
            chol,
        })
    }

    pub fn phi(&self) -> &PhiEstimate {
        &self.phi
    }

    pub fn n(&self) -> usize {
        self.x_resid.nrows()
    }

    pub fn retained(&self) -> &[bool] {
        &self.retained
    }

    /// ĥ_o(z_i) at every sample.
    pub fn smooth(&self, outcome: &DVector<f64>) -> DVector<f64> {
        &self.weights * outcome
    }

    pub fn fit(&self, outcome: &DVector<f64>) -> Result<PLMFit> {
        if outcome.len() != self.n() {
            return Err(Error::Dimension(format!(
                "outcome has {} entries, design has {} rows",
                outcome.len(),
                self.n()
            )));
        }
        let h_o = self.smooth(outcome);
        let o_resid = outcome - &h_o;
        solve_truncated(
            &self.x_resid,
            &o_resid,
            &self.retained,
            &self.chol,
            h_o,
            self.phi.cutoff_used,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cfg(a: f64, b: f64) -> SmootherConfig {
        SmootherConfig {
            kernel_order: 2,
            bandwidth: a,
            cutoff: b,
            external_bandwidth: a,
            external_cutoff: b,
            leave_one_out: false,
        }
    }

    fn toy() -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = DMatrix::from_fn(12, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(12, 3, |i, _| {
            rng.sample::<f64, _>(StandardNormal) + z[(i, 0)]
        });
        (x, z)
    }

    #[test]
    fn identical_rows_give_zero_phi() {
        let z = DMatrix::from_fn(6, 2, |i, j| (i + j) as f64 * 0.3);
        let x = DMatrix::from_fn(6, 3, |_, j| j as f64 + 1.0);
        let phi = estimate_phi(&x, &z, &cfg(0.8, 1e-12)).unwrap();
        assert!(phi.matrix.iter().all(|v| v.abs() < 1e-14));
        assert_eq!(phi.retained_count, 6);
    }

    #[test]
    fn constant_confounder_reduces_to_sample_covariance() {
        let (x, _) = toy();
        let z = DMatrix::from_element(12, 1, 0.5);
        let phi = estimate_phi(&x, &z, &cfg(1.0, 1e-300)).unwrap();
        let mean = x.row_mean();
        let mut expect = DMatrix::zeros(3, 3);
        for i in 0..12 {
            let d = (x.row(i) - &mean).transpose();
            expect += &d * d.transpose();
        }
        expect /= 12.0;
        assert!((phi.matrix - expect).abs().max() < 1e-12);
    }

    #[test]
    fn all_truncated_is_an_error() {
        let (x, z) = toy();
        let err = estimate_phi(&x, &z, &cfg(0.5, 1e6)).unwrap_err();
        assert_eq!(err, Error::AllTruncated { cutoff: 1e6 });
    }

    #[test]
    fn null_outcome_has_zero_fit() {
        let (x, z) = toy();
        let c = cfg(0.9, 1e-6);
        let phi = estimate_phi(&x, &z, &c).unwrap();
        let fit = fit_plm(&x, &z, &DVector::zeros(12), &c, &phi).unwrap();
        assert!(fit.coefficients.iter().all(|v| *v == 0.0));
        assert_eq!(fit.residual_variance, 0.0);
    }

    #[test]
    fn design_agrees_with_free_functions() {
        let (x, z) = toy();
        let c = cfg(0.7, 0.05);
        let y = DVector::from_fn(12, |i, _| (i as f64 * 0.37).sin() + x[(i, 1)]);
        let phi = estimate_phi(&x, &z, &c).unwrap();
        let free = fit_plm(&x, &z, &y, &c, &phi).unwrap();
        let design = PlmDesign::new(&x, &z, &c).unwrap();
        assert!((design.phi().matrix.clone() - &phi.matrix).abs().max() < 1e-12);
        assert_eq!(design.phi().retained_count, phi.retained_count);
        let fit = design.fit(&y).unwrap();
        assert!((fit.coefficients - free.coefficients).abs().max() < 1e-10);
        assert_abs_diff_eq!(
            fit.residual_variance,
            free.residual_variance,
            epsilon = 1e-12
        );
    }

    #[test]
    fn singular_phi_detected() {
        let z = DMatrix::from_fn(10, 1, |i, _| i as f64 * 0.1);
        let x = DMatrix::from_fn(10, 2, |i, j| (i as f64).powi(2) * (j as f64 + 1.0));
        let c = cfg(0.5, 1e-9);
        let err = PlmDesign::new(&x, &z, &c).unwrap_err();
        assert!(matches!(err, Error::SingularPhi { .. }), "{err:?}");
    }
}
