//! Higher-order Gaussian kernels, kernel density estimates and
//! Nadaraya–Watson conditional means.
//!
//! Kernels of order m = 2r are Gaussian-times-polynomial:
//!
//! ```text
//! k_m(u) = φ(u) · Σ_{j<r} (-1)^j / (2^j j!) · He_{2j}(u)
//! ```
//!
//! where He are the probabilists' Hermite polynomials. For m = 2 this is the
//! standard normal density; for m = 4 it is ½(3 − u²)φ(u).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelFunction {
    order: usize,
    /// Coefficients of He_0, He_2, ..., He_{m-2}.
    coefficients: Vec<f64>,
}

impl KernelFunction {
    pub fn new(order: usize) -> Result<Self> {
        if order < 2 || !order.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel order must be even and >= 2, got {order}"
            )));
        }
        let r = order / 2;
        let mut coefficients = Vec::with_capacity(r);
        let mut c = 1.0;
        for j in 0..r {
            if j > 0 {
                c *= -1.0 / (2.0 * j as f64);
            }
            coefficients.push(c);
        }
        Ok(Self {
            order,
            coefficients,
        })
    }

    pub fn gaussian() -> Self {
        Self {
            order: 2,
            coefficients: vec![1.0],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// k(u)
    pub fn eval(&self, u: f64) -> f64 {
        let phi = FRAC_1_SQRT_2PI * (-0.5 * u * u).exp();
        if self.order == 2 {
            return phi;
        }
        phi * self.polynomial(u)
    }

    fn polynomial(&self, u: f64) -> f64 {
        // He_{k+1} = u He_k - k He_{k-1}
        let mut acc = self.coefficients[0];
        let (mut prev, mut cur) = (1.0, u);
        let mut k = 1usize;
        for &c in &self.coefficients[1..] {
            // advance to He_{2j}
            for _ in 0..2 {
                let next = u * cur - k as f64 * prev;
                prev = cur;
                cur = next;
                k += 1;
            }
            acc += c * prev;
        }
        acc
    }
}

/// kernel_eval(u) = k(u).
pub fn kernel_eval(u: f64, kernel: &KernelFunction) -> f64 {
    kernel.eval(u)
}

/// ∏_j k(z_diff_j / a)
pub fn product_kernel(z_diff: &[f64], bandwidth: f64, kernel: &KernelFunction) -> f64 {
    if kernel.order == 2 {
        let s: f64 = z_diff.iter().map(|d| (d / bandwidth).powi(2)).sum();
        return FRAC_1_SQRT_2PI.powi(z_diff.len() as i32) * (-0.5 * s).exp();
    }
    z_diff.iter().map(|d| kernel.eval(d / bandwidth)).product()
}

/// Smoothed values at every sample point plus the density estimate l̂.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherFit {
    pub fitted: DMatrix<f64>,
    pub density: DVector<f64>,
    pub bandwidth: f64,
}

struct Accumulated {
    den: Vec<f64>,
    mass: Vec<f64>,
    num: Vec<f64>,
}

impl Accumulated {
    fn zeros(n: usize, d: usize) -> Self {
        Self {
            den: vec![0.0; n],
            mass: vec![0.0; n],
            num: vec![0.0; n * d],
        }
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in self.den.iter_mut().zip(&other.den) {
            *a += b;
        }
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            *a += b;
        }
        for (a, b) in self.num.iter_mut().zip(&other.num) {
            *a += b;
        }
    }
}

/// Kernel smoother over a fixed covariate cloud.
#[derive(Debug, Clone)]
pub struct KernelSmoother<'a> {
    z: &'a DMatrix<f64>,
    bandwidth: f64,
    kernel: KernelFunction,
    leave_one_out: bool,
    /// Row-major copy of z / a.
    rows: Vec<f64>,
}

impl<'a> KernelSmoother<'a> {
    pub fn new(z: &'a DMatrix<f64>, bandwidth: f64, kernel: KernelFunction) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        let q = z.ncols();
        let mut rows = vec![0.0; z.nrows() * q];
        for i in 0..z.nrows() {
            for c in 0..q {
                rows[i * q + c] = z[(i, c)] / bandwidth;
            }
        }
        Ok(Self {
            z,
            bandwidth,
            kernel,
            leave_one_out: false,
            rows,
        })
    }

    pub fn leave_one_out(mut self, on: bool) -> Self {
        self.leave_one_out = on;
        self
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    fn kernel_row(&self, i: usize, out: &mut [f64]) {
        let q = self.z.ncols();
        let zi = &self.rows[i * q..(i + 1) * q];
        if self.kernel.order == 2 {
            let norm = FRAC_1_SQRT_2PI.powi(q as i32);
            for (zj, k) in self.rows.chunks_exact(q).zip(out.iter_mut()) {
                let mut d2 = 0.0;
                for c in 0..q {
                    let d = zi[c] - zj[c];
                    d2 += d * d;
                }
                *k = norm * (-0.5 * d2).exp();
            }
        } else {
            self.higher_order_row(zi, &self.rows, out);
        }
        if self.leave_one_out {
            out[i] = 0.0;
        }
    }

    /// Dense n × n matrix of K_ij (self-term zeroed in leave-one-out mode).
    pub fn kernel_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut row = vec![0.0; n];
                self.kernel_row(i, &mut row);
                row
            })
            .collect();
        DMatrix::from_fn(n, n, |i, j| rows[i][j])
    }

    /// l̂_i = (n a^q)⁻¹ Σ_j K_ij
    pub fn density(&self) -> DVector<f64> {
        let n = self.n();
        let scale = self.density_scale();
        let v: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut row = vec![0.0; n];
                self.kernel_row(i, &mut row);
                row.iter().sum::<f64>() * scale
            })
            .collect();
        DVector::from_vec(v)
    }

    fn density_scale(&self) -> f64 {
        1.0 / (self.n() as f64 * self.bandwidth.powi(self.z.ncols() as i32))
    }

    /// Σ_j K_ij, Σ_j |K_ij| and Σ_j K_ij t_j for every i, visiting each
    /// unordered pair once (k is even, so K_ij = K_ji). Rows are processed in
    /// fixed-size blocks whose partial sums are combined in block order, so
    /// the result does not depend on the thread count.
    fn accumulate(&self, t: &[f64], d: usize) -> Accumulated {
        const BLOCK: usize = 64;
        let n = self.n();
        let q = self.z.ncols();
        let self_weight = if self.leave_one_out {
            0.0
        } else {
            product_kernel(&vec![0.0; q], 1.0, &self.kernel)
        };
        let blocks: Vec<Accumulated> = (0..n.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let mut acc = Accumulated::zeros(n, d);
                let mut kern = vec![0.0; n];
                for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                    acc.den[i] += self_weight;
                    acc.mass[i] += self_weight.abs();
                    for c in 0..d {
                        acc.num[i * d + c] += self_weight * t[i * d + c];
                    }
                    let tail = &mut kern[i + 1..];
                    self.kernel_tail(i, tail);
                    let ti = &t[i * d..(i + 1) * d];
                    for (off, &k) in tail.iter().enumerate() {
                        let j = i + 1 + off;
                        acc.den[i] += k;
                        acc.den[j] += k;
                        acc.mass[i] += k.abs();
                        acc.mass[j] += k.abs();
                        let tj = &t[j * d..(j + 1) * d];
                        for c in 0..d {
                            acc.num[i * d + c] += k * tj[c];
                            acc.num[j * d + c] += k * ti[c];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = Accumulated::zeros(n, d);
        for b in blocks {
            total.add(&b);
        }
        total
    }

    /// K_ij for j = i+1, ..., n-1.
    fn kernel_tail(&self, i: usize, out: &mut [f64]) {
        let q = self.z.ncols();
        let zi = &self.rows[i * q..(i + 1) * q];
        let rest = &self.rows[(i + 1) * q..];
        if self.kernel.order == 2 {
            let norm = FRAC_1_SQRT_2PI.powi(q as i32);
            for (zj, k) in rest.chunks_exact(q).zip(out.iter_mut()) {
                let mut d2 = 0.0;
                for c in 0..q {
                    let d = zi[c] - zj[c];
                    d2 += d * d;
                }
                *k = norm * (-0.5 * d2).exp();
            }
        } else {
            self.higher_order_row(zi, rest, out);
        }
    }

    // one exponential per pair: ∏ φ(d_c)P(d_c) = (2π)^{-q/2} e^{-|d|²/2} ∏ P(d_c)
    fn higher_order_row(&self, zi: &[f64], others: &[f64], out: &mut [f64]) {
        let q = zi.len();
        let norm = FRAC_1_SQRT_2PI.powi(q as i32);
        for (zj, k) in others.chunks_exact(q).zip(out.iter_mut()) {
            let mut d2 = 0.0;
            let mut poly = 1.0;
            for c in 0..q {
                let d = zi[c] - zj[c];
                d2 += d * d;
                poly *= self.kernel.polynomial(d);
            }
            *k = norm * poly * (-0.5 * d2).exp();
        }
    }

    /// Nadaraya–Watson fit of every column of `targets` together with l̂.
    pub fn fit(&self, targets: &DMatrix<f64>) -> Result<SmootherFit> {
        let n = self.n();
        if targets.nrows() != n {
            return Err(Error::Dimension(format!(
                "targets have {} rows, covariates {}",
                targets.nrows(),
                n
            )));
        }
        let d = targets.ncols();
        // row-major targets for the inner loop
        let t: Vec<f64> = (0..n)
            .flat_map(|j| (0..d).map(move |c| (j, c)))
            .map(|(j, c)| targets[(j, c)])
            .collect();
        let scale = self.density_scale();
        let acc = self.accumulate(&t, d);
        let mut fitted = DMatrix::zeros(n, d);
        let mut density = DVector::zeros(n);
        for i in 0..n {
            let den = acc.den[i];
            // negative weights of higher-order kernels can cancel the mass
            if !den.is_finite() || den.abs() < f64::MIN_POSITIVE || den.abs() <= 1e-10 * acc.mass[i]
            {
                return Err(Error::VanishingDenominator { index: i });
            }
            density[i] = den * scale;
            for c in 0..d {
                fitted[(i, c)] = acc.num[i * d + c] / den;
            }
        }
        Ok(SmootherFit {
            fitted,
            density,
            bandwidth: self.bandwidth,
        })
    }
}

/// l̂ for every row of `z`, including the self-term.
pub fn density_estimate(
    z: &DMatrix<f64>,
    bandwidth: f64,
    kernel: &KernelFunction,
) -> Result<DVector<f64>> {
    Ok(KernelSmoother::new(z, bandwidth, kernel.clone())?.density())
}

/// Column-wise Nadaraya–Watson ratio Σ_j t_j K_ij / Σ_j K_ij at every sample.
pub fn nw_regress(
    targets: &DMatrix<f64>,
    z: &DMatrix<f64>,
    bandwidth: f64,
    kernel: &KernelFunction,
) -> Result<DMatrix<f64>> {
    Ok(KernelSmoother::new(z, bandwidth, kernel.clone())?
        .fit(targets)?
        .fitted)
}

/// Composite Simpson rule for ∫ f over [lo, hi] with `intervals` (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// Moments ∫ u^s k(u) du for s = 0..order by quadrature over [-12, 12].
pub fn kernel_moments(kernel: &KernelFunction) -> Vec<f64> {
    (0..=kernel.order())
        .map(|s| simpson(|u| u.powi(s as i32) * kernel.eval(u), -12.0, 12.0, 24_000))
        .collect()
}
