//! Tests of H₀: |R| ≤ R₀, multi-split aggregation and Benjamini–Yekutieli
//! false discovery rate control.

use log::warn;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::correlation::{calibrated_with, FullSampleFit, SplitPlan};
use crate::error::{Error, Result};
use crate::model::{CorrelationEstimate, ExternalDataset, PairedDataset, SmootherConfig};
use crate::plm::{estimate_phi_external, PhiEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub r0: f64,
    pub t_plus: f64,
    pub t_minus: f64,
    pub p_value: f64,
}

/// Pr(Z ≥ x) for standard normal Z.
pub fn normal_upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// T₊ = √n(|R̂| − R₀)₊/σ̂, T₋ = √n(|R̂| − R₀)₋/σ̂ with σ̂ = √n·std_err, and
/// p = 2·Pr(Z ≥ max(T₊, T₋)).
pub fn test_statistics(estimate: &CorrelationEstimate, n: usize, r0: f64) -> Result<TestResult> {
    if !(0.0..1.0).contains(&r0) {
        return Err(Error::InvalidR0(r0));
    }
    let se = estimate
        .std_err
        .filter(|s| s.is_finite() && *s >= 0.0)
        .ok_or_else(|| Error::InvalidConfig("estimate carries no finite standard error".into()))?;
    let root_n = (n as f64).sqrt();
    let sigma = root_n * se;
    let excess = estimate.r_hat.abs() - r0;
    let scaled = |part: f64| {
        if part == 0.0 {
            0.0
        } else {
            root_n * part / sigma
        }
    };
    let t_plus = scaled(excess.max(0.0));
    let t_minus = scaled(excess.min(0.0));
    debug_assert!(t_minus <= 0.0 && t_plus >= 0.0);
    let t = t_plus.max(t_minus);
    let p_value = if t == 0.0 {
        1.0
    } else {
        (2.0 * normal_upper_tail(t)).min(1.0)
    };
    Ok(TestResult {
        r0,
        t_plus,
        t_minus,
        p_value,
    })
}

/// How the p-value of a multi-split analysis is tied to the median estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MedianRule {
    /// p-value of the split whose R̂_ss is the (lower) median.
    #[default]
    MedianSplit,
    /// Recompute the test at the median R̂_ss with the median standard error.
    MedianEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSplitResult {
    pub r_median: f64,
    pub p_value: f64,
    pub n_splits: usize,
    pub n_failed: usize,
}

/// Seed of split `index` under master `seed`; independent streams per index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

pub fn split_plans(n: usize, n_splits: usize, seed: u64) -> Vec<SplitPlan> {
    (0..n_splits as u64)
        .map(|k| SplitPlan::random(n, derive_seed(seed, k)))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn multi_split_inference(
    data: &PairedDataset,
    external: &ExternalDataset,
    config: &SmootherConfig,
    n_splits: usize,
    r0: f64,
    seed: u64,
    rule: MedianRule,
) -> Result<MultiSplitResult> {
    external.check_conforms(data)?;
    config.validate(data.q())?;
    let phi_ss = estimate_phi_external(external.x(), external.z(), config)?;
    let full = FullSampleFit::new(data, config)?;
    let plans = split_plans(data.n(), n_splits, seed);
    multi_split_with_plans(data, &phi_ss, &full, config, &plans, r0, rule)
}

/// Runs one calibrated estimate per plan and reduces them to the median.
pub fn multi_split_with_plans(
    data: &PairedDataset,
    phi_ss: &PhiEstimate,
    full: &FullSampleFit,
    config: &SmootherConfig,
    plans: &[SplitPlan],
    r0: f64,
    rule: MedianRule,
) -> Result<MultiSplitResult> {
    if plans.is_empty() {
        return Err(Error::InvalidConfig("need at least one split".into()));
    }
    if !(0.0..1.0).contains(&r0) {
        return Err(Error::InvalidR0(r0));
    }
    let outcomes: Vec<Result<CorrelationEstimate>> = plans
        .par_iter()
        .map(|plan| calibrated_with(data, phi_ss, full, config, plan))
        .collect();
    let estimates = collect_splits(outcomes)?;
    reduce_splits(&estimates, plans.len(), data.n(), r0, rule)
}

/// Keeps successful splits in plan order; errors if more than half failed.
pub(crate) fn collect_splits(
    outcomes: Vec<Result<CorrelationEstimate>>,
) -> Result<Vec<CorrelationEstimate>> {
    let total = outcomes.len();
    let mut ok = Vec::with_capacity(total);
    let mut last_err = None;
    for o in outcomes {
        match o {
            Ok(e) => ok.push(e),
            Err(e) => last_err = Some(e),
        }
    }
    let failed = total - ok.len();
    if failed > 0 {
        warn!(
            "{failed} of {total} splits failed; last error: {}",
            last_err.as_ref().map(|e| e.to_string()).unwrap_or_default()
        );
    }
    if 2 * failed > total || ok.is_empty() {
        return Err(Error::NotEstimable { failed, total });
    }
    Ok(ok)
}

pub(crate) fn reduce_splits(
    estimates: &[CorrelationEstimate],
    total: usize,
    n: usize,
    r0: f64,
    rule: MedianRule,
) -> Result<MultiSplitResult> {
    let mut order: Vec<usize> = (0..estimates.len()).collect();
    // stable sort keeps plan order among ties
    order.sort_by(|&a, &b| estimates[a].r_hat.total_cmp(&estimates[b].r_hat));
    let k = estimates.len();
    let lower = order[(k - 1) / 2];
    let r_median = if k % 2 == 1 {
        estimates[lower].r_hat
    } else {
        0.5 * (estimates[order[k / 2 - 1]].r_hat + estimates[order[k / 2]].r_hat)
    };
    let p_value = match rule {
        MedianRule::MedianSplit => test_statistics(&estimates[lower], n, r0)?.p_value,
        MedianRule::MedianEstimate => {
            let mut se: Vec<f64> = estimates.iter().filter_map(|e| e.std_err).collect();
            se.sort_by(f64::total_cmp);
            let mid = median_sorted(&se);
            let at_median = CorrelationEstimate {
                r_hat: r_median,
                std_err: Some(mid),
                ..estimates[lower]
            };
            test_statistics(&at_median, n, r0)?.p_value
        }
    };
    Ok(MultiSplitResult {
        r_median,
        p_value,
        n_splits: k,
        n_failed: total - k,
    })
}

/// Median of an ascending slice; NaN when empty.
pub fn median_sorted(v: &[f64]) -> f64 {
    let k = v.len();
    match k {
        0 => f64::NAN,
        _ if k % 2 == 1 => v[k / 2],
        _ => 0.5 * (v[k / 2 - 1] + v[k / 2]),
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdrResult {
    pub p_adjusted: Vec<f64>,
    pub significant: Vec<bool>,
}

fn check_pvalues(p_values: &[f64]) -> Result<()> {
    for (index, &value) in p_values.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::PValueOutOfRange { index, value });
        }
    }
    Ok(())
}

/// Step-up adjustment with multiplier `m·c / rank`, made monotone from the top.
fn step_up(p_values: &[f64], c: f64) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (1..=m).rev() {
        let i = order[rank - 1];
        let v = (p_values[i] * m as f64 * c / rank as f64).min(1.0);
        running = running.min(v);
        adjusted[i] = running;
    }
    adjusted
}

/// Harmonic number c(M) = Σ_{k=1..M} 1/k.
pub fn harmonic(m: usize) -> f64 {
    (1..=m).map(|k| 1.0 / k as f64).sum()
}

/// Benjamini–Yekutieli adjusted p-values and the rejections at level `alpha`.
pub fn by_fdr(p_values: &[f64], alpha: f64) -> Result<FdrResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    check_pvalues(p_values)?;
    let p_adjusted = step_up(p_values, harmonic(p_values.len()));
    let significant = p_adjusted.iter().map(|&q| q <= alpha).collect();
    Ok(FdrResult {
        p_adjusted,
        significant,
    })
}

/// Benjamini–Hochberg adjusted p-values.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    check_pvalues(p_values)?;
    Ok(step_up(p_values, 1.0))
}
