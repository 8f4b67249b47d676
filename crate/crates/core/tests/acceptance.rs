//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.
//!
//! `ACCEPTANCE_ONLY=4,6` restricts the run to the listed criteria.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use microcorr::inference::{by_fdr, MedianRule};
use microcorr::kernel::{
    density_estimate, kernel_eval, kernel_moments, nw_regress, KernelFunction,
};
use microcorr::pipeline::{
    pairwise_analysis, prepare_study, AbundanceTable, LabeledMatrix, MetaboliteTable,
    PairwiseSettings, PreprocessConfig,
};
use microcorr::simulation::{
    run_replications, ConfounderFamily, PhiScenario, ReplicationSummary, ScenarioConfig,
};
use microcorr::{
    estimate_phi, estimate_r_plugin, fit_plm, microbial_correlation, PairedDataset,
    PairwiseResultTable, SmootherConfig,
};

const SEED: u64 = 20240601;

type Check = (usize, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn closed_form() -> Outcome {
    const DRAWS: usize = 1_000_000;
    const P_MAX: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    // x = L e for Φ = L Lᵀ, so the sample moments of e over the draws give
    // the empirical correlation of βᵀx and γᵀx for every triple at once
    let mut sum = [0.0; P_MAX];
    let mut cross = DMatrix::<f64>::zeros(P_MAX, P_MAX);
    let mut e = [0.0; P_MAX];
    for _ in 0..DRAWS {
        for (k, v) in e.iter_mut().enumerate() {
            *v = rng.sample(StandardNormal);
            sum[k] += *v;
        }
        for a in 0..P_MAX {
            for b in 0..=a {
                cross[(a, b)] += e[a] * e[b];
            }
        }
    }
    let nd = DRAWS as f64;
    let s = DMatrix::from_fn(P_MAX, P_MAX, |a, b| {
        let (a, b) = (a.max(b), a.min(b));
        cross[(a, b)] / nd - sum[a] / nd * sum[b] / nd
    });

    let (mut in_range, mut symmetric, mut worst) = (true, true, 0.0f64);
    for _ in 0..1000 {
        let p = rng.random_range(2..=P_MAX);
        let a = normals(&mut rng, p, p);
        let phi = &a * a.transpose() + DMatrix::identity(p, p) * 0.1;
        let beta = DVector::from_fn(p, |_, _| rng.sample(StandardNormal));
        let gamma = DVector::from_fn(p, |_, _| rng.sample(StandardNormal));
        let r = microbial_correlation(&beta, &gamma, &phi).unwrap();
        let r_swap = microbial_correlation(&gamma, &beta, &phi).unwrap();
        in_range &= (-1.0..=1.0).contains(&r);
        symmetric &= (r - r_swap).abs() <= 1e-12;
        let l = phi.clone().cholesky().unwrap().l();
        let u = l.transpose() * &beta;
        let v = l.transpose() * &gamma;
        let sp = s.view((0, 0), (p, p));
        let empirical = u.dot(&(sp * &v)) / (u.dot(&(sp * &u)) * v.dot(&(sp * &v))).sqrt();
        worst = worst.max((r - empirical).abs());
    }
    outcome(
        in_range && symmetric && worst <= 0.01,
        format!("in_range={in_range} symmetric={symmetric} max|R-empirical|={worst:.4} (tol 0.01)"),
    )
}

fn kernel_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut worst_density = 0.0f64;
    let mut worst_fit = 0.0f64;
    let mut checked = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=50);
        let q = rng.random_range(1..=3);
        let m = [2, 4][rng.random_range(0..2)];
        let a = rng.random_range(0.5..2.0);
        let kernel = KernelFunction::new(m).unwrap();
        let z = normals(&mut rng, n, q);
        let t = normals(&mut rng, n, 2);
        let k = DMatrix::from_fn(n, n, |i, j| {
            (0..q)
                .map(|c| kernel_eval((z[(i, c)] - z[(j, c)]) / a, &kernel))
                .product::<f64>()
        });
        let scale = 1.0 / (n as f64 * a.powi(q as i32));
        let density = density_estimate(&z, a, &kernel).unwrap();
        for i in 0..n {
            let brute = k.row(i).sum() * scale;
            worst_density = worst_density.max((density[i] - brute).abs() / brute.abs().max(1.0));
        }
        let fitted = match nw_regress(&t, &z, a, &kernel) {
            Ok(f) => f,
            // fourth-order weights can cancel; the brute force must agree
            Err(_) => {
                assert!((0..n).any(|i| k.row(i).sum().abs() <= 1e-10 * k.row(i).abs().sum()));
                continue;
            }
        };
        for i in 0..n {
            let den: f64 = k.row(i).sum();
            let mass: f64 = k.row(i).abs().sum();
            for c in 0..2 {
                let num: f64 = (0..n).map(|j| k[(i, j)] * t[(j, c)]).sum();
                let brute = num / den;
                // round-off in a signed sum scales with Σ|K t| / |Σ K|
                let cond = 1.0 + mass * t.column(c).amax() / den.abs();
                worst_fit = worst_fit.max((fitted[(i, c)] - brute).abs() / cond);
            }
        }
        checked += 1;
    }
    let mut worst_moment = 0.0f64;
    for m in [2, 4, 6] {
        let moments = kernel_moments(&KernelFunction::new(m).unwrap());
        worst_moment = worst_moment.max((moments[0] - 1.0).abs());
        for s in moments.iter().take(m).skip(1) {
            worst_moment = worst_moment.max(s.abs());
        }
    }
    outcome(
        worst_density <= 1e-12 && worst_fit <= 1e-12 && worst_moment <= 1e-6 && checked >= 90,
        format!(
            "{checked}/100 fits, density err {worst_density:.1e}, nw err {worst_fit:.1e} (tol 1e-12), moment err {worst_moment:.1e} (tol 1e-6)"
        ),
    )
}

fn degenerate_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let (n, p) = (80, 3);
    let x = normals(&mut rng, n, p);
    let z = DMatrix::from_element(n, 1, 1.7);
    let y = DVector::from_fn(n, |i, _| {
        0.5 * x[(i, 0)] - x[(i, 2)] + rng.sample::<f64, _>(StandardNormal)
    });
    let w = DVector::from_fn(n, |i, _| {
        x[(i, 1)] + 0.3 * x[(i, 0)] + rng.sample::<f64, _>(StandardNormal)
    });
    let config = SmootherConfig {
        kernel_order: 2,
        bandwidth: 1.0,
        cutoff: f64::MIN_POSITIVE,
        external_bandwidth: 1.0,
        external_cutoff: f64::MIN_POSITIVE,
        leave_one_out: false,
    };
    let mean = x.row_mean();
    let xc = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - mean[j]);
    let ols = |o: &DVector<f64>| {
        let oc = o.add_scalar(-o.mean());
        (xc.transpose() * &xc)
            .cholesky()
            .unwrap()
            .solve(&(xc.transpose() * oc))
    };
    let (beta, gamma) = (ols(&y), ols(&w));
    let phi = estimate_phi(&x, &z, &config).unwrap();
    let fy = fit_plm(&x, &z, &y, &config, &phi).unwrap();
    let fw = fit_plm(&x, &z, &w, &config, &phi).unwrap();
    let coef_err = (fy.coefficients - &beta)
        .amax()
        .max((fw.coefficients - &gamma).amax());
    let cov = xc.transpose() * &xc / n as f64;
    let r_ols = microbial_correlation(&beta, &gamma, &cov).unwrap();
    let data = PairedDataset::new(z, x, y, w).unwrap();
    let r_plugin = estimate_r_plugin(&data, &config).unwrap().r_hat;
    let r_err = (r_plugin - r_ols).abs();
    outcome(
        coef_err <= 1e-8 && r_err <= 1e-8,
        format!("coefficient err {coef_err:.1e}, correlation err {r_err:.1e} (tol 1e-8)"),
    )
}

fn simulate(
    n: usize,
    family: ConfounderFamily,
    phi: PhiScenario,
    truth: f64,
    reps: usize,
    r0_test: f64,
) -> ReplicationSummary {
    let config = ScenarioConfig::new(n, family, phi, truth, reps, SEED);
    let summary = run_replications(&config, r0_test).unwrap();
    assert!(
        summary.failures == 0,
        "{} replications failed",
        summary.failures
    );
    summary
}

fn type_one_error() -> Outcome {
    let s = simulate(
        500,
        ConfounderFamily::Linear,
        PhiScenario::Identity,
        0.0,
        500,
        0.0,
    );
    outcome(
        (0.025..=0.085).contains(&s.rejection_rate),
        format!(
            "rejection rate {:.3} over {} replications (target [0.025, 0.085])",
            s.rejection_rate, s.completed
        ),
    )
}

fn bias_shrinkage() -> Outcome {
    let mut pass = true;
    let mut worst_median = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut notes = Vec::new();
    for family in ConfounderFamily::ALL {
        for phi in PhiScenario::ALL {
            for truth in [0.0, 0.4] {
                let small = simulate(100, family, phi, truth, 200, 0.0);
                let large = simulate(500, family, phi, truth, 200, 0.0);
                let shrinks = large.median_abs_bias < small.median_abs_bias;
                pass &= shrinks && large.median_bias.abs() <= 0.06;
                if !shrinks {
                    notes.push(format!(
                        "{}/{}/R={truth} does not shrink",
                        family.name(),
                        phi.name()
                    ));
                }
                worst_median = worst_median.max(large.median_bias.abs());
                worst_abs = worst_abs.max(large.median_abs_bias);
            }
        }
    }
    outcome(
        pass,
        format!(
            "12 cells: median|R̂-R| shrinks n=100→500; max |median bias| at n=500 {worst_median:.4} (tol 0.06); max median|R̂-R| at n=500 {worst_abs:.4}{}",
            if notes.is_empty() { String::new() } else { format!("; {}", notes.join(", ")) }
        ),
    )
}

fn variance_calibration() -> Outcome {
    let s = simulate(
        500,
        ConfounderFamily::Triangular,
        PhiScenario::Identity,
        0.3,
        500,
        0.0,
    );
    let ratio = s.sd_calibrated / s.mean_std_err;
    outcome(
        (ratio - 1.0).abs() <= 0.2,
        format!(
            "sd(R̂_ss) {:.4} / mean std_err {:.4} = {ratio:.3} (within 20%)",
            s.sd_calibrated, s.mean_std_err
        ),
    )
}

fn composite_null() -> Outcome {
    let inside = simulate(
        500,
        ConfounderFamily::Linear,
        PhiScenario::Identity,
        0.2,
        500,
        0.3,
    );
    let outside = simulate(
        500,
        ConfounderFamily::Linear,
        PhiScenario::Identity,
        0.5,
        500,
        0.3,
    );
    outcome(
        inside.rejection_rate <= 0.02 && outside.rejection_rate >= 0.5,
        format!(
            "H0 |R|<=0.3: rejection {:.3} at R=0.2 (max 0.02), power {:.3} at R=0.5 (min 0.5)",
            inside.rejection_rate, outside.rejection_rate
        ),
    )
}

struct Synthetic {
    abundance: AbundanceTable,
    confounders: LabeledMatrix,
    metabolites: MetaboliteTable,
    ext_abundance: AbundanceTable,
    ext_confounders: LabeledMatrix,
}

const TAXA: usize = 12;
const METABOLITES: usize = 20;

/// Family-level abundances driven partly by two confounders; returns the
/// tables and each sample's centered log abundances.
fn cohort(
    prefix: &str,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (AbundanceTable, LabeledMatrix, Vec<Vec<f64>>) {
    let ids: Vec<String> = (0..n).map(|i| format!("{prefix}{i}")).collect();
    let taxa: Vec<String> = (0..TAXA)
        .map(|t| format!("k__Bacteria|p__Firmicutes|c__Clostridia|o__Clostridiales|f__F{t:02}"))
        .collect();
    let z = normals(rng, n, 2);
    let mut counts = DMatrix::zeros(n, TAXA);
    let mut clr = Vec::with_capacity(n);
    for i in 0..n {
        let logs: Vec<f64> = (0..TAXA)
            .map(|t| {
                4.0 + 0.4 * (t % 3) as f64 * (z[(i, 0)] - z[(i, 1)])
                    + rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let centre = logs.iter().sum::<f64>() / TAXA as f64;
        for (t, l) in logs.iter().enumerate() {
            counts[(i, t)] = l.exp();
        }
        clr.push(logs.iter().map(|l| l - centre).collect());
    }
    let confounders = LabeledMatrix {
        row_ids: ids.clone(),
        column_ids: vec!["age".into(), "bmi".into()],
        values: DMatrix::from_fn(n, 2, |i, c| [50.0, 25.0][c] + [10.0, 3.0][c] * z[(i, c)]),
    };
    (
        AbundanceTable::new(ids, taxa, counts).unwrap(),
        confounders,
        clr,
    )
}

/// Metabolites 0 and 1 are identical exact functions of the microbial
/// block, as are 2 and 3; the rest are independent noise.
fn synthetic_study() -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 8);
    let (abundance, confounders, clr) = cohort("s", 127, &mut rng);
    let (ext_abundance, ext_confounders, _) = cohort("e", 1270, &mut rng);
    let levels = clr
        .iter()
        .map(|c| {
            let first = (1.5 * c[0] - 0.5 * c[3]).exp();
            let second = (c[1] + c[4] - 2.0 * c[7]).exp();
            (0..METABOLITES)
                .map(|m| {
                    Some(match m {
                        0 | 1 => first,
                        2 | 3 => second,
                        _ => (0.5 * rng.sample::<f64, _>(StandardNormal)).exp(),
                    })
                })
                .collect()
        })
        .collect();
    let ids = (0..METABOLITES).map(|m| format!("M{m:02}")).collect();
    let metabolites = MetaboliteTable::new(abundance.sample_ids().to_vec(), ids, levels).unwrap();
    Synthetic {
        abundance,
        confounders,
        metabolites,
        ext_abundance,
        ext_confounders,
    }
}

fn run_pipeline(study: &Synthetic) -> PairwiseResultTable {
    let preprocess = PreprocessConfig {
        pseudocount: 0.0,
        ..PreprocessConfig::default()
    };
    let prepared = prepare_study(
        &study.abundance,
        &study.confounders,
        &study.metabolites,
        &study.ext_abundance,
        &study.ext_confounders,
        &preprocess,
    )
    .unwrap();
    let n = prepared.x.nrows();
    let smoother = SmootherConfig::default_schedule(
        n,
        prepared.external.x().nrows(),
        prepared.z.ncols(),
        microcorr::DEFAULT_KERNEL_ORDER,
    );
    let settings = PairwiseSettings {
        n_splits: 100,
        r0: 0.0,
        alpha: 0.05,
        seed: SEED,
        rule: MedianRule::MedianSplit,
    };
    pairwise_analysis(
        &prepared.x,
        &prepared.z,
        &prepared.metabolites,
        &prepared.external,
        &smoother,
        &settings,
    )
    .unwrap()
}

fn end_to_end() -> Outcome {
    let study = synthetic_study();
    let first = run_pipeline(&study);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap();
    let second = pool.install(|| run_pipeline(&study));
    let deterministic = format!("{first:?}") == format!("{second:?}");
    let signal = |id: &str| ["M00", "M01", "M02", "M03"].contains(&id);
    let duplicated: Vec<_> = first
        .rows
        .iter()
        .filter(|r| {
            matches!(
                (r.metabolite_1.as_str(), r.metabolite_2.as_str()),
                ("M00", "M01") | ("M02", "M03")
            )
        })
        .collect();
    let duplicates_found = duplicated.len() == 2
        && duplicated
            .iter()
            .all(|r| r.significant && (r.r_median - 1.0).abs() <= 1e-9);
    let null: Vec<_> = first
        .rows
        .iter()
        .filter(|r| !signal(&r.metabolite_1) || !signal(&r.metabolite_2))
        .collect();
    let null_rate = null.iter().filter(|r| r.significant).count() as f64 / null.len() as f64;
    outcome(
        deterministic && duplicates_found && null_rate <= 0.05 && first.len() == 190,
        format!(
            "{} pairs, deterministic={deterministic}, duplicated pairs significant with r_median=1: {duplicates_found}, noise-pair significance {null_rate:.3} of {} (max 0.05)",
            first.len(),
            null.len()
        ),
    )
}

fn fdr_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 9);
    let reps = 200;
    let (mut fdp, mut discoveries) = (0.0, 0usize);
    for _ in 0..reps {
        let p: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let found = by_fdr(&p, 0.05)
            .unwrap()
            .significant
            .iter()
            .filter(|s| **s)
            .count();
        discoveries += found;
        // every hypothesis is null, so any discovery is false
        fdp += if found > 0 { 1.0 } else { 0.0 };
    }
    let fdr = fdp / reps as f64;
    let hand = by_fdr(&[0.01, 0.5], 0.05).unwrap().p_adjusted;
    let exact = hand == vec![0.03, 0.75];
    outcome(
        fdr <= 0.05 && exact,
        format!(
            "empirical FDR {fdr:.3} ({discoveries} false discoveries in {reps} x 1000 nulls), hand example {hand:?} exact={exact}"
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [Check; 9] = [
        (1, "closed-form oracle", closed_form),
        (2, "kernel oracle", kernel_oracle),
        (3, "degenerate equivalence", degenerate_equivalence),
        (4, "type-I error", type_one_error),
        (5, "bias shrinkage", bias_shrinkage),
        (6, "variance calibration", variance_calibration),
        (7, "composite-null test", composite_null),
        (8, "end-to-end pipeline", end_to_end),
        (9, "FDR property", fdr_property),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        println!(
            "criterion {id} {}: {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
