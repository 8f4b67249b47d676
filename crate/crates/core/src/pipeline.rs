//! Data ingestion and preprocessing, the all-pairs driver, and TSV export.
//!
//! Tables are tab-separated with a header row; the first column holds sample
//! ids and `NA` (or an empty cell) marks a missing value.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{assemble_calibrated, select, select_rows, FullSampleFit, SplitPlan};
use crate::error::{Error, Result};
use crate::inference::{
    by_fdr, collect_splits, multi_split_with_plans, reduce_splits, split_plans, MedianRule,
};
use crate::model::{
    microbial_correlation, CorrelationEstimate, ExternalDataset, PairedDataset,
    PairwiseResultTable, PairwiseRow, SmootherConfig,
};
use crate::plm::{estimate_phi_external, PhiEstimate, PlmDesign};
use crate::simulation::GridCell;

pub const DEFAULT_PSEUDOCOUNT: f64 = 0.5;
pub const DEFAULT_SOLID_THRESHOLD: f64 = 0.3;

/// Taxonomic levels of a `k__…|p__…|…` lineage string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    Kingdom,
    Phylum,
    Class,
    Order,
    Family,
    Genus,
    Species,
    Strain,
}

const RANKS: [Rank; 8] = [
    Rank::Kingdom,
    Rank::Phylum,
    Rank::Class,
    Rank::Order,
    Rank::Family,
    Rank::Genus,
    Rank::Species,
    Rank::Strain,
];

impl Rank {
    pub fn prefix(self) -> &'static str {
        match self {
            Rank::Kingdom => "k__",
            Rank::Phylum => "p__",
            Rank::Class => "c__",
            Rank::Order => "o__",
            Rank::Family => "f__",
            Rank::Genus => "g__",
            Rank::Species => "s__",
            Rank::Strain => "t__",
        }
    }

    fn of_component(component: &str) -> Option<Rank> {
        RANKS
            .iter()
            .copied()
            .find(|r| component.starts_with(r.prefix()))
    }
}

impl FromStr for Rank {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let rank = match lower.as_str() {
            "k" | "kingdom" | "domain" => Rank::Kingdom,
            "p" | "phylum" => Rank::Phylum,
            "c" | "class" => Rank::Class,
            "o" | "order" => Rank::Order,
            "f" | "family" => Rank::Family,
            "g" | "genus" => Rank::Genus,
            "s" | "species" => Rank::Species,
            "t" | "strain" => Rank::Strain,
            _ => return Err(Error::UnknownRank(s.to_string())),
        };
        Ok(rank)
    }
}

/// Nonnegative abundances, one row per sample and one column per taxon.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceTable {
    sample_ids: Vec<String>,
    taxon_ids: Vec<String>,
    counts: DMatrix<f64>,
}

impl AbundanceTable {
    pub fn new(
        sample_ids: Vec<String>,
        taxon_ids: Vec<String>,
        counts: DMatrix<f64>,
    ) -> Result<Self> {
        if counts.nrows() != sample_ids.len() || counts.ncols() != taxon_ids.len() {
            return Err(Error::Dimension(format!(
                "abundance matrix is {}x{} but there are {} samples and {} taxa",
                counts.nrows(),
                counts.ncols(),
                sample_ids.len(),
                taxon_ids.len()
            )));
        }
        ensure_unique(&sample_ids, "sample")?;
        ensure_unique(&taxon_ids, "taxon")?;
        for j in 0..counts.ncols() {
            for i in 0..counts.nrows() {
                let v = counts[(i, j)];
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        block: "abundance",
                        row: i,
                        col: j,
                    });
                }
                if v < 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "negative abundance {v} at sample {}, taxon {}",
                        sample_ids[i], taxon_ids[j]
                    )));
                }
            }
        }
        Ok(Self {
            sample_ids,
            taxon_ids,
            counts,
        })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }
    pub fn taxon_ids(&self) -> &[String] {
        &self.taxon_ids
    }
    pub fn counts(&self) -> &DMatrix<f64> {
        &self.counts
    }
    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }
    pub fn n_taxa(&self) -> usize {
        self.taxon_ids.len()
    }

    /// Columns for `taxa`, in that order. Errors if any is absent.
    pub fn select_taxa(&self, taxa: &[String]) -> Result<Self> {
        let index = position_map(&self.taxon_ids);
        let cols =
            taxa.iter()
                .map(|t| {
                    index.get(t.as_str()).copied().ok_or_else(|| {
                        Error::Dimension(format!("taxon {t} is missing from the table"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
        let counts = DMatrix::from_fn(self.n_samples(), cols.len(), |i, j| {
            self.counts[(i, cols[j])]
        });
        Self::new(self.sample_ids.clone(), taxa.to_vec(), counts)
    }
}

fn ensure_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate {what} id {id}")));
        }
    }
    Ok(())
}

fn position_map(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect()
}

/// Lineage truncated at `rank`, or `None` when the lineage stops above it.
fn lineage_at(taxon: &str, rank: Rank) -> Option<String> {
    let parts: Vec<&str> = taxon.split('|').map(str::trim).collect();
    let at = parts
        .iter()
        .position(|p| Rank::of_component(p) == Some(rank))?;
    Some(parts[..=at].join("|"))
}

/// Sums taxa sharing a lineage at `rank`, then keeps groups that are nonzero
/// in at least `min_prevalence` of the samples.
pub fn aggregate_and_filter(
    table: &AbundanceTable,
    rank: &str,
    min_prevalence: f64,
) -> Result<AbundanceTable> {
    let rank: Rank = rank.parse()?;
    if !(0.0..=1.0).contains(&min_prevalence) {
        return Err(Error::InvalidConfig(format!(
            "min_prevalence must lie in [0, 1], got {min_prevalence}"
        )));
    }
    let mut groups: Vec<String> = Vec::new();
    let mut group_of = Vec::with_capacity(table.n_taxa());
    let mut index: HashMap<String, usize> = HashMap::new();
    for taxon in &table.taxon_ids {
        let key = lineage_at(taxon, rank).ok_or_else(|| {
            Error::UnknownRank(format!("taxon {taxon} has no {} level", rank.prefix()))
        })?;
        let g = *index.entry(key.clone()).or_insert_with(|| {
            groups.push(key);
            groups.len() - 1
        });
        group_of.push(g);
    }
    let n = table.n_samples();
    let mut summed = DMatrix::zeros(n, groups.len());
    for (t, &g) in group_of.iter().enumerate() {
        for i in 0..n {
            summed[(i, g)] += table.counts[(i, t)];
        }
    }
    let keep: Vec<usize> = (0..groups.len())
        .filter(|&g| {
            let present = (0..n).filter(|&i| summed[(i, g)] > 0.0).count();
            present as f64 >= min_prevalence * n as f64
        })
        .collect();
    let counts = DMatrix::from_fn(n, keep.len(), |i, j| summed[(i, keep[j])]);
    let ids = keep.iter().map(|&g| groups[g].clone()).collect();
    AbundanceTable::new(table.sample_ids.clone(), ids, counts)
}

fn log_proportions(table: &AbundanceTable, pseudocount: f64) -> Result<DMatrix<f64>> {
    if !(pseudocount >= 0.0 && pseudocount.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "pseudocount must be finite and nonnegative, got {pseudocount}"
        )));
    }
    let (n, t) = table.counts.shape();
    let mut out = DMatrix::zeros(n, t);
    for i in 0..n {
        let total: f64 = table.counts.row(i).iter().map(|v| v + pseudocount).sum();
        for j in 0..t {
            let v = table.counts[(i, j)] + pseudocount;
            if v <= 0.0 {
                return Err(Error::ZeroWithoutPseudocount { row: i, col: j });
            }
            out[(i, j)] = (v / total).ln();
        }
    }
    Ok(out)
}

/// Centered log-ratio: log proportions minus their row mean.
pub fn clr_transform(table: &AbundanceTable, pseudocount: f64) -> Result<DMatrix<f64>> {
    let mut logs = log_proportions(table, pseudocount)?;
    for mut row in logs.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    Ok(logs)
}

/// Additive log-ratio against `reference`; the reference column is removed.
pub fn alr_transform(
    table: &AbundanceTable,
    reference: &str,
    pseudocount: f64,
) -> Result<DMatrix<f64>> {
    let r = table
        .taxon_ids
        .iter()
        .position(|t| t == reference)
        .ok_or_else(|| Error::MissingReference(reference.to_string()))?;
    let logs = log_proportions(table, pseudocount)?;
    let others: Vec<usize> = (0..table.n_taxa()).filter(|&j| j != r).collect();
    Ok(DMatrix::from_fn(logs.nrows(), others.len(), |i, j| {
        logs[(i, others[j])] - logs[(i, r)]
    }))
}

/// Metabolite levels with explicit missingness.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaboliteTable {
    sample_ids: Vec<String>,
    metabolite_ids: Vec<String>,
    /// Row-major, one row per sample.
    levels: Vec<Vec<Option<f64>>>,
}

impl MetaboliteTable {
    pub fn new(
        sample_ids: Vec<String>,
        metabolite_ids: Vec<String>,
        levels: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        if levels.len() != sample_ids.len() {
            return Err(Error::Dimension(format!(
                "{} metabolite rows for {} samples",
                levels.len(),
                sample_ids.len()
            )));
        }
        ensure_unique(&sample_ids, "sample")?;
        ensure_unique(&metabolite_ids, "metabolite")?;
        for (i, row) in levels.iter().enumerate() {
            if row.len() != metabolite_ids.len() {
                return Err(Error::Dimension(format!(
                    "sample {} has {} levels, expected {}",
                    sample_ids[i],
                    row.len(),
                    metabolite_ids.len()
                )));
            }
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            block: "metabolites",
                            row: i,
                            col: j,
                        });
                    }
                    if v < 0.0 {
                        return Err(Error::InvalidConfig(format!(
                            "negative level {v} for metabolite {} in sample {}",
                            metabolite_ids[j], sample_ids[i]
                        )));
                    }
                }
            }
        }
        Ok(Self {
            sample_ids,
            metabolite_ids,
            levels,
        })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }
    pub fn metabolite_ids(&self) -> &[String] {
        &self.metabolite_ids
    }
    pub fn get(&self, sample: usize, metabolite: usize) -> Option<f64> {
        self.levels[sample][metabolite]
    }

    /// Rows reordered to `samples`; errors if one is absent.
    pub fn align_to(&self, samples: &[String]) -> Result<Self> {
        let index = position_map(&self.sample_ids);
        let levels = samples
            .iter()
            .map(|s| {
                index
                    .get(s.as_str())
                    .map(|&i| self.levels[i].clone())
                    .ok_or_else(|| {
                        Error::Dimension(format!("sample {s} has no metabolite profile"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples.to_vec(), self.metabolite_ids.clone(), levels)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    /// Fill with half of the metabolite's smallest observed level.
    #[default]
    HalfMinimum,
    /// Keep the gap; each pair is analysed on the samples observed for both.
    DropSamplePairwise,
}

/// Log levels ready for analysis. Under [`MissingPolicy::DropSamplePairwise`]
/// remaining gaps are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedMetabolites {
    pub ids: Vec<String>,
    pub levels: DMatrix<f64>,
}

/// Drops metabolites missing in at least `max_missing` of samples, fills or
/// keeps the remaining gaps per `policy`, and takes natural logs.
pub fn prepare_metabolites(
    table: &MetaboliteTable,
    max_missing: f64,
    policy: MissingPolicy,
) -> Result<PreparedMetabolites> {
    if !(max_missing > 0.0 && max_missing <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "max_missing must lie in (0, 1], got {max_missing}"
        )));
    }
    let n = table.sample_ids.len();
    let mut ids = Vec::new();
    let mut columns: Vec<DVector<f64>> = Vec::new();
    for (j, id) in table.metabolite_ids.iter().enumerate() {
        let observed: Vec<(usize, f64)> = (0..n)
            .filter_map(|i| table.get(i, j).map(|v| (i, v)))
            .collect();
        let missing = n - observed.len();
        if n == 0 || missing as f64 >= max_missing * n as f64 {
            continue;
        }
        let fill = match policy {
            MissingPolicy::HalfMinimum => {
                observed
                    .iter()
                    .map(|&(_, v)| v)
                    .fold(f64::INFINITY, f64::min)
                    / 2.0
            }
            MissingPolicy::DropSamplePairwise => f64::NAN,
        };
        let mut col = DVector::from_element(n, fill);
        for &(i, v) in &observed {
            col[i] = v;
        }
        for i in 0..n {
            if col[i].is_nan() {
                continue;
            }
            if col[i] <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "metabolite {id} has a non-positive level in sample {}; its log is undefined",
                    table.sample_ids[i]
                )));
            }
            col[i] = col[i].ln();
        }
        ids.push(id.clone());
        columns.push(col);
    }
    if columns.is_empty() {
        return Err(Error::AllMetabolitesDropped);
    }
    let levels = DMatrix::from_columns(&columns);
    Ok(PreparedMetabolites { ids, levels })
}

/// Centers each column and scales it to unit sample standard deviation;
/// constant columns are only centered.
pub fn standardize_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = m.clone();
    if n == 0 {
        return out;
    }
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        if n > 1 {
            let sd = (col.norm_squared() / (n - 1) as f64).sqrt();
            if sd > 0.0 {
                col /= sd;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LogRatio {
    /// Centered log-ratio with the last coordinate dropped (the full set sums
    /// to zero and would make Φ̂ singular).
    Clr,
    Alr {
        reference: String,
    },
}

/// Preprocessing knobs shared by `estimate` and `test`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub rank: String,
    pub min_prevalence: f64,
    pub transform: LogRatio,
    pub pseudocount: f64,
    pub max_missing: f64,
    pub missing_policy: MissingPolicy,
    pub standardize_confounders: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            rank: "family".into(),
            min_prevalence: 0.2,
            transform: LogRatio::Clr,
            pseudocount: DEFAULT_PSEUDOCOUNT,
            max_missing: 0.5,
            missing_policy: MissingPolicy::HalfMinimum,
            standardize_confounders: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        self.rank.parse::<Rank>()?;
        if !(0.0..=1.0).contains(&self.min_prevalence) {
            return Err(Error::InvalidConfig(format!(
                "min_prevalence must lie in [0, 1], got {}",
                self.min_prevalence
            )));
        }
        if !(self.pseudocount >= 0.0 && self.pseudocount.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "pseudocount must be finite and nonnegative, got {}",
                self.pseudocount
            )));
        }
        if !(self.max_missing > 0.0 && self.max_missing <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "max_missing must lie in (0, 1], got {}",
                self.max_missing
            )));
        }
        Ok(())
    }
}

/// Numeric matrix with row and column labels, e.g. a confounder table.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub row_ids: Vec<String>,
    pub column_ids: Vec<String>,
    pub values: DMatrix<f64>,
}

impl LabeledMatrix {
    pub fn align_to(&self, rows: &[String]) -> Result<Self> {
        let index = position_map(&self.row_ids);
        let picks = rows
            .iter()
            .map(|r| {
                index.get(r.as_str()).copied().ok_or_else(|| {
                    Error::Dimension(format!("sample {r} is missing from the covariate table"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            row_ids: rows.to_vec(),
            column_ids: self.column_ids.clone(),
            values: select_rows(&self.values, &picks),
        })
    }
}

/// Analysis-ready paired and external cohorts.
#[derive(Debug, Clone)]
pub struct PreparedStudy {
    pub sample_ids: Vec<String>,
    /// Taxa behind the columns of `x`.
    pub taxa: Vec<String>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub metabolites: PreparedMetabolites,
    pub external: ExternalDataset,
}

fn log_ratio(
    table: &AbundanceTable,
    config: &PreprocessConfig,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    match &config.transform {
        LogRatio::Clr => {
            let clr = clr_transform(table, config.pseudocount)?;
            let keep = clr.ncols().saturating_sub(1);
            Ok((
                clr.columns(0, keep).into_owned(),
                table.taxon_ids[..keep].to_vec(),
            ))
        }
        LogRatio::Alr { reference } => {
            let alr = alr_transform(table, reference, config.pseudocount)?;
            let taxa = table
                .taxon_ids
                .iter()
                .filter(|t| *t != reference)
                .cloned()
                .collect();
            Ok((alr, taxa))
        }
    }
}

/// Aggregates, filters and log-ratio transforms both cohorts (each on its
/// own), aligns metabolites and confounders to the paired abundance samples,
/// and prepares metabolite levels.
pub fn prepare_study(
    abundance: &AbundanceTable,
    confounders: &LabeledMatrix,
    metabolites: &MetaboliteTable,
    external_abundance: &AbundanceTable,
    external_confounders: &LabeledMatrix,
    config: &PreprocessConfig,
) -> Result<PreparedStudy> {
    config.validate()?;
    let paired = aggregate_and_filter(abundance, &config.rank, config.min_prevalence)?;
    if paired.n_taxa() < 2 {
        return Err(Error::InvalidConfig(format!(
            "{} taxa remain after filtering; at least two are needed",
            paired.n_taxa()
        )));
    }
    let external = aggregate_and_filter(external_abundance, &config.rank, 0.0)?
        .select_taxa(paired.taxon_ids())
        .map_err(|e| {
            Error::Dimension(format!(
                "external cohort does not match the paired taxa: {e}"
            ))
        })?;
    if confounders.column_ids != external_confounders.column_ids {
        return Err(Error::Dimension(format!(
            "confounder columns differ between cohorts: {:?} vs {:?}",
            confounders.column_ids, external_confounders.column_ids
        )));
    }
    let (x, taxa) = log_ratio(&paired, config)?;
    let (ex, _) = log_ratio(&external, config)?;
    let mut z = confounders.align_to(paired.sample_ids())?.values;
    let mut ez = external_confounders.align_to(external.sample_ids())?.values;
    if config.standardize_confounders {
        z = standardize_columns(&z);
        ez = standardize_columns(&ez);
    }
    let levels = prepare_metabolites(
        &metabolites.align_to(paired.sample_ids())?,
        config.max_missing,
        config.missing_policy,
    )?;
    Ok(PreparedStudy {
        sample_ids: paired.sample_ids().to_vec(),
        taxa,
        x,
        z,
        metabolites: levels,
        external: ExternalDataset::new(ez, ex)?,
    })
}

/// Multi-split settings for [`pairwise_analysis`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseSettings {
    pub n_splits: usize,
    pub r0: f64,
    pub alpha: f64,
    pub seed: u64,
    pub rule: MedianRule,
}

impl PairwiseSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 {
            return Err(Error::InvalidConfig("n_splits must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.r0) {
            return Err(Error::InvalidR0(self.r0));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn check_pairwise_inputs(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    metabolites: &PreparedMetabolites,
    external: &ExternalDataset,
    config: &SmootherConfig,
) -> Result<()> {
    let n = x.nrows();
    if z.nrows() != n || metabolites.levels.nrows() != n {
        return Err(Error::Dimension(format!(
            "x has {n} rows, z {}, metabolites {}",
            z.nrows(),
            metabolites.levels.nrows()
        )));
    }
    if metabolites.ids.len() != metabolites.levels.ncols() {
        return Err(Error::Dimension(
            "metabolite ids do not match the level columns".into(),
        ));
    }
    if metabolites.ids.len() < 2 {
        return Err(Error::InvalidConfig(
            "at least two metabolites are needed".into(),
        ));
    }
    ensure_unique(&metabolites.ids, "metabolite")?;
    if external.p() != x.ncols() || external.q() != z.ncols() {
        return Err(Error::Dimension(format!(
            "external cohort is p={}, q={}; paired is p={}, q={}",
            external.p(),
            external.q(),
            x.ncols(),
            z.ncols()
        )));
    }
    config.validate(z.ncols())
}

/// Pairs (i, j) with the lexicographically smaller id first, so that results
/// do not depend on column order.
fn canonical_pairs(ids: &[String]) -> Vec<(usize, usize)> {
    let m = ids.len();
    let mut pairs = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            if ids[i] <= ids[j] {
                pairs.push((i, j));
            } else {
                pairs.push((j, i));
            }
        }
    }
    pairs
}

/// Split-level designs shared by every complete-case pair.
struct SharedSplits {
    n: usize,
    full: PlmDesign,
    plans: Vec<SplitPlan>,
    halves: Vec<Result<(PlmDesign, PlmDesign)>>,
}

impl SharedSplits {
    fn new(
        x: &DMatrix<f64>,
        z: &DMatrix<f64>,
        config: &SmootherConfig,
        settings: &PairwiseSettings,
    ) -> Result<Self> {
        let n = x.nrows();
        let full = PlmDesign::new(x, z, config)?;
        let plans = split_plans(n, settings.n_splits, settings.seed);
        let halves = plans
            .par_iter()
            .map(|plan| {
                let design = |rows: &[usize]| {
                    PlmDesign::new(&select_rows(x, rows), &select_rows(z, rows), config)
                };
                Ok((design(&plan.indices_a)?, design(&plan.indices_b)?))
            })
            .collect();
        Ok(Self {
            n,
            full,
            plans,
            halves,
        })
    }

    fn split_estimates(
        &self,
        y: &DVector<f64>,
        w: &DVector<f64>,
        phi_ss: &PhiEstimate,
    ) -> Result<Vec<CorrelationEstimate>> {
        let full = FullSampleFit::from_design(&self.full, y, w)?;
        let outcomes = self
            .plans
            .iter()
            .zip(&self.halves)
            .map(|(plan, halves)| {
                let (a, b) = halves.as_ref().map_err(Clone::clone)?;
                let beta = a.fit(&select(y, &plan.indices_a))?.coefficients;
                let gamma = b.fit(&select(w, &plan.indices_b))?.coefficients;
                assemble_calibrated(&beta, &gamma, phi_ss, &full, plan)
            })
            .collect();
        collect_splits(outcomes)
    }
}

fn complete_rows(y: &DVector<f64>, w: &DVector<f64>) -> Vec<usize> {
    (0..y.len())
        .filter(|&i| !y[i].is_nan() && !w[i].is_nan())
        .collect()
}

fn subset_data(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    rows: &[usize],
) -> Result<PairedDataset> {
    PairedDataset::new(
        select_rows(z, rows),
        select_rows(x, rows),
        select(y, rows),
        select(w, rows),
    )
}

/// Multi-split calibrated test for every metabolite pair, followed by
/// Benjamini–Yekutieli control at `settings.alpha`. A pair that cannot be
/// estimated gets `r_median = NaN`, `p_value = 1` and `n_splits = 0`.
pub fn pairwise_analysis(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    metabolites: &PreparedMetabolites,
    external: &ExternalDataset,
    config: &SmootherConfig,
    settings: &PairwiseSettings,
) -> Result<PairwiseResultTable> {
    settings.validate()?;
    check_pairwise_inputs(x, z, metabolites, external, config)?;
    let phi_ss = estimate_phi_external(external.x(), external.z(), config)?;
    let shared = SharedSplits::new(x, z, config, settings)?;
    let ids = &metabolites.ids;
    let pairs = canonical_pairs(ids);

    let results: Vec<Result<(f64, f64, usize)>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let y = metabolites.levels.column(i).into_owned();
            let w = metabolites.levels.column(j).into_owned();
            let rows = complete_rows(&y, &w);
            let outcome = if rows.len() == shared.n {
                let estimates = shared.split_estimates(&y, &w, &phi_ss)?;
                reduce_splits(
                    &estimates,
                    settings.n_splits,
                    shared.n,
                    settings.r0,
                    settings.rule,
                )?
            } else {
                let data = subset_data(x, z, &y, &w, &rows)?;
                let full = FullSampleFit::new(&data, config)?;
                let plans = split_plans(data.n(), settings.n_splits, settings.seed);
                multi_split_with_plans(
                    &data,
                    &phi_ss,
                    &full,
                    config,
                    &plans,
                    settings.r0,
                    settings.rule,
                )?
            };
            Ok((outcome.r_median, outcome.p_value, outcome.n_splits))
        })
        .collect();

    let mut rows = Vec::with_capacity(pairs.len());
    let mut p_values = Vec::with_capacity(pairs.len());
    for (&(i, j), result) in pairs.iter().zip(results) {
        let (r_median, p_value, n_splits) = match result {
            Ok(v) => v,
            Err(e) => {
                log::warn!("pair ({}, {}) not estimable: {e}", ids[i], ids[j]);
                (f64::NAN, 1.0, 0)
            }
        };
        p_values.push(p_value);
        rows.push(PairwiseRow {
            metabolite_1: ids[i].clone(),
            metabolite_2: ids[j].clone(),
            r_median,
            p_value,
            p_adjusted: 1.0,
            significant: false,
            n_splits,
        });
    }
    let fdr = by_fdr(&p_values, settings.alpha)?;
    for (row, (adj, sig)) in rows
        .iter_mut()
        .zip(fdr.p_adjusted.into_iter().zip(fdr.significant))
    {
        row.p_adjusted = adj;
        row.significant = sig;
    }
    Ok(PairwiseResultTable { rows })
}

/// Plug-in and single-split calibrated estimates for one metabolite pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub metabolite_1: String,
    pub metabolite_2: String,
    pub r_plugin: f64,
    pub r_calibrated: f64,
    pub std_err: f64,
    pub n_effective: usize,
    pub split_seed: u64,
    pub phi_condition_number: f64,
}

/// Plug-in R̂ and one calibrated R̂_ss (split drawn from `seed`) per pair.
pub fn pairwise_estimates(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    metabolites: &PreparedMetabolites,
    external: &ExternalDataset,
    config: &SmootherConfig,
    seed: u64,
) -> Result<Vec<PairEstimate>> {
    check_pairwise_inputs(x, z, metabolites, external, config)?;
    let phi_ss = estimate_phi_external(external.x(), external.z(), config)?;
    let ids = &metabolites.ids;
    let pairs = canonical_pairs(ids);
    Ok(pairs
        .par_iter()
        .map(|&(i, j)| {
            let y = metabolites.levels.column(i).into_owned();
            let w = metabolites.levels.column(j).into_owned();
            let one = || -> Result<(f64, CorrelationEstimate)> {
                let data = subset_data(x, z, &y, &w, &complete_rows(&y, &w))?;
                let full = FullSampleFit::new(&data, config)?;
                let plugin = microbial_correlation(&full.beta, &full.gamma, &full.phi.matrix)?;
                let plan = SplitPlan::random(data.n(), seed);
                let cal =
                    crate::correlation::calibrated_with(&data, &phi_ss, &full, config, &plan)?;
                Ok((plugin, cal))
            };
            match one() {
                Ok((plugin, cal)) => PairEstimate {
                    metabolite_1: ids[i].clone(),
                    metabolite_2: ids[j].clone(),
                    r_plugin: plugin,
                    r_calibrated: cal.r_hat,
                    std_err: cal.std_err.unwrap_or(f64::NAN),
                    n_effective: cal.n_effective,
                    split_seed: seed,
                    phi_condition_number: cal.phi_condition_number,
                },
                Err(e) => {
                    log::warn!("pair ({}, {}) not estimable: {e}", ids[i], ids[j]);
                    PairEstimate {
                        metabolite_1: ids[i].clone(),
                        metabolite_2: ids[j].clone(),
                        r_plugin: f64::NAN,
                        r_calibrated: f64::NAN,
                        std_err: f64::NAN,
                        n_effective: 0,
                        split_seed: seed,
                        phi_condition_number: f64::NAN,
                    }
                }
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeSign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeStyle {
    Solid,
    Dashed,
}

impl fmt::Display for EdgeSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeSign::Positive => "positive",
            EdgeSign::Negative => "negative",
        })
    }
}

impl fmt::Display for EdgeStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeStyle::Solid => "solid",
            EdgeStyle::Dashed => "dashed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEdge {
    pub node1: String,
    pub node2: String,
    pub weight: f64,
    pub sign: EdgeSign,
    pub style: EdgeStyle,
}

/// One edge per significant pair; solid when |r_median| ≥ `solid_threshold`.
pub fn export_network(results: &PairwiseResultTable, solid_threshold: f64) -> Vec<NetworkEdge> {
    results
        .significant()
        .filter(|r| r.r_median.is_finite())
        .map(|r| NetworkEdge {
            node1: r.metabolite_1.clone(),
            node2: r.metabolite_2.clone(),
            weight: r.r_median,
            sign: if r.r_median < 0.0 {
                EdgeSign::Negative
            } else {
                EdgeSign::Positive
            },
            style: if r.r_median.abs() >= solid_threshold {
                EdgeStyle::Solid
            } else {
                EdgeStyle::Dashed
            },
        })
        .collect()
}

// ---------------------------------------------------------------- TSV I/O

/// A parsed TSV table: row ids from the first column, the remaining header
/// cells as column ids, and cells with `None` for `NA`/empty.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub path: String,
    pub row_ids: Vec<String>,
    pub column_ids: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
    /// 1-based file line of each data row, for diagnostics.
    lines: Vec<usize>,
}

fn io_error(path: &Path, e: impl fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn parse_error(path: &str, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        column,
        message: message.into(),
    }
}

pub fn read_tsv(path: &Path) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| io_error(path, e))?;
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(&shown, e))?,
        None => {
            return Err(parse_error(
                &shown,
                1,
                1,
                "empty file, expected a header row",
            ))
        }
    };
    if header.len() < 2 {
        return Err(parse_error(
            &shown,
            line_of(&header),
            1,
            "header needs an id column and at least one data column",
        ));
    }
    let column_ids: Vec<String> = header
        .iter()
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    let width = header.len();
    let mut row_ids = Vec::new();
    let mut cells = Vec::new();
    let mut lines = Vec::new();
    let mut seen = HashSet::new();
    for record in records {
        let record = record.map_err(|e| csv_error(&shown, e))?;
        let line = line_of(&record);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != width {
            return Err(parse_error(
                &shown,
                line,
                record.len().min(width) + 1,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_error(&shown, line, 1, "empty sample id"));
        }
        if !seen.insert(id.clone()) {
            return Err(parse_error(
                &shown,
                line,
                1,
                format!("duplicate sample id {id}"),
            ));
        }
        let mut row = Vec::with_capacity(width - 1);
        for (c, field) in record.iter().enumerate().skip(1) {
            let field = field.trim();
            if field.is_empty() || field.eq_ignore_ascii_case("na") {
                row.push(None);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| {
                parse_error(&shown, line, c + 1, format!("not a number: {field:?}"))
            })?;
            if !v.is_finite() {
                return Err(parse_error(
                    &shown,
                    line,
                    c + 1,
                    format!("non-finite value {field:?}"),
                ));
            }
            row.push(Some(v));
        }
        row_ids.push(id);
        cells.push(row);
        lines.push(line);
    }
    if row_ids.is_empty() {
        return Err(parse_error(&shown, 2, 1, "no data rows"));
    }
    Ok(RawTable {
        path: shown,
        row_ids,
        column_ids,
        cells,
        lines,
    })
}

fn line_of(record: &csv::StringRecord) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn csv_error(path: &str, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    parse_error(path, line, 0, e.to_string())
}

impl RawTable {
    /// Dense matrix; any missing cell is an error pointing at its position.
    pub fn into_dense(self) -> Result<LabeledMatrix> {
        let mut values = DMatrix::zeros(self.row_ids.len(), self.column_ids.len());
        for (i, row) in self.cells.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                values[(i, j)] = v.ok_or_else(|| {
                    parse_error(
                        &self.path,
                        self.lines[i],
                        j + 2,
                        "missing value not allowed here",
                    )
                })?;
            }
        }
        Ok(LabeledMatrix {
            row_ids: self.row_ids,
            column_ids: self.column_ids,
            values,
        })
    }
}

pub fn read_abundance(path: &Path) -> Result<AbundanceTable> {
    let raw = read_tsv(path)?;
    let shown = raw.path.clone();
    for (i, row) in raw.cells.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if let Some(v) = v {
                if *v < 0.0 {
                    return Err(parse_error(
                        &shown,
                        raw.lines[i],
                        j + 2,
                        format!("negative abundance {v}"),
                    ));
                }
            }
        }
    }
    let m = raw.into_dense()?;
    AbundanceTable::new(m.row_ids, m.column_ids, m.values)
}

pub fn read_metabolites(path: &Path) -> Result<MetaboliteTable> {
    let raw = read_tsv(path)?;
    for (i, row) in raw.cells.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if let Some(v) = v {
                if *v < 0.0 {
                    return Err(parse_error(
                        &raw.path,
                        raw.lines[i],
                        j + 2,
                        format!("negative level {v}"),
                    ));
                }
            }
        }
    }
    MetaboliteTable::new(raw.row_ids, raw.column_ids, raw.cells)
}

pub fn read_matrix(path: &Path) -> Result<LabeledMatrix> {
    read_tsv(path)?.into_dense()
}

/// Writes `records` as TSV with a header taken from the field names.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    for r in records {
        writer.serialize(r).map_err(|e| io_error(path, e))?;
    }
    writer.flush().map_err(|e| io_error(path, e))
}

/// Header-only file for an empty record set.
fn write_header(path: &Path, header: &[&str]) -> Result<()> {
    std::fs::write(path, format!("{}\n", header.join("\t"))).map_err(|e| io_error(path, e))
}

pub fn write_results(path: &Path, table: &PairwiseResultTable) -> Result<()> {
    if table.rows.is_empty() {
        return write_header(
            path,
            &[
                "metabolite_1",
                "metabolite_2",
                "r_median",
                "p_value",
                "p_adjusted",
                "significant",
                "n_splits",
            ],
        );
    }
    write_records(path, &table.rows)
}

pub fn read_results(path: &Path) -> Result<PairwiseResultTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    let shown = path.display().to_string();
    let rows = reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(&shown, e)))
        .collect::<Result<Vec<PairwiseRow>>>()?;
    Ok(PairwiseResultTable { rows })
}

pub fn write_edges(path: &Path, edges: &[NetworkEdge]) -> Result<()> {
    if edges.is_empty() {
        return write_header(path, &["node1", "node2", "weight", "sign", "style"]);
    }
    write_records(path, edges)
}

pub fn write_estimates(path: &Path, estimates: &[PairEstimate]) -> Result<()> {
    write_records(path, estimates)
}

/// One line of the simulation summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummaryRow {
    pub family: String,
    pub phi_scenario: String,
    pub n: usize,
    pub r_true: f64,
    pub r0_test: f64,
    pub completed: usize,
    pub failures: usize,
    pub rejection_rate: f64,
    pub median_bias: f64,
    pub median_abs_bias: f64,
    pub mean_std_err: f64,
    pub sd_calibrated: f64,
}

impl From<&GridCell> for SimulationSummaryRow {
    fn from(c: &GridCell) -> Self {
        Self {
            family: c.family.name().to_string(),
            phi_scenario: c.phi_scenario.name().to_string(),
            n: c.n,
            r_true: c.r_true,
            r0_test: c.summary.r0_test,
            completed: c.summary.completed,
            failures: c.summary.failures,
            rejection_rate: c.summary.rejection_rate,
            median_bias: c.summary.median_bias,
            median_abs_bias: c.summary.median_abs_bias,
            mean_std_err: c.summary.mean_std_err,
            sd_calibrated: c.summary.sd_calibrated,
        }
    }
}

pub fn write_simulation_summary(path: &Path, cells: &[GridCell]) -> Result<()> {
    let rows: Vec<SimulationSummaryRow> = cells.iter().map(Into::into).collect();
    write_records(path, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn table(rows: usize, taxa: &[&str], data: &[f64]) -> AbundanceTable {
        let samples = (0..rows).map(|i| format!("s{i}")).collect();
        AbundanceTable::new(
            samples,
            ids(taxa),
            DMatrix::from_row_slice(rows, taxa.len(), data),
        )
        .unwrap()
    }

    #[test]
    fn clr_examples() {
        let t = table(1, &["a", "b", "c", "d"], &[1.0, 1.0, 1.0, 1.0]);
        let c = clr_transform(&t, 0.0).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1e-15));
        let t = table(1, &["a", "b"], &[2.0, 8.0]);
        let c = clr_transform(&t, 0.0).unwrap();
        assert_abs_diff_eq!(c[0], -std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn clr_zero_needs_pseudocount() {
        let t = table(2, &["a", "b"], &[1.0, 2.0, 0.0, 3.0]);
        assert_eq!(
            clr_transform(&t, 0.0),
            Err(Error::ZeroWithoutPseudocount { row: 1, col: 0 })
        );
        let c = clr_transform(&t, 0.5).unwrap();
        assert_abs_diff_eq!(c.row(1).sum(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn alr_examples() {
        let t = table(1, &["a", "b"], &[1.0, 1.0]);
        assert_abs_diff_eq!(alr_transform(&t, "b", 0.0).unwrap()[0], 0.0);
        let t = table(1, &["a", "b"], &[2.0, 8.0]);
        let a = alr_transform(&t, "b", 0.0).unwrap();
        assert_eq!(a.shape(), (1, 1));
        assert_abs_diff_eq!(a[0], -1.3863, epsilon = 1e-4);
        assert_eq!(
            alr_transform(&t, "zz", 0.0),
            Err(Error::MissingReference("zz".into()))
        );
    }

    #[test]
    fn alr_permutes_with_columns() {
        let t = table(1, &["a", "b", "c"], &[2.0, 5.0, 4.0]);
        let u = table(1, &["b", "a", "c"], &[5.0, 2.0, 4.0]);
        let at = alr_transform(&t, "c", 0.0).unwrap();
        let au = alr_transform(&u, "c", 0.0).unwrap();
        assert_eq!(at[0], au[1]);
        assert_eq!(at[1], au[0]);
    }

    #[test]
    fn aggregation_and_prevalence() {
        let taxa = [
            "k__B|p__F|c__C|o__O|f__Lach|g__A|s__a1",
            "k__B|p__F|c__C|o__O|f__Lach|g__A|s__a2",
            "k__B|p__F|c__C|o__O|f__Rum|g__R|s__r1",
        ];
        // f__Rum present in 1 of 3 samples
        let t = table(3, &taxa, &[1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 5.0, 0.0, 0.0]);
        let all = aggregate_and_filter(&t, "family", 0.0).unwrap();
        assert_eq!(all.n_taxa(), 2);
        assert_eq!(all.taxon_ids()[0], "k__B|p__F|c__C|o__O|f__Lach");
        assert_eq!(all.counts().column(0).as_slice(), &[3.0, 3.0, 5.0]);
        for i in 0..3 {
            assert_eq!(all.counts().row(i).sum(), t.counts().row(i).sum());
        }
        let kept = aggregate_and_filter(&t, "f", 0.5).unwrap();
        assert_eq!(kept.n_taxa(), 1);
        assert!(matches!(
            aggregate_and_filter(&t, "tribe", 0.0),
            Err(Error::UnknownRank(_))
        ));
        assert!(matches!(
            aggregate_and_filter(&t, "strain", 0.0),
            Err(Error::UnknownRank(_))
        ));
    }

    fn metabolites(levels: Vec<Vec<Option<f64>>>, names: &[&str]) -> MetaboliteTable {
        let samples = (0..levels.len()).map(|i| format!("s{i}")).collect();
        MetaboliteTable::new(samples, ids(names), levels).unwrap()
    }

    #[test]
    fn metabolite_preparation() {
        let t = metabolites(
            vec![
                vec![Some(1.0), None, Some(2.0)],
                vec![Some(std::f64::consts::E), None, None],
                vec![Some(1.0), Some(3.0), Some(4.0)],
                vec![Some(1.0), None, Some(8.0)],
                vec![Some(1.0), None, Some(2.0)],
            ],
            &["m1", "m2", "m3"],
        );
        let p = prepare_metabolites(&t, 0.5, MissingPolicy::HalfMinimum).unwrap();
        // m2 is missing in 4 of 5 samples
        assert_eq!(p.ids, ids(&["m1", "m3"]));
        assert_abs_diff_eq!(p.levels[(1, 0)], 1.0, epsilon = 1e-15);
        // half of min 2 is 1, log 1 = 0
        assert_eq!(p.levels[(1, 1)], 0.0);
        let d = prepare_metabolites(&t, 0.5, MissingPolicy::DropSamplePairwise).unwrap();
        assert!(d.levels[(1, 1)].is_nan());
        let sparse = metabolites(
            vec![vec![None, Some(1.0)], vec![Some(2.0), None]],
            &["a", "b"],
        );
        assert_eq!(
            prepare_metabolites(&sparse, 0.5, MissingPolicy::HalfMinimum),
            Err(Error::AllMetabolitesDropped)
        );
    }

    #[test]
    fn network_styles() {
        let row = |a: &str, r: f64, sig: bool| PairwiseRow {
            metabolite_1: a.into(),
            metabolite_2: "z".into(),
            r_median: r,
            p_value: 0.0,
            p_adjusted: 0.0,
            significant: sig,
            n_splits: 1,
        };
        let t = PairwiseResultTable {
            rows: vec![
                row("a", 0.35, true),
                row("b", -0.2, true),
                row("c", 0.9, false),
            ],
        };
        let e = export_network(&t, 0.3);
        assert_eq!(e.len(), 2);
        assert_eq!(
            (e[0].sign, e[0].style),
            (EdgeSign::Positive, EdgeStyle::Solid)
        );
        assert_eq!(
            (e[1].sign, e[1].style),
            (EdgeSign::Negative, EdgeStyle::Dashed)
        );
        assert!(export_network(&PairwiseResultTable::default(), 0.3).is_empty());
    }

    #[test]
    fn standardize() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let s = standardize_columns(&m);
        assert_abs_diff_eq!(
            s.column(0).as_slice(),
            &[-1.0, 0.0, 1.0][..],
            epsilon = 1e-15
        );
        assert_eq!(s.column(1).as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn tsv_diagnostics() {
        let dir = std::env::temp_dir().join(format!("microcorr-tsv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.tsv");
        std::fs::write(&p, "id\ta\tb\ns1\t1\t2\ns2\t3\tx\n").unwrap();
        match read_tsv(&p) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (3, 3)),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&p, "id\ta\tb\ns1\t1\tNA\ns2\t3\t4\n").unwrap();
        let t = read_tsv(&p).unwrap();
        assert_eq!(t.cells[0], vec![Some(1.0), None]);
        match t.into_dense() {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 3)),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&p, "id\ta\tb\ns1\t1\n").unwrap();
        assert!(matches!(read_tsv(&p), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(
            read_tsv(&dir.join("absent.tsv")),
            Err(Error::Io { .. })
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn results_round_trip() {
        let dir = std::env::temp_dir().join(format!("microcorr-rt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("r.tsv");
        let t = PairwiseResultTable {
            rows: vec![PairwiseRow {
                metabolite_1: "a".into(),
                metabolite_2: "b".into(),
                r_median: 0.25,
                p_value: 0.01,
                p_adjusted: 0.03,
                significant: true,
                n_splits: 10,
            }],
        };
        write_results(&p, &t).unwrap();
        assert_eq!(read_results(&p).unwrap(), t);
        write_results(&p, &PairwiseResultTable::default()).unwrap();
        assert!(read_results(&p).unwrap().is_empty());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
