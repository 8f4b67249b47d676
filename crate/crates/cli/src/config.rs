//! Run configuration: a TOML file merged with command-line overrides, then
//! validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use microcorr::inference::MedianRule;
use microcorr::pipeline::{PairwiseSettings, PreprocessConfig};
use microcorr::simulation::{ConfounderFamily, PhiScenario, SimulationGrid};
use microcorr::{Error, Result, SmootherConfig, DEFAULT_KERNEL_ORDER};

/// Smoother knobs; unset values come from the default rate schedule once the
/// sample sizes are known.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmootherOverrides {
    pub kernel_order: Option<usize>,
    pub bandwidth: Option<f64>,
    pub cutoff: Option<f64>,
    pub external_bandwidth: Option<f64>,
    pub external_cutoff: Option<f64>,
    pub leave_one_out: Option<bool>,
}

impl SmootherOverrides {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.kernel_order {
            if m < 2 || !m.is_multiple_of(2) {
                return Err(Error::InvalidConfig(format!(
                    "kernel_order must be even and >= 2, got {m}"
                )));
            }
        }
        for (name, v) in [
            ("bandwidth", self.bandwidth),
            ("cutoff", self.cutoff),
            ("external_bandwidth", self.external_bandwidth),
            ("external_cutoff", self.external_cutoff),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "{name} must be positive, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Default schedule for (n, N, q) with any set value taking precedence.
    pub fn resolve(&self, n: usize, big_n: usize, q: usize) -> Result<SmootherConfig> {
        let m = self.kernel_order.unwrap_or(DEFAULT_KERNEL_ORDER);
        let mut c = SmootherConfig::default_schedule(n, big_n, q, m);
        if let Some(v) = self.bandwidth {
            c.bandwidth = v;
        }
        if let Some(v) = self.cutoff {
            c.cutoff = v;
        }
        if let Some(v) = self.external_bandwidth {
            c.external_bandwidth = v;
        }
        if let Some(v) = self.external_cutoff {
            c.external_cutoff = v;
        }
        if let Some(v) = self.leave_one_out {
            c.leave_one_out = v;
        }
        c.validate(q)?;
        Ok(c)
    }

    fn merge(&mut self, o: &SmootherOverrides) {
        self.kernel_order = o.kernel_order.or(self.kernel_order);
        self.bandwidth = o.bandwidth.or(self.bandwidth);
        self.cutoff = o.cutoff.or(self.cutoff);
        self.external_bandwidth = o.external_bandwidth.or(self.external_bandwidth);
        self.external_cutoff = o.external_cutoff.or(self.external_cutoff);
        self.leave_one_out = o.leave_one_out.or(self.leave_one_out);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub abundance: Option<PathBuf>,
    pub metabolites: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub external_abundance: Option<PathBuf>,
    pub external_covariates: Option<PathBuf>,
    /// Result table consumed by `network`.
    pub results: Option<PathBuf>,
}

impl InputPaths {
    fn merge(&mut self, o: &InputPaths) {
        let pick = |a: &mut Option<PathBuf>, b: &Option<PathBuf>| {
            if b.is_some() {
                a.clone_from(b);
            }
        };
        pick(&mut self.abundance, &o.abundance);
        pick(&mut self.metabolites, &o.metabolites);
        pick(&mut self.covariates, &o.covariates);
        pick(&mut self.external_abundance, &o.external_abundance);
        pick(&mut self.external_covariates, &o.external_covariates);
        pick(&mut self.results, &o.results);
    }

    fn require<'a>(&'a self, name: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("missing input path: {name}")))
    }

    pub fn study(&self) -> Result<[&Path; 5]> {
        Ok([
            self.require("abundance", &self.abundance)?,
            self.require("metabolites", &self.metabolites)?,
            self.require("covariates", &self.covariates)?,
            self.require("external_abundance", &self.external_abundance)?,
            self.require("external_covariates", &self.external_covariates)?,
        ])
    }

    pub fn results(&self) -> Result<&Path> {
        self.require("results", &self.results)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestOptions {
    pub n_splits: usize,
    pub r0: f64,
    pub alpha: f64,
    pub median_rule: MedianRule,
}

impl Default for TestOptions {
    fn default() -> Self {
        Self {
            n_splits: 100,
            r0: 0.0,
            alpha: 0.05,
            median_rule: MedianRule::MedianSplit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub families: Vec<ConfounderFamily>,
    pub phi_scenarios: Vec<PhiScenario>,
    pub sample_sizes: Vec<usize>,
    pub r_values: Vec<f64>,
    pub r0_test: f64,
    pub replications: usize,
    pub alpha: f64,
    pub external_factor: f64,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        let g = SimulationGrid::default();
        Self {
            families: g.families,
            phi_scenarios: g.phi_scenarios,
            sample_sizes: g.sample_sizes,
            r_values: g.r_values,
            r0_test: g.r0_test,
            replications: g.replications,
            alpha: g.alpha,
            external_factor: g.external_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkOptions {
    pub solid_threshold: f64,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        Self {
            solid_threshold: microcorr::pipeline::DEFAULT_SOLID_THRESHOLD,
        }
    }
}

/// Provenance written into every manifest; ignored when read back.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifestInfo {
    pub command: String,
    pub version: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 means all available cores.
    pub threads: usize,
    pub out_dir: PathBuf,
    pub inputs: InputPaths,
    pub smoother: SmootherOverrides,
    pub preprocess: PreprocessConfig,
    pub test: TestOptions,
    pub simulate: SimulateOptions,
    pub network: NetworkOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ManifestInfo>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 20240601,
            threads: 0,
            out_dir: PathBuf::from("."),
            inputs: InputPaths::default(),
            smoother: SmootherOverrides::default(),
            preprocess: PreprocessConfig::default(),
            test: TestOptions::default(),
            simulate: SimulateOptions::default(),
            network: NetworkOptions::default(),
            manifest: None,
        }
    }
}

/// Values given on the command line; `None` leaves the file (or default) value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub inputs: InputPaths,
    pub smoother: SmootherOverrides,
    pub rank: Option<String>,
    pub min_prevalence: Option<f64>,
    pub pseudocount: Option<f64>,
    pub alr_reference: Option<String>,
    pub max_missing: Option<f64>,
    pub n_splits: Option<usize>,
    pub r0: Option<f64>,
    pub alpha: Option<f64>,
    pub median_rule: Option<MedianRule>,
    pub families: Option<Vec<ConfounderFamily>>,
    pub phi_scenarios: Option<Vec<PhiScenario>>,
    pub sample_sizes: Option<Vec<usize>>,
    pub r_values: Option<Vec<f64>>,
    pub r0_test: Option<f64>,
    pub replications: Option<usize>,
    pub solid_threshold: Option<f64>,
}

fn set<T: Clone>(target: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *target = v.clone();
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_column(&text, s.start))
                .unwrap_or((0, 0));
            Error::Parse {
                path: path.display().to_string(),
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        set(&mut self.seed, &o.seed);
        set(&mut self.threads, &o.threads);
        set(&mut self.out_dir, &o.out_dir);
        self.inputs.merge(&o.inputs);
        self.smoother.merge(&o.smoother);
        set(&mut self.preprocess.rank, &o.rank);
        set(&mut self.preprocess.min_prevalence, &o.min_prevalence);
        set(&mut self.preprocess.pseudocount, &o.pseudocount);
        if let Some(r) = &o.alr_reference {
            self.preprocess.transform = microcorr::pipeline::LogRatio::Alr {
                reference: r.clone(),
            };
        }
        set(&mut self.preprocess.max_missing, &o.max_missing);
        set(&mut self.test.n_splits, &o.n_splits);
        set(&mut self.test.r0, &o.r0);
        set(&mut self.test.alpha, &o.alpha);
        set(&mut self.test.median_rule, &o.median_rule);
        set(&mut self.simulate.families, &o.families);
        set(&mut self.simulate.phi_scenarios, &o.phi_scenarios);
        set(&mut self.simulate.sample_sizes, &o.sample_sizes);
        set(&mut self.simulate.r_values, &o.r_values);
        set(&mut self.simulate.r0_test, &o.r0_test);
        set(&mut self.simulate.replications, &o.replications);
        set(&mut self.network.solid_threshold, &o.solid_threshold);
    }

    pub fn pairwise_settings(&self) -> PairwiseSettings {
        PairwiseSettings {
            n_splits: self.test.n_splits,
            r0: self.test.r0,
            alpha: self.test.alpha,
            seed: self.seed,
            rule: self.test.median_rule,
        }
    }

    pub fn grid(&self) -> SimulationGrid {
        let s = &self.simulate;
        SimulationGrid {
            families: s.families.clone(),
            phi_scenarios: s.phi_scenarios.clone(),
            sample_sizes: s.sample_sizes.clone(),
            r_values: s.r_values.clone(),
            r0_test: s.r0_test,
            replications: s.replications,
            seed: self.seed,
            alpha: s.alpha,
            external_factor: s.external_factor,
            smoother: None,
        }
    }

    /// Checks the parts used by `command` against their module preconditions.
    pub fn validate(&self, command: Command) -> Result<()> {
        self.smoother.validate()?;
        match command {
            Command::Simulate => self.grid().validate(),
            Command::Estimate => {
                self.inputs.study()?;
                self.preprocess.validate()
            }
            Command::Test => {
                self.inputs.study()?;
                self.preprocess.validate()?;
                self.pairwise_settings().validate()
            }
            Command::Network => {
                self.inputs.results()?;
                let t = self.network.solid_threshold;
                if !(t >= 0.0 && t.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "solid_threshold must be nonnegative, got {t}"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Estimate,
    Test,
    Network,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Estimate => "estimate",
            Command::Test => "test",
            Command::Network => "network",
        }
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}
