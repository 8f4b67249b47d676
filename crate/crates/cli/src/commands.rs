//! Subcommand bodies. Each writes its outputs and a `manifest.toml` into the
//! output directory; the manifest is itself a valid `--config` file.

use std::path::Path;

use microcorr::pipeline::{
    export_network, pairwise_analysis, pairwise_estimates, prepare_study, read_abundance,
    read_matrix, read_metabolites, read_results, write_edges, write_estimates, write_results,
    write_simulation_summary, PreparedStudy,
};
use microcorr::simulation::{run_replications, GridCell};
use microcorr::{Error, Result, SmootherConfig};

use crate::config::{Command, ManifestInfo, RunConfig, SmootherOverrides};

pub const MANIFEST: &str = "manifest.toml";
pub const SIMULATION_SUMMARY: &str = "simulation_summary.tsv";
pub const ESTIMATES: &str = "estimates.tsv";
pub const RESULTS: &str = "results.tsv";
pub const EDGES: &str = "edges.tsv";

pub fn run(command: Command, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir).map_err(|e| io(&config.out_dir, e))?;
    let mut echo = config.clone();
    let outputs = match command {
        Command::Simulate => simulate(config)?,
        Command::Estimate => {
            let (study, smoother) = load_study(config)?;
            echo.smoother = pinned(&smoother);
            let est = pairwise_estimates(
                &study.x,
                &study.z,
                &study.metabolites,
                &study.external,
                &smoother,
                config.seed,
            )?;
            write_estimates(&config.out_dir.join(ESTIMATES), &est)?;
            vec![ESTIMATES]
        }
        Command::Test => {
            let (study, smoother) = load_study(config)?;
            echo.smoother = pinned(&smoother);
            let table = pairwise_analysis(
                &study.x,
                &study.z,
                &study.metabolites,
                &study.external,
                &smoother,
                &config.pairwise_settings(),
            )?;
            log::info!(
                "{} of {} pairs significant",
                table.significant().count(),
                table.len()
            );
            write_results(&config.out_dir.join(RESULTS), &table)?;
            vec![RESULTS]
        }
        Command::Network => {
            let table = read_results(config.inputs.results()?)?;
            let edges = export_network(&table, config.network.solid_threshold);
            write_edges(&config.out_dir.join(EDGES), &edges)?;
            vec![EDGES]
        }
    };
    echo.manifest = Some(ManifestInfo {
        command: command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    });
    let text =
        toml::to_string(&echo).map_err(|e| Error::InternalConsistency(format!("manifest: {e}")))?;
    let path = config.out_dir.join(MANIFEST);
    std::fs::write(&path, text).map_err(|e| io(&path, e))
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// The resolved smoother written back as explicit settings.
fn pinned(c: &SmootherConfig) -> SmootherOverrides {
    SmootherOverrides {
        kernel_order: Some(c.kernel_order),
        bandwidth: Some(c.bandwidth),
        cutoff: Some(c.cutoff),
        external_bandwidth: Some(c.external_bandwidth),
        external_cutoff: Some(c.external_cutoff),
        leave_one_out: Some(c.leave_one_out),
    }
}

fn load_study(config: &RunConfig) -> Result<(PreparedStudy, SmootherConfig)> {
    let [abundance, metabolites, covariates, external_abundance, external_covariates] =
        config.inputs.study()?;
    let study = prepare_study(
        &read_abundance(abundance)?,
        &read_matrix(covariates)?,
        &read_metabolites(metabolites)?,
        &read_abundance(external_abundance)?,
        &read_matrix(external_covariates)?,
        &config.preprocess,
    )?;
    let smoother = config
        .smoother
        .resolve(study.x.nrows(), study.external.n(), study.z.ncols())?;
    Ok((study, smoother))
}

fn simulate(config: &RunConfig) -> Result<Vec<&'static str>> {
    let grid = config.grid();
    let mut cells = grid.cells();
    let custom = config.smoother != SmootherOverrides::default();
    // resolve every cell before running any of them
    for c in &mut cells {
        let name = format!(
            "{}/{}/n={}/R={}",
            c.confounder_family.name(),
            c.phi_scenario.name(),
            c.n,
            c.r0_true
        );
        if custom {
            let s = config
                .smoother
                .resolve(c.n, c.external_n(), c.q)
                .map_err(|e| Error::InvalidConfig(format!("cell {name}: {e}")))?;
            c.smoother = Some(s);
        }
        c.validate()
            .map_err(|e| Error::InvalidConfig(format!("cell {name}: {e}")))?;
    }
    let mut out = Vec::with_capacity(cells.len());
    for c in &cells {
        log::info!(
            "{} {} n={} R={}",
            c.confounder_family.name(),
            c.phi_scenario.name(),
            c.n,
            c.r0_true
        );
        let summary = run_replications(c, grid.r0_test)?;
        out.push(GridCell {
            family: c.confounder_family,
            phi_scenario: c.phi_scenario,
            n: c.n,
            r_true: c.r0_true,
            summary,
        });
    }
    write_simulation_summary(&config.out_dir.join(SIMULATION_SUMMARY), &out)?;
    Ok(vec![SIMULATION_SUMMARY])
}
