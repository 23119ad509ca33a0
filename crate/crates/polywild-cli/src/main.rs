//! Command-line surface of polywild.
//!
//! Exit codes: 0 when every requested certificate passes, 1 on a certificate failure, 2 on a
//! configuration error. A machine-readable report is written in every case that gets past
//! configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use polywild::config::{pentagon_bundle, search_config, verify_properties, ConfigBundle};
use polywild::driver::{analyse, make_schedule, run, seed_subsolution, AnalysisSettings, DriverError, RunReport, Seed};
use polywild::fields::{export, DomainBox, SpaceTimeField, SpatialBump};
use polywild::quadrature::Quadrature;
use polywild::refine::{RefineError, RefineSettings};
use polywild::Energy;

#[derive(Parser)]
#[command(name = "polywild", version, about = "Staged convex integration for polyconvex gradient flows")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Energy JSON (default: quadratic with ν = 1).
    #[arg(long, global = true)]
    energy: Option<PathBuf>,
    /// Bundle JSON (default: the synthetic pentagon bundle).
    #[arg(long, global = true)]
    bundle: Option<PathBuf>,
    /// RunConfig JSON; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    stages: Option<usize>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    resolution: Option<usize>,
    #[arg(long = "tolerance-scale", global = true)]
    tolerance_scale: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit the bundle to the graph of the energy.
    Search {
        #[arg(long, default_value_t = 200)]
        iters: usize,
    },
    /// Check the structural properties of the bundle.
    VerifyConfig {
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Build and certify the seed subsolution.
    Seed,
    /// Run all stages and write the run report.
    Run,
    /// Run, then add convergence, wildness, energy and weak-form checks.
    Report,
    /// Run, then export the final field.
    Export {
        /// Grid points per axis per leaf.
        #[arg(long, default_value_t = 2)]
        grid: usize,
    },
}

/// Static run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    energy: Option<PathBuf>,
    bundle: Option<PathBuf>,
    out: PathBuf,
    domain_lo: [f64; 3],
    domain_hi: [f64; 3],
    rho: f64,
    stages: usize,
    bar_lambda: f64,
    gap: f64,
    quadrature: Quadrature,
    probes: usize,
    tolerance_scale: f64,
    seed: u64,
    /// Seed amplitude vector of the spatial bump φ and the seed scale ε.
    phi_amp: [f64; 2],
    phi_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            energy: None,
            bundle: None,
            out: PathBuf::from("polywild_out"),
            domain_lo: [0.0; 3],
            domain_hi: [1.0; 3],
            rho: 0.3,
            stages: 3,
            bar_lambda: 0.5,
            gap: 0.05,
            quadrature: Quadrature::default(),
            probes: 2000,
            tolerance_scale: 1.0,
            seed: 0,
            phi_amp: [0.0; 2],
            phi_eps: 0.0,
        }
    }
}

/// A failure with its exit code.
struct Fail {
    code: u8,
    msg: String,
}

fn config_err(msg: impl std::fmt::Display) -> Fail {
    Fail { code: 2, msg: msg.to_string() }
}

fn load_config(c: &Common) -> Result<RunConfig, Fail> {
    let mut rc = match &c.config {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if c.energy.is_some() {
        rc.energy = c.energy.clone();
    }
    if c.bundle.is_some() {
        rc.bundle = c.bundle.clone();
    }
    if let Some(o) = &c.out {
        rc.out = o.clone();
    }
    if let Some(s) = c.stages {
        rc.stages = s;
    }
    if let Some(r) = c.rho {
        rc.rho = r;
    }
    if let Some(r) = c.resolution {
        rc.quadrature.resolution = r;
    }
    if let Some(t) = c.tolerance_scale {
        rc.tolerance_scale = t;
    }
    if let Some(s) = c.seed {
        rc.seed = s;
    }
    if !(rc.tolerance_scale > 0.0) {
        return Err(config_err("tolerance scale must be positive"));
    }
    Quadrature::new(rc.quadrature.order, rc.quadrature.resolution).map_err(config_err)?;
    std::fs::create_dir_all(&rc.out).map_err(|e| config_err(format!("{}: {e}", rc.out.display())))?;
    Ok(rc)
}

fn read(p: &Path) -> Result<String, Fail> {
    std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))
}

fn load_bundle(rc: &RunConfig) -> Result<ConfigBundle, Fail> {
    match &rc.bundle {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| config_err(format!("{}: {e}", p.display()))),
        None => Ok(pentagon_bundle(0.2, 0.6, 0.5)),
    }
}

fn load_energy(rc: &RunConfig) -> Result<Energy, Fail> {
    let e: Energy = match &rc.energy {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => Energy::quadratic(1.0),
    };
    e.validate().map_err(config_err)?;
    Ok(e)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> Result<(), Fail> {
    let s = serde_json::to_string_pretty(v).map_err(|e| config_err(e.to_string()))?;
    std::fs::write(dir.join(name), s + "\n").map_err(|e| Fail { code: 2, msg: format!("{name}: {e}") })
}

fn make_seed(rc: &RunConfig, bundle: &ConfigBundle) -> Result<Seed, Fail> {
    let domain = DomainBox::new(rc.domain_lo, rc.domain_hi).map_err(config_err)?;
    let phi = SpatialBump { rect: domain.rect(), amp: rc.phi_amp };
    seed_subsolution(phi, rc.phi_eps, domain, bundle, &rc.quadrature).map_err(config_err)
}

/// Runs the schedule; a failing stage writes the partial report and exits 1.
fn do_run(rc: &RunConfig, bundle: &ConfigBundle, energy: &Energy) -> Result<(Vec<SpaceTimeField>, RunReport), Fail> {
    let seed = make_seed(rc, bundle)?;
    let schedule = make_schedule(rc.rho, rc.bar_lambda, bundle, rc.stages, rc.gap).map_err(config_err)?;
    let settings = RefineSettings { quad: rc.quadrature, probes: rc.probes, seed: rc.seed, ..RefineSettings::default() };
    match run(&seed, &schedule, bundle, energy, &settings) {
        Ok(x) => Ok(x),
        Err(DriverError::Stage { stage, source, partial }) => {
            write_json(&rc.out, "report.json", &partial)?;
            let code = match source {
                RefineError::Params(_) | RefineError::Eps(_) | RefineError::EpsPrime | RefineError::Host(_) => 2,
                _ => 1,
            };
            Err(Fail { code, msg: format!("stage {stage}: {source}") })
        }
        Err(e) => Err(config_err(e)),
    }
}

fn execute(cli: Cli) -> Result<bool, Fail> {
    let rc = load_config(&cli.common)?;
    let bundle = load_bundle(&rc)?;
    let energy = load_energy(&rc)?;
    match cli.cmd {
        Cmd::Search { iters } => {
            let (found, outcome) = search_config(&energy, &bundle, iters, 1e-3);
            write_json(&rc.out, "bundle.json", &found)?;
            write_json(&rc.out, "search.json", &outcome)?;
            Ok(outcome.mode == polywild::config::BundleMode::GraphCertified)
        }
        Cmd::VerifyConfig { samples } => {
            let r = verify_properties(&bundle, samples);
            write_json(&rc.out, "properties.json", &r)?;
            Ok(r.pass)
        }
        Cmd::Seed => {
            let seed = make_seed(&rc, &bundle)?;
            let check = polywild::refine::check_subsolution(&seed.field, &bundle, rc.bar_lambda, &rc.quadrature, rc.probes, rc.seed);
            let ok = check.failures == 0 && check.max_div_defect <= polywild::refine::DIV_TOL;
            let eps0 = seed.eps0.is_finite().then_some(seed.eps0);
            write_json(&rc.out, "seed.json", &serde_json::json!({ "scale": seed.scale, "eps0": eps0, "check": check, "pass": ok }))?;
            Ok(ok)
        }
        Cmd::Run => {
            let (_, report) = do_run(&rc, &bundle, &energy)?;
            write_json(&rc.out, "report.json", &report)?;
            Ok(report.pass)
        }
        Cmd::Report => {
            let (fields, mut report) = do_run(&rc, &bundle, &energy)?;
            let st = AnalysisSettings { seed: rc.seed.wrapping_add(7), tol_scale: rc.tolerance_scale, ..AnalysisSettings::default() };
            analyse(&mut report, &fields, &bundle, &energy, &st).map_err(config_err)?;
            write_json(&rc.out, "report.json", &report)?;
            Ok(report.pass && report.analysis.as_ref().is_some_and(|a| a.pass))
        }
        Cmd::Export { grid } => {
            let (fields, report) = do_run(&rc, &bundle, &energy)?;
            write_json(&rc.out, "report.json", &report)?;
            let recs = export(fields.last().expect("seed"), &rc.out.join("field"), grid).map_err(config_err)?;
            eprintln!("exported {} leaves", recs.len());
            Ok(report.pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("certificate failed; see the report");
            ExitCode::from(1)
        }
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
