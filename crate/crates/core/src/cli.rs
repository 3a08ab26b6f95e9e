//! Command-line driver: `kernel`, `verify`, `export`, `cuttime`, `evolve`.
//!
//! Exit codes: 0 pass, 1 suite failure or runtime error, 2 configuration or
//! usage error, 3 missing artifact. JSON reports carry `"schema": 1`; CSV
//! outputs depend only on the configuration.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, FunctionConfig};
use crate::controllability::{
    attainability_check, contact_sets, default_attainability_tolerance, initial_data_characterization,
    randomized_family,
};
use crate::cut_locus::{barrier, cut_time_map, level_set_identity_check, CutProfile, CutTolerances};
use crate::dynamics::{graph_evolution_check, minimizer_refine, RefineOptions};
use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::hamiltonian::Potential;
use crate::kernel::KernelLadder;
use crate::lax_oleinik::{
    default_gap_tolerance, peierls_barrier, t_minus, t_plus, t_plus_at, triple_identity_check, weak_kam_limit, Direction, OperatorTag,
    SemigroupEvolution,
};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Adjunction,
    Attainability,
    Cutlocus,
    Controllability,
    Dynamics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    Function,
    Kernel,
    Cutprofile,
    Arcs,
}

#[derive(Debug, Parser)]
#[command(name = "weakkam", version, about = "Lax-Oleinik semigroups and weak KAM diagnostics on the torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// TOML experiment configuration.
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build and save the kernel ladder with its check report.
    Kernel(Common),
    /// Run a property suite; exit 0 iff every check passes.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Write plotting CSVs; needs a saved ladder.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        what: ExportKind,
    },
    /// Cut-time map of the weak KAM solution.
    Cuttime(Common),
    /// Evolve the configured function under T-, T+ and T-T+.
    Evolve(Common),
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }

    fn flag(name: impl Into<String>, pass: bool) -> Self {
        Self {
            name: name.into(),
            value: if pass { 1.0 } else { 0.0 },
            tolerance: 1.0,
            pass,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub schema: u32,
    pub suite: Suite,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub generated_unix: u64,
}

impl SuiteReport {
    fn new(suite: Suite) -> Self {
        Self {
            schema: 1,
            suite,
            pass: true,
            checks: Vec::new(),
            notes: Vec::new(),
            generated_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    fn push(&mut self, check: Check) {
        self.pass &= check.pass;
        self.checks.push(check);
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::InvalidGrid(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        _ => EXIT_FAIL,
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
        }
    };
    let (common, action): (&Common, Box<dyn Fn(&ExperimentConfig, &Path) -> Result<i32> + Sync>) = match &cli.command {
        Command::Kernel(c) => (c, Box::new(|cfg, out| cmd_kernel(cfg, out).map(|_| EXIT_PASS))),
        Command::Verify { common, suite } => {
            let suite = *suite;
            (common, Box::new(move |cfg, out| cmd_verify(cfg, suite, out)))
        }
        Command::Export { common, what } => {
            let what = *what;
            (common, Box::new(move |cfg, out| cmd_export(cfg, what, out).map(|_| EXIT_PASS)))
        }
        Command::Cuttime(c) => (c, Box::new(|cfg, out| cmd_cuttime(cfg, out).map(|_| EXIT_PASS))),
        Command::Evolve(c) => (c, Box::new(|cfg, out| cmd_evolve(cfg, out).map(|_| EXIT_PASS))),
    };
    let result = ExperimentConfig::load(&common.config).and_then(|cfg| {
        let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers.unwrap_or(0))
            .build()
            .map_err(|e| Error::Config {
                field: "workers".into(),
                message: e.to_string(),
            })?;
        pool.install(|| action(&cfg, &out))
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write(out: &Path, name: &str, text: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let path = out.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<PathBuf> {
    write(out, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn ladder_dir(out: &Path) -> PathBuf {
    out.join("kernel")
}

fn build_ladder(cfg: &ExperimentConfig) -> Result<KernelLadder> {
    KernelLadder::build(&cfg.spec()?, cfg.grid()?, cfg.kernel_params(), cfg.kernel.t_max)
}

/// The saved ladder for this configuration.
fn saved_ladder(cfg: &ExperimentConfig, out: &Path) -> Result<KernelLadder> {
    KernelLadder::load(&ladder_dir(out), &cfg.spec()?, cfg.grid()?, cfg.kernel_params(), cfg.kernel.t_max)
}

/// The saved ladder, or a freshly built and saved one with a warning.
fn ladder_or_build(cfg: &ExperimentConfig, out: &Path) -> Result<KernelLadder> {
    match saved_ladder(cfg, out) {
        Ok(l) => Ok(l),
        Err(Error::MissingArtifact(why)) => {
            eprintln!("warning: {why}; building the kernel ladder");
            let l = build_ladder(cfg)?;
            l.save(&ladder_dir(out))?;
            Ok(l)
        }
        Err(e) => Err(e),
    }
}

fn random_function(ladder: &KernelLadder, seed: u64) -> Result<GridFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = *ladder.grid();
    GridFunction::new(g, (0..g.len()).map(|_| rng.gen_range(-1.0..=1.0)).collect())
}

/// `S^- 0`.
pub fn weak_kam_solution(cfg: &ExperimentConfig, ladder: &KernelLadder) -> Result<GridFunction> {
    let zero = GridFunction::constant(*ladder.grid(), 0.0);
    Ok(weak_kam_limit(&zero, ladder, Direction::Minus, cfg.tolerances.limit)?.value)
}

pub fn initial_function(cfg: &ExperimentConfig, ladder: &KernelLadder) -> Result<GridFunction> {
    let g = *ladder.grid();
    let tau = std::f64::consts::TAU;
    match &cfg.function {
        FunctionConfig::Cosine { amplitude, mode } => {
            let (a, k) = (*amplitude, *mode as f64);
            Ok(GridFunction::from_fn(g, |x| a * (tau * k * x[0]).cos()))
        }
        FunctionConfig::Corner { cap } => Ok(GridFunction::from_fn(g, |x| (tau * x[0]).cos().min(*cap))),
        FunctionConfig::Constant { value } => Ok(GridFunction::constant(g, *value)),
        FunctionConfig::WeakKam => weak_kam_solution(cfg, ladder),
        FunctionConfig::Random { seed } => random_function(ladder, *seed),
        FunctionConfig::File { path } => {
            let text = std::fs::read_to_string(path)
                .map_err(|_| Error::MissingArtifact(format!("function file {} not found", path.display())))?;
            GridFunction::from_csv(g, &text)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelReport {
    pub schema: u32,
    pub levels: Vec<f64>,
    pub derivative_checks: Vec<crate::kernel::DerivativeReport>,
    /// `(t, d, numeric, exact, relative error)` for the free particle.
    pub free_particle_errors: Vec<[f64; 5]>,
    /// Sup-norm change between consecutive levels.
    pub barrier_history: Vec<f64>,
    pub barrier_converged_at: Option<f64>,
}

/// Builds and saves the ladder, then writes `kernel_report.json`.
pub fn cmd_kernel(cfg: &ExperimentConfig, out: &Path) -> Result<KernelReport> {
    let ladder = build_ladder(cfg)?;
    ladder.save(&ladder_dir(out))?;
    let mut report = KernelReport {
        schema: 1,
        levels: ladder.level_times(),
        derivative_checks: Vec::new(),
        free_particle_errors: Vec::new(),
        barrier_history: Vec::new(),
        barrier_converged_at: None,
    };
    if ladder.grid().dim() == 1 {
        for &t in &cfg.times.ladder {
            for (x, y) in [(0.0, 0.125), (0.1, 0.3)] {
                report.derivative_checks.push(ladder.derivative_check(x, y, t)?);
            }
        }
    }
    let free = matches!(cfg.hamiltonian.potential, Potential::Free) && cfg.hamiltonian.quartic.unwrap_or(0.0) == 0.0;
    if free && ladder.grid().dim() == 1 {
        let mut csv = String::from("t,d,numeric,exact,relative_error\n");
        for &t in &cfg.times.ladder {
            let k = ladder.kernel_at(t)?;
            for d in [0.125, 0.25] {
                let numeric = k.action_value(&[0.0], &[d]);
                let exact = d * d / (2.0 * t);
                let row = [t, d, numeric, exact, (numeric - exact).abs() / exact];
                let _ = writeln!(csv, "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}", row[0], row[1], row[2], row[3], row[4]);
                report.free_particle_errors.push(row);
            }
        }
        write(out, "kernel_errors.csv", &csv)?;
    }
    match peierls_barrier(&ladder, 1e-3) {
        Ok(h) => {
            report.barrier_history = h.history;
            report.barrier_converged_at = Some(h.t);
        }
        Err(Error::NonConvergence { history, .. }) => report.barrier_history = history,
        Err(e) => return Err(e),
    }
    write_json(out, "kernel_report.json", &report)?;
    Ok(report)
}

/// Runs one suite, writes `verify_<suite>.json` and its CSVs, and returns
/// the exit code. A runtime error inside the suite is recorded in the report
/// as a failure.
pub fn cmd_verify(cfg: &ExperimentConfig, suite: Suite, out: &Path) -> Result<i32> {
    let ladder = ladder_or_build(cfg, out)?;
    let mut report = SuiteReport::new(suite);
    let name = format!("{suite:?}").to_lowercase();
    let outcome = match suite {
        Suite::Adjunction => suite_adjunction(cfg, &ladder, &mut report, out),
        Suite::Attainability => suite_attainability(cfg, &ladder, &mut report, out),
        Suite::Cutlocus => suite_cutlocus(cfg, &ladder, &mut report, out),
        Suite::Controllability => suite_controllability(cfg, &ladder, &mut report, out),
        Suite::Dynamics => suite_dynamics(cfg, &ladder, &mut report, out),
    };
    if let Err(e) = outcome {
        if matches!(e, Error::Config { .. }) {
            return Err(e);
        }
        report.notes.push(format!("error: {e}"));
        report.pass = false;
    }
    write_json(out, &format!("verify_{name}.json"), &report)?;
    for c in report.checks.iter().filter(|c| !c.pass) {
        eprintln!("FAIL {}: {:.3e} > {:.3e}", c.name, c.value, c.tolerance);
    }
    for n in &report.notes {
        eprintln!("{n}");
    }
    Ok(if report.pass { EXIT_PASS } else { EXIT_FAIL })
}

fn suite_adjunction(cfg: &ExperimentConfig, ladder: &KernelLadder, report: &mut SuiteReport, out: &Path) -> Result<()> {
    let tol = cfg.tolerances.exact;
    let mut csv = String::from("seed,t,upper_order,lower_order,triple_plus,triple_minus\n");
    for &t in &cfg.times.ladder {
        let k = ladder.kernel_at(t)?;
        let mut worst = [f64::NEG_INFINITY; 3];
        for &seed in &cfg.seeds {
            let phi = random_function(ladder, seed)?;
            let upper = t_minus(&t_plus(&phi, &k)?, &k)?;
            let lower = t_plus(&t_minus(&phi, &k)?, &k)?;
            // violations of T-T+ phi >= phi >= T+T- phi
            let up = phi.values().iter().zip(upper.values()).map(|(p, u)| p - u).fold(f64::NEG_INFINITY, f64::max);
            let lo = lower.values().iter().zip(phi.values()).map(|(l, p)| l - p).fold(f64::NEG_INFINITY, f64::max);
            let tri = triple_identity_check(&phi, &k)?;
            let _ = writeln!(csv, "{seed},{t:.17e},{up:.17e},{lo:.17e},{:.17e},{:.17e}", tri.plus, tri.minus);
            worst = [worst[0].max(up), worst[1].max(lo), worst[2].max(tri.worst())];
        }
        report.push(Check::at_most(format!("t={t} T-T+ >= id"), worst[0], tol));
        report.push(Check::at_most(format!("t={t} id >= T+T-"), worst[1], tol));
        report.push(Check::at_most(format!("t={t} triple identities"), worst[2], tol));
    }
    write(out, "verify_adjunction.csv", &csv)?;
    Ok(())
}

fn suite_attainability(cfg: &ExperimentConfig, ladder: &KernelLadder, report: &mut SuiteReport, out: &Path) -> Result<()> {
    if ladder.t_max() < 1.0 {
        return Err(Error::Config {
            field: "kernel.T_max".into(),
            message: "the attainability suite needs T_max >= 1".into(),
        });
    }
    let mut csv = String::from("seed,kind,t0,commutator,source,characteristics,tolerance,attainable,consistent\n");
    for case in randomized_family(ladder, &cfg.seeds)? {
        let tol = default_attainability_tolerance(&case.phi);
        let r = attainability_check(&case.phi, ladder, case.t0, tol)?;
        let kind = serde_json::to_value(case.kind)?.as_str().unwrap_or("").to_string();
        let _ = writeln!(
            csv,
            "{},{kind},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
            case.seed,
            case.t0,
            r.conditions[0].residual,
            r.conditions[1].residual,
            r.conditions[2].residual,
            tol,
            r.attainable() as u8,
            r.consistent() as u8
        );
        report.push(Check::flag(format!("seed {} ({kind}) verdicts agree", case.seed), r.consistent()));
    }
    write(out, "verify_attainability.csv", &csv)?;
    Ok(())
}

fn cut_profile(cfg: &ExperimentConfig, ladder: &KernelLadder) -> Result<CutProfile> {
    let u = weak_kam_solution(cfg, ladder)?;
    cut_time_map(&u, ladder, CutTolerances::for_function(&u))
}

fn suite_cutlocus(cfg: &ExperimentConfig, ladder: &KernelLadder, report: &mut SuiteReport, out: &Path) -> Result<()> {
    let profile = cut_profile(cfg, ladder)?;
    let b = barrier(&profile.u, ladder, default_gap_tolerance(&profile.u))?;
    report.push(Check::at_most("T- fixed point", b.solution_residual, b.tolerance));
    report.push(Check::at_most("commutator identity", b.commutator_residual, 2.0 * b.tolerance));
    report.push(Check::at_most("barrier monotone in t", b.monotonicity_defect, 2.0 * b.tolerance));
    report.push(Check::at_most("barrier nonnegative", -b.min_value, 2.0 * b.tolerance));
    report.push(Check::flag("cut/Aubry partition consistent", profile.partition_consistent()));
    report.push(Check::flag("Aubry set non-empty", !profile.aubry_set.is_empty()));
    for &t in &cfg.times.level_set {
        let r = level_set_identity_check(&profile, ladder, t, cfg.tolerances.limit)?;
        report.push(Check::at_most(
            format!("t={t} barrier set vs tau super-level"),
            r.diff_barrier_tau as f64,
            r.allowed as f64,
        ));
    }
    if ladder.grid().dim() == 1 {
        report.notes.push(format!("tau(0.25) = {:.6}", profile.tau_at(0.25)));
    }
    report.notes.push(format!("cut nodes {:?}, Aubry nodes {:?}", profile.cut_set, profile.aubry_set));
    write(out, "verify_cutlocus.csv", &profile.to_csv())?;
    Ok(())
}

fn suite_controllability(cfg: &ExperimentConfig, ladder: &KernelLadder, report: &mut SuiteReport, out: &Path) -> Result<()> {
    let profile = cut_profile(cfg, ladder)?;
    let u = &profile.u;
    let tol = default_attainability_tolerance(u);
    for (k, &t0) in cfg.times.contact.iter().enumerate() {
        let r = attainability_check(u, ladder, t0, tol)?;
        for c in &r.conditions {
            report.push(Check::at_most(format!("t0={t0} attainable: {}", c.condition), c.residual, c.tolerance));
        }
        let c = contact_sets(u, None, ladder, t0, cfg.times.slices, cfg.tolerances.derivative)?;
        report.push(Check::flag(format!("t0={t0} u_breve <= u <= u_psi"), c.ordering_holds()));
        report.push(Check::flag(format!("t0={t0} A* in A_psi in A"), c.inclusions_hold()));
        for s in &c.slices {
            if let Some(r) = &s.contact {
                report.push(Check::at_most(format!("t0={t0} slice {:.6} gradient gap", s.time), r.derivative_gap, r.derivative_tolerance));
                report.push(Check::at_most(format!("t0={t0} slice {:.6} gradient Lipschitz", s.time), r.lipschitz, r.lipschitz_bound));
            }
        }
        write(out, &format!("verify_controllability_{k:02}.csv"), &c.to_csv())?;

        let ctol = cfg.tolerances.characterization;
        let canonical = t_plus_at(u, ladder, t0)?;
        let r = initial_data_characterization(&profile, &canonical, ladder, t0, ctol)?;
        report.push(Check::flag(format!("t0={t0} T+u reaches u"), r.reaches && r.agree()));
        if let Some(&node) = profile.aubry_set.first() {
            let mut dented = canonical.values().to_vec();
            dented[node] -= 20.0 * ctol;
            let dented = GridFunction::new(*u.grid(), dented)?;
            let r = initial_data_characterization(&profile, &dented, ladder, t0, ctol)?;
            report.push(Check::flag(format!("t0={t0} dented source rejected both ways"), !r.reaches && r.agree()));
        }
    }
    Ok(())
}

fn suite_dynamics(cfg: &ExperimentConfig, ladder: &KernelLadder, report: &mut SuiteReport, out: &Path) -> Result<()> {
    let spec = ladder.spec();
    if let Some(t) = cfg.times.graph {
        let phi = initial_function(cfg, ladder)?;
        let r = graph_evolution_check(&phi, ladder, t, 8, None)?;
        report.push(Check::at_most(format!("t={t} graph evolution"), r.distance, r.tolerance));
    }
    if let Some(t) = cfg.times.arc {
        let g = ladder.grid();
        let (i, j) = (g.nearest(&[cfg.times.arc_from]), g.nearest(&[cfg.times.arc_to]));
        let path = ladder.relay_path(i, j, t)?;
        let arc = minimizer_refine(&path, spec, &RefineOptions::default())?;
        report.push(Check::flag(format!("t={t} minimizer refined"), arc.refined));
        report.push(Check::at_most(format!("t={t} max |H| on minimizer"), arc.max_abs_energy(spec), cfg.tolerances.energy));
        write(out, "verify_dynamics_arc.csv", &arc.to_csv(spec))?;
    }
    Ok(())
}

/// Writes the configured function, kernel levels, cut profile or refined
/// minimizers under `export/`. Requires the ladder saved by `kernel`.
pub fn cmd_export(cfg: &ExperimentConfig, what: ExportKind, out: &Path) -> Result<Vec<PathBuf>> {
    let ladder = saved_ladder(cfg, out)?;
    let dir = out.join("export");
    let mut files = Vec::new();
    match what {
        ExportKind::Function => files.push(write(&dir, "function.csv", &initial_function(cfg, &ladder)?.to_csv())?),
        ExportKind::Kernel => {
            for (k, level) in ladder.levels().iter().enumerate() {
                files.push(write(&dir, &format!("kernel_level_{k:02}.csv"), &level.to_csv())?);
            }
        }
        ExportKind::Cutprofile => files.push(write(&dir, "cutprofile.csv", &cut_profile(cfg, &ladder)?.to_csv())?),
        ExportKind::Arcs => {
            let g = ladder.grid();
            let (i, j) = (g.nearest(&[cfg.times.arc_from]), g.nearest(&[cfg.times.arc_to]));
            for (k, &t) in cfg.times.ladder.iter().enumerate() {
                let arc = minimizer_refine(&ladder.relay_path(i, j, t)?, ladder.spec(), &RefineOptions::default())?;
                files.push(write(&dir, &format!("arc_{k:02}.csv"), &arc.to_csv(ladder.spec()))?);
            }
        }
    }
    Ok(files)
}

/// Cut-time map of `S^- 0`: `cutprofile.csv`, `cut_summary.json`,
/// `weak_kam.csv`.
pub fn cmd_cuttime(cfg: &ExperimentConfig, out: &Path) -> Result<CutProfile> {
    let ladder = ladder_or_build(cfg, out)?;
    let profile = cut_profile(cfg, &ladder)?;
    write(out, "cutprofile.csv", &profile.to_csv())?;
    write(out, "weak_kam.csv", &profile.u.to_csv())?;
    write_json(out, "cut_summary.json", &profile.summary())?;
    Ok(profile)
}

/// Snapshots of `T^-_t phi`, `T^+_t phi` and `T^-_t T^+_t phi` over
/// `times.ladder`.
pub fn cmd_evolve(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ladder = ladder_or_build(cfg, out)?;
    let phi = initial_function(cfg, &ladder)?;
    let mut files = Vec::new();
    for (tag, name) in [
        (OperatorTag::TMinus, "t_minus"),
        (OperatorTag::TPlus, "t_plus"),
        (OperatorTag::TMinusTPlus, "t_minus_t_plus"),
    ] {
        let ev = SemigroupEvolution::run(tag, &phi, &ladder, &cfg.times.ladder)?;
        files.push(write(out, &format!("evolve_{name}.csv"), &ev.to_csv())?);
    }
    Ok(files)
}
