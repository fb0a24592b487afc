use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use arinput::bench::{
    build_baseline, compare_filters, filter_seeds, identify, nsr_sweep, reduce_plant,
    run_pipeline, run_recovery, write_sweep_csv, ComparisonRun, RecoveryOutcome, RunManifest,
    Scenario, StageTime,
};
use arinput::filtering::{write_estimation_csv, EstimationSummary};
use arinput::realization::StateSpaceRealization;
use arinput::recovery::SolveMethod;
use arinput::{serial, Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

/// Recover unknown-input statistics, fit AR innovations models and compare
/// augmented-state Kalman filters.
#[derive(Parser)]
#[command(name = "arinput", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recover the input autocorrelation from output data.
    Recover(Common),
    /// Identify the input model and run the filter comparison.
    Filter(FilterArgs),
    /// Reduce the plant with balanced POD.
    Reduce(Common),
    /// Every stage: recovery, identification, filtering and reduction.
    Pipeline(FilterArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the config's output_dir, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Least-squares solver: direct (QR) or cg.
    #[arg(long)]
    method: Option<SolveMethod>,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FilterArgs {
    #[command(flatten)]
    common: Common,
    /// Run a sweep instead of a single comparison.
    #[arg(long)]
    sweep: Option<Sweep>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Nsr,
}

struct Run {
    scn: Scenario,
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(command: &str, args: &Common) -> Result<Self> {
        let mut scn = Scenario::load(&args.config)?;
        if let Some(m) = args.method {
            scn.solver.method = m;
        }
        if let Some(s) = args.seed {
            scn.seed = s;
        }
        scn.validate()?;
        let out = args
            .out
            .clone()
            .or_else(|| scn.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out)?;
        let manifest = RunManifest::new(command, &scn);
        Ok(Self { scn, out, manifest })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.file(&self.out, name)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        serial::write_json(&p, value)
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce(&Scenario) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(&self.scn);
        self.manifest.timings.push(StageTime {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    fn finish(mut self) -> Result<()> {
        let p = self.manifest.write(&self.out)?;
        info!("wrote {} files, manifest {}", self.manifest.files.len(), p.display());
        Ok(())
    }
}

fn write_recovery(run: &mut Run, rec: &RecoveryOutcome) -> Result<()> {
    rec.recovery.sequence.write_csv(run.create("ruu_recovered.csv")?)?;
    rec.exact.write_csv(run.create("ruu_true.csv")?)?;
    rec.errors.write_csv(run.create("ruu_relative_error.csv")?)?;
    run.json("recovery_summary.json", &rec.summary())
}

#[derive(Serialize)]
struct FilterSummary {
    steps: usize,
    monitored: Vec<usize>,
    ar_based: EstimationSummary,
    baseline: EstimationSummary,
    ar_whiteness_max: f64,
    whiteness_bound: f64,
}

fn write_comparison(run: &mut Run, cmp: &ComparisonRun) -> Result<()> {
    let states = &cmp.truth.states;
    write_estimation_csv(run.create("estimation_ar.csv")?, &cmp.ar_run, states, &cmp.monitored)?;
    write_estimation_csv(
        run.create("estimation_baseline.csv")?,
        &cmp.baseline_run,
        states,
        &cmp.monitored,
    )?;
    let m = &cmp.metrics;
    let nsr = m.nsr.iter().sum::<f64>() / m.nsr.len().max(1) as f64;
    let summary = FilterSummary {
        steps: states.len(),
        monitored: cmp.monitored.clone(),
        ar_based: EstimationSummary {
            armse: m.ar_based.armse,
            nsr,
            three_sigma_fraction: m.ar_based.three_sigma_fraction.clone(),
        },
        baseline: EstimationSummary {
            armse: m.baseline.armse,
            nsr,
            three_sigma_fraction: m.baseline.three_sigma_fraction.clone(),
        },
        ar_whiteness_max: m.ar_whiteness_max,
        whiteness_bound: m.whiteness_bound,
    };
    run.json("filter_summary.json", &summary)
}

fn write_sweep(run: &mut Run) -> Result<()> {
    let levels = run.scn.filter.nsr_levels.clone();
    let rows = run.time("nsr sweep", |scn| nsr_sweep(scn, &levels))?;
    write_sweep_csv(run.create("nsr_sweep.csv")?, &rows)?;
    run.json("nsr_sweep.json", &rows)
}

fn write_rom(run: &mut Run, rom: &StateSpaceRealization, errors: &[f64]) -> Result<()> {
    let p = run.path("rom.json");
    rom.save(&p)?;
    let mut w = run.create("singular_values.csv")?;
    csv_column(&mut w, "index,sigma", rom.singular_values())?;
    let mut w = run.create("markov_error.csv")?;
    csv_column(&mut w, "k,relative_error", errors)
}

fn csv_column<W: std::io::Write>(w: &mut W, header: &str, values: &[f64]) -> Result<()> {
    writeln!(w, "{header}")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{},{v}", i + 1)?;
    }
    Ok(())
}

fn cmd_recover(args: &Common) -> Result<()> {
    let mut run = Run::start("recover", args)?;
    let (_, rec) = run.time("recovery", run_recovery)?;
    write_recovery(&mut run, &rec)?;
    run.finish()
}

fn cmd_filter(args: &FilterArgs) -> Result<()> {
    let mut run = Run::start("filter", &args.common)?;
    if args.sweep.is_some() {
        write_sweep(&mut run)?;
        return run.finish();
    }
    let (prep, rec) = run.time("recovery", run_recovery)?;
    let ident = run.time("identification", |scn| identify(scn, &rec.recovery.sequence))?;
    let baseline = build_baseline(&run.scn.filter.baseline)?;
    let cmp = run.time("filtering", |scn| {
        compare_filters(scn, &prep, &ident.innovations, &baseline, &filter_seeds(scn.seed, 0))
    })?;
    let p = run.path("innovations_model.json");
    ident.innovations.save(&p)?;
    write_comparison(&mut run, &cmp)?;
    run.finish()
}

fn cmd_reduce(args: &Common) -> Result<()> {
    let mut run = Run::start("reduce", args)?;
    let plant = arinput::bench::build_plant(&run.scn.plant)?;
    let (rom, basis, errors) = run.time("bpod", |scn| reduce_plant(&plant, &scn.rom))?;
    info!(
        "ROM order {} (bi-orthogonality defect {:.2e})",
        rom.order(),
        basis.biorthogonality_defect()
    );
    write_rom(&mut run, &rom, &errors)?;
    run.finish()
}

fn cmd_pipeline(args: &FilterArgs) -> Result<()> {
    let mut run = Run::start("pipeline", &args.common)?;
    let outcome = run.time("pipeline", run_pipeline)?;
    run.manifest.timings.extend(outcome.report.timings.iter().cloned());
    write_recovery(&mut run, &outcome.recovery)?;
    let p = run.path("innovations_model.json");
    outcome.identification.innovations.save(&p)?;
    write_comparison(&mut run, &outcome.comparison)?;
    run.json("pipeline_report.json", &outcome.report)?;
    let (rom, _, errors) = run.time("bpod", |scn| {
        reduce_plant(&outcome.prepared.plant, &scn.rom)
    })?;
    write_rom(&mut run, &rom, &errors)?;
    if args.sweep.is_some() {
        write_sweep(&mut run)?;
    }
    run.finish()
}

fn report(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if err.is_config() {
        eprintln!("usage: arinput <recover|filter|reduce|pipeline> --config <path> [--out <dir>]");
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ARINPUT_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Recover(a) => cmd_recover(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Reduce(a) => cmd_reduce(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
