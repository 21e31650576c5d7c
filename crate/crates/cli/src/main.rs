//! `imexpeer` command-line front end.
//!
//! Exit codes: 0 success, 1 domain failure (failed certification,
//! non-convergence, empty search), 2 usage or IO error.

use clap::{Args, Parser, Subcommand, ValueEnum};
use imexpeer::experiments::{
    advection_reaction, prothero_robinson, run_experiment, scaled_max_error, ArQuantity,
    ExperimentKind, ExperimentReport, ExperimentSpec,
};
use imexpeer::integrator::{integrate, IntegrationOptions, Mode, SplitOdeProblem};
use imexpeer::methods::{builtins, resolve};
use imexpeer::search::{run_search, SearchOutcome, SearchSpec};
use imexpeer::stability::{region_summary, Grid, RegionSummary};
use imexpeer::{certify, fmt_f64, Error, Execution, MethodTableau};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable holding the default output directory.
const OUT_DIR_ENV: &str = "IMEXPEER_OUT_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "imexpeer",
    version,
    about = "Super-convergent IMEX Peer methods"
)]
struct Cli {
    /// Worker threads for the parallel sweeps (default: available parallelism).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    /// Directory for CSV and tableau output.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certify a tableau and print the report.
    Verify {
        #[arg(long)]
        method: String,
        /// Also write `certification_<label>.csv`.
        #[arg(long)]
        csv: bool,
    },
    /// Integrate one problem with one step size.
    Integrate(IntegrateArgs),
    /// Scan the stability regions of a method.
    Stability {
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 400)]
        nx: usize,
        #[arg(long, default_value_t = 400)]
        ny: usize,
        /// Sector angle in degrees for the implicit-part region.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Run a convergence experiment over a step-size ladder.
    Convergence(ConvergenceArgs),
    /// Multistart method search.
    Search {
        /// Stage count; selects the default preset.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        stages: Option<usize>,
        /// Named preset: s2-seeded, s2, s3, s4.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the number of starts.
        #[arg(long)]
        multistart: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProblemName {
    /// Prothero-Robinson on [0, 5].
    Pr,
    /// Advection-reaction system on m nodes.
    Ar,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Imex,
    Implicit,
    Explicit,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Imex => Mode::Imex,
            ModeArg::Implicit => Mode::Implicit,
            ModeArg::Explicit => Mode::Explicit,
        }
    }
}

#[derive(Args, Debug)]
struct IntegrateArgs {
    #[arg(long)]
    method: String,
    #[arg(long, value_enum, default_value_t = ProblemName::Pr)]
    problem: ProblemName,
    /// Grid nodes of the advection-reaction problem.
    #[arg(long, default_value_t = 48)]
    m: usize,
    #[arg(long)]
    dt: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Imex)]
    mode: ModeArg,
    /// Write per-step diagnostics to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConvergenceArgs {
    /// `pr` (prothero-robinson) or `ar` (advection-reaction).
    #[arg(long)]
    experiment: String,
    /// Comma-separated names or paths (default: all builtins).
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, default_value_t = 48)]
    m: usize,
    /// Comma-separated step sizes replacing the default ladder.
    #[arg(long, value_delimiter = ',')]
    steps: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Imex)]
    mode: ModeArg,
    /// Measure the advection-reaction error on the full state instead of u + v.
    #[arg(long)]
    full_state: bool,
}

/// A message and the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn domain(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_)
            | Error::Parse { .. }
            | Error::UnknownMethod(_)
            | Error::UnknownExperiment(_)
            | Error::InvalidSpec(_)
            | Error::InvalidTableau(_)
            | Error::StepSizeMismatch { .. }
            | Error::InsufficientPoints { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n as usize);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(&cli)),
        Err(e) => Err(Failure::usage(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Verify { method, csv } => cmd_verify(method, *csv, out),
        Command::Integrate(args) => cmd_integrate(args, out),
        Command::Stability {
            method,
            nx,
            ny,
            alpha,
        } => cmd_stability(method, *nx, *ny, *alpha, out),
        Command::Convergence(args) => cmd_convergence(args, out),
        Command::Search {
            stages,
            preset,
            seed,
            multistart,
        } => cmd_search(*stages, preset.as_deref(), *seed, *multistart, out),
    }
}

fn load(method: &str) -> Result<MethodTableau, Failure> {
    resolve(method).map_err(|e| Failure::usage(format!("cannot load `{method}`: {e}")))
}

/// File-name-safe version of a label.
fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, fs::File), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    let file = fs::File::create(&path)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
    Ok((path, file))
}

fn write_file(dir: &Path, name: &str, body: &[u8]) -> Result<PathBuf, Failure> {
    let (path, mut f) = create(dir, name)?;
    f.write_all(body)?;
    Ok(path)
}

fn cmd_verify(method: &str, csv: bool, out: &Path) -> CmdResult {
    let tab = load(method)?;
    let report = certify(&tab);
    println!("{report}");
    if csv {
        let mut body = String::from("check,value\n");
        for (k, v) in report.rows() {
            body.push_str(&format!("{k},{v}\n"));
        }
        let name = format!("certification_{}.csv", slug(tab.label()));
        let path = write_file(out, &name, body.as_bytes())?;
        println!("wrote {}", path.display());
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::domain(format!(
            "certification failed: {}",
            report.failures().join(", ")
        )))
    }
}

fn cmd_integrate(args: &IntegrateArgs, out: &Path) -> CmdResult {
    let tab = load(&args.method)?;
    let problem: Box<dyn SplitOdeProblem> = match args.problem {
        ProblemName::Pr => Box::new(prothero_robinson()),
        ProblemName::Ar => Box::new(advection_reaction(args.m)?),
    };
    let opts = IntegrationOptions {
        mode: args.mode.into(),
        trace: args.trace.is_some(),
        ..Default::default()
    };
    let outcome = integrate(&tab, problem.as_ref(), args.dt, &opts)?;
    if let Some(path) = &args.trace {
        let file = fs::File::create(path)
            .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
        outcome.write_trace_csv(std::io::BufWriter::new(file))?;
    }
    let exact = problem.exact(outcome.t_end);
    let mut body = String::from("index,value,exact\n");
    for (i, v) in outcome.state.iter().enumerate() {
        let e = exact.as_ref().map(|x| fmt_f64(x[i])).unwrap_or_default();
        body.push_str(&format!("{i},{},{e}\n", fmt_f64(*v)));
    }
    let problem_name = match args.problem {
        ProblemName::Pr => "pr".to_string(),
        ProblemName::Ar => format!("ar{}", args.m),
    };
    let name = format!("integrate_{}_{problem_name}.csv", slug(tab.label()));
    let path = write_file(out, &name, body.as_bytes())?;
    println!(
        "{} on {problem_name}: dt = {}, steps = {}, t_end = {}, newton iterations = {}",
        tab.label(),
        fmt_f64(args.dt),
        outcome.steps,
        fmt_f64(outcome.t_end),
        outcome.newton_iterations
    );
    if let Some(x) = exact {
        println!(
            "scaled max error = {}",
            fmt_f64(scaled_max_error(&outcome.state, &x))
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_stability(method: &str, nx: usize, ny: usize, alpha: Option<f64>, out: &Path) -> CmdResult {
    if nx == 0 || ny == 0 {
        return Err(Failure::usage("grid sizes must be positive"));
    }
    let tab = load(method)?;
    let grid = Grid {
        nx,
        ny,
        ..Grid::default()
    };
    let (summary, se, sa) = region_summary(&tab, grid, alpha, Execution::Parallel)?;
    let stem = slug(tab.label());
    let body = format!("{}\n{}\n", RegionSummary::CSV_HEADER, summary.csv_line());
    let p = write_file(
        out,
        &format!("stability_{stem}_summary.csv"),
        body.as_bytes(),
    )?;
    let mut paths = vec![p];
    for (suffix, scan) in [("explicit", &se), ("alpha", &sa)] {
        let (path, file) = create(out, &format!("stability_{stem}_{suffix}.csv"))?;
        scan.write_csv(std::io::BufWriter::new(file))?;
        paths.push(path);
    }
    println!("{}", RegionSummary::CSV_HEADER);
    println!("{}", summary.csv_line());
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_convergence(args: &ConvergenceArgs, out: &Path) -> CmdResult {
    let kind = ExperimentKind::parse(&args.experiment, args.m)?;
    if let ExperimentKind::AdvectionReaction { m } = kind {
        advection_reaction(m)?;
    }
    let methods = if args.methods.is_empty() {
        builtins()
    } else {
        args.methods
            .iter()
            .map(|m| load(m))
            .collect::<Result<_, _>>()?
    };
    let mut spec = ExperimentSpec::new(kind, methods);
    spec.mode = args.mode.into();
    if !args.steps.is_empty() {
        if args.steps.iter().any(|&h| !(h > 0.0)) {
            return Err(Failure::usage("step sizes must be positive"));
        }
        spec.step_sizes = args.steps.clone();
    }
    if args.full_state {
        spec.ar_quantity = ArQuantity::FullState;
    }
    let report: ExperimentReport = run_experiment(&spec, Execution::Parallel)?;
    let name = match kind {
        ExperimentKind::ProtheroRobinson => format!("convergence_{}.csv", kind.name()),
        ExperimentKind::AdvectionReaction { m } => {
            format!("convergence_{}_m{m}.csv", kind.name())
        }
    };
    let (path, file) = create(out, &name)?;
    report.write_csv(std::io::BufWriter::new(file))?;
    let mut failed = Vec::new();
    for r in &report.results {
        let order = r
            .fitted_order
            .map(fmt_f64)
            .unwrap_or_else(|| "n/a".to_string());
        let n_failed = r.failures.iter().filter(|f| f.is_some()).count();
        println!("{}: fitted order {order}, failed runs {n_failed}", r.method);
        if n_failed > 0 {
            failed.push(r.method.clone());
        }
    }
    println!("wrote {}", path.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::domain(format!(
            "runs failed for {}",
            failed.join(", ")
        )))
    }
}

fn cmd_search(
    stages: Option<usize>,
    preset: Option<&str>,
    seed: u64,
    multistart: Option<usize>,
    out: &Path,
) -> CmdResult {
    let (mut spec, name) = match (stages, preset) {
        (_, Some(p)) => (SearchSpec::preset(p, seed)?, p.to_string()),
        (Some(s), None) => (SearchSpec::for_stages(s, seed)?, format!("s{s}")),
        (None, None) => return Err(Failure::usage("give --stages or --preset")),
    };
    if let Some(k) = multistart {
        spec.multistart = k;
    }
    let outcome = run_search(&spec, Execution::Parallel)?;
    let dir = out.join(format!("search_{}_seed{seed}", slug(&name)));
    write_search(&outcome, &dir)?;
    for d in &outcome.diagnostics {
        println!("{d}");
    }
    println!(
        "{} candidates from {} starts, {} objective evaluations; wrote {}",
        outcome.candidates.len(),
        spec.multistart,
        outcome.evaluations,
        dir.display()
    );
    if outcome.candidates.is_empty() {
        Err(Failure::domain("search found no certified candidate"))
    } else {
        Ok(())
    }
}

fn write_search(outcome: &SearchOutcome, dir: &Path) -> CmdResult {
    let mut header: Vec<String> = vec![
        "file".into(),
        "start".into(),
        "implicit_objective".into(),
        "explicit_objective".into(),
    ];
    let mut body = String::new();
    for (k, c) in outcome.candidates.iter().enumerate() {
        let file = format!("candidate{k:02}.tab");
        write_file(dir, &file, c.tableau.to_text().as_bytes())?;
        let rows = c.report.rows();
        if k == 0 {
            header.extend(rows.iter().map(|(name, _)| name.clone()));
        }
        let mut fields = vec![
            file,
            c.start.to_string(),
            fmt_f64(c.implicit_objective),
            fmt_f64(c.explicit_objective),
        ];
        fields.extend(rows.into_iter().map(|(_, v)| v));
        body.push_str(&fields.join(","));
        body.push('\n');
    }
    let csv = format!("{}\n{body}", header.join(","));
    write_file(dir, "certification.csv", csv.as_bytes())?;
    Ok(())
}
