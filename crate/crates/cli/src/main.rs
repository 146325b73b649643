//! `heavytail` command-line driver.
//!
//! Every run resolves its settings in the order: built-in defaults, the
//! subcommand's section of `--config`, explicit flags, and finally
//! `HEAVYTAIL_SEED` for the seed. The resolved settings are what
//! `--print-config` prints and what the manifest records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use heavytail::coverings::{count_grid_operators, grid_count_log_bound, ln_biguint};
use heavytail::distributions::EntryDistribution;
use heavytail::geometry::{lcd, LcdParams};
use heavytail::invertibility::{
    merge_reports, parse_grid, run_covering_mc, run_distance_bound_check, run_normal_lcd_mc,
    run_regularizer_mc, run_small_ball_profile, run_smin_mc, run_symmetrization_mc, run_tensorization_check,
    with_jobs, ExperimentConfig, Report,
};
use heavytail::Error;

const SEED_ENV: &str = "HEAVYTAIL_SEED";

#[derive(Parser, Debug)]
#[command(name = "heavytail", version, about = "Seeded experiments on heavy-tailed random matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Grid regularization success frequency.
    Regularize(ExpArgs),
    /// Parallelepiped covering certificates and point location.
    Cover(ExpArgs),
    /// Small-ball profile of sqrt(n) s_n(A).
    Smin(ExpArgs),
    /// Certified LCD scan of one unit vector.
    Lcd(LcdArgs),
    /// LCD of random unit normals.
    NormalLcd(ExpArgs),
    /// Levy concentration of sum x_i xi_i against the LCD shape.
    Smallball(SmallBallArgs),
    /// Infinity-to-2 norm of row-permuted matrices.
    Symmetrize(ExpArgs),
    /// Both sides of the distance reduction.
    Distance(ExpArgs),
    /// Frequency of ||A y|| <= v sqrt(n) for y = e_1.
    Tensorize(ExpArgs),
    /// Exact number of grid operators with det >= exp(-delta n).
    GridCount(GridArgs),
    /// Pool per-trial CSVs with identical headers into one summary.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML config file with `[subcommand]` tables; flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print the fully resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    /// Worker threads [default: logical cores]. Does not affect output.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory [default: .].
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
}

/// Experiment flags. Each overrides the key of the same name (dashes become
/// underscores) in the config file.
#[derive(Args, Debug)]
struct ExpArgs {
    #[command(flatten)]
    common: Common,
    /// Entry law `family[:param]` [default: gaussian].
    #[arg(long)]
    dist: Option<String>,
    /// Matrix dimension [default: 64].
    #[arg(long)]
    n: Option<String>,
    /// Monte Carlo trials [default: 200].
    #[arg(long)]
    trials: Option<String>,
    /// Master seed [default: 1].
    #[arg(long)]
    seed: Option<String>,
    /// Determinant budget delta [default: 0.25].
    #[arg(long)]
    delta: Option<String>,
    /// Sparsity fraction theta [default: 0.3].
    #[arg(long)]
    theta: Option<String>,
    /// Compressibility radius rho [default: 0.3].
    #[arg(long)]
    rho: Option<String>,
    /// Epsilon grid, `a,b,c` or `start:step:stop` [default: 0.05:0.05:0.5].
    #[arg(long)]
    eps: Option<String>,
    /// Largest eps in the linear fit [default: 0.5].
    #[arg(long)]
    fit_max_eps: Option<String>,
    /// LCD tolerance r [default: 0.1].
    #[arg(long)]
    lcd_r: Option<String>,
    /// LCD cap factor s, h = s sqrt(n) [default: 0.1].
    #[arg(long)]
    lcd_s: Option<String>,
    /// LCD scan horizon [default: auto = 1000 sqrt(n)].
    #[arg(long)]
    t_max: Option<String>,
    /// Largest n for exact infinity-to-2 sub-checks [default: 12].
    #[arg(long)]
    exact_cap: Option<String>,
    /// Points located per covering trial [default: 100].
    #[arg(long)]
    located_points: Option<String>,
    /// Frozen regularizer constant [default: calibrated value].
    #[arg(long)]
    c_ref: Option<String>,
    /// Symmetrization constant c in inf2 <= c n [default: 2.0].
    #[arg(long)]
    c_sym: Option<String>,
    /// Regularizer budget L [default: 2e].
    #[arg(long)]
    budget: Option<String>,
    /// Tensorization threshold v [default: auto = levy v / 2].
    #[arg(long)]
    tensor_v: Option<String>,
}

#[derive(Args, Debug)]
struct LcdArgs {
    #[command(flatten)]
    common: Common,
    /// Newline-delimited coordinates of a unit vector.
    #[arg(long)]
    vector_file: Option<String>,
    /// Tolerance r [default: 0.1].
    #[arg(long)]
    r: Option<String>,
    /// Cap h [default: 10].
    #[arg(long)]
    h: Option<String>,
    /// Scan horizon [default: 1000].
    #[arg(long)]
    t_max: Option<String>,
    /// Bracket tolerance [default: 1e-9].
    #[arg(long)]
    tol: Option<String>,
}

#[derive(Args, Debug)]
struct SmallBallArgs {
    #[command(flatten)]
    common: Common,
    /// Newline-delimited coordinates of a unit vector.
    #[arg(long)]
    vector_file: Option<String>,
    /// Entry law [default: gaussian].
    #[arg(long)]
    dist: Option<String>,
    /// Samples of the weighted sum [default: 100000].
    #[arg(long)]
    trials: Option<String>,
    /// Master seed [default: 1].
    #[arg(long)]
    seed: Option<String>,
    /// Epsilon grid [default: 0.05:0.05:2].
    #[arg(long)]
    eps: Option<String>,
    /// LCD tolerance r [default: 0.1].
    #[arg(long)]
    r: Option<String>,
    /// LCD cap h [default: 10].
    #[arg(long)]
    h: Option<String>,
    /// LCD scan horizon [default: 1000].
    #[arg(long)]
    t_max: Option<String>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// Dimension [default: 2].
    #[arg(long)]
    n: Option<String>,
    /// Determinant budget [default: 0.4].
    #[arg(long)]
    delta: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Per-trial CSV files written by earlier runs.
    inputs: Vec<PathBuf>,
    /// Epsilon grid for pooled small-ball probabilities [default: 0.05:0.05:0.5].
    #[arg(long)]
    eps: Option<String>,
    /// Largest eps in the linear fit [default: 0.5].
    #[arg(long)]
    fit_max_eps: Option<String>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parameter(_) | Error::Domain(_) | Error::Shape(_) | Error::Parse(_) | Error::Io(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Ordered `key = value` settings for one subcommand.
#[derive(Clone, Debug)]
struct Settings(Vec<(String, String)>);

impl Settings {
    fn get(&self, key: &str) -> &str {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).expect("key present in defaults")
    }

    fn set(&mut self, key: &str, value: &str, origin: &str) -> Outcome<()> {
        match self.0.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => {
                slot.1 = value.trim().to_string();
                Ok(())
            }
            None => Err(Failure::Config(format!("unknown key {key:?} in {origin}"))),
        }
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Outcome<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Failure::Config(format!("bad value for {key}: {v:?}")))
    }

    fn render(&self, section: &str) -> String {
        let mut out = format!("[{section}]\n");
        for (k, v) in &self.0 {
            let _ = writeln!(out, "{k} = {}", toml_literal(v));
        }
        out
    }
}

/// Bare TOML when `v` already reads back as itself, a quoted string otherwise.
fn toml_literal(v: &str) -> String {
    match format!("x = {v}").parse::<toml::Table>().ok().and_then(|t| t.get("x").and_then(scalar_text)) {
        Some(back) if back == v => v.to_string(),
        _ => toml::Value::String(v.to_string()).to_string(),
    }
}

fn scalar_text(v: &toml::Value) -> Option<String> {
    match v {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(format!("{f:?}")),
        toml::Value::Boolean(b) => Some(b.to_string()),
        _ => None,
    }
}

/// The `[section]` table of a TOML config file as `key = value` text pairs.
fn read_config_section(path: &Path, section: &str) -> Outcome<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
    let doc: toml::Table =
        text.parse().map_err(|e| Failure::Config(format!("cannot parse config {}: {e}", path.display())))?;
    let Some(table) = doc.get(section) else {
        return Ok(Vec::new());
    };
    let table = table
        .as_table()
        .ok_or_else(|| Failure::Config(format!("{}: [{section}] is not a table", path.display())))?;
    table
        .iter()
        .map(|(k, v)| {
            let v = scalar_text(v)
                .ok_or_else(|| Failure::Config(format!("{}: {k} must be a scalar", path.display())))?;
            Ok((k.replace('-', "_"), v))
        })
        .collect()
}

fn resolve(
    section: &str,
    defaults: Vec<(String, String)>,
    common: &Common,
    flags: &[(&str, &Option<String>)],
) -> Outcome<Settings> {
    let mut s = Settings(defaults);
    s.0.push(("out".into(), ".".into()));
    if let Some(path) = &common.config {
        for (k, v) in read_config_section(path, section)? {
            s.set(&k, &v, &path.display().to_string())?;
        }
    }
    if let Some(out) = &common.out {
        s.set("out", out, "flags")?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, v, "flags")?;
        }
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        if s.0.iter().any(|(k, _)| k == "seed") {
            s.set("seed", &seed, SEED_ENV)?;
        }
    }
    Ok(s)
}

fn experiment_defaults() -> Vec<(String, String)> {
    ExperimentConfig::new(EntryDistribution::gaussian(), 64, 200, 1).to_pairs()
}

impl ExpArgs {
    fn flags(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("dist", &self.dist),
            ("n", &self.n),
            ("trials", &self.trials),
            ("seed", &self.seed),
            ("delta", &self.delta),
            ("theta", &self.theta),
            ("rho", &self.rho),
            ("eps", &self.eps),
            ("fit_max_eps", &self.fit_max_eps),
            ("lcd_r", &self.lcd_r),
            ("lcd_s", &self.lcd_s),
            ("t_max", &self.t_max),
            ("exact_cap", &self.exact_cap),
            ("located_points", &self.located_points),
            ("c_ref", &self.c_ref),
            ("c_sym", &self.c_sym),
            ("budget", &self.budget),
            ("tensor_v", &self.tensor_v),
        ]
    }
}

fn experiment_config(s: &Settings) -> Outcome<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(EntryDistribution::gaussian(), 64, 200, 1);
    for (k, v) in s.0.iter().filter(|(k, _)| k != "out") {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_vector(path: &str) -> Outcome<Vec<f64>> {
    if path.is_empty() {
        return Err(Failure::Config("--vector-file is required".into()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {path}: {e}")))?;
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Failure::Config(format!("bad coordinate {t:?} in {path}"))))
        .collect()
}

fn unix_time() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Writes CSV, summary and manifest into the `out` directory.
fn persist(command: &str, settings: &Settings, report: &Report, started: f64) -> Outcome<()> {
    let dir = PathBuf::from(settings.get("out"));
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Config(format!("cannot create {}: {e}", dir.display())))?;
    let csv_path = dir.join(format!("{command}.csv"));
    let summary_path = dir.join(format!("{command}.summary.txt"));
    report.write(&csv_path, &summary_path)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "command = {command}");
    let _ = writeln!(manifest, "version = {} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    if let Some((_, seed)) = settings.0.iter().find(|(k, _)| k == "seed") {
        let _ = writeln!(manifest, "master_seed = {seed}");
    }
    let _ = writeln!(manifest, "started = {started:.3}");
    let _ = writeln!(manifest, "finished = {:.3}", unix_time());
    for path in [&csv_path, &summary_path] {
        let bytes = std::fs::read(path)?;
        let _ = writeln!(manifest, "sha256 {} = {}", path.display(), sha256_hex(&bytes));
    }
    manifest.push('\n');
    manifest.push_str(&settings.render(command));
    std::fs::write(dir.join(format!("{command}.manifest.txt")), manifest)?;
    Ok(())
}

fn run_experiment(command: &str, args: &ExpArgs) -> Outcome<()> {
    let settings = resolve(command, experiment_defaults(), &args.common, &args.flags())?;
    if args.common.print_config {
        print!("{}", settings.render(command));
        return Ok(());
    }
    let cfg = experiment_config(&settings)?;
    let started = unix_time();
    let report = with_jobs(args.common.jobs, || -> Outcome<Report> {
        Ok(match command {
            "regularize" => run_regularizer_mc(&cfg)?.report,
            "cover" => run_covering_mc(&cfg)?.report,
            "smin" => run_smin_mc(&cfg)?.report,
            "normal-lcd" => run_normal_lcd_mc(&cfg)?.report,
            "symmetrize" => run_symmetrization_mc(&cfg)?.report,
            "distance" => run_distance_bound_check(&cfg)?.report,
            "tensorize" => {
                let mut y = vec![0.0; cfg.n];
                y[0] = 1.0;
                run_tensorization_check(&cfg.dist, cfg.n, &y, cfg.trials, cfg.tensor_v, cfg.seed)?.report
            }
            other => unreachable!("no experiment named {other}"),
        })
    })??;
    persist(command, &settings, &report, started)?;
    print!("{}", report.summary_text());
    Ok(())
}

fn run_lcd(args: &LcdArgs) -> Outcome<()> {
    let defaults = [("vector_file", ""), ("r", "0.1"), ("h", "10"), ("t_max", "1000"), ("tol", "1e-9")];
    let defaults = defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let flags = [
        ("vector_file", &args.vector_file),
        ("r", &args.r),
        ("h", &args.h),
        ("t_max", &args.t_max),
        ("tol", &args.tol),
    ];
    let s = resolve("lcd", defaults, &args.common, &flags)?;
    if args.common.print_config {
        print!("{}", s.render("lcd"));
        return Ok(());
    }
    let x = read_vector(s.get("vector_file"))?;
    let params = LcdParams::new(s.num("h")?, s.num("r")?, s.num("t_max")?)?.with_tol(s.num("tol")?)?;
    let started = unix_time();
    let res = lcd(&x, &params)?;
    let report = Report {
        experiment: "lcd".into(),
        header: ["t_star", "dist", "lower_bound", "censored"].iter().map(|h| h.to_string()).collect(),
        rows: vec![vec![
            res.t_star.map_or(String::new(), |t| format!("{t:?}")),
            res.dist.map_or(String::new(), |d| format!("{d:?}")),
            format!("{:?}", res.lower_bound),
            res.censored.to_string(),
        ]],
        summary: Vec::new(),
    };
    persist("lcd", &s, &report, started)?;
    print!("{}", res.to_record());
    Ok(())
}

fn run_smallball(args: &SmallBallArgs) -> Outcome<()> {
    let defaults = [
        ("vector_file", ""),
        ("dist", "gaussian"),
        ("trials", "100000"),
        ("seed", "1"),
        ("eps", "0.05:0.05:2"),
        ("r", "0.1"),
        ("h", "10"),
        ("t_max", "1000"),
    ];
    let defaults = defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let flags = [
        ("vector_file", &args.vector_file),
        ("dist", &args.dist),
        ("trials", &args.trials),
        ("seed", &args.seed),
        ("eps", &args.eps),
        ("r", &args.r),
        ("h", &args.h),
        ("t_max", &args.t_max),
    ];
    let s = resolve("smallball", defaults, &args.common, &flags)?;
    if args.common.print_config {
        print!("{}", s.render("smallball"));
        return Ok(());
    }
    let x = read_vector(s.get("vector_file"))?;
    let dist = EntryDistribution::from_spec(s.get("dist"))?;
    let params = LcdParams::new(s.num("h")?, s.num("r")?, s.num("t_max")?)?;
    let eps = parse_grid(s.get("eps"))?;
    let started = unix_time();
    let profile = run_small_ball_profile(&x, &dist, &params, s.num("trials")?, &eps, s.num("seed")?)?;
    persist("smallball", &s, &profile.report, started)?;
    print!("{}", profile.report.summary_text());
    Ok(())
}

fn run_grid_count(args: &GridArgs) -> Outcome<()> {
    let defaults = vec![("n".to_string(), "2".to_string()), ("delta".to_string(), "0.4".to_string())];
    let s = resolve("grid-count", defaults, &args.common, &[("n", &args.n), ("delta", &args.delta)])?;
    if args.common.print_config {
        print!("{}", s.render("grid-count"));
        return Ok(());
    }
    let n: usize = s.num("n")?;
    let delta: f64 = s.num("delta")?;
    let started = unix_time();
    let count = count_grid_operators(n, delta)?;
    let bound = grid_count_log_bound(n, delta);
    let mut report = Report {
        experiment: "grid-count".into(),
        header: ["n", "delta", "count", "ln_count", "ln_bound"].iter().map(|h| h.to_string()).collect(),
        rows: vec![vec![
            n.to_string(),
            format!("{delta:?}"),
            count.to_string(),
            format!("{:?}", ln_biguint(&count)),
            format!("{bound:?}"),
        ]],
        summary: Vec::new(),
    };
    report.summary.push(("count".into(), count.to_string()));
    report.summary.push(("ln_bound".into(), format!("{bound:?}")));
    persist("grid-count", &s, &report, started)?;
    println!("{count}");
    Ok(())
}

fn run_report(args: &ReportArgs) -> Outcome<()> {
    let defaults = vec![
        ("eps".to_string(), "0.05:0.05:0.5".to_string()),
        ("fit_max_eps".to_string(), "0.5".to_string()),
    ];
    let s = resolve("report", defaults, &args.common, &[("eps", &args.eps), ("fit_max_eps", &args.fit_max_eps)])?;
    if args.common.print_config {
        print!("{}", s.render("report"));
        return Ok(());
    }
    if args.inputs.is_empty() {
        return Err(Failure::Config("report needs at least one input CSV".into()));
    }
    let inputs = args
        .inputs
        .iter()
        .map(|p| {
            std::fs::read_to_string(p)
                .map(|t| (p.display().to_string(), t))
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", p.display())))
        })
        .collect::<Outcome<Vec<_>>>()?;
    let started = unix_time();
    let report = merge_reports(&inputs, &parse_grid(s.get("eps"))?, s.num("fit_max_eps")?)?;
    persist("report", &s, &report, started)?;
    print!("{}", report.summary_text());
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome<()> {
    match &cli.command {
        Command::Regularize(a) => run_experiment("regularize", a),
        Command::Cover(a) => run_experiment("cover", a),
        Command::Smin(a) => run_experiment("smin", a),
        Command::NormalLcd(a) => run_experiment("normal-lcd", a),
        Command::Symmetrize(a) => run_experiment("symmetrize", a),
        Command::Distance(a) => run_experiment("distance", a),
        Command::Tensorize(a) => run_experiment("tensorize", a),
        Command::Lcd(a) => run_lcd(a),
        Command::Smallball(a) => run_smallball(a),
        Command::GridCount(a) => run_grid_count(a),
        Command::Report(a) => run_report(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors, including unknown subcommands.
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
