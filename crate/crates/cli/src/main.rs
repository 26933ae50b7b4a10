use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{ArgAction, Args, Parser, Subcommand};
use gpcount::config;
use gpcount::experiment::{
    self, shifted_style, trial_seeds, CellResult, DatasetSpec, Datasets, Method, SweepAxis, TransferData,
};
use gpcount::metrics::{self, MetricsRow};
use gpcount::synth::{self, AnnotatedImage, DomainStyle};
use gpcount::trainer::TrainConfig;
use gpcount::{Error, Result};

#[derive(Parser)]
#[command(
    name = "gpcount",
    version,
    about = "Semi-supervised crowd counting with GP pseudo-labels",
    disable_help_flag = true,
    disable_version_flag = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Print help
    #[arg(long, global = true, action = ArgAction::Help)]
    help: Option<bool>,
    /// Print version
    #[arg(long, action = ArgAction::Version)]
    version: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic point-annotated dataset
    Generate(GenerateArgs),
    /// Train one or more methods over several trial seeds
    Train(TrainArgs),
    /// Repeat training across a grid of one config value
    Sweep(SweepArgs),
    /// Source-labeled, target-unlabeled domain transfer experiment
    Transfer(TransferArgs),
    /// Merge metrics.csv files from several run directories
    Report(ReportArgs),
}

#[derive(Args)]
#[command(disable_help_flag = true)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "5:50", value_parser = parse_count_range)]
    count: (usize, usize),
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "default", value_parser = parse_style)]
    style: DomainStyle,
}

/// Training config layers: defaults, then `--config`, then `GPCOUNT_*`
/// variables, then `--set` and the dedicated flags.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda_un: Option<f64>,
    #[arg(long)]
    n_neighbors: Option<usize>,
}

/// Where images come from: dataset directories, or a generated default.
#[derive(Args)]
struct DataArgs {
    /// training set directory (labeled and unlabeled pool)
    #[arg(long, requires = "test")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    test: Option<PathBuf>,
    #[arg(long, requires = "data")]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value_t = 50)]
    n_val: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "5:50", value_parser = parse_count_range)]
    count: (usize, usize),
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
}

#[derive(Args)]
#[command(disable_help_flag = true)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// comma-separated list of baseline, gp, ranking
    #[arg(long, default_value = "baseline,gp", value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long, default_value_t = 0.05)]
    labeled: f64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// first trial seed; trials use seed, seed+1, ...
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
#[command(disable_help_flag = true)]
struct SweepArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    axis: SweepAxis,
    /// comma-separated grid values
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, default_value = "baseline,gp", value_delimiter = ',')]
    method: Vec<Method>,
    /// labeled fraction for axes other than labeled_fraction
    #[arg(long, default_value_t = 0.05)]
    labeled: f64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
#[command(disable_help_flag = true)]
struct TransferArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "default", value_parser = parse_style)]
    source_style: DomainStyle,
    #[arg(long, default_value = "shifted", value_parser = parse_style)]
    target_style: DomainStyle,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_source: usize,
    #[arg(long, default_value_t = 200)]
    n_target: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "5:50", value_parser = parse_count_range)]
    count: (usize, usize),
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
#[command(disable_help_flag = true)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
    /// run directory containing metrics.csv, repeatable
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
}

fn parse_count_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo: usize = lo.trim().parse().map_err(|e| format!("bad lower bound: {e}"))?;
    let hi: usize = hi.trim().parse().map_err(|e| format!("bad upper bound: {e}"))?;
    if lo > hi {
        return Err(format!("lower bound {lo} exceeds upper bound {hi}"));
    }
    Ok((lo, hi))
}

fn parse_style(s: &str) -> std::result::Result<DomainStyle, String> {
    match s {
        "default" => Ok(DomainStyle::default()),
        "shifted" => Ok(shifted_style()),
        _ => Err(format!("unknown style {s:?} (default, shifted)")),
    }
}

/// Timestamped progress log at `<out>/run.log`, echoed to stderr.
struct RunLog {
    file: File,
}

impl RunLog {
    fn open(out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let file = OpenOptions::new().create(true).append(true).open(out.join("run.log"))?;
        Ok(Self { file })
    }

    fn line(&mut self, msg: &str) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let _ = writeln!(self.file, "[{ts}] {msg}");
        eprintln!("{msg}");
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        config::apply_file(&mut cfg, path)?;
    }
    config::apply_env(&mut cfg, std::env::vars())?;
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(l) = args.lambda_un {
        cfg.lambda_un = l;
    }
    if let Some(n) = args.n_neighbors {
        cfg.n_neighbors = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(args: &DataArgs) -> Result<Datasets> {
    match (&args.data, &args.test) {
        (Some(train), Some(test)) => {
            let val: Vec<AnnotatedImage> = match &args.val {
                Some(v) => synth::load_dataset(v)?,
                None => Vec::new(),
            };
            Ok(Datasets {
                train: synth::load_dataset(train)?,
                test: synth::load_dataset(test)?,
                val,
            })
        }
        _ => Datasets::generate(&DatasetSpec {
            n_train: args.n_train,
            n_test: args.n_test,
            n_val: args.n_val,
            size: args.size,
            count_range: args.count,
            style: DomainStyle::default(),
            seed: args.data_seed,
        }),
    }
}

fn write_config(out: &Path, cfg: &TrainConfig) -> Result<()> {
    metrics::write_atomic(&out.join("config.txt"), &cfg.to_kv())
}

fn dedup_methods(methods: &[Method]) -> Vec<Method> {
    let mut m = methods.to_vec();
    m.sort();
    m.dedup();
    m
}

fn same_label_baseline(cells: &[CellResult]) -> impl Fn(&CellResult) -> Option<usize> + '_ {
    move |cell: &CellResult| {
        cells
            .iter()
            .position(|c| c.method == Method::Baseline && c.label == cell.label)
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let data = synth::generate_dataset(a.n, (a.size, a.size), a.count, &a.style, a.seed)?;
    synth::save_dataset(&data, &a.out)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let mut log = RunLog::open(&a.out)?;
    write_config(&a.out, &cfg)?;
    let data = load_data(&a.data)?;
    log.line(&format!(
        "train: {} train / {} test / {} val images, labeled fraction {}",
        data.train.len(),
        data.test.len(),
        data.val.len(),
        a.labeled
    ));
    let seeds = trial_seeds(a.seed, a.trials as usize);
    let label = format!("labeled={}", metrics::sig6(a.labeled));
    let mut cells = Vec::new();
    for m in dedup_methods(&a.method) {
        cells.push(experiment::run_cell(&data, &cfg, &label, m, a.labeled, &seeds, &mut |s| log.line(s))?);
    }
    experiment::write_reports(&a.out, &cells, &same_label_baseline(&cells))?;
    log.line("train: done");
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let mut log = RunLog::open(&a.out)?;
    write_config(&a.out, &cfg)?;
    let data = load_data(&a.data)?;
    log.line(&format!("sweep: axis {} over {:?}", a.axis.name(), a.values));
    let seeds = trial_seeds(a.seed, a.trials as usize);
    let methods = dedup_methods(&a.method);
    let cells = experiment::run_sweep(&data, &cfg, a.axis, &a.values, &methods, a.labeled, &seeds, &mut |s| {
        log.line(s)
    })?;
    experiment::write_reports(&a.out, &cells, &experiment::sweep_baseline(&cells))?;
    log.line("sweep: done");
    Ok(())
}

fn cmd_transfer(a: &TransferArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let mut log = RunLog::open(&a.out)?;
    write_config(&a.out, &cfg)?;
    let source = DatasetSpec {
        n_train: a.n_source,
        n_test: 0,
        n_val: 0,
        size: a.size,
        count_range: a.count,
        style: a.source_style.clone(),
        seed: a.data_seed,
    };
    let target = DatasetSpec {
        n_train: a.n_target,
        n_test: a.n_test,
        n_val: 0,
        style: a.target_style.clone(),
        seed: a.data_seed + 1,
        ..source.clone()
    };
    let data = TransferData::generate(&source, &target)?;
    let seeds = trial_seeds(a.seed, a.trials as usize);
    let cells = experiment::run_transfer(&data, &cfg, &seeds, &mut |s| log.line(s))?;
    let no_adapt = cells.iter().position(|c| c.method == Method::Baseline);
    experiment::write_reports(&a.out, &cells, &|_: &CellResult| no_adapt)?;
    log.line("transfer: done");
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut rows: Vec<MetricsRow> = Vec::new();
    for dir in &a.runs {
        let path = dir.join("metrics.csv");
        let text = fs::read_to_string(&path)?;
        let tag = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        for mut r in metrics::parse_metrics_csv(&text, &path.display().to_string())? {
            r.run_id = format!("{tag}/{}", r.run_id);
            rows.push(r);
        }
    }
    fs::create_dir_all(&a.out)?;
    metrics::write_atomic(&a.out.join("metrics.csv"), &metrics::metrics_csv(&rows))?;
    let mut summary = String::from("run_id,method,labeled_fraction,mae,mse,ag\n");
    for r in rows.iter().filter(|r| r.seed.is_none()) {
        let ag = r.ag.map(|g| format!("{}", metrics::display_gain(g))).unwrap_or_default();
        summary.push_str(&format!(
            "{},{},{},{},{},{ag}\n",
            r.run_id,
            r.method,
            metrics::sig6(r.labeled_fraction),
            metrics::sig6(r.mae),
            metrics::sig6(r.mse)
        ));
    }
    metrics::write_atomic(&a.out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Report(a) => cmd_report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('"', "'");
            eprintln!("error: kind={} msg=\"{msg}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}
