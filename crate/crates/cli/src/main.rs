use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hmanet_core::complexity::{
    analyze, sweep, wallclock_bench, write_sweep_csv, AnalyzerConfig, Geometry, ModuleKind,
    SweepPartition, SWEEP_HEADER,
};
use hmanet_core::config::RunConfig;
use hmanet_core::data::{generate_dataset, read_dataset, write_dataset};
use hmanet_core::network::{
    build, evaluate_model, load_checkpoint, save_checkpoint, train, LogEntry, CHECKPOINT_META,
};
use hmanet_core::rsa::{rsa_attention_flops, PartitionSpec};
use hmanet_core::suite::{all_cases, run_case_with_step, CheckRow, DEFAULT_SHAPES_PER_CASE};
use hmanet_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_ASSERT: u8 = 4;

#[derive(Parser)]
#[command(name = "hmanet", version, about = "Hybrid multiple attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks of every op and module
    Gradcheck(GradcheckArgs),
    /// Time SA and RSA forward passes, one JSON line per kind
    Bench(BenchArgs),
    /// Parameter, memory and FLOP counts for one module as CSV
    Analyze(AnalyzeArgs),
    /// Complexity over a range of input sizes as CSV
    Sweep(SweepArgs),
    /// Write a synthetic dataset directory
    GenData(GenDataArgs),
    /// Train the toy network and write a checkpoint plus loss log
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metric CSV
    Eval(EvalArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run every case
    #[arg(long)]
    all: bool,
    /// Run only cases whose name contains this
    #[arg(long)]
    case: Option<String>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Seeded shapes per case
    #[arg(long, default_value_t = DEFAULT_SHAPES_PER_CASE)]
    shapes: usize,
    /// Finite-difference step
    #[arg(long)]
    step: Option<f64>,
    /// Exit with status 4 when any row fails
    #[arg(long)]
    assert: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// sa, rsa or both
    #[arg(long, default_value = "both")]
    kind: String,
    #[arg(long, default_value_t = 1)]
    b: usize,
    #[arg(long, default_value_t = 256)]
    c: usize,
    #[arg(long, default_value_t = 64)]
    h: usize,
    #[arg(long, default_value_t = 64)]
    w: usize,
    #[arg(long, default_value_t = 8)]
    gh: usize,
    #[arg(long, default_value_t = 8)]
    gw: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzerArgs {
    /// Reduced width C′ (default C/4)
    #[arg(long)]
    reduced: Option<usize>,
    /// Query/key width d (default C/4)
    #[arg(long)]
    key_dim: Option<usize>,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 150)]
    alpha: usize,
    /// Analyse the module on C channels without the 3×3 reduction
    #[arg(long)]
    no_reduction: bool,
}

impl AnalyzerArgs {
    fn config(&self, gh: usize, gw: usize) -> AnalyzerConfig {
        AnalyzerConfig {
            reduced: self.reduced,
            key_dim: self.key_dim,
            gh,
            gw,
            classes: self.classes,
            alpha: self.alpha,
            include_reduction: !self.no_reduction,
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 1)]
    b: usize,
    #[arg(long)]
    c: usize,
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    #[arg(long, default_value_t = 8)]
    gh: usize,
    #[arg(long, default_value_t = 8)]
    gw: usize,
    #[command(flatten)]
    analyzer: AnalyzerArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma separated kinds
    #[arg(long, default_value = "sa,rsa", value_delimiter = ',')]
    kinds: Vec<String>,
    /// Comma separated square sizes H=W
    #[arg(long, default_value = "32,64,96,128", value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 2048)]
    c: usize,
    /// Fixed region side P (regions grow with the image)
    #[arg(long, conflicts_with = "grid")]
    region: Option<usize>,
    /// Fixed grid side G (regions shrink with the image)
    #[arg(long)]
    grid: Option<usize>,
    #[command(flatten)]
    analyzer: AnalyzerArgs,
    /// Write here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    h: usize,
    #[arg(long, default_value_t = 64)]
    w: usize,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set lambda_aux=0`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> hmanet_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.data_dir = Some(d.clone());
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory for the checkpoint and loss log
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Print a progress line every this many iterations
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    /// Write the metric CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Usage(_) => (EXIT_USAGE, "usage"),
            Error::Shape(_) => (EXIT_USAGE, "shape"),
            Error::Partition(_) => (EXIT_USAGE, "partition"),
            Error::Resource(_) => (EXIT_USAGE, "resource"),
            Error::Label(_) => (EXIT_DATA, "label"),
            Error::Format { .. } => (EXIT_DATA, "format"),
            Error::Io(_) => (EXIT_DATA, "io"),
            Error::Divergence(_) => (EXIT_NUMERIC, "divergence"),
            Error::Evaluation(_) => (EXIT_NUMERIC, "evaluation"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            eprintln!("error kind=usage exit={EXIT_USAGE} message=\"{}\"", one_line(first));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!(
                "error kind={} exit={} message=\"{}\"",
                f.kind,
                f.code,
                one_line(&f.message).replace('"', "'")
            );
            ExitCode::from(f.code)
        }
    }
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let cases: Vec<&'static str> = match (&a.case, a.all) {
        (_, true) => all_cases(),
        (Some(f), false) => all_cases().into_iter().filter(|c| c.contains(f.as_str())).collect(),
        (None, false) => return Err(Error::Usage("pass --all or --case NAME".into()).into()),
    };
    if cases.is_empty() {
        return Err(Error::Usage("no gradient check case matches".into()).into());
    }
    if a.shapes == 0 {
        return Err(Error::Usage("--shapes must be positive".into()).into());
    }
    let mut out = io::stdout().lock();
    writeln!(out, "case,seed,shape,coords,rel_err,status")?;
    let mut failed: Vec<CheckRow> = Vec::new();
    let mut total = 0;
    for case in cases {
        for i in 0..a.shapes as u64 {
            let row = run_case_with_step(case, a.seed + i, a.step)?;
            writeln!(
                out,
                "{},{},\"{}\",{},{:.3e},{}",
                row.case,
                row.seed,
                row.shape,
                row.coords,
                row.rel_err,
                if row.passed() { "pass" } else { "FAIL" }
            )?;
            total += 1;
            if !row.passed() {
                failed.push(row);
            }
        }
    }
    out.flush()?;
    eprintln!("gradcheck: {} of {total} rows passed", total - failed.len());
    if a.assert && !failed.is_empty() {
        return Err(Failure {
            code: EXIT_ASSERT,
            kind: "acceptance",
            message: format!(
                "{} gradient check rows exceed the tolerance, first {} seed {}",
                failed.len(),
                failed[0].case,
                failed[0].seed
            ),
        });
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Outcome {
    let kinds = match a.kind.as_str() {
        "both" => vec![ModuleKind::Sa, ModuleKind::Rsa],
        k => vec![k.parse()?],
    };
    let geo = Geometry::new(a.b, a.c, a.h, a.w);
    for kind in kinds {
        let r = wallclock_bench(kind, geo, a.gh, a.gw, a.reps, a.seed)?;
        println!("{}", r.to_json_line());
    }
    Ok(())
}

fn analyze_cmd(a: AnalyzeArgs) -> Outcome {
    let kind: ModuleKind = a.kind.parse()?;
    let cfg = a.analyzer.config(a.gh, a.gw);
    let geo = Geometry::new(a.b, a.c, a.h, a.w);
    let r = analyze(kind, geo, &cfg)?;
    // closed-form attention cost relative to dense attention at this size
    let (formula, ratio) = match kind {
        ModuleKind::Rsa => {
            let spec = PartitionSpec::from_grid(a.h, a.w, a.gh, a.gw)?;
            let f = rsa_attention_flops(&spec, a.h, a.w, a.c)?;
            (format!("{:e}", f.rsa), format!("{:.6e}", f.ratio))
        }
        ModuleKind::Sa => {
            let hw = (a.h * a.w) as f64;
            (format!("{:e}", hw * hw * a.c as f64), "1".to_string())
        }
        ModuleKind::Caa => (String::new(), String::new()),
    };
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    let mut header: Vec<&str> = SWEEP_HEADER.to_vec();
    header.extend(["formula_attention_flops", "formula_ratio"]);
    w.write_record(&header).map_err(csv_failure)?;
    w.write_record([
        kind.to_string(),
        a.h.to_string(),
        a.w.to_string(),
        a.c.to_string(),
        r.params.to_string(),
        r.memory_bytes.to_string(),
        r.flops.to_string(),
        r.attention_flops.to_string(),
        formula,
        ratio,
    ])
    .map_err(csv_failure)?;
    w.flush()?;
    Ok(())
}

fn csv_failure(e: csv::Error) -> Failure {
    Failure {
        code: EXIT_DATA,
        kind: "io",
        message: e.to_string(),
    }
}

fn sweep_cmd(a: SweepArgs) -> Outcome {
    let kinds = a
        .kinds
        .iter()
        .map(|k| k.parse())
        .collect::<hmanet_core::Result<Vec<ModuleKind>>>()?;
    let sizes: Vec<(usize, usize)> = a.sizes.iter().map(|&s| (s, s)).collect();
    let partition = match (a.region, a.grid) {
        (Some(p), _) => SweepPartition::FixedRegion { ph: p, pw: p },
        (None, Some(g)) => SweepPartition::FixedGrid { gh: g, gw: g },
        (None, None) => SweepPartition::FixedRegion { ph: 16, pw: 16 },
    };
    let rows = sweep(&kinds, &sizes, a.c, partition, &a.analyzer.config(8, 8))?;
    match &a.out {
        Some(p) => write_sweep_csv(&rows, fs::File::create(p)?)?,
        None => write_sweep_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let scenes = generate_dataset(a.seed, a.count, a.h, a.w)?;
    write_dataset(&a.out, &scenes)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut cfg = a.run.resolve()?;
    if let Some(v) = a.max_iter {
        cfg.max_iter = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = Some(o.clone());
    }
    let data = cfg
        .data_dir
        .clone()
        .ok_or_else(|| Error::Usage("training needs --data or data_dir".into()))?;
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Usage("training needs --out or out_dir".into()))?;
    let scenes = read_dataset(&data)?;
    (cfg.height, cfg.width) = (scenes[0].height, scenes[0].width);
    let (net, mut store) = build(cfg.net_config(), cfg.seed)?;
    let echo = cfg.to_text();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), &echo)?;
    let log_every = a.log_every.max(1);
    let log = train(&net, &mut store, &scenes, &cfg.train_config(), |e: &LogEntry| {
        if e.iter.is_multiple_of(log_every) || e.iter + 1 == cfg.max_iter {
            eprintln!("iter {} lr {:.6} loss {:.6}", e.iter, e.lr, e.loss.total);
        }
    })?;
    write_loss_log(&out.join("loss.csv"), &echo, &log)?;
    save_checkpoint(&out.join("checkpoint"), &store, cfg.max_iter, cfg.seed, &echo)?;
    Ok(())
}

fn write_loss_log(path: &Path, echo: &str, log: &[LogEntry]) -> Outcome {
    let mut text = String::new();
    for line in echo.lines() {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    text.push_str("iter,lr,total,main,cls,aux\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    for e in log {
        text.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{},{}\n",
            e.iter,
            e.lr,
            e.loss.total,
            e.loss.main,
            opt(e.loss.cls),
            opt(e.loss.aux)
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Configuration echoed into a checkpoint's metadata file.
fn checkpoint_config(dir: &Path) -> hmanet_core::Result<RunConfig> {
    let meta = fs::read_to_string(dir.join(CHECKPOINT_META))?;
    let (_, echo) = meta
        .split_once("# config\n")
        .ok_or_else(|| Error::Format {
            offset: 0,
            reason: format!("{} has no configuration echo", dir.join(CHECKPOINT_META).display()),
        })?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(echo)?;
    Ok(cfg)
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let cfg = checkpoint_config(&a.checkpoint)?;
    let (net, mut store) = load_checkpoint(&a.checkpoint, cfg.net_config())?;
    let scenes = read_dataset(&a.data)?;
    let cm = evaluate_model(&net, &mut store, &scenes, a.batch_size)?;
    let summary = cm.summary()?;
    match &a.out {
        Some(p) => summary.write_csv(fs::File::create(p)?)?,
        None => summary.write_csv(io::stdout().lock())?,
    }
    Ok(())
}
