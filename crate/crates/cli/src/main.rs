//! `dithub`: inspect module libraries and run experiments from the shell.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on argument or
//! configuration errors.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use dithub_core::bench::{run_suite, BenchConfig, Suite};
use dithub_core::evalkit::{
    eval_snapshot, union_test_set, unlearn_matrix, EvalMode, LibrarySource,
};
use dithub_core::lowrank::{DenseMatrix, ExpertModule};
use dithub_core::registry::ModuleLibrary;
use dithub_core::streamio::{read_stream, write_stream};
use dithub_core::taskgen::{fewshot_stream, generate_stream, TaskSpec};
use dithub_core::toydetect::{pretrain_base, BaseModel};
use dithub_core::trainer::{run_stream, run_variant, StrategyRegistry};
use dithub_core::Error;

#[derive(Parser)]
#[command(
    name = "dithub",
    version,
    about = "Versioned class-specific low-rank module libraries"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct LibArg {
    /// Library root.
    #[arg(long, env = "DITHUB_LIB")]
    lib: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file with `gen`, `train` and `seeds` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.hyper.lr=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Create an empty library.
    Init { path: PathBuf },
    /// Generate a task stream and write it as JSON lines plus a sidecar.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = ["disjoint_like", "overlapped"])]
        regime: Option<String>,
        /// Keep at most this many train samples per class.
        #[arg(long)]
        fewshot: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pretrain the frozen model and train a stream into a new library.
    Train {
        #[arg(long)]
        stream: PathBuf,
        #[command(flatten)]
        lib: LibArg,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the run report (default `<lib>/report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// List the latest module of every class.
    Modules {
        #[command(flatten)]
        lib: LibArg,
    },
    /// Show the commit log.
    Log {
        #[command(flatten)]
        lib: LibArg,
        #[arg(long)]
        class: Option<String>,
    },
    /// Show the latest module of a class.
    Fetch {
        class: String,
        #[command(flatten)]
        lib: LibArg,
        /// Also write the `A` factor as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show one historical version of a class module.
    Checkout {
        class: String,
        version: u64,
        #[command(flatten)]
        lib: LibArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class AP for a prompt over a stream's test and zero-shot samples.
    Infer {
        #[arg(long)]
        stream: PathBuf,
        #[command(flatten)]
        lib: LibArg,
        /// Comma-separated prompt classes (default: every task class).
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        /// `composed`, `none` or `single:<class>`.
        #[arg(long, default_value = "composed")]
        mode: String,
    },
    /// AP change of every class after subtracting one class's module.
    Unlearn {
        class: String,
        #[arg(long)]
        stream: PathBuf,
        #[command(flatten)]
        lib: LibArg,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
    },
    /// Run a canned experiment suite.
    Bench {
        #[arg(value_parser = Suite::ALL.map(Suite::name))]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds (default from the config).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// `println!` that reports write errors instead of panicking, so piping
/// into `head` ends quietly.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::LambdaOutOfRange(_) | Error::UnknownStrategy(_) => {
                Failure::Usage(e.to_string())
            }
            e => Failure::Runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Sets `key` (dot separated) in `doc`, creating objects under unset
/// optional sections. Unknown keys are caught when the result is parsed back.
fn apply_override(doc: &mut Value, assignment: &str) -> CliResult {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            usage(format!(
                "override key {key:?}: {} is not a section",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Err(usage("empty override key"))
}

fn load_config(args: &ConfigArgs) -> CliResult<BenchConfig> {
    let mut doc = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?
        }
        None => serde_json::to_value(BenchConfig::default())?,
    };
    for o in &args.overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: BenchConfig =
        serde_json::from_value(doc).map_err(|e| usage(format!("config: {e}")))?;
    cfg.gen.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn seed_or_draw(seed: Option<u64>) -> CliResult<u64> {
    if let Some(s) = seed {
        return Ok(s);
    }
    let s = rand::random::<u64>() >> 12;
    out!("seed: {s} (drawn; pass --seed {s} to repeat)");
    Ok(s)
}

fn open_lib(lib: &LibArg) -> CliResult<ModuleLibrary> {
    Ok(ModuleLibrary::open(&lib.lib)?)
}

fn write_matrix(path: &Path, m: &DenseMatrix) -> CliResult {
    let rows: Vec<&[f64]> = (0..m.rows()).map(|r| m.row(r)).collect();
    let doc = serde_json::json!({ "rows": m.rows(), "cols": m.cols(), "data": rows });
    std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

fn frobenius(m: &DenseMatrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn show_module(m: &ExpertModule, out: Option<&Path>) -> CliResult {
    out!("class    {}", m.class_id);
    out!("version  {}", m.version);
    if let Some(p) = m.parent_version {
        out!("parent   {p}");
    }
    out!("task     {}", m.task_id);
    out!("phase    {:?}", m.phase);
    out!("shape    {}x{}", m.a.rows(), m.a.cols());
    out!("norm     {:.6}", frobenius(&m.a));
    if let Some(path) = out {
        write_matrix(path, &m.a)?;
        out!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gen(
    out: &Path,
    seed: Option<u64>,
    regime: Option<&str>,
    fewshot: Option<usize>,
    config: &ConfigArgs,
) -> CliResult {
    let mut gen = load_config(config)?.gen;
    gen.seed = seed_or_draw(seed)?;
    if let Some(r) = regime {
        gen.regime = serde_json::from_value(Value::String(r.into()))?;
        gen.validate()?;
    }
    if fewshot == Some(0) {
        return Err(usage("--fewshot must be positive"));
    }
    let mut stream = generate_stream(&gen)?;
    if let Some(k) = fewshot {
        stream = fewshot_stream(&stream, k, gen.seed);
    }
    write_stream(out, &stream, &gen, fewshot)?;
    let train: usize = stream.tasks.iter().map(|t| t.train.len()).sum();
    out!(
        "wrote {}: {} tasks, {} train samples, regime {:?}",
        out.display(),
        stream.tasks.len(),
        train,
        stream.regime
    );
    Ok(())
}

fn cmd_train(
    stream_path: &Path,
    lib: &LibArg,
    variant: Option<String>,
    seed: Option<u64>,
    report: Option<PathBuf>,
    config: &ConfigArgs,
) -> CliResult {
    let mut train = load_config(config)?.train;
    if let Some(v) = variant {
        train.variant = v;
    }
    StrategyRegistry::builtin().get(&train.variant)?;
    train.seed = seed_or_draw(seed)?;
    let (stream, _) = read_stream(stream_path)?;
    // An empty library from `init` is trained into; anything else is created.
    let rec = if lib.lib.join("manifest.json").exists() {
        let mut library = open_lib(lib)?;
        if !library.log(None).is_empty() || lib.lib.join("base").exists() {
            return Err(Failure::Runtime(Error::LibraryExists(lib.lib.clone())));
        }
        let model = pretrain_base(&stream, &train.pretrain, train.seed)?;
        model.save(&lib.lib.join("base"))?;
        run_stream(&model, &stream, &mut library, &train)?
    } else {
        run_variant(&stream, &train, &lib.lib)?
    };
    let report = report.unwrap_or_else(|| lib.lib.join("report.json"));
    std::fs::write(&report, serde_json::to_string_pretty(&rec)? + "\n")?;
    for cp in &rec.checkpoints {
        out!(
            "{:<8} Avg {:.4}  zero-shot {:.4}",
            cp.task_id,
            cp.report.avg,
            cp.report.zero_shot
        );
    }
    out!(
        "final Avg {:.4}  zero-shot {:.4} (frozen {:.4})  forgetting {:+.4}  {} ms",
        rec.final_report.avg,
        rec.final_report.zero_shot,
        rec.final_report.zero_shot_pristine,
        rec.forgetting.avg,
        rec.wall_clock_ms
    );
    out!("wrote {}", report.display());
    Ok(())
}

fn cmd_modules(lib: &ModuleLibrary) -> CliResult {
    out!(
        "{:<12} {:>7} {:<10} {:<12} {:>10}",
        "class",
        "version",
        "task",
        "phase",
        "norm"
    );
    for c in lib.classes() {
        let m = lib
            .fetch(&c)?
            .ok_or_else(|| Failure::Runtime(Error::UnknownClass(c.clone())))?;
        out!(
            "{:<12} {:>7} {:<10} {:<12} {:>10.4}",
            c,
            m.version,
            m.task_id,
            format!("{:?}", m.phase),
            frobenius(&m.a)
        );
    }
    match lib.latest_shared()? {
        Some(s) => out!(
            "shared B from task index {} ({} versions)",
            s.task_index,
            lib.num_shared()
        ),
        None if lib.has_projections() => out!("class-specific B factors"),
        None => out!("no shared B"),
    }
    Ok(())
}

fn cmd_log(lib: &ModuleLibrary, class: Option<&str>) -> CliResult {
    out!(
        "{:>5} {:<10} {:<12} {:>7} {:<10} {:>6} {:<16}",
        "seq",
        "kind",
        "class",
        "version",
        "task",
        "lambda",
        "hash"
    );
    for r in lib.log(class) {
        out!(
            "{:>5} {:<10} {:<12} {:>7} {:<10} {:>6} {:016x}",
            r.seq,
            format!("{:?}", r.kind).to_lowercase(),
            r.class_id.as_deref().unwrap_or("-"),
            r.version,
            r.task_id,
            r.lambda_used.map_or("-".into(), |l| format!("{l}")),
            r.content_hash
        );
    }
    Ok(())
}

fn parse_mode(mode: &str) -> CliResult<EvalMode> {
    match mode {
        "composed" => Ok(EvalMode::Composed),
        "none" => Ok(EvalMode::None),
        m => match m.strip_prefix("single:") {
            Some(c) if !c.is_empty() => Ok(EvalMode::Single(c.to_string())),
            _ => Err(usage(format!(
                "unknown mode {m:?}; use composed, none or single:<class>"
            ))),
        },
    }
}

fn cmd_infer(stream_path: &Path, lib: &LibArg, classes: Vec<String>, mode: &str) -> CliResult {
    let mode = parse_mode(mode)?;
    let (stream, _) = read_stream(stream_path)?;
    let library = open_lib(lib)?;
    let model = BaseModel::load(&lib.lib.join("base"))?;
    let classes = if classes.is_empty() {
        stream.task_classes()
    } else {
        classes
    };
    for c in &classes {
        model
            .prompt(c)
            .map_err(|_| usage(format!("unknown class {c:?}")))?;
    }
    let mut samples = union_test_set(&stream.tasks);
    samples.extend(stream.zero_shot_set.iter().cloned());
    let prompt = TaskSpec {
        task_id: "prompt".into(),
        class_ids: classes.clone(),
        domain_id: String::new(),
        transform: DenseMatrix::identity(model.dim()),
        train: Vec::new(),
        test: samples,
    };
    let source = LibrarySource { lib: &library };
    let report = eval_snapshot(
        &model,
        &source,
        &[&prompt],
        &stream.zero_shot_set,
        &stream.base_classes,
        &mode,
    );
    let report = match report {
        Ok(r) => r,
        Err(Error::NoPositives) => {
            return Err(usage("none of the prompt classes has a positive sample"))
        }
        Err(e) => return Err(e.into()),
    };
    let aps = &report.per_class_ap["prompt"];
    for c in &classes {
        match aps.get(c) {
            Some(ap) => out!("{c:<12} AP {ap:.4}"),
            None => out!("{c:<12} AP n/a (no positives)"),
        }
    }
    out!(
        "mAP {:.4}  modules used: {}",
        report.avg,
        report.composed_modules.join(", ")
    );
    out!(
        "base-class zero-shot mAP {:.4} (frozen {:.4})",
        report.zero_shot,
        report.zero_shot_pristine
    );
    Ok(())
}

fn cmd_unlearn(class: &str, stream_path: &Path, lib: &LibArg, alpha: f64) -> CliResult {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(usage("--alpha must be finite and non-negative"));
    }
    let (stream, _) = read_stream(stream_path)?;
    let library = open_lib(lib)?;
    if library.latest_version(class).is_none() {
        return Err(Failure::Runtime(Error::UnknownClass(class.to_string())));
    }
    let model = BaseModel::load(&lib.lib.join("base"))?;
    let eval_set = union_test_set(&stream.tasks);
    let present: BTreeSet<&String> = eval_set.iter().flat_map(|s| &s.present).collect();
    let classes: Vec<String> = stream
        .task_classes()
        .into_iter()
        .filter(|c| present.contains(c))
        .collect();
    let m = unlearn_matrix(
        &model,
        &LibrarySource { lib: &library },
        &classes,
        &eval_set,
        alpha,
    )?;
    let row = m.classes.iter().position(|c| c == class).ok_or_else(|| {
        usage(format!(
            "class {class:?} has no test positives in this stream"
        ))
    })?;
    out!("removing {class} with alpha {alpha}");
    out!("{:<12} {:>9} {:>9}", "class", "baseline", "delta");
    for (j, c) in m.classes.iter().enumerate() {
        out!("{c:<12} {:>9.4} {:>+9.4}", m.baseline[j], m.delta[row][j]);
    }
    Ok(())
}

fn cmd_bench(suite: &str, out: &Path, seeds: Vec<u64>, config: &ConfigArgs) -> CliResult {
    let suite: Suite = suite.parse()?;
    let mut cfg = load_config(config)?;
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    let outcome = run_suite(suite, &cfg, out)?;
    for line in &outcome.lines {
        out!("{line}");
    }
    for f in &outcome.files {
        out!("wrote {}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Init { path } => {
            ModuleLibrary::init(&path)?;
            out!("initialized empty library at {}", path.display());
            Ok(())
        }
        Command::Gen {
            out,
            seed,
            regime,
            fewshot,
            config,
        } => cmd_gen(&out, seed, regime.as_deref(), fewshot, &config),
        Command::Train {
            stream,
            lib,
            variant,
            seed,
            report,
            config,
        } => cmd_train(&stream, &lib, variant, seed, report, &config),
        Command::Modules { lib } => cmd_modules(&open_lib(&lib)?),
        Command::Log { lib, class } => cmd_log(&open_lib(&lib)?, class.as_deref()),
        Command::Fetch { class, lib, out } => {
            let m = open_lib(&lib)?
                .fetch(&class)?
                .ok_or_else(|| Failure::Runtime(Error::UnknownClass(class.clone())))?;
            show_module(&m, out.as_deref())
        }
        Command::Checkout {
            class,
            version,
            lib,
            out,
        } => show_module(&open_lib(&lib)?.checkout(&class, version)?, out.as_deref()),
        Command::Infer {
            stream,
            lib,
            classes,
            mode,
        } => cmd_infer(&stream, &lib, classes, &mode),
        Command::Unlearn {
            class,
            stream,
            lib,
            alpha,
        } => cmd_unlearn(&class, &stream, &lib, alpha),
        Command::Bench {
            suite,
            out,
            seeds,
            config,
        } => cmd_bench(&suite, &out, seeds, &config),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(Error::Io(e))) if e.kind() == std::io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
