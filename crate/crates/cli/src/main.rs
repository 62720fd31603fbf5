use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ppcl::data::{synth4, TaskStream};
use ppcl::harness::{self, Method, Pretrained, RunConfig, RunSummary};
use ppcl::metrics::{corpus_bleu, BleuConfig};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "ppcl", version, about = "Continual prompt tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one method over a task stream and write its artifacts.
    Run(RunArgs),
    /// Repeat a run over values of one axis and summarize.
    Sweep(SweepArgs),
    /// Rebuild PCA and drift CSVs from a run directory.
    Diagnose { dir: PathBuf },
    /// Write the synthetic stream as JSONL task directories.
    GenData(GenArgs),
    /// Corpus BLEU of a hypotheses file against a references file.
    Eval(EvalArgs),
}

#[derive(Args, Clone, Debug, Default)]
struct Overrides {
    /// JSON run configuration; flags below win over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    /// `synth4` or `jsonl:DIR`.
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replay buffer capacity.
    #[arg(long)]
    buffer: Option<usize>,
    #[arg(long)]
    er: Option<bool>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    shared_frac: Option<f64>,
    /// Task order as a comma-separated permutation of stream positions.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<usize>>,
    /// Where warm-up checkpoints are cached (default: OUTPUT_ROOT/.warmup).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Run directory (default: $PPCL_OUT or ./runs, then METHOD[_er]_seedN).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Axis {
    BufferSize,
    Method,
    Seed,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated values; all methods or seeds 1..=3 when omitted.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<String>>,
    /// Sweep root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sub-runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    train: usize,
    #[arg(long, default_value_t = 64)]
    validation: usize,
    #[arg(long, default_value_t = 64)]
    test: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// One hypothesis per line.
    #[arg(long)]
    hyps: PathBuf,
    /// One reference per line, aligned with the hypotheses.
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    lowercase: bool,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Numeric(anyhow::Error),
    Partial(String),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Partial(_) | Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) | Failure::Numeric(e) | Failure::Other(e) => write!(f, "{e:#}"),
            Failure::Partial(s) => f.write_str(s),
        }
    }
}

fn classify(e: anyhow::Error) -> Failure {
    match e.downcast_ref::<ppcl::Error>() {
        Some(ppcl::Error::Numeric { .. }) => Failure::Numeric(e),
        Some(ppcl::Error::Io(_)) => Failure::Other(e),
        Some(_) => Failure::Config(e),
        None if e.downcast_ref::<serde_json::Error>().is_some() => Failure::Config(e),
        None => Failure::Other(e),
    }
}

fn output_root() -> PathBuf {
    std::env::var_os("PPCL_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve(o: &Overrides) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::Config)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(Failure::Config)?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = &o.method {
        cfg.method = m.parse().map_err(|e: ppcl::Error| Failure::Config(e.into()))?;
    }
    if let Some(t) = &o.tasks {
        cfg.data.tasks = t.clone();
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(b) = o.buffer {
        cfg.buffer_capacity = b;
    }
    if let Some(er) = o.er {
        cfg.use_er = er;
    }
    if let Some(l) = o.lambda {
        cfg.pool.train.lambda = l;
    }
    if let Some(m) = o.pool_size {
        cfg.pool.size = m;
    }
    if let Some(k) = o.top_k {
        cfg.pool.train.k = k;
    }
    if let Some(f) = o.shared_frac {
        cfg.pool.train.shared_fraction = f;
    }
    if let Some(order) = &o.order {
        cfg.data.order = Some(order.clone());
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg)
}

fn run_label(cfg: &RunConfig) -> String {
    format!("{}{}_seed{}", cfg.method, if cfg.use_er { "_er" } else { "" }, cfg.seed)
}

fn load_stream(cfg: &RunConfig) -> std::result::Result<TaskStream, Failure> {
    cfg.data.load(cfg.seed).map_err(|e| classify(e.into()))
}

/// Loads the warm-up checkpoint for this configuration, training and caching it when absent.
fn pretrained(cfg: &RunConfig, stream: &TaskStream, cache: &Path) -> Result<Pretrained> {
    let vocab = harness::warmup_vocabulary(&cfg.warmup, stream)?;
    let key = serde_json::to_string(&(&cfg.warmup, &cfg.backbone, vocab.chars()))?;
    let digest = Sha256::digest(key.as_bytes());
    let path = cache.join(format!("{:x}.ppcl", digest));
    if path.exists() {
        let pre = Pretrained::load(&path)?;
        if pre.covers(stream) {
            return Ok(pre);
        }
    }
    eprintln!("warming up backbone ({} steps)", cfg.warmup.steps);
    let pre = harness::warmup(&cfg.warmup, &cfg.backbone, stream)?;
    fs::create_dir_all(cache)?;
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    pre.save(&tmp)?;
    fs::rename(&tmp, &path)?;
    Ok(pre)
}

fn cache_dir(o: &Overrides, root: &Path) -> PathBuf {
    o.cache_dir.clone().unwrap_or_else(|| root.join(".warmup"))
}

fn cmd_run(args: RunArgs) -> std::result::Result<(), Failure> {
    let cfg = resolve(&args.overrides)?;
    let stream = load_stream(&cfg)?;
    let (dir, root) = match args.out {
        Some(d) => {
            let root = d.parent().map(Path::to_path_buf).unwrap_or_default();
            (d, root)
        }
        None => {
            let root = output_root();
            (root.join(run_label(&cfg)), root)
        }
    };
    let pre = pretrained(&cfg, &stream, &cache_dir(&args.overrides, &root)).map_err(classify)?;
    let out = harness::run(&stream, &cfg, &pre, None).map_err(|e| classify(e.into()))?;
    let summary = harness::write_artifacts(&dir, &out).map_err(|e| classify(e.into()))?;
    println!(
        "{}: <BLEU> val {:.2} test {:.2}, <Forget> val {} test {} -> {}",
        run_label(&cfg),
        summary.avg_bleu_val,
        summary.avg_bleu_test,
        fmt_opt(summary.forget_val),
        fmt_opt(summary.forget_test),
        dir.display()
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

fn sweep_configs(base: &RunConfig, axis: Axis, values: Option<Vec<String>>) -> Result<Vec<(String, RunConfig)>> {
    let values = values.unwrap_or_else(|| match axis {
        Axis::Method => Method::ALL.iter().map(|m| m.name().to_string()).collect(),
        Axis::Seed => (1..=3).map(|s: u64| s.to_string()).collect(),
        Axis::BufferSize => [8, 16, 32, 64].iter().map(|b: &usize| b.to_string()).collect(),
    });
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    values
        .into_iter()
        .map(|v| {
            let mut c = base.clone();
            match axis {
                Axis::Method => c.method = v.parse()?,
                Axis::Seed => c.seed = v.parse().with_context(|| format!("seed '{v}'"))?,
                Axis::BufferSize => {
                    c.buffer_capacity = v.parse().with_context(|| format!("buffer size '{v}'"))?;
                    c.use_er = true;
                }
            }
            c.validate()?;
            Ok((v, c))
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> std::result::Result<(), Failure> {
    let base = resolve(&args.overrides)?;
    let axis_name = args.axis.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
    let runs = sweep_configs(&base, args.axis, args.values).map_err(Failure::Config)?;
    let root = args.out.unwrap_or_else(|| output_root().join(format!("sweep_{axis_name}")));
    let cache = cache_dir(&args.overrides, &root);
    let configs = root.join("configs");
    fs::create_dir_all(&configs).map_err(|e| Failure::Other(e.into()))?;

    // warm every distinct backbone once so sub-runs only read the cache
    for (_, c) in &runs {
        let stream = load_stream(c)?;
        pretrained(c, &stream, &cache).map_err(classify)?;
    }

    let exe = std::env::current_exe().map_err(|e| Failure::Other(e.into()))?;
    let mut statuses = vec![None; runs.len()];
    let mut pending: Vec<usize> = (0..runs.len()).rev().collect();
    let mut active: Vec<(usize, std::process::Child)> = Vec::new();
    let jobs = args.jobs.max(1);
    while !pending.is_empty() || !active.is_empty() {
        while active.len() < jobs {
            let Some(i) = pending.pop() else { break };
            let (value, c) = &runs[i];
            let cfg_path = configs.join(format!("{value}.json"));
            fs::write(&cfg_path, serde_json::to_string_pretty(c).map_err(|e| Failure::Other(e.into()))?)
                .map_err(|e| Failure::Other(e.into()))?;
            let child = Command::new(&exe)
                .arg("run")
                .arg("--config")
                .arg(&cfg_path)
                .arg("--out")
                .arg(root.join(value))
                .arg("--cache-dir")
                .arg(&cache)
                .spawn()
                .map_err(|e| Failure::Other(e.into()))?;
            active.push((i, child));
        }
        let (i, mut child) = active.remove(0);
        let status = child.wait().map_err(|e| Failure::Other(e.into()))?;
        statuses[i] = Some(status.code().unwrap_or(1));
    }

    let mut csv = String::from(
        "value,method,use_er,buffer_capacity,seed,avg_bleu_val,avg_bleu_test,forget_val,forget_test,status\n",
    );
    let mut failed = Vec::new();
    for ((value, c), status) in runs.iter().zip(&statuses) {
        let code = status.unwrap_or(1);
        let summary = fs::read_to_string(root.join(value).join("summary.json"))
            .ok()
            .and_then(|s| serde_json::from_str::<RunSummary>(&s).ok());
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let (bv, bt, fv, ft) = match (&summary, code) {
            (Some(s), 0) => (cell(Some(s.avg_bleu_val)), cell(Some(s.avg_bleu_test)), cell(s.forget_val), cell(s.forget_test)),
            _ => Default::default(),
        };
        if code != 0 {
            failed.push(value.clone());
        }
        csv.push_str(&format!(
            "{value},{},{},{},{},{bv},{bt},{fv},{ft},{}\n",
            c.method,
            c.use_er,
            c.buffer_capacity,
            c.seed,
            if code == 0 { "ok".to_string() } else { format!("exit {code}") }
        ));
    }
    let path = root.join("sweep_summary.csv");
    fs::write(&path, &csv).map_err(|e| Failure::Other(e.into()))?;
    print!("{csv}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(format!("sub-runs failed: {}", failed.join(", "))))
    }
}

fn cmd_diagnose(dir: &Path) -> std::result::Result<(), Failure> {
    let snaps = harness::read_snapshots(dir).map_err(|e| Failure::Config(e.into()))?;
    let n_tasks = snaps
        .iter()
        .flat_map(|s| s.query_tasks.iter().copied())
        .max()
        .map_or(0, |t| t + 1);
    let written = harness::write_diagnostics(dir, &snaps, n_tasks).map_err(|e| classify(e.into()))?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_gen_data(args: GenArgs) -> std::result::Result<(), Failure> {
    let stream = synth4((args.train, args.validation, args.test), args.seed).map_err(|e| Failure::Config(e.into()))?;
    let write = || -> Result<()> {
        for t in &stream.tasks {
            let dir = args.out.join(format!("{}_{}", t.id, t.name));
            fs::create_dir_all(&dir)?;
            for (split, examples) in [("train", &t.train), ("validation", &t.validation), ("test", &t.test)] {
                let mut text = String::new();
                for e in examples {
                    text.push_str(&serde_json::to_string(&serde_json::json!({
                        "input": e.input,
                        "target": e.target,
                        "task": t.name,
                    }))?);
                    text.push('\n');
                }
                fs::write(dir.join(format!("{split}.jsonl")), text)?;
            }
            println!("{}", dir.display());
        }
        Ok(())
    };
    write().map_err(Failure::Other)
}

fn read_lines(p: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(p)
        .with_context(|| format!("reading {}", p.display()))?
        .lines()
        .map(str::to_string)
        .collect())
}

fn cmd_eval(args: EvalArgs) -> std::result::Result<(), Failure> {
    let hyps = read_lines(&args.hyps).map_err(Failure::Config)?;
    let refs = read_lines(&args.refs).map_err(Failure::Config)?;
    let cfg = BleuConfig {
        lowercase: args.lowercase,
        ..BleuConfig::default()
    };
    let bleu = corpus_bleu(&hyps, &refs, &cfg).map_err(|e| Failure::Config(e.into()))?;
    println!("{bleu:.6}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Diagnose { dir } => cmd_diagnose(&dir),
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
