use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use protoridge::harness::{
    load_run_dir, render_csv, render_stagewise_csv, render_table, report_runs, run_protocol,
    AblationReport, AblationVariant, Experiment, ExperimentConfig, Method, DEFAULT_Q,
};
use protoridge::ridge::{LambdaMode, LAMBDA_GRID};
use protoridge::synth::{gen_cil_protocol, gen_domain_shifted, gen_xor_protocol};
use protoridge::{run_ablation, Nonlinearity};

const OUT_ENV: &str = "PROTORIDGE_OUT";

#[derive(Parser)]
#[command(name = "protoridge", version, about = "Online incremental classification on frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets.
    Gen {
        #[command(subcommand)]
        what: GenCommand,
    },
    /// Run a method over a manifest for several seeds.
    Run(RunArgs),
    /// Run the proposed method under an ablation variant.
    Ablate(AblateArgs),
    /// Summarize run records.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum GenCommand {
    /// Synthetic embeddings plus a manifest.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Gaussian mixture split into class-incremental tasks.
    Gaussian,
    /// Two-class XOR layout as a domain-incremental stream.
    Xor,
    /// Gaussian classes with a per-domain offset.
    Domain,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Tasks (gaussian, xor) or domains (domain).
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    /// Norm of each domain's offset (domain only).
    #[arg(long, default_value_t = 2.0)]
    shift: f64,
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    let seeds: std::result::Result<Vec<u64>, _> =
        s.split(',').map(|p| p.trim().parse::<u64>()).collect();
    match seeds {
        Ok(v) if !v.is_empty() => Ok(SeedList(v)),
        _ => Err(format!("expected a comma-separated list of integers, got '{s}'")),
    }
}

fn parse_positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got '{s}'")),
    }
}

#[derive(Args)]
struct CommonRunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated run seeds; defaults to the manifest's list.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
    /// Worker threads for running seeds in parallel.
    #[arg(long, value_parser = parse_positive)]
    jobs: Option<usize>,
    /// Projected feature width Q.
    #[arg(long, default_value_t = DEFAULT_Q, value_parser = parse_positive)]
    q: usize,
    /// Use this lambda instead of the grid search.
    #[arg(long)]
    lambda_fixed: Option<f64>,
    /// Split each class 80/20 during the lambda search.
    #[arg(long)]
    stratified_lambda: bool,
    /// L2-normalize embeddings before the feature map.
    #[arg(long)]
    normalize: bool,
    /// Keep the manifest's class assignment and task order.
    #[arg(long)]
    no_shuffle: bool,
    #[arg(long)]
    probe_lr: Option<f64>,
    #[arg(long)]
    probe_batch: Option<usize>,
    #[arg(long)]
    probe_epochs: Option<usize>,
    #[arg(long)]
    probe_patience: Option<usize>,
    /// Print the resolved header and exit without running.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// proposed, ncm, lp-online, lp-offline, jlp-online or jlp-offline.
    #[arg(long, value_parser = parse_method, default_value = "proposed")]
    method: Method,
    /// Fit the head on the raw embeddings.
    #[arg(long)]
    no_projection: bool,
    /// Identity instead of ReLU after the projection.
    #[arg(long)]
    no_relu: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    NoProjection,
    ProjectionNoRelu,
    QSweep,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Variants to run; repeat or comma-separate.
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    variant: Vec<VariantArg>,
    /// Q values for q-sweep.
    #[arg(long, value_delimiter = ',', value_parser = parse_positive)]
    qs: Vec<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    /// Per-stage AA_t and FR_t as CSV.
    #[arg(long)]
    stagewise: bool,
    /// Final-stage summary as CSV instead of a table.
    #[arg(long)]
    csv: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            what: GenCommand::Synth(a),
        } => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_gen(a: SynthArgs) -> Result<()> {
    let protocol = match a.kind {
        SynthKind::Gaussian => gen_cil_protocol(
            a.classes,
            a.dim,
            a.per_class,
            a.separation.unwrap_or(4.0),
            a.tasks.unwrap_or(2),
            a.seed,
        )?,
        SynthKind::Xor => {
            if a.classes != 2 {
                bail!("the XOR layout has exactly 2 classes (got --classes {})", a.classes);
            }
            gen_xor_protocol(
                a.dim,
                a.per_class,
                a.separation.unwrap_or(3.0),
                a.tasks.unwrap_or(3),
                a.seed,
            )?
        }
        SynthKind::Domain => gen_domain_shifted(
            a.classes,
            a.dim,
            a.tasks.unwrap_or(3),
            a.per_class,
            a.separation.unwrap_or(4.0),
            a.shift,
            a.seed,
        )?,
    };
    let path = protocol
        .write(&a.out)
        .with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!(
        "wrote {} tasks ({}) to {}",
        protocol.manifest.task_count(),
        protocol.manifest.protocol,
        path.display()
    );
    Ok(())
}

fn base_config(c: &CommonRunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig {
        q: c.q,
        normalize: c.normalize,
        shuffle_tasks: !c.no_shuffle,
        ..ExperimentConfig::default()
    };
    if let Some(l) = c.lambda_fixed {
        cfg.lambda = LambdaMode::Fixed(l);
    } else if let LambdaMode::Search(s) = &mut cfg.lambda {
        s.stratified = c.stratified_lambda;
    }
    if let Some(v) = c.probe_lr {
        cfg.probe.lr = v;
    }
    if let Some(v) = c.probe_batch {
        cfg.probe.batch_size = v;
    }
    if let Some(v) = c.probe_epochs {
        cfg.probe.max_epochs = v;
    }
    if let Some(v) = c.probe_patience {
        cfg.probe.patience = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(c: &CommonRunArgs) -> Result<(Experiment, Vec<u64>)> {
    let exp = Experiment::load(&c.manifest)
        .with_context(|| format!("loading manifest {}", c.manifest.display()))?;
    let seeds = c
        .seeds
        .clone()
        .map(|s| s.0)
        .unwrap_or_else(|| exp.manifest().run_seeds.clone());
    Ok((exp, seeds))
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn grid_text() -> String {
    LAMBDA_GRID
        .iter()
        .map(|l| format!("{l:e}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn print_header(exp: &Experiment, manifest: &Path, method: Method, cfg: &ExperimentConfig, seeds: &[u64]) {
    let m = exp.manifest();
    println!("# manifest {} ({})", manifest.display(), m.content_hash());
    println!(
        "# protocol {} tasks {} classes {} dim {}",
        m.protocol,
        m.task_count(),
        m.total_classes,
        m.embedding_dim
    );
    println!("# method {method} variant {}", cfg.variant_label(method));
    println!("# Q={}", cfg.q);
    match cfg.lambda {
        LambdaMode::Fixed(l) => println!("# lambda fixed {l:e}"),
        LambdaMode::Search(_) => println!("# lambda grid [{}]", grid_text()),
    }
    println!(
        "# seeds {}",
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    );
    println!(
        "# config {}",
        serde_json::to_string(cfg).expect("config serializes")
    );
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    cfg.use_projection = !a.no_projection;
    if a.no_relu {
        cfg.nonlinearity = Nonlinearity::Identity;
    }
    let (exp, seeds) = load(&a.common)?;
    print_header(&exp, &a.common.manifest, a.method, &cfg, &seeds);
    if a.common.dry_run {
        return Ok(());
    }
    let records = with_jobs(a.common.jobs, || run_protocol(&exp, a.method, &cfg, &seeds))??;
    for r in &records {
        let path = r.save(&a.common.out)?;
        println!("# wrote {}", path.display());
    }
    print!("{}", render_table(&report_runs(&records)?));
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = base_config(&a.common)?;
    let (exp, seeds) = load(&a.common)?;
    print_header(&exp, &a.common.manifest, Method::Proposed, &cfg, &seeds);
    if a.common.dry_run {
        return Ok(());
    }
    let mut report = AblationReport::default();
    for v in &a.variant {
        let variant = match v {
            VariantArg::Full => AblationVariant::Full,
            VariantArg::NoProjection => AblationVariant::NoProjection,
            VariantArg::ProjectionNoRelu => AblationVariant::ProjectionNoRelu,
            VariantArg::QSweep => {
                if a.qs.is_empty() {
                    bail!("q-sweep needs --qs");
                }
                AblationVariant::QSweep(a.qs.clone())
            }
        };
        report.extend(with_jobs(a.common.jobs, || {
            run_ablation(&exp, &cfg, &variant, &seeds)
        })??);
    }
    std::fs::create_dir_all(&a.common.out)?;
    for row in &report.rows {
        for r in &row.records {
            r.save(&a.common.out)?;
        }
    }
    std::fs::write(a.common.out.join("ablation_curves.csv"), report.render_curves_csv())?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let records = load_run_dir(&a.runs)?;
    let reports = report_runs(&records)?;
    if a.stagewise {
        print!("{}", render_stagewise_csv(&reports));
    } else if a.csv {
        print!("{}", render_csv(&reports));
    } else {
        print!("{}", render_table(&reports));
    }
    Ok(())
}
