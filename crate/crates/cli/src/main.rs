use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use heba_core::adapters::Variant;
use heba_core::data::{generate_dataset, DataConfig, Dataset};
use heba_core::gradcheck::{run_suite, CaseReport};
use heba_core::harness::{
    audit_hm, evaluate, load_checkpoint, parse_table_csv, run_ablation_grid, run_single,
    sweep_alpha, threads_from_env, Report, RunConfig, SplitKind, BUNDLED_TABLES, HM_TOLERANCE,
};
use heba_core::serialize::read_json;
use heba_core::HebaError;

const EXIT_CODES: &str = "Exit codes:
  0  success
  2  usage error
  3  I/O or file format error
  4  invariant violation (hash mismatch, failed check, bad config)
  5  numerical failure (non-finite loss)";

#[derive(Parser, Debug)]
#[command(name = "heba", version, about = "Heterogeneous bottleneck adapters on a frozen toy dual-encoder", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic texture corpus.
    GenData(GenDataArgs),
    /// Train one adapter run and write its checkpoint, curve and results.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run every variant over a list of seeds.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint at several inference scales.
    SweepAlpha(SweepArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Recompute harmonic means in a results table.
    AuditHm(AuditArgs),
    /// Print the summary of a results directory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// JSON data config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides shared by `train` and `ablate`.
#[derive(Args, Debug)]
struct RunOverrides {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha_base: Option<f64>,
    #[arg(long)]
    alpha_novel: Option<f64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    negative_ratio: Option<usize>,
    #[arg(long)]
    backbone_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// One of full, zero_init, no_spatial_1d, no_dwconv.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// base or novel.
    #[arg(long, value_parser = parse_split)]
    split: SplitKind,
    /// Inference scale; defaults to the split's configured scale.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Concurrent runs; defaults to HEBA_THREADS or 1.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated scales; defaults to the config's sweep.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// CSV with header table,dataset,method,base,novel,hm; defaults to the bundled tables.
    #[arg(long)]
    tables: Option<PathBuf>,
    #[arg(long, default_value_t = HM_TOLERANCE)]
    tol: f64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding results.json.
    #[arg(long = "in")]
    input: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("unknown variant {s:?}"))
}

fn parse_split(s: &str) -> Result<SplitKind, String> {
    SplitKind::parse(s).ok_or_else(|| format!("unknown split {s:?}, expected base or novel"))
}

type CliResult = Result<(), HebaError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepAlpha(a) => sweep(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::AuditHm(a) => audit(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let mut cfg: DataConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DataConfig::default(),
    };
    if let Some(v) = a.classes {
        cfg.num_classes = v;
    }
    if let Some(v) = a.per_class {
        cfg.images_per_class = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.noise_sigma {
        cfg.noise_sigma = v;
    }
    let ds = generate_dataset(&cfg)?;
    ds.save(&a.out)?;
    println!(
        "{} images in {} classes, hash {}",
        ds.manifest.num_images,
        ds.num_classes(),
        ds.manifest.content_hash
    );
    Ok(())
}

fn run_config(o: &RunOverrides) -> Result<RunConfig, HebaError> {
    let mut cfg: RunConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &o.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = o.epochs {
        cfg.optim.epochs = v;
    }
    if let Some(v) = o.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.optim.batch_size = v;
    }
    if let Some(v) = o.alpha_base {
        cfg.adapter.alpha_base = v;
    }
    if let Some(v) = o.alpha_novel {
        cfg.adapter.alpha_novel = v;
    }
    if let Some(v) = o.shots {
        cfg.split.shots = v;
    }
    if let Some(v) = o.negative_ratio {
        cfg.loss.negative_ratio = v;
    }
    if let Some(v) = o.backbone_seed {
        cfg.backbone_seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, HebaError> {
    Dataset::load(&cfg.dataset)
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = run_config(&a.run)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    cfg.seeds = vec![a.seed];
    let ds = load_dataset(&cfg)?;
    let (res, run) = run_single(&cfg, a.seed, &ds, &a.out)?;
    let report = Report::new(&cfg, vec![res]);
    report.check_hm()?;
    report.write(&a.out)?;
    println!(
        "{}: base {:.2} novel {:.2} hm {:.2}",
        run.run_id(),
        report.runs[0].base_acc,
        report.runs[0].novel_acc,
        report.runs[0].hm
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let ck = load_checkpoint(&a.ckpt)?;
    let ds = ck.dataset()?;
    let acc = evaluate(&ck.model, ck.config(), &ds, a.split, a.alpha)?;
    let alpha = a.alpha.unwrap_or_else(|| ck.config().alpha_for(a.split));
    println!("{} alpha {alpha} accuracy {acc:.2}", a.split.as_str());
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult {
    let mut cfg = run_config(&a.run)?;
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    cfg.validate()?;
    let ds = load_dataset(&cfg)?;
    let threads = a.threads.unwrap_or_else(threads_from_env).max(1);
    let report = run_ablation_grid(&cfg, &ds, &a.out, threads)?;
    report.check_hm()?;
    print!("{}", report.summary());
    Ok(())
}

fn sweep(a: SweepArgs) -> CliResult {
    let ck = load_checkpoint(&a.ckpt)?;
    let ds = ck.dataset()?;
    let alphas = a
        .alphas
        .unwrap_or_else(|| ck.config().alpha_eval_sweep.clone());
    println!("alpha,base,novel,hm");
    for r in sweep_alpha(&ck.model, ck.config(), &ds, &alphas)? {
        println!(
            "{},{:.2},{:.2},{:.2}",
            r.alpha, r.base_acc, r.novel_acc, r.hm
        );
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let reports: Vec<CaseReport> = run_suite(a.trials, a.seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_rel_err < a.tol;
        println!(
            "{:<24} trials {} max rel err {:.3e} {}",
            r.op,
            r.trials,
            r.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(HebaError::Invariant(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn audit(a: AuditArgs) -> CliResult {
    let (text, origin) = match &a.tables {
        Some(p) => (
            std::fs::read_to_string(p).map_err(|e| HebaError::Io {
                path: p.clone(),
                source: e,
            })?,
            p.clone(),
        ),
        None => (BUNDLED_TABLES.to_string(), PathBuf::from("<bundled>")),
    };
    let rows = audit_hm(&parse_table_csv(&text, &origin)?, a.tol)?;
    let bad: Vec<_> = rows.iter().filter(|r| !r.ok).collect();
    for r in &bad {
        let c = &r.cell;
        println!(
            "{} {} {}: base {} novel {} reported {} recomputed {:.2} (diff {:+.2})",
            c.table, c.dataset, c.method, c.base, c.novel, c.hm, r.recomputed, r.diff
        );
    }
    println!("{} of {} rows outside ±{}", bad.len(), rows.len(), a.tol);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(HebaError::Invariant(format!(
            "{} harmonic means disagree with their accuracies",
            bad.len()
        )))
    }
}

fn report(a: ReportArgs) -> CliResult {
    let r = Report::read(Path::new(&a.input))?;
    r.check_hm()?;
    print!("{}", r.summary());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn every_registered_flag_is_in_help() {
        let mut root = Cli::command();
        root.build();
        for sub in root.get_subcommands() {
            let help = sub.clone().render_long_help().to_string();
            for arg in sub.get_arguments() {
                if let Some(long) = arg.get_long() {
                    assert!(
                        help.contains(&format!("--{long}")),
                        "{} --help lacks --{long}",
                        sub.get_name()
                    );
                }
            }
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
