//! Command-line entry point: dataset generation, training, evaluation,
//! ablations, capacity reports and result rendering.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 runtime failure.
//! Every subcommand writes the merged effective configuration into its
//! output directory, and reruns with unchanged inputs produce identical
//! outputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::capacity::measured_capacity;
use crate::datagen::{build_split, stock_split, Domain, LoadedDataset, StockSplit};
use crate::diagnostics::{ablation_suite, AblationSettings};
use crate::evalkit::{evaluate, rand_baseline};
use crate::model::load_checkpoint;
use crate::trainer::TrainConfig;
use crate::{Result, RiftError};

#[derive(Parser)]
#[command(
    name = "rift",
    version,
    about = "Unsupervised many-to-many image translation with restricted information flow"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a toy dataset split to a directory.
    Datagen(DatagenArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Run the metric suite on a checkpoint.
    Evaluate(EvaluateArgs),
    /// Train and compare {full, disable_norm, disable_guess}.
    Ablate(AblateArgs),
    /// Measure embedding power and the capacity bound of a checkpoint.
    CapacityReport(CapacityArgs),
    /// Render tables and plots from metric and evaluation files.
    Report(ReportArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// Stock split: A, B or C.
    #[arg(long)]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Images per domain.
    #[arg(long, default_value_t = 64)]
    domain_size: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    resolution: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON (schema: trainer::TrainConfig).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    disable_norm: bool,
    #[arg(long)]
    disable_guess: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory produced by datagen.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Guides sampled per source image per direction.
    #[arg(long, default_value_t = 2)]
    guides: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Trials per direction for the random baseline.
    #[arg(long, default_value_t = 10_000)]
    rand_trials: usize,
}

#[derive(Args)]
struct AblateArgs {
    /// Base training config JSON; the three variants are derived from it.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    guides: usize,
}

#[derive(Args)]
struct CapacityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Guide-noise standard deviation used in the bound.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// metrics.jsonl from a training run.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// evaluation.json from an evaluate run.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Seed precedence: explicit flag, then config value, then RIFT_SEED, then
/// zero.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = config {
        return Ok(s);
    }
    match std::env::var("RIFT_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| RiftError::Config(format!("RIFT_SEED is not an integer: `{v}`"))),
        Err(_) => Ok(0),
    }
}

fn write_effective_config<T: Serialize>(out: &Path, config: &T) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| RiftError::io(out, e))?;
    let path = out.join("effective_config.json");
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| RiftError::Invalid(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| RiftError::io(&path, e))
}

fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let json = std::fs::read_to_string(path).map_err(|e| RiftError::io(path, e))?;
    serde_json::from_str(&json)
        .map_err(|e| RiftError::Config(format!("{}: {e}", path.display())))
}

fn load_dataset_for(checkpoint_resolution: (usize, usize), data: &Path) -> Result<LoadedDataset> {
    let dataset = LoadedDataset::load(data)?;
    if dataset.manifest.split.resolution != checkpoint_resolution {
        return Err(RiftError::Config(format!(
            "dataset resolution {:?} does not match checkpoint resolution {:?}",
            dataset.manifest.split.resolution, checkpoint_resolution
        )));
    }
    Ok(dataset)
}

fn execute(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Datagen(args) => datagen_cmd(args),
        Cmd::Train(args) => train_cmd(args),
        Cmd::Evaluate(args) => evaluate_cmd(args),
        Cmd::Ablate(args) => ablate_cmd(args),
        Cmd::CapacityReport(args) => capacity_cmd(args),
        Cmd::Report(args) => report_cmd(args),
    }
}

fn datagen_cmd(args: DatagenArgs) -> Result<()> {
    let split: StockSplit = args
        .split
        .parse()
        .map_err(RiftError::Config)?;
    let seed = resolve_seed(args.seed, None)?;
    let cfg = stock_split(
        split,
        (args.domain_size, args.domain_size),
        (args.resolution, args.resolution),
        seed,
    );
    let manifest = build_split(&cfg)?;
    crate::datagen::write_dataset(&manifest, &args.out)?;
    write_effective_config(&args.out, &cfg)?;
    println!(
        "wrote {} images to {}",
        manifest.records.len(),
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = read_train_config(&args.config)?;
    if let Some(d) = args.data_dir {
        cfg.data_dir = d;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    cfg.seed = resolve_seed(args.seed, Some(cfg.seed))?;
    if args.disable_norm {
        cfg.disable_norm = true;
    }
    if args.disable_guess {
        cfg.disable_guess = true;
    }
    cfg.validate()?;
    write_effective_config(&args.out, &cfg)?;
    let outcome = crate::trainer::train(&cfg, &args.out, args.resume.as_deref())?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct EvaluationFile {
    table: crate::evalkit::AccuracyTable,
    report: crate::evalkit::AggregateReport,
    rand: crate::evalkit::AccuracyTable,
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let (bundle, meta) = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset_for(bundle.cfg.resolution, &args.data)?;
    let seed = resolve_seed(args.seed, Some(meta.seed))?;
    write_effective_config(
        &args.out,
        &serde_json::json!({
            "checkpoint": args.checkpoint,
            "data": args.data,
            "guides": args.guides,
            "seed": seed,
            "rand_trials": args.rand_trials,
        }),
    )?;
    let eval = evaluate(&bundle, &dataset, args.guides, seed)?;
    let rand = rand_baseline(&dataset.manifest, args.rand_trials, seed)?;
    let file = EvaluationFile {
        table: eval.table,
        report: eval.report,
        rand,
    };
    let json_path = args.out.join("evaluation.json");
    let json =
        serde_json::to_string_pretty(&file).map_err(|e| RiftError::Invalid(e.to_string()))?;
    std::fs::write(&json_path, json).map_err(|e| RiftError::io(&json_path, e))?;
    let table = crate::report::render_table(&[("model", &file.report)]);
    let table_path = args.out.join("table.tsv");
    std::fs::write(&table_path, &table).map_err(|e| RiftError::io(&table_path, e))?;
    print!("{table}");
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let mut cfg = read_train_config(&args.config)?;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    cfg.seed = resolve_seed(args.seed, Some(cfg.seed))?;
    cfg.validate()?;
    write_effective_config(&args.out, &cfg)?;
    let settings = AblationSettings {
        eval_guides: args.guides,
        eval_seed: cfg.seed,
        ..AblationSettings::default()
    };
    let report = ablation_suite(&cfg, &args.out, &settings)?;
    let dataset = LoadedDataset::load(&cfg.data_dir)?;
    crate::report::write_ablation_artifacts(&report, &dataset, &args.out)?;
    print!("{}", crate::report::render_ablation_table(&report));
    Ok(())
}

fn capacity_cmd(args: CapacityArgs) -> Result<()> {
    let (bundle, _) = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset_for(bundle.cfg.resolution, &args.data)?;
    let mut domains = serde_json::Map::new();
    for domain in [Domain::A, Domain::B] {
        let bound = measured_capacity(&bundle, domain, &dataset, args.sigma)?;
        domains.insert(
            domain.to_string(),
            serde_json::json!({
                "dim": bound.dim,
                "power": bound.power,
                "sigma": bound.sigma,
                "bound_bits": bound.bits,
            }),
        );
        println!(
            "domain {domain}: dim {} power {:.4} sigma {} bound {:.3} bits",
            bound.dim, bound.power, bound.sigma, bound.bits
        );
    }
    write_effective_config(
        &args.out,
        &serde_json::json!({
            "checkpoint": args.checkpoint,
            "data": args.data,
            "sigma": args.sigma,
        }),
    )?;
    let path = args.out.join("capacity.json");
    let json = serde_json::to_string_pretty(&serde_json::Value::Object(domains))
        .map_err(|e| RiftError::Invalid(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| RiftError::io(&path, e))
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    if args.metrics.is_none() && args.eval.is_none() {
        return Err(RiftError::Config(
            "report needs --metrics and/or --eval".into(),
        ));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| RiftError::io(&args.out, e))?;
    if let Some(metrics) = &args.metrics {
        crate::report::plot_losses(metrics, &args.out.join("losses.png"))?;
    }
    if let Some(eval_path) = &args.eval {
        let json = std::fs::read_to_string(eval_path).map_err(|e| RiftError::io(eval_path, e))?;
        let v: serde_json::Value = serde_json::from_str(&json)
            .map_err(|e| RiftError::Invalid(format!("{}: {e}", eval_path.display())))?;
        let report: crate::evalkit::AggregateReport = serde_json::from_value(v["report"].clone())
            .map_err(|e| {
                RiftError::Invalid(format!("{}: bad report section: {e}", eval_path.display()))
            })?;
        let table = crate::report::render_table(&[("model", &report)]);
        let path = args.out.join("table.tsv");
        std::fs::write(&path, &table).map_err(|e| RiftError::io(&path, e))?;
        print!("{table}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn run_args(args: &[&str]) -> Result<()> {
        let cli = Cli::try_parse_from(std::iter::once("rift").chain(args.iter().copied()))
            .expect("args should parse");
        execute(cli.cmd)
    }

    fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().display().to_string();
                    files.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn datagen_is_idempotent_and_deterministic() {
        let out1 = TempDir::new().unwrap();
        let out2 = TempDir::new().unwrap();
        for out in [&out1, &out2] {
            run_args(&[
                "datagen",
                "--split",
                "A",
                "--out",
                out.path().to_str().unwrap(),
                "--seed",
                "7",
                "--domain-size",
                "6",
                "--resolution",
                "16",
            ])
            .unwrap();
        }
        assert_eq!(dir_snapshot(out1.path()), dir_snapshot(out2.path()));
        // rerunning into the same directory leaves identical content
        let before = dir_snapshot(out1.path());
        run_args(&[
            "datagen",
            "--split",
            "A",
            "--out",
            out1.path().to_str().unwrap(),
            "--seed",
            "7",
            "--domain-size",
            "6",
            "--resolution",
            "16",
        ])
        .unwrap();
        assert_eq!(before, dir_snapshot(out1.path()));
    }

    #[test]
    fn evaluate_without_checkpoint_is_a_usage_error() {
        match Cli::try_parse_from(["rift", "evaluate", "--data", "d", "--out", "o"]) {
            Err(e) => assert!(e.use_stderr()),
            Ok(_) => panic!("missing --checkpoint should not parse"),
        }
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert!(Cli::try_parse_from(["rift", "frobnicate"]).is_err());
    }

    #[test]
    fn unknown_config_key_is_a_config_error() {
        let tmp = TempDir::new().unwrap();
        let cfg = tmp.path().join("train.json");
        std::fs::write(
            &cfg,
            r#"{"data_dir": "x", "steps": 1, "frobnication_level": 9}"#,
        )
        .unwrap();
        let err = run_args(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            tmp.path().join("out").to_str().unwrap(),
        ])
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("frobnication_level"), "{err}");
    }

    #[test]
    fn full_pipeline_smoke() {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("data");
        run_args(&[
            "datagen",
            "--split",
            "A",
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "3",
            "--domain-size",
            "8",
            "--resolution",
            "16",
        ])
        .unwrap();

        let cfg_path = tmp.path().join("train.json");
        std::fs::write(
            &cfg_path,
            serde_json::json!({
                "data_dir": data,
                "model": {"resolution": [16, 16], "base_channels": 2, "seed": 0},
                "steps": 2,
                "batch_size": 2,
                "seed": 5
            })
            .to_string(),
        )
        .unwrap();
        let train_out = tmp.path().join("run");
        run_args(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
        ])
        .unwrap();
        assert!(train_out.join("metrics.jsonl").exists());
        assert!(train_out.join("effective_config.json").exists());
        let ckpt = crate::trainer::checkpoint_dir(&train_out, 2);
        assert!(ckpt.join("params.bin").exists());

        let eval_out = tmp.path().join("eval");
        run_args(&[
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            eval_out.to_str().unwrap(),
            "--guides",
            "2",
            "--rand-trials",
            "200",
        ])
        .unwrap();
        assert!(eval_out.join("evaluation.json").exists());
        assert!(eval_out.join("table.tsv").exists());

        let report_out = tmp.path().join("report");
        run_args(&[
            "report",
            "--metrics",
            train_out.join("metrics.jsonl").to_str().unwrap(),
            "--eval",
            eval_out.join("evaluation.json").to_str().unwrap(),
            "--out",
            report_out.to_str().unwrap(),
        ])
        .unwrap();
        assert!(report_out.join("losses.png").exists());
        assert!(report_out.join("table.tsv").exists());

        let cap_out = tmp.path().join("capacity");
        run_args(&[
            "capacity-report",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            cap_out.to_str().unwrap(),
        ])
        .unwrap();
        assert!(cap_out.join("capacity.json").exists());
    }

    #[test]
    fn report_on_missing_metrics_names_the_file() {
        let tmp = TempDir::new().unwrap();
        let err = run_args(&[
            "report",
            "--metrics",
            tmp.path().join("nope.jsonl").to_str().unwrap(),
            "--out",
            tmp.path().join("out").to_str().unwrap(),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("nope.jsonl"), "{err}");
    }

    #[test]
    fn report_renders_published_row_from_eval_fixture() {
        let tmp = TempDir::new().unwrap();
        let eval_path = tmp.path().join("evaluation.json");
        let per_attribute = serde_json::json!({
            "fc": {"specific": 0.45, "common": 0.99},
            "wc": {"specific": 0.39, "common": 0.99},
            "oc": {"specific": 0.095, "common": 0.92},
            "sz": {"specific": 0.23, "common": 0.50},
            "sh": {"specific": 0.835, "common": 0.62},
            "ori": {"specific": 0.87, "common": 0.98},
        });
        let (ac, rd) = {
            let parsed: std::collections::BTreeMap<String, crate::evalkit::AttributeScores> =
                serde_json::from_value(per_attribute.clone()).unwrap();
            crate::evalkit::overall_scores(&parsed)
        };
        std::fs::write(
            &eval_path,
            serde_json::json!({
                "report": {"per_attribute": per_attribute, "ac": ac, "rd": rd}
            })
            .to_string(),
        )
        .unwrap();
        let out = tmp.path().join("out");
        run_args(&[
            "report",
            "--eval",
            eval_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        let table = std::fs::read_to_string(out.join("table.tsv")).unwrap();
        let row = table.lines().nth(1).unwrap();
        assert!(row.ends_with("\t66\t33"), "row: {row}");
    }

    #[test]
    fn seed_falls_back_to_environment() {
        // no flag, no config value: the env var decides
        std::env::set_var("RIFT_SEED", "41");
        let seed = resolve_seed(None, None).unwrap();
        std::env::remove_var("RIFT_SEED");
        assert_eq!(seed, 41);
        assert_eq!(resolve_seed(Some(2), None).unwrap(), 2);
        assert_eq!(resolve_seed(None, Some(3)).unwrap(), 3);
        assert_eq!(resolve_seed(None, None).unwrap(), 0);
    }
}
