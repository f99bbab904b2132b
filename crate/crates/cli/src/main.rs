use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use semimoe::checkpoint::{load_checkpoint, TrainState};
use semimoe::config::{Ablation, TrainConfig};
use semimoe::data::{make_batch, Dataset};
use semimoe::evaluation::{argmax_masks, evaluate, EvalResult, EVAL_CHUNK};
use semimoe::io::{read_mask_png, write_mask_png, write_npy_f32, write_rgb_png};
use semimoe::labels::{compute_sdf, extract_boundary, oracle, BinaryMask};
use semimoe::plot::{overlay, run_charts, save_chart};
use semimoe::report::{discover_runs, report_from_runs, run_matrix, CellScore};
use semimoe::run::{read_manifest, read_metrics, RunDir, RunManifest, LAST_CHECKPOINT, METRICS_FILE};
use semimoe::training::{train, MetricRecord, Observer, TrainData, TrainSummary};

/// Semi-supervised gland segmentation with task-specific experts and gated pseudo-labels.
#[derive(Parser)]
#[command(name = "semimoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic gland dataset.
    GenData(GenDataArgs),
    /// Derive SDF maps and boundary masks from binary mask PNGs.
    DeriveLabels(DeriveLabelsArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on the test split of a dataset.
    Eval(EvalArgs),
    /// Rebuild the cross-validation table and charts from run directories.
    Report(ReportArgs),
    /// Train every (variant, fold) cell and write the report.
    Matrix(MatrixArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Total number of images; a quarter of them form the test split.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DeriveLabelsArgs {
    /// Directory of binary mask PNGs.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Recompute every output with the exhaustive reference and compare.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: desk or paper-scale.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    labeled_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "full")]
    ablation: String,
    #[arg(long)]
    fold: Option<usize>,
    /// Continue an interrupted run from its last checkpoint.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write prediction overlays (green hit, red false positive, blue miss) here.
    #[arg(long)]
    overlays: Option<PathBuf>,
    /// Print the full result, per-image scores included, as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or directories to search for runs.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', default_value = "full,seg_sdf,seg_bnd")]
    ablations: Vec<String>,
    #[arg(long)]
    quiet: bool,
}

/// An error caused by the command line itself rather than by its inputs.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::DeriveLabels(a) => derive_labels(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Matrix(a) => cmd_matrix(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn is_empty_dir(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(true);
    }
    Ok(fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_none())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.n < 2 {
        return Err(usage("--n must be at least 2 (one train and one test image)"));
    }
    if a.size < 32 {
        return Err(usage("--size must be at least 32"));
    }
    if !a.force && !is_empty_dir(&a.out)? {
        bail!("{} is not empty; pass --force to write into it", a.out.display());
    }
    let n_test = (a.n / 4).max(1);
    let ds = Dataset::synthetic(a.n - n_test, n_test, a.size, a.seed)?;
    ds.save(&a.out)?;
    println!("wrote {} train and {} test images to {}", ds.train.len(), ds.test.len(), a.out.display());
    Ok(())
}

fn derive_labels(a: DeriveLabelsArgs) -> Result<()> {
    let mut masks: Vec<PathBuf> = fs::read_dir(&a.masks)
        .with_context(|| format!("reading {}", a.masks.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    masks.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    masks.sort();
    if masks.is_empty() {
        bail!("no PNG masks in {}", a.masks.display());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for path in &masks {
        let mask = read_mask_png(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).context("mask file name is not UTF-8")?;
        let sdf = compute_sdf(&mask);
        let bnd = extract_boundary(&mask);
        if a.check {
            check_against_reference(&mask, sdf.data(), bnd.mask()).with_context(|| format!("{}", path.display()))?;
        }
        write_npy_f32(&a.out.join(format!("{stem}.sdf.npy")), &[mask.height(), mask.width()], sdf.data())?;
        write_mask_png(&a.out.join(format!("{stem}_bnd.png")), bnd.mask())?;
    }
    let checked = if a.check { ", all matching the reference" } else { "" };
    println!("derived labels for {} masks{checked}", masks.len());
    Ok(())
}

fn check_against_reference(mask: &BinaryMask, sdf: &[f64], bnd: &BinaryMask) -> Result<()> {
    if oracle::boundary(mask) != bnd.data() {
        bail!("boundary differs from the reference");
    }
    let worst = oracle::sdf(mask).iter().zip(sdf).map(|(r, s)| (r - s).abs()).fold(0.0, f64::max);
    if worst > 1e-6 {
        bail!("SDF differs from the reference by {worst:e}");
    }
    Ok(())
}

fn resolve_config(a: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(name)) => TrainConfig::preset(name).map_err(|e| usage(e.to_string()))?,
        (None, None) => TrainConfig::preset("desk")?,
    };
    let pairs = a
        .set
        .iter()
        .map(|kv| kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}"))))
        .collect::<Result<Vec<_>>>()?;
    cfg = cfg.with_overrides(pairs).map_err(|e| usage(e.to_string()))?;
    if let Some(r) = a.labeled_ratio {
        cfg.labeled_ratio = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn parse_ablation(name: &str) -> Result<Ablation> {
    name.parse::<Ablation>().map_err(|e| usage(e.to_string()))
}

/// Forwards to the run directory and prints one line per evaluation.
struct Progress {
    run: RunDir,
    quiet: bool,
    started: Instant,
}

impl Observer for Progress {
    fn record(&mut self, record: &MetricRecord) -> semimoe::error::Result<()> {
        if let (MetricRecord::Eval(e), false) = (record, self.quiet) {
            let gate = e.gate_dice.map(|g| format!(" gate {:.4}", g)).unwrap_or_default();
            let mark = if e.best { " *" } else { "" };
            eprintln!(
                "epoch {:>3}  dice {:.4}{gate}  [{:.0}s]{mark}",
                e.epoch + 1,
                e.dice,
                self.started.elapsed().as_secs_f64()
            );
        }
        self.run.record(record)
    }

    fn new_best(&mut self, state: &TrainState, eval: &EvalResult) -> semimoe::error::Result<()> {
        self.run.new_best(state, eval)
    }

    fn epoch_end(&mut self, state: &TrainState) -> semimoe::error::Result<()> {
        self.run.epoch_end(state)
    }
}

/// Drops records of epochs the checkpoint does not cover, so the resumed
/// stream matches an uninterrupted one.
fn trim_metrics(dir: &Path, epochs_done: usize) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    let kept: Vec<MetricRecord> = read_metrics(&path)?.into_iter().filter(|r| r.position().0 < epochs_done).collect();
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn train_into(
    cfg: TrainConfig,
    variant: &str,
    data_dir: &Path,
    ds: &Dataset,
    out: &Path,
    quiet: bool,
) -> Result<(TrainSummary, PathBuf)> {
    let data = TrainData::from_dataset(ds, &cfg)?;
    if !quiet {
        eprintln!(
            "{variant} fold {}: {} labeled, {} unlabeled, {} test -> {}",
            cfg.fold,
            data.labeled.len(),
            data.unlabeled.len(),
            data.test.len(),
            out.display()
        );
    }
    let manifest = RunManifest::new(variant, &cfg, data_dir, out);
    let mut state = TrainState::new(cfg)?;
    let mut obs = Progress {
        run: RunDir::create(out, manifest)?,
        quiet,
        started: Instant::now(),
    };
    let summary = train(&mut state, &data, &mut obs)?;
    obs.run.finish(&summary)?;
    Ok((summary, out.to_path_buf()))
}

fn print_summary(summary: &TrainSummary) {
    if let (Some(best), Some(eval)) = (summary.best, &summary.best_eval) {
        let gate = eval.gate_dice.map(|g| format!(", gate dice {g:.4}")).unwrap_or_default();
        println!(
            "best epoch {}: dice {:.4}, jaccard {:.4}{gate}",
            best.epoch, eval.dice, eval.jaccard
        );
    } else if let Some(best) = summary.best {
        println!("best epoch {}: dice {:.4}", best.epoch, best.dice);
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ablation = parse_ablation(&a.ablation)?;
    let ds = Dataset::load(&a.data)?;
    if a.resume {
        let state = load_checkpoint(&a.out.join(LAST_CHECKPOINT))?;
        let manifest = read_manifest(&a.out)?;
        trim_metrics(&a.out, state.epoch)?;
        let data = TrainData::from_dataset(&ds, &state.config)?;
        let mut state = state;
        let mut obs = Progress {
            run: RunDir::reopen(&a.out)?,
            quiet: a.quiet,
            started: Instant::now(),
        };
        if !a.quiet {
            eprintln!("{} resuming at epoch {}", manifest.variant, state.epoch + 1);
        }
        let summary = train(&mut state, &data, &mut obs)?;
        obs.run.finish(&summary)?;
        print_summary(&summary);
        return Ok(());
    }
    let mut cfg = ablation.apply(&resolve_config(&a.config)?);
    if let Some(f) = a.fold {
        cfg.fold = f;
        cfg.validate().map_err(|e| usage(e.to_string()))?;
    }
    if !a.force && !is_empty_dir(&a.out)? {
        bail!("{} is not empty; pass --force to overwrite or --resume to continue", a.out.display());
    }
    let (summary, _) = train_into(cfg, ablation.name(), &a.data, &ds, &a.out, a.quiet)?;
    print_summary(&summary);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    let result = evaluate(&state.model, &ds.test)?;
    if let Some(dir) = &a.overlays {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let batch = make_batch(&ds.test)?;
        let pred = state.model.predict(&batch.images, EVAL_CHUNK)?;
        for (sample, mask) in ds.test.iter().zip(argmax_masks(&pred.expert_seg)) {
            let rgb = overlay(sample, &mask)?;
            write_rgb_png(&dir.join(format!("{}.png", sample.id)), sample.height(), sample.width(), &rgb)?;
        }
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        println!("dice {:.6}  jaccard {:.6}", result.dice, result.jaccard);
        if let (Some(d), Some(j)) = (result.gate_dice, result.gate_jaccard) {
            println!("gate dice {d:.6}  gate jaccard {j:.6}");
        }
    }
    Ok(())
}

fn write_report_files(out: &Path, report: &semimoe::report::EvalReport, runs: &[PathBuf]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("report.txt"), report.to_table())?;
    fs::write(out.join("report.json"), report.to_json())?;
    for dir in runs {
        let manifest = read_manifest(dir)?;
        let records = read_metrics(&dir.join(METRICS_FILE))?;
        let plot_dir = out.join("plots").join(format!("{}_fold{}_seed{}", manifest.variant, manifest.config.fold, manifest.seed));
        for (stem, series) in run_charts(&records) {
            save_chart(&plot_dir, stem, &series)?;
        }
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    for root in &a.runs {
        let found = discover_runs(root)?;
        if found.is_empty() {
            bail!("no run directories under {}", root.display());
        }
        runs.extend(found);
    }
    let report = report_from_runs(&runs)?;
    write_report_files(&a.out, &report, &runs)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_matrix(a: MatrixArgs) -> Result<()> {
    let ablations = a.ablations.iter().map(|s| parse_ablation(s)).collect::<Result<Vec<_>>>()?;
    let base = resolve_config(&a.config)?;
    let ds = Dataset::load(&a.data)?;
    let mut runs = Vec::new();
    let report = run_matrix(&base, &ablations, &mut |cfg, ab| {
        let index = ablations.iter().position(|&x| x == ab).unwrap_or(0);
        let dir = a.out.join("runs").join(format!("{index:02}_{}_fold{}", ab.name(), cfg.fold));
        match train_into(cfg.clone(), ab.name(), &a.data, &ds, &dir, a.quiet) {
            Ok((summary, dir)) => {
                runs.push(dir.clone());
                let eval = summary
                    .best_eval
                    .ok_or_else(|| semimoe::error::Error::Run("no evaluation recorded".into()))?;
                Ok((
                    CellScore {
                        dice: eval.dice,
                        jaccard: eval.jaccard,
                        gate_dice: eval.gate_dice,
                        gate_jaccard: eval.gate_jaccard,
                    },
                    Some(dir),
                ))
            }
            Err(e) => Err(semimoe::error::Error::Run(format!("{e:#}"))),
        }
    });
    write_report_files(&a.out, &report, &runs)?;
    print!("{}", report.to_table());
    Ok(())
}
