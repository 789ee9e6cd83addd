use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use qunetpp::checkpoint;
use qunetpp::config::{Mode, RunConfig};
use qunetpp::data::{write_manifest, SliceId, SliceRecord, Split, StackDataset};
use qunetpp::evaluation::{evaluate, predict_mask, random_baseline, render_overlay, write_metrics_csv};
use qunetpp::model::SegModel;
use qunetpp::pipeline::{self, create_run_dir, load_dataset, render_report, run_pipeline};
use qunetpp::plot::{enlarge, quality_scatter};
use qunetpp::pngio::write_rgb;
use qunetpp::quality::{initial_selection, scan, write_quality_csv, InitialSelection};
use qunetpp::selection::{select_minimal, SelectionReport};
use qunetpp::training::train;

const INITIAL_FILE: &str = "initial_selection.json";
const BASELINE_FILE: &str = "baseline_runs.csv";

/// Quality-driven minimal training-set detection with a deep-supervised
/// U-net++.
///
/// Every command that produces results writes them to a new timestamped
/// directory under the output root, together with the resolved config.
#[derive(Parser, Debug)]
#[command(name = "qunetpp", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; fixes all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Jaccard threshold below which a slice joins S_m.
    #[arg(long, global = true)]
    q0: Option<f64>,
    /// oracle or flag.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Training epochs on S₀.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Fine-tuning epochs on S₀ ∪ S_m.
    #[arg(long, global = true)]
    finetune_epochs: Option<usize>,
    /// Root for run directories (overrides `output_dir`).
    #[arg(long, global = true, env = "QUNETPP_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "QUNETPP_THREADS")]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Manifest CSV of a real dataset; synthetic stacks when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes synthetic stacks as PNGs plus a manifest.
    GenerateSynthetic,
    /// Scores every pool slice and writes quality.csv.
    QualityScan {
        #[arg(long)]
        manifest: PathBuf,
        /// Also draw the quality scatter.
        #[arg(long)]
        plot: bool,
    },
    /// Quadrant selection plus deduplication; writes S₀.
    SelectInitial {
        #[command(flatten)]
        data: DataArg,
    },
    /// Trains a fresh model on S₀.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Run directory holding initial_selection.json; recomputed when omitted.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Scores the pool outside S₀ and writes selection_report.json.
    SelectMinimal {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Continues training a checkpoint on S₀ ∪ S_m.
    Finetune {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// selection_report.json from select-minimal.
        #[arg(long)]
        selection: PathBuf,
    },
    /// Scores a checkpoint on the test split; writes metrics.csv.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test-slice overlay PNGs to write.
        #[arg(long, default_value_t = 0)]
        overlays: usize,
    },
    /// Random-subset baseline; writes baseline_runs.csv.
    BaselineRandom {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Runs every stage and persists all artifacts.
    RunPipeline {
        #[command(flatten)]
        data: DataArg,
    },
    /// Draws the quality scatter, loss curves and overlays of a finished run.
    Report {
        /// Run directory produced by run-pipeline.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 4)]
        overlays: usize,
        /// Figure directory; a fresh one under the output root by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn label(&self) -> &'static str {
        match self {
            Command::GenerateSynthetic => "synthetic",
            Command::QualityScan { .. } => "quality-scan",
            Command::SelectInitial { .. } => "select-initial",
            Command::Train { .. } => "train",
            Command::SelectMinimal { .. } => "select-minimal",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::BaselineRandom { .. } => "baseline",
            Command::RunPipeline { .. } => "run",
            Command::Report { .. } => "report",
        }
    }

    fn manifest(&self) -> Option<&Path> {
        match self {
            Command::QualityScan { manifest, .. } => Some(manifest),
            Command::SelectInitial { data }
            | Command::Train { data, .. }
            | Command::SelectMinimal { data, .. }
            | Command::Finetune { data, .. }
            | Command::Evaluate { data, .. }
            | Command::BaselineRandom { data, .. }
            | Command::RunPipeline { data } => data.manifest.as_deref(),
            Command::GenerateSynthetic | Command::Report { .. } => None,
        }
    }
}

fn build_config(common: &Common, manifest: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(q0) = common.q0 {
        cfg.q0 = q0;
    }
    if let Some(mode) = common.mode {
        cfg.mode = mode;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    if let Some(e) = common.finetune_epochs {
        cfg.finetune.epochs = e;
    }
    if let Some(root) = &common.output_root {
        cfg.output_dir = root.clone();
    }
    if let Some(m) = manifest {
        // absolute, so config.resolved works from any directory
        let m = std::fs::canonicalize(m).with_context(|| format!("manifest {}", m.display()))?;
        cfg.data.manifest = Some(m);
    }
    Ok(cfg.resolve()?)
}

/// A new run directory with the resolved config echoed into it.
fn open_run(cfg: &RunConfig, label: &str) -> anyhow::Result<PathBuf> {
    let dir = create_run_dir(&cfg.output_dir, label)?;
    let path = dir.join(pipeline::CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
    Ok(dir)
}

fn normalized(cfg: &RunConfig) -> anyhow::Result<StackDataset> {
    Ok(load_dataset(&cfg.data)?.normalized(cfg.data.image_size)?)
}

fn records<'a>(data: &'a StackDataset, ids: &[SliceId]) -> anyhow::Result<Vec<&'a SliceRecord>> {
    ids.iter()
        .map(|id| {
            data.get(id)
                .with_context(|| format!("slice {id} is not in the dataset"))
        })
        .collect()
}

/// S₀ from an earlier run directory, or computed from the dataset.
fn initial_for(cfg: &RunConfig, from: Option<&Path>) -> anyhow::Result<InitialSelection> {
    match from {
        Some(dir) => {
            let path = dir.join(INITIAL_FILE);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        None => {
            let raw = load_dataset(&cfg.data)?;
            let scored = scan(raw.split(Split::Pool), cfg.quality.median_kernel)?;
            Ok(initial_selection(&scored, &cfg.quality))
        }
    }
}

fn load_model(path: &Path, cfg: &RunConfig) -> anyhow::Result<(SegModel, checkpoint::CheckpointMeta)> {
    let (model, meta) = checkpoint::load(path)?;
    if model.config.input_size != cfg.data.image_size {
        bail!(
            "{} expects {} px input but the run uses {}",
            path.display(),
            model.config.input_size,
            cfg.data.image_size
        );
    }
    Ok((model, meta))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = build_config(&cli.common, cli.command.manifest())?;
    let label = cli.command.label();

    match &cli.command {
        Command::GenerateSynthetic => {
            let dir = open_run(&cfg, label)?;
            let ds = qunetpp::data::generate_synthetic_stack(&cfg.data.synthetic)?;
            let manifest = write_manifest(&ds, &dir.join("dataset"))?;
            std::fs::write(
                dir.join("dataset").join("spec.json"),
                serde_json::to_string_pretty(&cfg.data.synthetic)?,
            )?;
            println!("{}", manifest.display());
        }
        Command::QualityScan { plot, .. } => {
            let dir = open_run(&cfg, label)?;
            let raw = load_dataset(&cfg.data)?;
            let scored = scan(raw.split(Split::Pool), cfg.quality.median_kernel)?;
            let initial = initial_selection(&scored, &cfg.quality);
            write_quality_csv(&dir.join(pipeline::QUALITY_FILE), &scored, &initial.s0_indices)?;
            if *plot {
                let s0: std::collections::HashSet<&SliceId> = initial.s0_indices.iter().collect();
                let rows: Vec<_> = scored.iter().map(|s| (s.clone(), s0.contains(&s.id))).collect();
                write_rgb(&dir.join(pipeline::SCATTER_FILE), &quality_scatter(&rows)?)?;
            }
            println!("{}", dir.display());
        }
        Command::SelectInitial { .. } => {
            let dir = open_run(&cfg, label)?;
            let raw = load_dataset(&cfg.data)?;
            let scored = scan(raw.split(Split::Pool), cfg.quality.median_kernel)?;
            let initial = initial_selection(&scored, &cfg.quality);
            write_quality_csv(&dir.join(pipeline::QUALITY_FILE), &scored, &initial.s0_indices)?;
            std::fs::write(dir.join(INITIAL_FILE), serde_json::to_string_pretty(&initial)?)?;
            log::info!("S0: {} of {} pool slices", initial.s0_indices.len(), scored.len());
            println!("{}", dir.display());
        }
        Command::Train { from, .. } => {
            let initial = initial_for(&cfg, from.as_deref())?;
            let data = normalized(&cfg)?;
            let s0 = records(&data, &initial.s0_indices)?;
            let dir = open_run(&cfg, label)?;
            std::fs::write(dir.join(INITIAL_FILE), serde_json::to_string_pretty(&initial)?)?;
            let mut model = SegModel::build(cfg.model.clone(), cfg.model_seed())?;
            let history = train(&mut model, &s0, &cfg.train)?;
            checkpoint::save(
                &dir.join(pipeline::PRE_CHECKPOINT),
                &model,
                history.epochs.len(),
                &history,
            )?;
            history.write_csv(&dir.join(pipeline::LOSS_FILE))?;
            println!("{}", dir.display());
        }
        Command::SelectMinimal {
            checkpoint: ckpt, from, ..
        } => {
            let (model, _) = load_model(ckpt, &cfg)?;
            let initial = initial_for(&cfg, from.as_deref())?;
            let data = normalized(&cfg)?;
            let s0: std::collections::HashSet<&SliceId> = initial.s0_indices.iter().collect();
            let rest: Vec<&SliceRecord> = data.split(Split::Pool).filter(|r| !s0.contains(&r.id())).collect();
            let verdicts = select_minimal(&model, &rest, cfg.q0)?;
            let report = SelectionReport::new(cfg.q0, initial.s0_indices.clone(), verdicts, rest.len() + s0.len())?;
            let dir = open_run(&cfg, label)?;
            report.write_json(&dir.join(pipeline::SELECTION_FILE))?;
            log::info!(
                "S_m: {} slices, fraction {:.3}",
                report.s_m.len(),
                report.fraction_selected
            );
            println!("{}", dir.display());
        }
        Command::Finetune {
            checkpoint: ckpt,
            selection,
            ..
        } => {
            let (mut model, meta) = load_model(ckpt, &cfg)?;
            let report = SelectionReport::read_json(selection)?;
            let data = normalized(&cfg)?;
            let ids: Vec<SliceId> = report.s0.iter().chain(&report.s_m).cloned().collect();
            let chosen = records(&data, &ids)?;
            let history = train(&mut model, &chosen, &cfg.finetune_config())?;
            let mut full = meta.loss_history;
            full.extend(&history);
            let dir = open_run(&cfg, label)?;
            checkpoint::save(&dir.join(pipeline::POST_CHECKPOINT), &model, full.epochs.len(), &full)?;
            history.write_csv(&dir.join(pipeline::FINETUNE_LOSS_FILE))?;
            println!("{}", dir.display());
        }
        Command::Evaluate {
            checkpoint: ckpt,
            overlays,
            ..
        } => {
            let (model, _) = load_model(ckpt, &cfg)?;
            let data = normalized(&cfg)?;
            let test: Vec<&SliceRecord> = data.split(Split::Test).collect();
            if test.is_empty() {
                bail!("the dataset has no test split");
            }
            let rows = evaluate(&model, &test)?;
            let dir = open_run(&cfg, label)?;
            write_metrics_csv(&dir.join(pipeline::METRICS_FILE), &rows)?;
            for r in test.iter().filter(|r| r.annotation.is_some()).take(*overlays) {
                let pred = predict_mask(&model, &r.image)?;
                let rgb = render_overlay(&pred, r.annotation.as_ref().expect("annotated"), &r.image)?;
                let path = dir.join(format!("overlay_{}_{}.png", r.stack_id, r.slice_index));
                write_rgb(&path, &enlarge(&rgb, 4))?;
            }
            let mean = qunetpp::evaluation::Metrics::mean(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>());
            log::info!("test dice {:.4}, jaccard {:.4}", mean.dice, mean.jaccard);
            println!("{}", dir.display());
        }
        Command::BaselineRandom { fraction, runs, .. } => {
            let data = normalized(&cfg)?;
            let annotated: Vec<&SliceRecord> = data.records.iter().filter(|r| r.annotation.is_some()).collect();
            let report = random_baseline(
                &annotated,
                fraction.unwrap_or(cfg.baseline.fraction),
                runs.unwrap_or(cfg.baseline.runs),
                &cfg.model,
                &cfg.train,
                cfg.seed,
            )?;
            let dir = open_run(&cfg, label)?;
            report.write_csv(&dir.join(BASELINE_FILE))?;
            log::info!(
                "baseline mean dice {:.4} (std {:.4})",
                report.mean.dice,
                report.std.dice
            );
            println!("{}", dir.display());
        }
        Command::RunPipeline { .. } => {
            let dataset = load_dataset(&cfg.data)?;
            let dir = create_run_dir(&cfg.output_dir, label)?;
            let outcome = run_pipeline(&dataset, &cfg, Some(&dir))?;
            log::info!(
                "S0 {} + S_m {} of the pool, fraction {:.3}",
                outcome.report.s0.len(),
                outcome.report.s_m.len(),
                outcome.report.fraction_selected
            );
            if let Some(m) = outcome.mean_test_metrics() {
                log::info!("test dice {:.4}, jaccard {:.4}", m.dice, m.jaccard);
            }
            println!("{}", dir.display());
        }
        Command::Report { run, overlays, out } => {
            let out = match out {
                Some(dir) => {
                    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
                        bail!("{} exists and is not empty", dir.display());
                    }
                    std::fs::create_dir_all(dir)?;
                    dir.clone()
                }
                None => create_run_dir(&cfg.output_dir, label)?,
            };
            for path in render_report(run, &out, *overlays)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // usage errors exit 2, --help and --version exit 0
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
