//! End-to-end run: quality scan → S₀ → train → minimal-set pass →
//! fine-tune and evaluate (oracle mode) or stop with the flagged list
//! (flag mode).

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{DataConfig, Mode, RunConfig};
use crate::data::{generate_synthetic_stack, load_manifest, SliceId, SliceRecord, Split, StackDataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, predict_mask, render_overlay, sample_subset, train_and_evaluate, write_metrics_csv, Metrics, SliceMetrics,
};
use crate::model::SegModel;
use crate::plot::{enlarge, loss_curves, quality_scatter};
use crate::pngio::write_rgb;
use crate::quality::{initial_selection, read_quality_csv, scan, write_quality_csv, InitialSelection, ScoredSlice};
use crate::rng::{derive_seed, tag};
use crate::selection::{select_minimal, QualityVerdict, SelectionReport};
use crate::training::{train, LossHistory, TrainConfig};

pub const CONFIG_FILE: &str = "config.resolved";
pub const QUALITY_FILE: &str = "quality.csv";
pub const SELECTION_FILE: &str = "selection_report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_FILE: &str = "loss_history.csv";
pub const FINETUNE_LOSS_FILE: &str = "finetune_loss_history.csv";
pub const PRE_CHECKPOINT: &str = "checkpoint_pre.ckpt";
pub const POST_CHECKPOINT: &str = "checkpoint_post.ckpt";

/// Loads the manifest, or generates the synthetic stacks, without
/// normalizing.
pub fn load_dataset(data: &DataConfig) -> Result<StackDataset> {
    match &data.manifest {
        Some(path) => load_manifest(path),
        None => generate_synthetic_stack(&data.synthetic),
    }
}

/// Creates a fresh `root/<label>-<timestamp>` directory, adding a numeric
/// suffix rather than reusing an existing one.
pub fn create_run_dir(root: &Path, label: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for n in 0.. {
        let name = if n == 0 {
            format!("{label}-{stamp}")
        } else {
            format!("{label}-{stamp}-{n}")
        };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub report: SelectionReport,
    pub initial: InitialSelection,
    pub scored: Vec<ScoredSlice>,
    pub model: SegModel,
    pub train_history: LossHistory,
    pub finetune_history: LossHistory,
    /// Per-slice test metrics; oracle mode only.
    pub test_metrics: Option<Vec<SliceMetrics>>,
}

impl PipelineOutcome {
    pub fn mean_test_metrics(&self) -> Option<Metrics> {
        self.test_metrics
            .as_ref()
            .map(|rows| Metrics::mean(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>()))
    }

    /// `|S₀ ∪ S_m|`.
    pub fn budget(&self) -> usize {
        self.report.s0.len() + self.report.s_m.len()
    }
}

fn records_for<'a>(data: &'a StackDataset, ids: &[SliceId]) -> Result<Vec<&'a SliceRecord>> {
    ids.iter()
        .map(|id| {
            data.get(id)
                .ok_or_else(|| Error::Validation(format!("slice {id} is not in the dataset")))
        })
        .collect()
}

fn unannotated(records: &[&SliceRecord]) -> Vec<String> {
    records
        .iter()
        .filter(|r| r.annotation.is_none())
        .map(|r| r.id().to_string())
        .collect()
}

fn persist<T>(dir: Option<&Path>, f: impl FnOnce(&Path) -> Result<T>) -> Result<()> {
    if let Some(dir) = dir {
        f(dir)?;
    }
    Ok(())
}

/// Runs every stage on `dataset` (raw, as loaded). When `run_dir` is given,
/// every intermediate artifact is written there.
pub fn run_pipeline(dataset: &StackDataset, cfg: &RunConfig, run_dir: Option<&Path>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    persist(run_dir, |d| {
        let p = d.join(CONFIG_FILE);
        std::fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))
    })?;

    // Quality metrics run on the slices as acquired; the model sees the
    // ROI-masked, resized versions.
    let scored = scan(dataset.split(Split::Pool), cfg.quality.median_kernel)?;
    if scored.is_empty() {
        return Err(Error::Validation("dataset has no pool slices".into()));
    }
    let initial = initial_selection(&scored, &cfg.quality);
    log::info!("S0: {} of {} pool slices", initial.s0_indices.len(), scored.len());
    persist(run_dir, |d| {
        write_quality_csv(&d.join(QUALITY_FILE), &scored, &initial.s0_indices)
    })?;

    let data = dataset.normalized(cfg.data.image_size)?;
    let s0_records = records_for(&data, &initial.s0_indices)?;
    if s0_records.is_empty() {
        return Err(Error::Validation("initial selection S0 is empty".into()));
    }

    let mut model = SegModel::build(cfg.model.clone(), cfg.model_seed())?;
    let mut train_history = LossHistory::default();
    let missing = unannotated(&s0_records);
    match cfg.mode {
        Mode::Oracle if !missing.is_empty() => {
            return Err(Error::Validation(format!(
                "oracle mode needs annotations for S0 slices: {}",
                missing.join(", ")
            )));
        }
        Mode::Oracle => {
            train_history = train(&mut model, &s0_records, &cfg.train)?;
        }
        Mode::Flag => {
            let annotated: Vec<&SliceRecord> = s0_records.iter().copied().filter(|r| r.annotation.is_some()).collect();
            if !annotated.is_empty() {
                train_history = train(&mut model, &annotated, &cfg.train)?;
            } else if let Some(path) = &cfg.finetune.warm_start {
                let (loaded, _) = checkpoint::load(path)?;
                if loaded.config.input_size != cfg.data.image_size {
                    return Err(Error::Config(format!(
                        "warm-start checkpoint expects {} px input, run uses {}",
                        loaded.config.input_size, cfg.data.image_size
                    )));
                }
                model = loaded;
            } else {
                log::warn!("S0 has no annotations and no warm-start checkpoint; scoring with an untrained model");
            }
        }
    }
    persist(run_dir, |d| {
        checkpoint::save(
            &d.join(PRE_CHECKPOINT),
            &model,
            train_history.epochs.len(),
            &train_history,
        )?;
        train_history.write_csv(&d.join(LOSS_FILE))
    })?;

    let s0_set: HashSet<&SliceId> = initial.s0_indices.iter().collect();
    let remainder: Vec<&SliceRecord> = data.split(Split::Pool).filter(|r| !s0_set.contains(&r.id())).collect();
    let pool_size = remainder.len() + s0_records.len();

    let mut verdicts: BTreeMap<SliceId, QualityVerdict> = BTreeMap::new();
    let mut finetune_history = LossHistory::default();
    let mut test_metrics = None;
    let rounds = if cfg.finetune.iterate {
        cfg.finetune.max_rounds
    } else {
        1
    };

    for round in 0..rounds {
        let candidates: Vec<&SliceRecord> = remainder
            .iter()
            .copied()
            .filter(|r| verdicts.get(&r.id()).is_none_or(|v| !v.selected))
            .collect();
        let fresh = select_minimal(&model, &candidates, cfg.q0)?;
        let newly = fresh.iter().filter(|v| v.selected).count();
        log::info!("round {round}: {newly} of {} slices flagged", candidates.len());
        verdicts.extend(fresh.into_iter().map(|v| (v.id(), v)));
        if cfg.mode == Mode::Flag || (round > 0 && newly == 0) {
            break;
        }

        let chosen: Vec<SliceId> = initial
            .s0_indices
            .iter()
            .cloned()
            .chain(verdicts.values().filter(|v| v.selected).map(QualityVerdict::id))
            .collect();
        let chosen_records = records_for(&data, &chosen)?;
        let missing = unannotated(&chosen_records);
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "oracle mode needs annotations for selected slices: {}",
                missing.join(", ")
            )));
        }
        let history = train(&mut model, &chosen_records, &cfg.finetune_config_for(round))?;
        finetune_history.extend(&history);
        if newly == 0 {
            break;
        }
    }

    // Verdicts in pool order.
    let ordered: Vec<QualityVerdict> = remainder.iter().filter_map(|r| verdicts.remove(&r.id())).collect();
    let report = SelectionReport::new(cfg.q0, initial.s0_indices.clone(), ordered, pool_size)?;
    persist(run_dir, |d| report.write_json(&d.join(SELECTION_FILE)))?;

    if cfg.mode == Mode::Oracle {
        let epochs = train_history.epochs.len() + finetune_history.epochs.len();
        let mut full = train_history.clone();
        full.extend(&finetune_history);
        persist(run_dir, |d| {
            checkpoint::save(&d.join(POST_CHECKPOINT), &model, epochs, &full)?;
            finetune_history.write_csv(&d.join(FINETUNE_LOSS_FILE))
        })?;
        let test: Vec<&SliceRecord> = data.split(Split::Test).collect();
        if test.is_empty() {
            log::warn!("no test split; skipping evaluation");
        } else {
            let rows = evaluate(&model, &test)?;
            persist(run_dir, |d| write_metrics_csv(&d.join(METRICS_FILE), &rows))?;
            test_metrics = Some(rows);
        }
    }

    Ok(PipelineOutcome {
        report,
        initial,
        scored,
        model,
        train_history,
        finetune_history,
        test_metrics,
    })
}

/// Random selection with the same annotation budget: a fresh model trained
/// on `budget` random pool slices for as many epochs as the selected model
/// saw in total, evaluated on the test split. Returns one mean per run.
pub fn same_budget_baseline(
    dataset: &StackDataset,
    cfg: &RunConfig,
    budget: usize,
    runs: usize,
) -> Result<Vec<Metrics>> {
    let data = dataset.normalized(cfg.data.image_size)?;
    let pool: Vec<&SliceRecord> = data.split(Split::Pool).collect();
    let test: Vec<&SliceRecord> = data.split(Split::Test).collect();
    if budget == 0 || budget > pool.len() || test.is_empty() {
        return Err(Error::Validation(format!(
            "budget {budget} does not fit a pool of {} with {} test slices",
            pool.len(),
            test.len()
        )));
    }
    (0..runs)
        .map(|run| {
            let chosen = sample_subset(&pool, budget, cfg.seed, run);
            let tc = TrainConfig {
                epochs: cfg.train.epochs + cfg.finetune.epochs,
                seed: derive_seed(cfg.seed, &[tag::BASELINE, run as u64, 1]),
                ..cfg.train.clone()
            };
            let model_seed = derive_seed(cfg.seed, &[tag::BASELINE, run as u64, 2]);
            train_and_evaluate(&chosen, &test, &cfg.model, &tc, model_seed)
        })
        .collect()
}

pub const SCATTER_FILE: &str = "quality_scatter.png";
pub const LOSS_PLOT_FILE: &str = "loss_curves.png";
const OVERLAY_SCALE: usize = 4;

fn read_history_if_present(path: &Path) -> Result<LossHistory> {
    if path.exists() {
        LossHistory::read_csv(path)
    } else {
        Ok(LossHistory::default())
    }
}

/// Draws the figures for a finished run into `out_dir`: the quality scatter,
/// the loss curves (training then fine-tuning), and overlays for the first
/// `overlays` annotated test slices. Only reads from `run_dir`.
pub fn render_report(run_dir: &Path, out_dir: &Path, overlays: usize) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();

    let rows = read_quality_csv(&run_dir.join(QUALITY_FILE))?;
    let scatter = out_dir.join(SCATTER_FILE);
    write_rgb(&scatter, &quality_scatter(&rows)?)?;
    written.push(scatter);

    let mut history = read_history_if_present(&run_dir.join(LOSS_FILE))?;
    let boundary = history.epochs.len();
    let finetune = read_history_if_present(&run_dir.join(FINETUNE_LOSS_FILE))?;
    history.extend(&finetune);
    let curves = out_dir.join(LOSS_PLOT_FILE);
    write_rgb(
        &curves,
        &loss_curves(&history, (!finetune.epochs.is_empty()).then_some(boundary)),
    )?;
    written.push(curves);

    if overlays == 0 {
        return Ok(written);
    }
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let post = run_dir.join(POST_CHECKPOINT);
    let ckpt = if post.exists() {
        post
    } else {
        run_dir.join(PRE_CHECKPOINT)
    };
    let (model, _) = checkpoint::load(&ckpt)?;
    let data = load_dataset(&cfg.data)?.normalized(cfg.data.image_size)?;
    let test: Vec<&SliceRecord> = data
        .split(Split::Test)
        .filter(|r| r.annotation.is_some())
        .take(overlays)
        .collect();
    if test.len() < overlays {
        return Err(Error::Validation(format!(
            "asked for {overlays} overlays but only {} annotated test slices exist",
            test.len()
        )));
    }
    for r in test {
        let pred = predict_mask(&model, &r.image)?;
        let annotation = r.annotation.as_ref().expect("filtered on annotation");
        let rgb = render_overlay(&pred, annotation, &r.image)?;
        let path = out_dir.join(format!("overlay_{}_{}.png", r.stack_id, r.slice_index));
        write_rgb(&path, &enlarge(&rgb, OVERLAY_SCALE))?;
        written.push(path);
    }
    Ok(written)
}
