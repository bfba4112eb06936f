//! Experiment orchestration: dataset preparation, training runs with
//! checkpoints and metrics, retrieval evaluation, and ablation sweeps.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{Descriptor, Pooling};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Variant};
use crate::error::{AsdaError, Result};
use crate::evaluation::{
    average_precision, load_groundtruth, rank_database, RetrievalGroundTruth, Setup,
};
use crate::feature::{FeatureMap, ImageTensor};
use crate::model::Model;
use crate::postprocess::{apply_whitening, fit_whitening, multiscale_descriptor, WhiteningProjection};
use crate::synth::{generate_dataset, DatasetSplit, SynthDataset};
use crate::training::{train, EpochMetrics, TrainState, TrainingSet, METRICS_HEADER};

/// Views whose object covers less than this fraction of the image count as
/// "hard" positives in the E/M/H setups.
pub const HARD_AREA_FRACTION: f64 = 0.25;

pub struct Data {
    pub dataset: SynthDataset,
    pub split: DatasetSplit,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Data> {
    cfg.validate()?;
    let dataset = generate_dataset(cfg.seed, cfg.instances, cfg.views, cfg.image_size)?;
    let split = dataset.split(cfg.holdout, cfg.seed).map_err(|e| AsdaError::ConfigKey {
        key: "holdout".into(),
        message: e.to_string(),
    })?;
    Ok(Data { dataset, split })
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Exports the dataset as PPM images with a manifest and a groundtruth file.
pub fn generate_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Data> {
    let data = prepare_data(cfg)?;
    data.dataset.export(out_dir, Some(&data.split))?;
    write_atomic(&out_dir.join("config.txt"), cfg.to_text().as_bytes())?;
    write_atomic(&out_dir.join("groundtruth.txt"), groundtruth_text(&data).as_bytes())?;
    Ok(data)
}

fn view_name(d: &SynthDataset, idx: usize) -> String {
    let v = &d.views[idx];
    format!("i{:03}_v{:03}", v.instance, v.view)
}

/// Groundtruth for the evaluation split in the easy/hard/unclear form.
pub fn groundtruth_text(data: &Data) -> String {
    let d = &data.dataset;
    let mut s = String::from("# query | easy | hard | unclear\n");
    for &q in &data.split.queries {
        let inst = d.views[q].instance;
        let (mut easy, mut hard) = (Vec::new(), Vec::new());
        for &i in &data.split.database {
            if d.views[i].instance == inst {
                if d.views[i].area_fraction < HARD_AREA_FRACTION {
                    hard.push(view_name(d, i));
                } else {
                    easy.push(view_name(d, i));
                }
            }
        }
        s.push_str(&format!("{} | {} | {} |\n", view_name(d, q), easy.join(" "), hard.join(" ")));
    }
    s
}

/// Groundtruth records for the evaluation split, one per query.
pub fn synthetic_groundtruth(data: &Data, setup: Setup) -> Result<Vec<RetrievalGroundTruth>> {
    let names: Vec<String> = data.split.database.iter().map(|i| view_name(&data.dataset, *i)).collect();
    let text = groundtruth_text(data);
    match setup {
        Setup::Custom => {
            // every same-instance view is a positive
            load_groundtruth(&text, Setup::Medium, &names)
                .map(|g| g.into_iter().map(|r| RetrievalGroundTruth { setup: Setup::Custom, ..r }).collect())
        }
        s => load_groundtruth(&text, s, &names),
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

fn training_sets(data: &Data) -> (TrainingSet<'_>, TrainingSet<'_>) {
    let d = &data.dataset;
    let s = &data.split;
    (
        TrainingSet {
            images: d.images(&s.train),
            labels: d.labels(&s.train),
        },
        TrainingSet {
            images: d.images(&s.validation),
            labels: d.labels(&s.validation),
        },
    )
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<Model> {
    Model::new(&cfg.model_config(), cfg.seed)
}

/// Trains until `cfg.epochs` epochs are complete, starting from `state`.
pub fn train_to_completion<F>(cfg: &ExperimentConfig, data: &Data, state: &mut TrainState, on_epoch: F) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&TrainState, &EpochMetrics) -> Result<()>,
{
    let (train_set, val_set) = training_sets(data);
    let remaining = cfg.epochs.saturating_sub(state.epoch);
    train(state, &train_set, Some(&val_set), &cfg.optimizer_config(), remaining, cfg.seed, on_epoch)
}

/// Fits a learned whitening on matched pairs of training views (consecutive
/// views of each training instance).
pub fn fit_training_whitening(model: &Model, cfg: &ExperimentConfig, data: &Data, multiscale: bool) -> Result<WhiteningProjection> {
    let train = &data.split.train;
    let descs = describe_all(model, &data.dataset.images(train), multiscale.then_some(cfg.scales.as_slice()))?;
    let vecs: Vec<Vec<f64>> = descs.iter().map(|d| d.values().to_vec()).collect();
    let labels = data.dataset.labels(train);
    let mut pairs = Vec::new();
    for i in 1..train.len() {
        if labels[i] == labels[i - 1] {
            pairs.push((vecs[i - 1].clone(), vecs[i].clone()));
        }
    }
    let w = fit_whitening(&pairs, &vecs, model.dim())?;
    if w.floored > 0 {
        log::info!("whitening: {} of {} intra-pair eigenvalues floored", w.floored, model.dim());
    }
    Ok(w)
}

fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = String::new();
    if fresh {
        line.push_str(METRICS_HEADER);
        line.push('\n');
    }
    line.push_str(&m.csv_row());
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains per `cfg`, writing `checkpoint.ckpt` after every epoch and one
/// `metrics.csv` row per epoch into `out_dir`. With `resume`, training
/// continues from that checkpoint's epoch counter. The final checkpoint
/// carries a learned whitening fitted on multi-scale training descriptors.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_compatible(cfg)?;
            log::info!("resuming from {} at epoch {}", p.display(), ck.state.epoch);
            ck.state
        }
        None => TrainState::new(init_model(cfg)?),
    };
    let data = prepare_data(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join("config.txt"), cfg.to_text().as_bytes())?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let metrics = train_to_completion(cfg, &data, &mut state, |s, m| {
        Checkpoint::new(cfg.clone(), s.clone()).save(&ck_path)?;
        append_metrics(&metrics_path, m)
    })?;
    let mut checkpoint = Checkpoint::new(cfg.clone(), state);
    checkpoint.whitening = Some(fit_training_whitening(&checkpoint.state.model, cfg, &data, true)?);
    checkpoint.save(&ck_path)?;
    Ok(TrainOutcome { checkpoint, metrics })
}

/// Descriptor pipeline variants reported by evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct EvalMode {
    pub multiscale: bool,
    pub whiten: bool,
}

impl EvalMode {
    pub const SS: EvalMode = EvalMode {
        multiscale: false,
        whiten: false,
    };
    pub const MS_LW: EvalMode = EvalMode {
        multiscale: true,
        whiten: true,
    };

    pub fn all() -> [EvalMode; 4] {
        [
            EvalMode::SS,
            EvalMode {
                multiscale: true,
                whiten: false,
            },
            EvalMode {
                multiscale: false,
                whiten: true,
            },
            EvalMode::MS_LW,
        ]
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.multiscale { "MS" } else { "SS" })?;
        if self.whiten {
            f.write_str("+LW")?;
        }
        Ok(())
    }
}

impl FromStr for EvalMode {
    type Err = AsdaError;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::all()
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| AsdaError::Invalid(format!("unknown evaluation mode `{s}` (expected SS, MS, SS+LW or MS+LW)")))
    }
}

fn describe_all(model: &Model, images: &[&ImageTensor], scales: Option<&[f64]>) -> Result<Vec<Descriptor>> {
    images
        .par_iter()
        .map(|im| match scales {
            Some(s) => multiscale_descriptor(im, model, s),
            None => model.describe_image(im),
        })
        .collect()
}

/// mAP over the queries that have at least one positive under `gts`.
pub fn retrieval_map(queries: &[Descriptor], db: &[Descriptor], gts: &[RetrievalGroundTruth]) -> Result<(f64, usize)> {
    if queries.len() != gts.len() {
        return Err(AsdaError::ShapeMismatch(format!("{} queries for {} groundtruth records", queries.len(), gts.len())));
    }
    let aps = queries
        .par_iter()
        .zip(gts)
        .filter(|(_, g)| !g.positives.is_empty())
        .map(|(q, g)| average_precision(&rank_database(q, db)?, g))
        .collect::<Result<Vec<f64>>>()?;
    if aps.is_empty() {
        return Err(AsdaError::InsufficientData("no query has a positive under this setup".into()));
    }
    Ok((aps.iter().sum::<f64>() / aps.len() as f64, aps.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub mode: String,
    pub map: f64,
    pub queries: usize,
    pub database: usize,
}

/// Evaluates `model` on the held-out split under each mode.
pub fn evaluate_model(model: &Model, cfg: &ExperimentConfig, data: &Data, setup: Setup, modes: &[EvalMode]) -> Result<Vec<EvalRow>> {
    let gts = synthetic_groundtruth(data, setup)?;
    let q_images = data.dataset.images(&data.split.queries);
    let db_images = data.dataset.images(&data.split.database);
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let scales = mode.multiscale.then_some(cfg.scales.as_slice());
        let mut q = describe_all(model, &q_images, scales)?;
        let mut db = describe_all(model, &db_images, scales)?;
        if mode.whiten {
            let w = fit_training_whitening(model, cfg, data, mode.multiscale)?;
            q = q.iter().map(|d| apply_whitening(d, &w)).collect::<Result<_>>()?;
            db = db.iter().map(|d| apply_whitening(d, &w)).collect::<Result<_>>()?;
        }
        let (map, used) = retrieval_map(&q, &db, &gts)?;
        rows.push(EvalRow {
            mode: mode.to_string(),
            map,
            queries: used,
            database: db.len(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    /// Completed training epochs; 0 for a random-init model.
    pub epoch: usize,
    pub setup: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,setup,epoch,map,queries,database\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:?},{},{}\n", r.mode, self.setup, self.epoch, r.map, r.queries, r.database));
        }
        s
    }
}

/// Evaluates a checkpoint (or the random-init model when `checkpoint` is
/// `None`) and writes `eval.csv` / `eval.json` into `out_dir` if given.
pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    setup: Setup,
    modes: &[EvalMode],
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let (model, epoch) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_compatible(cfg)?;
            (ck.state.model, ck.state.epoch)
        }
        None => (init_model(cfg)?, 0),
    };
    let data = prepare_data(cfg)?;
    let report = EvalReport {
        config_hash: cfg.hash(),
        epoch,
        setup: setup.to_string(),
        rows: evaluate_model(&model, cfg, &data, setup, modes)?,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("eval.csv"), report.to_csv().as_bytes())?;
        write_atomic(&dir.join("eval.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(report)
}

/// mAP of precomputed descriptors against a groundtruth file whose ids are the
/// query and database names.
pub fn evaluate_descriptors(
    queries: &[(String, Descriptor)],
    database: &[(String, Descriptor)],
    groundtruth: &str,
    setup: Setup,
) -> Result<(f64, usize)> {
    let names: Vec<String> = database.iter().map(|(n, _)| n.clone()).collect();
    let gts = load_groundtruth(groundtruth, setup, &names)?;
    let db: Vec<Descriptor> = database.iter().map(|(_, d)| d.clone()).collect();
    let mut q = Vec::with_capacity(gts.len());
    for g in &gts {
        let d = queries
            .iter()
            .find(|(n, _)| *n == g.query)
            .ok_or_else(|| AsdaError::Invalid(format!("groundtruth query `{}` has no descriptor", g.query)))?;
        q.push(d.1.clone());
    }
    retrieval_map(&q, &db, &gts)
}

/// Loads every `.dsc` / `.csv` descriptor in `dir`, named by file stem, sorted.
pub fn load_descriptor_dir(dir: &Path) -> Result<Vec<(String, Descriptor)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("dsc" | "csv")));
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok((name, Descriptor::load(p)?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Levels,
    Dim,
    Proposal,
    Pooling,
    Postprocess,
}

impl FromStr for AblationAxis {
    type Err = AsdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "levels" | "l" => Ok(AblationAxis::Levels),
            "dim" | "d" => Ok(AblationAxis::Dim),
            "proposal" => Ok(AblationAxis::Proposal),
            "pooling" => Ok(AblationAxis::Pooling),
            "postprocess" => Ok(AblationAxis::Postprocess),
            _ => Err(AsdaError::Invalid(format!(
                "unknown ablation axis `{s}` (expected levels, dim, proposal, pooling or postprocess)"
            ))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Levels => "levels",
            AblationAxis::Dim => "dim",
            AblationAxis::Proposal => "proposal",
            AblationAxis::Pooling => "pooling",
            AblationAxis::Postprocess => "postprocess",
        })
    }
}

pub const DIM_GRID: [usize; 4] = [8, 16, 32, 64];

impl AblationAxis {
    /// Setting labels and the config each row trains.
    pub fn settings(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::Levels => (0..=5).map(|l| (l.to_string(), with(&|c| c.levels = l))).collect(),
            AblationAxis::Dim => DIM_GRID.iter().map(|&d| (d.to_string(), with(&|c| c.dim = d))).collect(),
            AblationAxis::Proposal => [Variant::Hda, Variant::Sda, Variant::Asda]
                .into_iter()
                .map(|v| (v.to_string(), with(&|c| c.proposal = v)))
                .collect(),
            AblationAxis::Pooling => [Pooling::Avg, Pooling::Gem(crate::aggregation::DEFAULT_GEM_P), Pooling::Mac]
                .into_iter()
                .map(|p| (p.to_string(), with(&|c| c.pooling = p)))
                .collect(),
            AblationAxis::Postprocess => vec![("model".into(), base.clone())],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub mode: String,
    /// Descriptor dimension after capping.
    pub dim: usize,
    pub epochs: usize,
    pub map_init: f64,
    pub map: f64,
}

pub const ABLATION_HEADER: &str = "axis,setting,mode,dim,epochs,map_init,map";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:?},{:?}",
            self.axis, self.setting, self.mode, self.dim, self.epochs, self.map_init, self.map
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

fn ablation_rows(axis: AblationAxis, label: &str, cfg: &ExperimentConfig, data: &Data) -> Result<Vec<AblationRow>> {
    let modes: Vec<EvalMode> = match axis {
        AblationAxis::Postprocess => EvalMode::all().to_vec(),
        _ => vec![EvalMode::SS],
    };
    let mut state = TrainState::new(init_model(cfg)?);
    let before = evaluate_model(&state.model, cfg, data, Setup::Custom, &modes)?;
    train_to_completion(cfg, data, &mut state, |_, _| Ok(()))?;
    let after = evaluate_model(&state.model, cfg, data, Setup::Custom, &modes)?;
    Ok(before
        .iter()
        .zip(&after)
        .map(|(b, a)| AblationRow {
            axis: axis.to_string(),
            setting: if axis == AblationAxis::Postprocess { a.mode.clone() } else { label.to_string() },
            mode: a.mode.clone(),
            dim: state.model.dim(),
            epochs: state.epoch,
            map_init: b.map,
            map: a.map,
        })
        .collect())
}

/// Trains and evaluates one model per setting of `axis` (all sharing the base
/// seed and dataset). Rows run in parallel; with `out_dir`, each row is also
/// written atomically under `rows/` and the table is emitted as
/// `ablation_<axis>.csv` plus a bar plot `ablation_<axis>.png`.
pub fn run_ablation(cfg: &ExperimentConfig, axis: AblationAxis, out_dir: Option<&Path>) -> Result<AblationTable> {
    let settings = axis.settings(cfg);
    for (label, c) in &settings {
        c.validate().map_err(|e| AsdaError::Invalid(format!("{axis} = {label}: {e}")))?;
    }
    let data = prepare_data(cfg)?;
    let row_dir = out_dir.map(|d| d.join("rows"));
    if let Some(d) = &row_dir {
        std::fs::create_dir_all(d)?;
    }
    let per_setting = settings
        .par_iter()
        .enumerate()
        .map(|(i, (label, c))| {
            let rows = ablation_rows(axis, label, c, &data)?;
            if let Some(d) = &row_dir {
                let mut text = format!("{ABLATION_HEADER}\n");
                for r in &rows {
                    text.push_str(&r.csv_row());
                    text.push('\n');
                }
                write_atomic(&d.join(format!("{axis}_{i}.csv")), text.as_bytes())?;
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = AblationTable {
        axis: axis.to_string(),
        rows: per_setting.into_iter().flatten().collect(),
    };
    if let Some(d) = out_dir {
        write_atomic(&d.join(format!("ablation_{axis}.csv")), table.to_csv().as_bytes())?;
        write_atomic(&d.join(format!("ablation_{axis}.json")), serde_json::to_string_pretty(&table)?.as_bytes())?;
        bar_plot(&table).save(d.join(format!("ablation_{axis}.png")))?;
    }
    Ok(table)
}

/// Paired bars per row: grey for the untrained model, blue after training,
/// on a 0..1 mAP axis with gridlines every 0.25.
pub fn bar_plot(table: &AblationTable) -> image::RgbImage {
    const BAR: u32 = 14;
    const GAP: u32 = 12;
    const PLOT_H: u32 = 200;
    const MARGIN: u32 = 20;
    let n = table.rows.len() as u32;
    let width = 2 * MARGIN + n * (2 * BAR + GAP);
    let height = PLOT_H + 2 * MARGIN;
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    let base = MARGIN + PLOT_H;
    for q in 0..=4 {
        let y = base - q * PLOT_H / 4;
        for x in MARGIN / 2..width - MARGIN / 2 {
            img.put_pixel(x, y, image::Rgb([210, 210, 210]));
        }
    }
    let mut draw = |x0: u32, value: f64, color: [u8; 3]| {
        let h = (value.clamp(0.0, 1.0) * PLOT_H as f64).round() as u32;
        for x in x0..x0 + BAR {
            for y in base - h..base {
                img.put_pixel(x, y, image::Rgb(color));
            }
        }
    };
    for (i, r) in table.rows.iter().enumerate() {
        let x0 = MARGIN + i as u32 * (2 * BAR + GAP);
        draw(x0, r.map_init, [150, 150, 150]);
        draw(x0 + BAR, r.map, [40, 90, 200]);
    }
    img
}

/// Loads the model for description: a checkpoint if given, else random init.
pub fn load_model(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(Model, Option<WhiteningProjection>)> {
    match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_compatible(cfg)?;
            Ok((ck.state.model, ck.whitening))
        }
        None => Ok((init_model(cfg)?, None)),
    }
}

/// Describes one input file. ASDAFM1 feature maps bypass the backbone (and
/// therefore multi-scale); anything else is read as an image.
pub fn describe_file(
    cfg: &ExperimentConfig,
    model: &Model,
    whitening: Option<&WhiteningProjection>,
    input: &Path,
    multiscale: bool,
) -> Result<Descriptor> {
    let mut magic = [0u8; 7];
    let is_feature_map = std::fs::File::open(input)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut magic))
        .is_ok()
        && &magic == b"ASDAFM1";
    let d = if is_feature_map {
        if multiscale {
            return Err(AsdaError::Invalid("multi-scale description needs an image, not a feature map".into()));
        }
        model.describe_features(&FeatureMap::load(input)?)?
    } else {
        let image = ImageTensor::load(input)?;
        if multiscale {
            multiscale_descriptor(&image, model, &cfg.scales)?
        } else {
            model.describe_image(&image)?
        }
    };
    match whitening {
        Some(w) => apply_whitening(&d, w),
        None => Ok(d),
    }
}
