//! Command suite behind the `monobev` binary.

pub mod figures;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use monobev::bevmodel::{BevModel, CameraMasks, Checkpoint, PredBox};
use monobev::losses::FovFilterSpec;
use monobev::maskcurriculum::{front_only_masks, mask_schedule, sample_camera_masks};
use monobev::metrics::{compute_nds, evaluate, EvalFrame, TpErrors};
use monobev::synthscene::{atomic_write, read_blob, write_blob, Dataset, DatasetSpec, SegMasks};
use monobev::trainer::{
    ablation_csv, infer_frames, model_from_checkpoint, run_ablation_grid, schedule_table, Mode, TrainConfig, Trainer,
};
use monobev::{Error, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Exit status for usage, configuration and validation errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for IO, file-format and other runtime errors.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit status when training diverges.
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "monobev", version, about = "Single-camera BEV training harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ours,
    #[value(name = "baseline_1cam")]
    Baseline1cam,
    #[value(name = "baseline_6cam")]
    Baseline6cam,
    Custom,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ours => Mode::Ours,
            ModeArg::Baseline1cam => Mode::Baseline1cam,
            ModeArg::Baseline6cam => Mode::Baseline6cam,
            ModeArg::Custom => Mode::Custom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Heldout,
    Train,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputView {
    /// Five cameras fully masked.
    FrontOnly,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
        /// Dataset spec (TOML or JSON); flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, or print the schedule with --dry-run.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
        /// Steps per epoch assumed by --dry-run when no dataset is given.
        #[arg(long, default_value_t = 100)]
        steps_per_epoch: usize,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write `latest.ckpt` every N steps (0 = never).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
    /// Run a checkpoint over dataset frames with front-camera input and
    /// write a prediction directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Heldout)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset, or recompute NDS for a
    /// report-only fixture.
    Eval {
        #[arg(long, required_unless_present = "report", requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Total evaluation FOV in degrees; 360 disables the filter.
        #[arg(long, default_value_t = 90.0)]
        fov: f64,
        #[arg(long, conflicts_with = "pred")]
        report: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all 8 feature combinations.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the camera masks sampled at an epoch.
    MaskPreview {
        #[arg(long)]
        epoch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Draw masks over the first frame of this dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit GT map, predicted map with boxes and feature channel heat maps.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        frame: usize,
        #[arg(long, value_delimiter = ',')]
        channels: Vec<usize>,
        #[arg(long, value_enum, default_value_t = InputView::FrontOnly)]
        input: InputView,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error carrying its exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Validation(_) | Error::Contract(_) => EXIT_USAGE,
            Error::Divergence { .. } => EXIT_DIVERGED,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: msg.into(),
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate {
            seed,
            scenes,
            config,
            out,
        } => cmd_generate(seed, scenes, config.as_deref(), &out),
        Command::Train {
            config,
            mode,
            seed,
            epochs,
            dataset,
            out,
            dry_run,
            steps_per_epoch,
            resume,
            checkpoint_every,
            precision,
        } => {
            let cfg = train_config(config.as_deref(), mode, seed, epochs, dataset)?;
            if dry_run {
                return cmd_dry_run(&cfg, steps_per_epoch);
            }
            let out = out.ok_or_else(|| usage("--out is required unless --dry-run"))?;
            let opts = TrainOpts {
                resume,
                checkpoint_every,
            };
            match precision {
                Precision::F32 => cmd_train::<f32>(cfg, &out, &opts),
                Precision::F64 => cmd_train::<f64>(cfg, &out, &opts),
            }
        }
        Command::Predict {
            checkpoint,
            dataset,
            split,
            out,
        } => cmd_predict(&checkpoint, &dataset, split, &out),
        Command::Eval {
            pred,
            gt,
            fov,
            report,
            out,
        } => match (report, pred, gt) {
            (Some(r), _, _) => cmd_eval_fixture(&r, &out),
            (None, Some(p), Some(g)) => cmd_eval(&p, &g, fov, &out),
            _ => Err(usage("eval needs --pred and --gt, or --report")),
        },
        Command::Ablate {
            config,
            seed,
            dataset,
            out,
        } => {
            let cfg = train_config(config.as_deref(), None, seed, None, dataset)?;
            cmd_ablate(&cfg, &out)
        }
        Command::MaskPreview {
            epoch,
            seed,
            config,
            dataset,
            out,
        } => cmd_mask_preview(epoch, seed, config.as_deref(), dataset.as_deref(), &out),
        Command::Render {
            checkpoint,
            dataset,
            scene,
            frame,
            channels,
            input,
            out,
        } => cmd_render(&checkpoint, &dataset, scene, frame, &channels, input, &out),
    }
}

fn read_config<C: serde::de::DeserializeOwned>(path: &Path) -> CliResult<C> {
    let text = fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_RUNTIME,
        message: format!("{}: {e}", path.display()),
    })?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn cmd_generate(seed: Option<u64>, scenes: Option<usize>, config: Option<&Path>, out: &Path) -> CliResult {
    let mut spec: DatasetSpec = match config {
        Some(p) => read_config(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = scenes {
        spec.scenes = n;
    }
    spec.validate()?;
    let ds = Dataset::generate(&spec)?;
    ds.save(out)?;
    log::info!("wrote {} scenes to {}", ds.scenes.len(), out.display());
    Ok(())
}

pub fn train_config(
    config: Option<&Path>,
    mode: Option<ModeArg>,
    seed: Option<u64>,
    epochs: Option<usize>,
    dataset: Option<PathBuf>,
) -> CliResult<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_path(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = mode {
        cfg.mode = m.into();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(d) = dataset {
        cfg.dataset = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_dry_run(cfg: &TrainConfig, steps_per_epoch: usize) -> CliResult {
    if steps_per_epoch == 0 {
        return Err(usage("--steps-per-epoch must be positive"));
    }
    let steps = cfg.steps_per_epoch.unwrap_or(steps_per_epoch);
    println!("epoch\tmu\tsigma\tlr_first\tlr_last\tgt_filter");
    for r in schedule_table(cfg, steps)? {
        println!(
            "{}\t{:.1}\t{:.1}\t{:.6e}\t{:.6e}\t{}",
            r.epoch, r.mu, r.sigma, r.lr_first, r.lr_last, r.gt_filter
        );
    }
    Ok(())
}

pub struct TrainOpts {
    pub resume: Option<PathBuf>,
    pub checkpoint_every: u64,
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    if !path.join("dataset.json").exists() {
        return Err(CliError {
            code: EXIT_RUNTIME,
            message: format!("no dataset at {}", path.display()),
        });
    }
    Ok(Dataset::load(path)?)
}

fn cmd_train<T: Real>(cfg: TrainConfig, out: &Path, opts: &TrainOpts) -> CliResult {
    let dataset = load_dataset(&cfg.dataset)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match &opts.resume {
        Some(p) => Trainer::<T>::from_checkpoint(&Checkpoint::load(p)?, &dataset)?,
        None => {
            let log = out.join("train_log.jsonl");
            if log.exists() {
                fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
            }
            Trainer::<T>::new(cfg, &dataset)?
        }
    };
    trainer.log_to(&out.join("train_log.jsonl"))?;
    while !trainer.finished() {
        if let Err(e) = trainer.step() {
            if matches!(e, Error::Divergence { .. }) {
                trainer.to_checkpoint().save(&out.join("diverged.ckpt"))?;
            }
            return Err(e.into());
        }
        if opts.checkpoint_every > 0 && trainer.global_step % opts.checkpoint_every == 0 {
            trainer.to_checkpoint().save(&out.join("latest.ckpt"))?;
        }
    }
    trainer.to_checkpoint().save(&out.join("final.ckpt"))?;
    atomic_write(
        &out.join("history.json"),
        serde_json::to_string_pretty(&trainer.history)?.as_bytes(),
    )?;
    if let Some(r) = trainer.history.last().and_then(|h| h.eval.as_ref()) {
        println!("NDS {:.4}  mAP {:.4}  mIoU {:.4}", r.nds, r.map, r.miou);
    }
    Ok(())
}

/// One frame of a prediction directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredFrame {
    pub scene: String,
    pub frame: usize,
    pub boxes: Vec<PredBox>,
    /// Blob with thresholded segmentation masks, relative to the directory.
    pub seg: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub format: String,
    pub frames: Vec<PredFrame>,
}

pub const PREDICTIONS_FILE: &str = "predictions.json";

fn cmd_predict(checkpoint: &Path, dataset: &Path, split: Split, out: &Path) -> CliResult {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, cfg) = model_from_checkpoint::<f64>(&ck)?;
    let ds = load_dataset(dataset)?;
    if model.rig() != &ds.rig {
        return Err(usage("checkpoint rig differs from the dataset rig"));
    }
    let (train, held) = ds.split();
    let scenes = match split {
        Split::Heldout => held,
        Split::Train => train,
        Split::All => (0..ds.scenes.len()).collect(),
    };
    let masks = CameraMasks {
        masks: front_only_masks(model.rig(), model.patch_grid()),
        fill: cfg.mask.fill_value,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut frames = Vec::new();
    for s in scenes {
        let scene = &ds.scenes[s];
        for a in 1..scene.frames.len() {
            let o = model.forward(&infer_frames(scene, a), Some(&masks))?;
            let seg = o.seg.threshold();
            let seg_name = format!("{}_frame_{a:04}.seg.bin", ds.names[s]);
            let data: Vec<f32> = seg.data.iter().map(|v| *v as f32).collect();
            write_blob(&out.join(&seg_name), &[seg.classes, seg.rows, seg.cols], &data)?;
            frames.push(PredFrame {
                scene: ds.names[s].clone(),
                frame: a,
                boxes: o.det.decode(&cfg.model.grid, &cfg.decode),
                seg: seg_name,
            });
        }
    }
    let set = PredictionSet {
        format: "monobev-predictions/1".into(),
        frames,
    };
    atomic_write(&out.join(PREDICTIONS_FILE), serde_json::to_string_pretty(&set)?.as_bytes())?;
    Ok(())
}

fn read_seg(path: &Path) -> CliResult<SegMasks> {
    let (dims, data) = read_blob(path)?;
    if dims.len() != 3 {
        return Err(Error::format(path, format!("seg blob dims {dims:?}")).into());
    }
    let mut m = SegMasks::new(dims[0], dims[1], dims[2]);
    for (d, v) in m.data.iter_mut().zip(data) {
        *d = (v > 0.5) as u8;
    }
    Ok(m)
}

fn cmd_eval(pred: &Path, gt: &Path, fov: f64, out: &Path) -> CliResult {
    let set: PredictionSet = {
        let p = pred.join(PREDICTIONS_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?
    };
    let ds = load_dataset(gt)?;
    let fov = if fov >= 360.0 {
        None
    } else {
        Some(FovFilterSpec::with_total(fov)?)
    };
    let mut frames = Vec::with_capacity(set.frames.len());
    let mut segs = Vec::with_capacity(set.frames.len());
    for f in &set.frames {
        let si = ds
            .names
            .iter()
            .position(|n| *n == f.scene)
            .ok_or_else(|| usage(format!("unknown scene {}", f.scene)))?;
        let frame = ds.scenes[si]
            .frames
            .get(f.frame)
            .ok_or_else(|| usage(format!("{} has no frame {}", f.scene, f.frame)))?;
        frames.push(EvalFrame {
            preds: f.boxes.clone(),
            gts: frame.boxes.clone(),
        });
        segs.push((read_seg(&pred.join(&f.seg))?, frame.bev_seg.clone()));
    }
    let pairs: Vec<_> = segs.iter().map(|(p, g)| (p, g)).collect();
    let report = evaluate(&frames, &pairs, ds.spec.classes.len(), fov.as_ref())?;
    atomic_write(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!("NDS {:.4}  mAP {:.4}  mIoU {:.4}", report.nds, report.map, report.miou);
    Ok(())
}

/// A stored metric row: mAP and TP errors with the NDS printed alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRow {
    pub name: String,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(flatten)]
    pub tp: TpErrors,
    #[serde(rename = "NDS")]
    pub nds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub rows: Vec<FixtureRow>,
    /// Allowed |recomputed - stored|.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    5e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureResult {
    pub name: String,
    pub stored: f64,
    pub recomputed: f64,
    pub abs_diff: f64,
    pub pass: bool,
}

pub fn check_fixture(f: &Fixture) -> Vec<FixtureResult> {
    f.rows
        .iter()
        .map(|r| {
            let nds = compute_nds(r.map, &r.tp);
            let d = (nds - r.nds).abs();
            FixtureResult {
                name: r.name.clone(),
                stored: r.nds,
                recomputed: nds,
                abs_diff: d,
                pass: d <= f.tolerance,
            }
        })
        .collect()
}

fn cmd_eval_fixture(path: &Path, out: &Path) -> CliResult {
    let f: Fixture = read_config(path)?;
    let results = check_fixture(&f);
    for r in &results {
        println!(
            "{}\t{}\tstored {:.4}\trecomputed {:.5}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.stored,
            r.recomputed
        );
    }
    atomic_write(out, serde_json::to_string_pretty(&results)?.as_bytes())?;
    Ok(())
}

fn cmd_ablate(cfg: &TrainConfig, out: &Path) -> CliResult {
    let dataset = load_dataset(&cfg.dataset)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows = run_ablation_grid::<f32>(cfg, &dataset, Some(out));
    atomic_write(&out.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
    atomic_write(&out.join("ablation.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
    print!("{}", ablation_csv(&rows));
    for (i, r) in rows.iter().enumerate() {
        if let Some(e) = &r.error {
            log::error!("row {i} failed: {e}");
        }
    }
    Ok(())
}

fn cmd_mask_preview(epoch: usize, seed: u64, config: Option<&Path>, dataset: Option<&Path>, out: &Path) -> CliResult {
    let cfg = match config {
        Some(p) => TrainConfig::from_path(p)?,
        None => TrainConfig::default(),
    };
    let state = mask_schedule(epoch)?;
    let ds = dataset.map(load_dataset).transpose()?;
    let rig = match &ds {
        Some(d) => d.rig.clone(),
        None => DatasetSpec::default().rig()?,
    };
    let (h, w) = rig.image_size();
    let p = cfg.model.patch_size;
    if h % p != 0 || w % p != 0 {
        return Err(usage("image size is not a multiple of the patch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = sample_camera_masks(&state, &rig, (h / p, w / p), &cfg.mask, &mut rng)?;
    let images = ds.as_ref().map(|d| d.scenes[0].frames[0].images.clone()).unwrap_or_default();
    let img = figures::mask_preview(&masks, &images, p, (h, w));
    figures::save_png(&img, out)?;
    Ok(())
}

/// Files written by `render`.
pub fn render_outputs(out: &Path, channels: &[usize]) -> Vec<PathBuf> {
    let mut v = vec![out.join("gt_seg.png"), out.join("bev_pred.png")];
    v.extend(channels.iter().map(|c| out.join(format!("channel_{c:03}.png"))));
    v
}

fn cmd_render(
    checkpoint: &Path,
    dataset: &Path,
    scene: usize,
    frame: usize,
    channels: &[usize],
    input: InputView,
    out: &Path,
) -> CliResult {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, cfg): (BevModel<f64>, TrainConfig) = model_from_checkpoint(&ck)?;
    let ds = load_dataset(dataset)?;
    let seq = ds
        .scenes
        .get(scene)
        .ok_or_else(|| usage(format!("scene {scene} out of range ({} scenes)", ds.scenes.len())))?;
    if frame >= seq.frames.len() {
        return Err(usage(format!("frame {frame} out of range ({} frames)", seq.frames.len())));
    }
    let d = cfg.model.grid.embed_dim;
    if let Some(c) = channels.iter().find(|c| **c >= d) {
        return Err(usage(format!("channel {c} out of range (embed dim {d})")));
    }
    let masks = match input {
        InputView::FrontOnly => front_only_masks(model.rig(), model.patch_grid()),
        InputView::All => vec![None; model.rig().len()],
    };
    let cm = CameraMasks {
        masks: masks.clone(),
        fill: cfg.mask.fill_value,
    };
    let input_frames = if frame == 0 {
        vec![&seq.frames[0]]
    } else {
        infer_frames(seq, frame)
    };
    let o = model.forward(&input_frames, Some(&cm))?;
    let target = &seq.frames[frame];
    let canvas = figures::BevCanvas::new(cfg.model.grid);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let paths = render_outputs(out, channels);

    let mut gt = canvas.blank();
    figures::paint_seg(&canvas, &mut gt, &target.bev_seg);
    figures::save_png(&gt, &paths[0])?;

    let preds = o.det.decode(&cfg.model.grid, &cfg.decode);
    let masked = figures::fully_masked(&masks);
    let overlay = figures::bev_overlay(&canvas, &o.seg.threshold(), &target.boxes, &preds, model.rig(), &masked);
    figures::save_png(&overlay, &paths[1])?;

    let emb = &o.state.embeddings;
    for (c, path) in channels.iter().zip(&paths[2..]) {
        let values: Vec<f64> = (0..emb.rows()).map(|q| emb.at(q, *c)).collect();
        figures::save_png(&figures::channel_heatmap(&canvas, &values), path)?;
    }
    Ok(())
}
