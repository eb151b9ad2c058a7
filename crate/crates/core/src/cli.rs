//! Subcommands behind the `dtpn` binary. Every command validates all of its
//! inputs before starting any compute.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, ACTIVITYNET_THRESHOLDS};
use crate::io_formats::{
    load_corpus, read_detections, read_features, write_corpus, write_detections, write_features, Corpus,
};
use crate::model::{load_checkpoint, save_checkpoint, Dtpn};
use crate::postprocess::{detect_video, Detection};
use crate::sampling::{extract_pyramid, Frames, PyramidSource};
use crate::train::{make_synthetic_corpus, train, SynthConfig, TrainingSample};
use crate::verify::{run_suite, SuiteOptions, SuiteSize, TOLERANCE};

#[derive(Debug, Parser)]
#[command(name = "dtpn", version, about = "Dynamic temporal pyramid network for temporal activity detection")]
pub struct Cli {
    /// Worker threads for per-video work (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a deterministic synthetic corpus with raw frame files.
    Synth(SynthArgs),
    /// Build one feature pyramid file per video.
    Extract(ExtractArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Run a checkpoint over feature files and write detection JSON.
    Detect(DetectArgs),
    /// Score detections against a corpus.
    Eval(EvalArgs),
    /// Check every gradient against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Config file overriding the built-in defaults (`section.key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref())
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub videos: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 3)]
    pub max_instances: usize,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory with `<id>.bin` raw frame files or `<id>/` per-frame directories.
    #[arg(long, required_unless_present = "features_in")]
    pub frames: Option<PathBuf>,
    /// Pass precomputed `<id>.dtpf` files through instead of embedding frames.
    #[arg(long, conflicts_with = "frames")]
    pub features_in: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Backbone seed; overrides `backbone.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV; defaults to the checkpoint path plus `.loss.csv`.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the total epoch count, keeping the high/low split ratio.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub nms_threshold: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub score_floor: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write precision-recall points as CSV.
    #[arg(long)]
    pub pr_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SizeArg {
    Tiny,
    Small,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    pub size: SizeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate conv weight gradients to confirm the suite catches it.
    #[arg(long, hide = true)]
    pub inject_conv_sign_error: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Extract(a) => cmd_extract(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.dtpf"))
}

fn frames_path(dir: &Path, id: &str) -> Option<PathBuf> {
    let file = dir.join(format!("{id}.bin"));
    if file.is_file() {
        return Some(file);
    }
    let sub = dir.join(id);
    sub.is_dir().then_some(sub)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = a.config.load()?;
    if a.classes < 2 || a.max_instances < 1 || a.videos < 1 {
        return Err(Error::Validation("need ≥ 2 classes, ≥ 1 video and ≥ 1 instance".into()));
    }
    let data = make_synthetic_corpus(&SynthConfig {
        seed: a.seed,
        num_videos: a.videos,
        num_classes: a.classes,
        max_instances: a.max_instances,
        frame_dim: cfg.backbone.frame_dim,
        ..Default::default()
    });
    let frames_dir = a.out.join("frames");
    create_dir(&frames_dir)?;
    write_corpus(&a.out.join("corpus.json"), &data.corpus)?;
    for (v, frames) in data.corpus.videos.iter().zip(&data.frames) {
        let path = frames_dir.join(format!("{}.bin", v.meta.id));
        std::fs::write(&path, frames.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    println!(
        "wrote {} videos to {} (frames in {})",
        data.corpus.videos.len(),
        a.out.join("corpus.json").display(),
        frames_dir.display()
    );
    Ok(())
}

pub fn cmd_extract(a: &ExtractArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(seed) = a.seed {
        cfg.backbone.seed = seed;
    }
    let corpus = load_corpus(&a.corpus)?;
    let (src_dir, passthrough) = match (&a.frames, &a.features_in) {
        (_, Some(dir)) => (dir, true),
        (Some(dir), None) => (dir, false),
        (None, None) => unreachable!("clap requires one source"),
    };
    let mut sources = Vec::with_capacity(corpus.videos.len());
    for v in &corpus.videos {
        let id = &v.meta.id;
        let path = if passthrough {
            Some(feature_path(src_dir, id)).filter(|p| p.is_file())
        } else {
            frames_path(src_dir, id)
        };
        let path = path.ok_or_else(|| {
            Error::Validation(format!("video {id}: no input found under {}", src_dir.display()))
        })?;
        sources.push((v, path));
    }
    create_dir(&a.out)?;

    let backbone = cfg.backbone();
    sources.par_iter().try_for_each(|(v, path)| -> Result<()> {
        let id = &v.meta.id;
        let with_id = |e: Error| Error::Validation(format!("video {id}: {e}"));
        let pyramid = if passthrough {
            let p = read_features(path)?;
            if p.dim() != cfg.model.feature_dim {
                return Err(with_id(Error::Config(format!(
                    "feature dimension {} does not match model.feature_dim {}",
                    p.dim(),
                    cfg.model.feature_dim
                ))));
            }
            extract_pyramid(PyramidSource::Features(p), &cfg.sampling, &backbone).map_err(with_id)?
        } else {
            let frames = Frames::read(path, cfg.backbone.frame_dim).map_err(with_id)?;
            if frames.num_frames() != v.meta.num_frames {
                return Err(with_id(Error::Validation(format!(
                    "{} frames on disk, corpus says {}",
                    frames.num_frames(),
                    v.meta.num_frames
                ))));
            }
            extract_pyramid(PyramidSource::Frames(&frames), &cfg.sampling, &backbone).map_err(with_id)?
        };
        write_features(&feature_path(&a.out, id), &pyramid)
    })?;
    println!("wrote {} feature files to {}", sources.len(), a.out.display());
    Ok(())
}

/// Read every video's pyramid, failing on the first missing or mismatched file
/// before anything else happens.
fn load_samples(corpus: &Corpus, dir: &Path, model: &Dtpn<f32>) -> Result<Vec<TrainingSample>> {
    let paths: Vec<(String, PathBuf)> = corpus
        .videos
        .iter()
        .map(|v| {
            let p = feature_path(dir, &v.meta.id);
            if p.is_file() {
                Ok((v.meta.id.clone(), p))
            } else {
                Err(Error::Validation(format!("video {}: missing feature file {}", v.meta.id, p.display())))
            }
        })
        .collect::<Result<_>>()?;
    let pyramids: Vec<_> = paths
        .par_iter()
        .map(|(id, p)| {
            let pyramid = read_features(p)?;
            model
                .check_pyramid(&pyramid)
                .map_err(|e| Error::Validation(format!("video {id}: {e}")))?;
            Ok(pyramid)
        })
        .collect::<Result<_>>()?;
    Ok(corpus
        .videos
        .iter()
        .zip(pyramids)
        .map(|(v, pyramid)| TrainingSample {
            id: v.meta.id.clone(),
            pyramid,
            gts: v.segments.clone(),
        })
        .collect())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(total) = a.epochs {
        let full = cfg.train.epochs();
        let hi = if full == 0 { total } else { (total * cfg.train.epochs_hi + full / 2) / full };
        cfg.train.epochs_hi = hi;
        cfg.train.epochs_lo = total - hi;
    }
    let corpus = load_corpus(&a.corpus)?;
    let mut model = Dtpn::new(cfg.model_config(corpus.num_classes())?, cfg.train.seed)?;
    let samples = load_samples(&corpus, &a.features, &model)?;
    let log_path = a
        .loss_log
        .clone()
        .unwrap_or_else(|| {
            let mut p = a.out.clone().into_os_string();
            p.push(".loss.csv");
            PathBuf::from(p)
        });
    let mut log = csv::Writer::from_path(&log_path).map_err(|e| csv_error(&log_path, e))?;
    log.write_record(["epoch", "learning_rate", "mean_loss"])
        .map_err(|e| csv_error(&log_path, e))?;
    let mut log_err = None;
    train(&samples, &mut model, &cfg.train, |e| {
        println!("epoch {:>3}  lr {:.0e}  loss {:.6}", e.epoch + 1, e.learning_rate, e.mean_loss);
        let row = [
            (e.epoch + 1).to_string(),
            e.learning_rate.to_string(),
            e.mean_loss.to_string(),
        ];
        if let Err(err) = log.write_record(&row).and_then(|_| log.flush().map_err(Into::into)) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_err {
        return Err(csv_error(&log_path, err));
    }
    save_checkpoint(&a.out, &model)?;
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

pub fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(t) = a.nms_threshold {
        cfg.detect.nms_threshold = t;
    }
    if let Some(k) = a.top_k {
        cfg.detect.top_k = k;
    }
    if let Some(f) = a.score_floor {
        cfg.detect.score_floor = f;
    }
    cfg.detect.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    let model = load_checkpoint(&a.checkpoint)?;
    if model.config().num_classes != corpus.num_classes() {
        return Err(Error::Validation(format!(
            "checkpoint predicts {} classes, corpus has {}",
            model.config().num_classes,
            corpus.num_classes()
        )));
    }
    let samples = load_samples(&corpus, &a.features, &model)?;
    let params = cfg.detect;
    let results: Vec<(String, Vec<Detection>)> = samples
        .par_iter()
        .map(|s| Ok((s.id.clone(), detect_video(&s.pyramid, &model, &params)?)))
        .collect::<Result<_>>()?;
    let results: BTreeMap<String, Vec<Detection>> = results.into_iter().collect();
    write_detections(&a.out, &results, &corpus)?;
    let total: usize = results.values().map(Vec::len).sum();
    println!("{total} detections over {} videos written to {}", results.len(), a.out.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let results = read_detections(&a.detections, &corpus)?;
    let report = evaluate(&results, &corpus, &ACTIVITYNET_THRESHOLDS)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.to_table());
    if let Some(p) = &a.json {
        std::fs::write(p, report.to_json()).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &a.pr_csv {
        std::fs::write(p, report.curves_csv()).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let opts = SuiteOptions {
        size: match a.size {
            SizeArg::Tiny => SuiteSize::Tiny,
            SizeArg::Small => SuiteSize::Small,
        },
        seed: a.seed,
        inject_conv_sign_error: a.inject_conv_sign_error,
    };
    let report = run_suite(&opts)?;
    for o in &report.outcomes {
        println!(
            "{:<24} {}  max rel. error {:.3e} over {} coordinates",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.report.max_rel_error,
            o.report.checked
        );
    }
    println!(
        "tolerance {TOLERANCE:e}, {:.2} s",
        report.elapsed.as_secs_f64()
    );
    report.into_result().map(|_| ())
}
