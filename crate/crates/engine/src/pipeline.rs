//! High-level operations behind the service endpoints and CLI commands:
//! oracle generation, both training stages, generation, refinement, and
//! evaluation. Every operation works out of a [`RunConfig`], writes its
//! outputs under the config's output directory, and records a resolved
//! snapshot sufficient to reproduce it bit-exactly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::audio::load_audio_features;
use crate::blendshape::{ChannelLayout, EmotionStyleClip, ExpressionSequence};
use crate::checkpoint;
use crate::config::{RunConfig, Snapshot};
use crate::data::{self, LoadedClip};
use crate::denoiser::{self, DenoiserHyper, DenoiserModel};
use crate::error::{EngineError, Result};
use crate::fileio;
use crate::lip::{self, LipHyper, StyleSource};
use crate::metrics::{self, SequenceMetrics, DEFAULT_HIGH_FREQ_CUTOFF_HZ};
use crate::nn::adam::AdamState;
use crate::sampler::{self, LongSampleTrace};

fn ensure_output_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| EngineError::io(cfg.output_dir.display().to_string(), e))
}

fn write_loss_curve(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| EngineError::io(path.display().to_string(), e))?,
    );
    let mut inner = || -> std::io::Result<()> {
        writeln!(w, "epoch,loss")?;
        for (i, l) in losses.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, l)?;
        }
        w.flush()
    };
    inner().map_err(|e| EngineError::io(path.display().to_string(), e))
}

fn load_clips(cfg: &RunConfig) -> Result<(ChannelLayout, Vec<LoadedClip>, PathBuf)> {
    let manifest = cfg.dataset.clone().ok_or_else(|| {
        EngineError::Config("this command needs a dataset manifest (config key `dataset`)".into())
    })?;
    if !manifest.exists() {
        return Err(EngineError::Config(format!(
            "dataset manifest not found: {}",
            manifest.display()
        )));
    }
    let (layout, clips) = data::load_dataset(&manifest)?;
    Ok((layout, clips, manifest))
}

fn find_style_clip(clips: &[LoadedClip], id: &str) -> Result<EmotionStyleClip> {
    match clips.iter().find(|c| c.clip_id == id) {
        Some(c) => c.style_clip(),
        None => {
            let available: Vec<&str> = clips.iter().map(|c| c.clip_id.as_str()).collect();
            Err(EngineError::Dataset(format!(
                "unknown style clip {id:?}; available: {}",
                available.join(", ")
            )))
        }
    }
}

// ------------------------------------------------------------ oracle-gen

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleGenOutcome {
    pub manifest: PathBuf,
    pub layout: PathBuf,
    pub ground_truth: PathBuf,
    pub clip_ids: Vec<String>,
    pub snapshot: PathBuf,
}

/// Generate the synthetic oracle dataset under `<output_dir>/dataset`.
pub fn run_oracle_gen(cfg: &RunConfig) -> Result<OracleGenOutcome> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let layout = match &cfg.layout {
        Some(p) => ChannelLayout::from_json_file(p)?,
        None => ChannelLayout::arkit(),
    };
    let out = cfg.output_dir.join("dataset");
    let outcome = data::generate_oracle(&cfg.oracle, &layout, &out)?;
    let snapshot = Snapshot::new("oracle-gen", BTreeMap::new(), cfg.clone()).save()?;
    Ok(OracleGenOutcome {
        manifest: outcome.manifest_path,
        layout: outcome.layout_path,
        ground_truth: outcome.ground_truth_path,
        clip_ids: outcome.clip_ids,
        snapshot,
    })
}

// ------------------------------------------------------- train-diffusion

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub snapshot: PathBuf,
    pub epochs: usize,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
}

pub fn run_train_diffusion(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let (layout, clips, _) = load_clips(cfg)?;
    let dataset = data::chunk_dataset(&clips, cfg.diffusion_train.chunk_len)?;
    let schedule = cfg.schedule.build()?;
    let audio_dim = clips[0].audio.feature_dim();
    let input_dim = layout.total_dim();
    let hyper = DenoiserHyper {
        input_dim,
        cond_dim: input_dim + 1 + audio_dim,
        layers: cfg.denoiser.layers,
        heads: cfg.denoiser.heads,
        width: cfg.denoiser.width,
        ff_width: cfg.denoiser.ff_width(),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = DenoiserModel::new(hyper, &mut rng)?;
    let mut adam = AdamState::new(model.n_params());
    let record = denoiser::train(
        &mut model,
        &dataset,
        &cfg.diffusion_train,
        &schedule,
        &mut adam,
        &mut rng,
    )?;

    let checkpoint_path = cfg.output_dir.join("denoiser.ckpt");
    checkpoint::save_denoiser(&checkpoint_path, &model, &adam, cfg.diffusion_train.epochs, &rng)?;
    let curve_path = cfg.output_dir.join("denoiser_loss.csv");
    write_loss_curve(&curve_path, &record.epoch_losses)?;
    let snapshot = Snapshot::new("train-diffusion", BTreeMap::new(), cfg.clone()).save()?;
    Ok(TrainOutcome {
        checkpoint: checkpoint_path,
        loss_curve: curve_path,
        snapshot,
        epochs: record.epoch_losses.len(),
        first_epoch_loss: *record.epoch_losses.first().unwrap_or(&f64::NAN),
        final_epoch_loss: *record.epoch_losses.last().unwrap_or(&f64::NAN),
    })
}

// ------------------------------------------------------------- train-lip

pub fn run_train_lip(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let (layout, clips, _) = load_clips(cfg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let windows = data::build_lip_dataset(&clips, &layout, cfg.lip_train.window, 1, &mut rng)?;
    let hyper = LipHyper {
        audio_dim: clips[0].audio.feature_dim(),
        style_dim: layout.total_dim(),
        mouth_dim: layout.mouth_indices().len(),
        lstm_hidden: cfg.lip.lstm_hidden,
        emo_width: cfg.lip.emo_width,
    };
    let mut model = lip::LipModel::new(hyper, &mut rng)?;
    let mut adam = AdamState::new(model.n_params());
    let record = lip::train_lip(&mut model, &windows, &cfg.lip_train, &mut adam, &mut rng)?;

    let checkpoint_path = cfg.output_dir.join("lip.ckpt");
    checkpoint::save_lip(&checkpoint_path, &model, &adam, cfg.lip_train.epochs, &rng)?;
    let curve_path = cfg.output_dir.join("lip_loss.csv");
    write_loss_curve(&curve_path, &record.epoch_losses)?;
    let snapshot = Snapshot::new("train-lip", BTreeMap::new(), cfg.clone()).save()?;
    Ok(TrainOutcome {
        checkpoint: checkpoint_path,
        loss_curve: curve_path,
        snapshot,
        epochs: record.epoch_losses.len(),
        first_epoch_loss: *record.epoch_losses.first().unwrap_or(&f64::NAN),
        final_epoch_loss: *record.epoch_losses.last().unwrap_or(&f64::NAN),
    })
}

// --------------------------------------------------------------- sidecar

/// JSON sidecar written next to every generated or refined sequence CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSidecar {
    pub fps: f64,
    /// Layout file the CSV header follows.
    pub layout: PathBuf,
    pub seed: u64,
    pub guidance: f64,
    pub chunk_len: usize,
    pub stride: usize,
    /// Output indices where chunks 2..k started writing (the seams).
    pub chunk_boundaries: Vec<usize>,
    pub style_clip: String,
    pub trace: Option<LongSampleTrace>,
    /// Channel names replaced by refinement; None for raw generation.
    pub replaced_channels: Option<Vec<String>>,
}

impl SequenceSidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| EngineError::Validation(format!("sidecar serialize: {e}")))?;
        std::fs::write(path, text).map_err(|e| EngineError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| EngineError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }
}

// -------------------------------------------------------------- generate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateArgs {
    pub audio: PathBuf,
    pub style_clip: String,
    pub checkpoint: PathBuf,
    pub output_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateOutcome {
    pub sequence: PathBuf,
    pub sidecar: PathBuf,
    pub snapshot: PathBuf,
    pub frames: usize,
    pub chunks: usize,
}

/// Run long-term sampling from audio + style clip + checkpoint; writes the
/// raw diffusion-space sequence CSV and its sidecar.
pub fn run_generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<GenerateOutcome> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let (layout, clips, manifest_path) = load_clips(cfg)?;
    let style = find_style_clip(&clips, &args.style_clip)?;
    let manifest = data::ClipManifest::load(&manifest_path)?;
    let audio = load_audio_features(&args.audio, manifest.fps, &cfg.audio)?;
    let ckpt = checkpoint::load_denoiser(&args.checkpoint)?;
    let model = ckpt.model;
    let expected_cond = layout.total_dim() + 1 + audio.feature_dim();
    if model.hyper().input_dim != layout.total_dim() || model.hyper().cond_dim != expected_cond {
        return Err(EngineError::Config(format!(
            "checkpoint dims (input {}, cond {}) do not match layout/audio (input {}, cond {})",
            model.hyper().input_dim,
            model.hyper().cond_dim,
            layout.total_dim(),
            expected_cond
        )));
    }
    let schedule = cfg.schedule.build()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let (seq, trace) = sampler::long_term_sample(
        &model,
        layout.total_dim(),
        &audio,
        &style,
        &cfg.sampler,
        &schedule,
        &mut rng,
    )?;

    let seq_path = cfg.output_dir.join(format!("{}.csv", args.output_name));
    fileio::save_sequence(&seq_path, &seq, &layout)?;
    let sidecar = SequenceSidecar {
        fps: manifest.fps,
        layout: manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.layout),
        seed: cfg.seed,
        guidance: cfg.sampler.guidance,
        chunk_len: cfg.sampler.chunk_len,
        stride: cfg.sampler.stride(),
        chunk_boundaries: trace.boundaries(),
        style_clip: args.style_clip.clone(),
        trace: Some(trace),
        replaced_channels: None,
    };
    let sidecar_path = cfg.output_dir.join(format!("{}.side.json", args.output_name));
    sidecar.save(&sidecar_path)?;

    let mut snap_args = BTreeMap::new();
    snap_args.insert("audio".into(), args.audio.display().to_string());
    snap_args.insert("style_clip".into(), args.style_clip.clone());
    snap_args.insert("checkpoint".into(), args.checkpoint.display().to_string());
    snap_args.insert("output_name".into(), args.output_name.clone());
    let snapshot = Snapshot::new("generate", snap_args, cfg.clone()).save()?;

    Ok(GenerateOutcome {
        sequence: seq_path,
        sidecar: sidecar_path,
        snapshot,
        frames: seq.len(),
        chunks: sidecar.chunk_boundaries.len() + 1,
    })
}

// ---------------------------------------------------------------- refine

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineArgs {
    pub sequence: PathBuf,
    pub audio: PathBuf,
    pub style_clip: String,
    pub checkpoint: PathBuf,
    /// Sidecar of the input sequence; when present the refinement reuses
    /// the exact per-chunk style triples the sampler drew.
    pub sidecar: Option<PathBuf>,
    pub output_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub sequence: PathBuf,
    pub sidecar: PathBuf,
    pub snapshot: PathBuf,
    pub replaced_channels: Vec<String>,
}

/// Regenerate the mouth channels of a sequence; all other channels are
/// copied through bit-exact. Mouth predictions are clamped to `[0,1]` at
/// this export boundary.
pub fn run_refine(cfg: &RunConfig, args: &RefineArgs) -> Result<RefineOutcome> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let (layout, clips, manifest_path) = load_clips(cfg)?;
    let manifest = data::ClipManifest::load(&manifest_path)?;
    let style_clip = find_style_clip(&clips, &args.style_clip)?;
    let base = fileio::load_sequence(&args.sequence, &layout, manifest.fps, false)?;
    let audio = load_audio_features(&args.audio, manifest.fps, &cfg.audio)?;
    let ckpt = checkpoint::load_lip(&args.checkpoint)?;

    let styles = match &args.sidecar {
        Some(p) => {
            let sidecar = SequenceSidecar::load(p)?;
            match sidecar.trace {
                Some(trace) => StyleSource::from_trace(&style_clip, &trace, base.len())?,
                None => {
                    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
                    StyleSource::fixed_from_clip(&style_clip, &mut rng)
                }
            }
        }
        None => {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            StyleSource::fixed_from_clip(&style_clip, &mut rng)
        }
    };

    let refined = lip::refine(&ckpt.model, &base, &audio, &styles, &layout, cfg.lip_train.window)?;

    // Export clamp on the regenerated mouth channels only.
    let mouth = layout.mouth_indices();
    let mut out = refined.to_matrix();
    for f in 0..out.nrows() {
        for &ch in &mouth {
            out[[f, ch]] = out[[f, ch]].clamp(0.0, 1.0);
        }
    }
    let final_seq = ExpressionSequence::from_matrix(&out, refined.fps())?;

    let seq_path = cfg.output_dir.join(format!("{}.csv", args.output_name));
    fileio::save_sequence(&seq_path, &final_seq, &layout)?;
    let replaced: Vec<String> = mouth
        .iter()
        .map(|&i| layout.channel_name(i).to_string())
        .collect();
    let sidecar = SequenceSidecar {
        fps: manifest.fps,
        layout: manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.layout),
        seed: cfg.seed,
        guidance: cfg.sampler.guidance,
        chunk_len: cfg.sampler.chunk_len,
        stride: cfg.sampler.stride(),
        chunk_boundaries: args
            .sidecar
            .as_ref()
            .and_then(|p| SequenceSidecar::load(p).ok())
            .map(|s| s.chunk_boundaries)
            .unwrap_or_default(),
        style_clip: args.style_clip.clone(),
        trace: None,
        replaced_channels: Some(replaced.clone()),
    };
    let sidecar_path = cfg.output_dir.join(format!("{}.side.json", args.output_name));
    sidecar.save(&sidecar_path)?;

    let mut snap_args = BTreeMap::new();
    snap_args.insert("sequence".into(), args.sequence.display().to_string());
    snap_args.insert("audio".into(), args.audio.display().to_string());
    snap_args.insert("style_clip".into(), args.style_clip.clone());
    snap_args.insert("checkpoint".into(), args.checkpoint.display().to_string());
    if let Some(p) = &args.sidecar {
        snap_args.insert("sidecar".into(), p.display().to_string());
    }
    snap_args.insert("output_name".into(), args.output_name.clone());
    let snapshot = Snapshot::new("refine", snap_args, cfg.clone()).save()?;

    Ok(RefineOutcome {
        sequence: seq_path,
        sidecar: sidecar_path,
        snapshot,
        replaced_channels: replaced,
    })
}

// ------------------------------------------------------------------ eval

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    pub pred: PathBuf,
    pub truth: PathBuf,
    /// Sidecar of the prediction; provides chunk boundaries for the
    /// continuity metric.
    pub pred_sidecar: Option<PathBuf>,
    pub output_name: String,
    /// When set, also writes a per-boundary jump curve CSV.
    pub jump_curve: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report_path: PathBuf,
    pub report: metrics::EvalReport,
    pub jump_curve: Option<PathBuf>,
    pub snapshot: PathBuf,
}

pub fn run_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalOutcome> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let layout = cfg.resolve_layout()?;
    let fps = match &cfg.dataset {
        Some(p) if p.exists() => data::ClipManifest::load(p)?.fps,
        _ => ExpressionSequence::DEFAULT_FPS,
    };
    let pred = fileio::load_sequence(&args.pred, &layout, fps, false)?;
    let truth = fileio::load_sequence(&args.truth, &layout, fps, false)?;

    let boundaries = match &args.pred_sidecar {
        Some(p) => SequenceSidecar::load(p)?.chunk_boundaries,
        None => Vec::new(),
    };
    let (jumps, max_jump) = if boundaries.is_empty() {
        (Vec::new(), None)
    } else {
        let (per, global) = sampler::continuity_jump(&pred, &boundaries)?;
        (per, Some(global))
    };

    let m = SequenceMetrics {
        param_lmd: metrics::param_lmd(&pred, &truth)?,
        mouth_mse: metrics::mouth_mse(&pred, &truth, &layout)?,
        high_freq_eye_energy: metrics::high_freq_energy(&pred, DEFAULT_HIGH_FREQ_CUTOFF_HZ, &layout)?
            .eye_average,
        diversity: metrics::entry_diff_fraction(&pred, &truth, 1e-3)?,
        boundary_jumps: jumps.clone(),
        max_boundary_jump: max_jump,
    };
    let name = args
        .pred
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let report = metrics::EvalReport::from_sequences(vec![(name, m)])?;

    let report_path = cfg.output_dir.join(format!("{}.json", args.output_name));
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| EngineError::Validation(format!("report serialize: {e}")))?;
    std::fs::write(&report_path, text)
        .map_err(|e| EngineError::io(report_path.display().to_string(), e))?;

    let jump_curve = if args.jump_curve {
        let path = cfg.output_dir.join(format!("{}_jumps.csv", args.output_name));
        let mut w = String::from("boundary,jump\n");
        for (b, j) in boundaries.iter().zip(&jumps) {
            w.push_str(&format!("{b},{j}\n"));
        }
        std::fs::write(&path, w).map_err(|e| EngineError::io(path.display().to_string(), e))?;
        Some(path)
    } else {
        None
    };

    let mut snap_args = BTreeMap::new();
    snap_args.insert("pred".into(), args.pred.display().to_string());
    snap_args.insert("truth".into(), args.truth.display().to_string());
    if let Some(p) = &args.pred_sidecar {
        snap_args.insert("pred_sidecar".into(), p.display().to_string());
    }
    snap_args.insert("output_name".into(), args.output_name.clone());
    snap_args.insert("jump_curve".into(), args.jump_curve.to_string());
    let snapshot = Snapshot::new("eval", snap_args, cfg.clone()).save()?;

    Ok(EvalOutcome {
        report_path,
        report,
        jump_curve,
        snapshot,
    })
}

// ----------------------------------------------------------------- rerun

/// Execute a resolved snapshot: dispatches to the recorded command with
/// the recorded arguments.
pub fn run_snapshot(snap: &Snapshot) -> Result<serde_json::Value> {
    let cfg = &snap.config;
    let arg = |k: &str| -> Result<String> {
        snap.args
            .get(k)
            .cloned()
            .ok_or_else(|| EngineError::Config(format!("snapshot missing argument {k:?}")))
    };
    let value = match snap.command.as_str() {
        "oracle-gen" => serde_json::to_value(run_oracle_gen(cfg)?),
        "train-diffusion" => serde_json::to_value(run_train_diffusion(cfg)?),
        "train-lip" => serde_json::to_value(run_train_lip(cfg)?),
        "generate" => {
            let args = GenerateArgs {
                audio: PathBuf::from(arg("audio")?),
                style_clip: arg("style_clip")?,
                checkpoint: PathBuf::from(arg("checkpoint")?),
                output_name: arg("output_name")?,
            };
            serde_json::to_value(run_generate(cfg, &args)?)
        }
        "refine" => {
            let args = RefineArgs {
                sequence: PathBuf::from(arg("sequence")?),
                audio: PathBuf::from(arg("audio")?),
                style_clip: arg("style_clip")?,
                checkpoint: PathBuf::from(arg("checkpoint")?),
                sidecar: snap.args.get("sidecar").map(PathBuf::from),
                output_name: arg("output_name")?,
            };
            serde_json::to_value(run_refine(cfg, &args)?)
        }
        "eval" => {
            let args = EvalArgs {
                pred: PathBuf::from(arg("pred")?),
                truth: PathBuf::from(arg("truth")?),
                pred_sidecar: snap.args.get("pred_sidecar").map(PathBuf::from),
                output_name: arg("output_name")?,
                jump_curve: snap.args.get("jump_curve").map(|v| v == "true").unwrap_or(false),
            };
            serde_json::to_value(run_eval(cfg, &args)?)
        }
        other => {
            return Err(EngineError::Config(format!(
                "snapshot names unknown command {other:?}"
            )))
        }
    };
    value.map_err(|e| EngineError::Validation(format!("outcome serialize: {e}")))
}
