//! Command-line entry points: dataset synthesis, labeling, training,
//! evaluation, baselines, benchmarking, a live streaming mode with a speak
//! trigger, and a context-length sweep.
//!
//! Config precedence: defaults < config file < command-line flags. The fully
//! resolved config is echoed to stderr. Exit codes: 0 success, 2 config
//! error, 3 runtime/data error.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{
    generous_score_track, random_baseline_scores, silence_triggers, target_scores_to_tensor,
    write_triggers_csv,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_stream, write_report, ApVariant, EvalReport};
use crate::features::{
    read_feature_file, synth_conversation, write_feature_file, FeatureStream, SynthConfig,
};
use crate::labeling::{read_transcript, read_vad, segments_to_labels, smooth_segments, vad_to_labels};
use crate::model::{read_checkpoint, stream_forward, write_checkpoint, GruParams, ModelConfig, StreamState};
use crate::timebase::{FrameClock, LabelTrack};
use crate::training::{train_model, write_loss_log, TrainConfig};

/// Merged view of every tunable: model + training + synthesis + trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub fps: u32,
    pub d_in: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub horizon: usize,
    pub window_len: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub cue_lead: usize,
    pub dwell_background: f64,
    pub dwell_target: f64,
    pub dwell_other: f64,
    pub p_bg_to_target: f64,
    pub p_target_to_bg: f64,
    pub p_other_to_bg: f64,
    pub num_frames: usize,
    pub trigger_threshold: f64,
    pub silence_ms: u32,
    pub grace_frames: usize,
    pub ap_variant: ApVariant,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fps: 5,
            d_in: 16,
            d_embed: 32,
            d_hidden: 32,
            horizon: 10,
            window_len: 32,
            peak_lr: 1e-3,
            weight_decay: 5e-5,
            warmup_fraction: 0.4,
            epochs: 3,
            batch_size: 32,
            seed: 0,
            dim: 16,
            separation: 3.0,
            noise_sigma: 1.0,
            cue_lead: 3,
            dwell_background: 10.0,
            dwell_target: 10.0,
            dwell_other: 10.0,
            p_bg_to_target: 0.5,
            p_target_to_bg: 0.5,
            p_other_to_bg: 0.5,
            num_frames: 5000,
            trigger_threshold: 0.5,
            silence_ms: 600,
            grace_frames: 3,
            ap_variant: ApVariant::PositivesRank,
        }
    }
}

/// The set of keys accepted in config files and echoed to the run log.
pub const CONFIG_KEYS: [&str; 27] = [
    "fps",
    "d_in",
    "d_embed",
    "d_hidden",
    "horizon",
    "window_len",
    "peak_lr",
    "weight_decay",
    "warmup_fraction",
    "epochs",
    "batch_size",
    "seed",
    "dim",
    "separation",
    "noise_sigma",
    "cue_lead",
    "dwell_background",
    "dwell_target",
    "dwell_other",
    "p_bg_to_target",
    "p_target_to_bg",
    "p_other_to_bg",
    "num_frames",
    "trigger_threshold",
    "silence_ms",
    "grace_frames",
    "ap_variant",
];

fn parse_key<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::InvalidConfig(format!("key `{key}`: cannot parse `{}`", value.trim()))
    })
}

impl RunConfig {
    /// Applies one `key = value` assignment; unknown keys are rejected by
    /// name.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "fps" => self.fps = parse_key(key, value)?,
            "d_in" => self.d_in = parse_key(key, value)?,
            "d_embed" => self.d_embed = parse_key(key, value)?,
            "d_hidden" => self.d_hidden = parse_key(key, value)?,
            "horizon" => self.horizon = parse_key(key, value)?,
            "window_len" => self.window_len = parse_key(key, value)?,
            "peak_lr" => self.peak_lr = parse_key(key, value)?,
            "weight_decay" => self.weight_decay = parse_key(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse_key(key, value)?,
            "epochs" => self.epochs = parse_key(key, value)?,
            "batch_size" => self.batch_size = parse_key(key, value)?,
            "seed" => self.seed = parse_key(key, value)?,
            "dim" => self.dim = parse_key(key, value)?,
            "separation" => self.separation = parse_key(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_key(key, value)?,
            "cue_lead" => self.cue_lead = parse_key(key, value)?,
            "dwell_background" => self.dwell_background = parse_key(key, value)?,
            "dwell_target" => self.dwell_target = parse_key(key, value)?,
            "dwell_other" => self.dwell_other = parse_key(key, value)?,
            "p_bg_to_target" => self.p_bg_to_target = parse_key(key, value)?,
            "p_target_to_bg" => self.p_target_to_bg = parse_key(key, value)?,
            "p_other_to_bg" => self.p_other_to_bg = parse_key(key, value)?,
            "num_frames" => self.num_frames = parse_key(key, value)?,
            "trigger_threshold" => self.trigger_threshold = parse_key(key, value)?,
            "silence_ms" => self.silence_ms = parse_key(key, value)?,
            "grace_frames" => self.grace_frames = parse_key(key, value)?,
            "ap_variant" => {
                self.ap_variant = match value.trim() {
                    "positives-rank" => ApVariant::PositivesRank,
                    "all-thresholds" => ApVariant::AllThresholds,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "key `ap_variant`: expected positives-rank or all-thresholds, got `{other}`"
                        )))
                    }
                }
            }
            unknown => return Err(Error::UnknownKey(unknown.to_string())),
        }
        Ok(())
    }

    /// Loads a flat `key = value` config file ('#' starts a comment).
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "line {}: expected `key = value`, found `{line}`",
                    line_no + 1
                ))
            })?;
            self.apply_kv(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        FrameClock::new(self.fps)?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.synth_config().validate()?;
        if !(0.0..=1.0).contains(&self.trigger_threshold) {
            return Err(Error::InvalidConfig(
                "trigger_threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn clock(&self) -> FrameClock {
        FrameClock::new(self.fps).expect("validated fps")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.d_in, self.d_embed, self.d_hidden, self.horizon)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            window_len: self.window_len,
            peak_lr: self.peak_lr,
            weight_decay: self.weight_decay,
            warmup_fraction: self.warmup_fraction,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            state_dwell_mean_frames: [
                self.dwell_background,
                self.dwell_target,
                self.dwell_other,
            ],
            transition_weights: [
                [0.0, self.p_bg_to_target, 1.0 - self.p_bg_to_target],
                [self.p_target_to_bg, 0.0, 1.0 - self.p_target_to_bg],
                [self.p_other_to_bg, 1.0 - self.p_other_to_bg, 0.0],
            ],
            dim: self.dim,
            class_mean_separation: self.separation,
            noise_sigma: self.noise_sigma,
            cue_lead_frames: self.cue_lead,
            seed: self.seed,
        }
    }

    /// The fully resolved config as `key = value` lines.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let value = match key {
                "fps" => self.fps.to_string(),
                "d_in" => self.d_in.to_string(),
                "d_embed" => self.d_embed.to_string(),
                "d_hidden" => self.d_hidden.to_string(),
                "horizon" => self.horizon.to_string(),
                "window_len" => self.window_len.to_string(),
                "peak_lr" => self.peak_lr.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "warmup_fraction" => self.warmup_fraction.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "seed" => self.seed.to_string(),
                "dim" => self.dim.to_string(),
                "separation" => self.separation.to_string(),
                "noise_sigma" => self.noise_sigma.to_string(),
                "cue_lead" => self.cue_lead.to_string(),
                "dwell_background" => self.dwell_background.to_string(),
                "dwell_target" => self.dwell_target.to_string(),
                "dwell_other" => self.dwell_other.to_string(),
                "p_bg_to_target" => self.p_bg_to_target.to_string(),
                "p_target_to_bg" => self.p_target_to_bg.to_string(),
                "p_other_to_bg" => self.p_other_to_bg.to_string(),
                "num_frames" => self.num_frames.to_string(),
                "trigger_threshold" => self.trigger_threshold.to_string(),
                "silence_ms" => self.silence_ms.to_string(),
                "grace_frames" => self.grace_frames.to_string(),
                "ap_variant" => self.ap_variant.name().to_string(),
                _ => unreachable!(),
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

/// Builds the resolved config: defaults, then the file, then flag overrides
/// in order.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.load_file(path)?;
    }
    for (key, value) in overrides {
        cfg.apply_kv(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One output record of the streaming mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamRecord {
    pub frame: usize,
    /// Row-major `[horizon x 3]` probabilities.
    pub probs: Vec<f64>,
    pub trigger: bool,
}

/// Streams frames from `source` through the model, emitting one JSON record
/// per valid frame. A frame triggers when the offset-1 TargetSpeaker
/// probability exceeds `threshold`. Malformed rows are skipped with a
/// warning on `diag`; a row of the wrong dimension aborts.
pub fn stream_mode(
    params: &GruParams,
    threshold: f64,
    source: impl BufRead,
    mut sink: impl Write,
    mut diag: impl Write,
) -> Result<usize> {
    let mut state = StreamState::new(params);
    let mut emitted = 0usize;
    for (line_no, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f32>, _> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f32>())
            .collect();
        let frame = match parsed {
            Ok(values) if values.iter().all(|v| v.is_finite()) => values,
            _ => {
                writeln!(diag, "warning: skipping malformed frame on line {}", line_no + 1)?;
                continue;
            }
        };
        let scores = state.push_frame(&frame)?;
        emitted += emit_record(&mut sink, emitted, scores, threshold)?;
    }
    sink.flush()?;
    Ok(emitted)
}

/// Streams a recorded feature file through the model with the same output
/// contract as [`stream_mode`].
pub fn stream_file(
    params: &GruParams,
    threshold: f64,
    stream: &FeatureStream,
    mut sink: impl Write,
) -> Result<usize> {
    let mut state = StreamState::new(params);
    let mut emitted = 0usize;
    for i in 0..stream.num_frames() {
        let scores = state.push_frame(stream.frame(i))?;
        emitted += emit_record(&mut sink, emitted, scores, threshold)?;
    }
    sink.flush()?;
    Ok(emitted)
}

fn emit_record(
    sink: &mut impl Write,
    frame: usize,
    scores: crate::model::AnticipationScores,
    threshold: f64,
) -> Result<usize> {
    let trigger = scores.prob(0, 1) > threshold;
    let record = StreamRecord {
        frame,
        probs: scores.probs,
        trigger,
    };
    writeln!(sink, "{}", serde_json::to_string(&record).expect("serializable record"))?;
    Ok(1)
}

// ---------------------------------------------------------------------------
// Subcommand drivers, shared by the binary and the integration tests.
// ---------------------------------------------------------------------------

pub struct SynthArgs {
    pub out_features: PathBuf,
    pub out_labels: PathBuf,
}

pub fn run_synth(cfg: &RunConfig, args: &SynthArgs) -> Result<()> {
    let (stream, track) = synth_conversation(&cfg.synth_config(), cfg.num_frames, cfg.clock())?;
    write_feature_file(&stream, &args.out_features)?;
    track.write_csv(&args.out_labels)?;
    eprintln!(
        "synth: {} frames, dim {}, wrote {} and {}",
        stream.num_frames(),
        stream.dim(),
        args.out_features.display(),
        args.out_labels.display()
    );
    Ok(())
}

pub struct LabelArgs {
    pub transcript: Option<PathBuf>,
    pub vad: Option<PathBuf>,
    pub smooth: bool,
    pub duration_s: f64,
    pub out: PathBuf,
}

pub fn run_label(cfg: &RunConfig, args: &LabelArgs) -> Result<()> {
    let clock = cfg.clock();
    let outcome = match (&args.transcript, &args.vad) {
        (Some(path), None) => {
            let segments = read_transcript(path)?;
            segments_to_labels(&segments, args.duration_s, clock)?
        }
        (None, Some(path)) => {
            let spans = read_vad(path)?;
            let spans = if args.smooth {
                smooth_segments(&spans, 0.2)?
            } else {
                spans
            };
            vad_to_labels(&spans, args.duration_s, clock)?
        }
        _ => {
            return Err(Error::InvalidConfig(
                "label needs exactly one of --transcript or --vad".into(),
            ))
        }
    };
    if outcome.clipped_segments > 0 {
        eprintln!(
            "warning: {} segment(s) clipped at the {}s track end",
            outcome.clipped_segments, args.duration_s
        );
    }
    outcome.track.write_csv(&args.out)?;
    eprintln!("label: wrote {} frames to {}", outcome.track.len(), args.out.display());
    Ok(())
}

pub struct TrainArgs {
    pub features: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
    pub out_dir: PathBuf,
}

pub fn load_clips(features: &[PathBuf], labels: &[PathBuf], clock: FrameClock) -> Result<Vec<(FeatureStream, LabelTrack)>> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::InvalidConfig(
            "--features and --labels must be given the same number of times (at least once)".into(),
        ));
    }
    features
        .iter()
        .zip(labels)
        .map(|(f, l)| {
            let stream = read_feature_file(f)?;
            let track = LabelTrack::read_csv(l, clock)?;
            if stream.num_frames() != track.len() {
                return Err(Error::DimMismatch {
                    expected: stream.num_frames(),
                    got: track.len(),
                    context: "clip feature/label length",
                });
            }
            Ok((stream, track))
        })
        .collect()
}

pub fn run_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let clips = load_clips(&args.features, &args.labels, cfg.clock())?;
    std::fs::create_dir_all(&args.out_dir)?;
    let outcome = train_model(
        cfg.model_config(),
        &cfg.train_config(),
        &clips,
        Some(&args.out_dir),
    )?;
    write_checkpoint(&outcome.params, &args.out_dir.join("final.egck"))?;
    write_loss_log(&outcome.log, &args.out_dir.join("loss_log.csv"))?;
    let final_loss = outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    eprintln!(
        "train: {} iterations, final loss {final_loss:.6}, artifacts in {}",
        outcome.log.len(),
        args.out_dir.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub out_prefix: PathBuf,
}

fn report_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut text = prefix.as_os_str().to_owned();
    text.push(".txt");
    let mut csv = prefix.as_os_str().to_owned();
    csv.push(".csv");
    (PathBuf::from(text), PathBuf::from(csv))
}

pub fn run_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalReport> {
    let params = read_checkpoint(&args.checkpoint)?;
    let stream = read_feature_file(&args.features)?;
    let track = LabelTrack::read_csv(&args.labels, cfg.clock())?;
    let scores = stream_forward(&params, &stream)?;
    let report = evaluate_stream(&scores, &track, cfg.ap_variant)?;
    let (text, csv) = report_paths(&args.out_prefix);
    write_report(&report, &text, &csv)?;
    eprintln!(
        "eval: avg mAP {} over {} offsets, report at {}",
        report.avg_map.map(|v| format!("{v:.4}")).unwrap_or_else(|| "absent".into()),
        report.horizon,
        text.display()
    );
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Random,
    Silence,
}

pub struct BaselineArgs {
    pub kind: BaselineKind,
    pub labels: PathBuf,
    pub out_prefix: PathBuf,
    pub triggers_csv: Option<PathBuf>,
}

pub fn run_baseline(cfg: &RunConfig, args: &BaselineArgs) -> Result<EvalReport> {
    let track = LabelTrack::read_csv(&args.labels, cfg.clock())?;
    let scores = match args.kind {
        BaselineKind::Random => random_baseline_scores(track.len(), cfg.horizon, cfg.seed)?,
        BaselineKind::Silence => {
            let triggers = silence_triggers(&track, cfg.silence_ms)?;
            if let Some(path) = &args.triggers_csv {
                write_triggers_csv(&triggers, path)?;
            }
            let frame_scores = generous_score_track(&triggers, &track, cfg.grace_frames)?;
            target_scores_to_tensor(&frame_scores, cfg.horizon)
        }
    };
    let report = evaluate_stream(&scores, &track, cfg.ap_variant)?;
    let (text, csv) = report_paths(&args.out_prefix);
    write_report(&report, &text, &csv)?;
    let target_ap = report.per_class_avg[1]
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|| "absent".into());
    eprintln!("baseline: target-class AP {target_ap}, report at {}", text.display());
    Ok(report)
}

pub struct BenchArgs {
    pub full_scale: bool,
    pub frames: usize,
    pub repeats: usize,
    pub out_csv: Option<PathBuf>,
}

pub fn run_bench(cfg: &RunConfig, args: &BenchArgs) -> Result<()> {
    let model_cfg = if args.full_scale {
        ModelConfig::full_scale()
    } else {
        cfg.model_config()
    };
    let params = crate::model::init_params(model_cfg, cfg.seed)?;
    let result = crate::bench::measure_throughput(&params, args.frames, args.repeats)?;
    println!(
        "config in{}-e{}-h{}-a{}: {} params, {} flops/frame, {:.1} frames/s",
        model_cfg.d_in,
        model_cfg.d_embed,
        model_cfg.d_hidden,
        model_cfg.horizon,
        result.param_count,
        result.flops_per_frame,
        result.frames_per_second
    );
    if let Some(path) = &args.out_csv {
        crate::bench::write_bench_csv(&result, path)?;
    }
    Ok(())
}

pub struct SweepArgs {
    pub window_lens: Vec<usize>,
    pub out_csv: PathBuf,
}

/// Context-length sweep: trains one model per window length on the first 80%
/// of a synthetic conversation and reports held-out avg mAP per length.
pub fn run_sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<()> {
    if args.window_lens.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one window length".into()));
    }
    let (stream, track) = synth_conversation(&cfg.synth_config(), cfg.num_frames, cfg.clock())?;
    let split = (stream.num_frames() * 4) / 5;
    if split == 0 || split == stream.num_frames() {
        return Err(Error::InvalidValue("num_frames too small to split".into()));
    }
    let train_clip = (stream.slice(0, split), LabelTrack::new(track.clock, track.labels[..split].to_vec()));
    let eval_stream = stream.slice(split, stream.num_frames());
    let eval_track = LabelTrack::new(track.clock, track.labels[split..].to_vec());

    let mut w = std::io::BufWriter::new(std::fs::File::create(&args.out_csv)?);
    writeln!(w, "window_len,avg_map")?;
    for &window_len in &args.window_lens {
        let train_cfg = TrainConfig {
            window_len,
            ..cfg.train_config()
        };
        let outcome = train_model(cfg.model_config(), &train_cfg, std::slice::from_ref(&train_clip), None)?;
        let scores = stream_forward(&outcome.params, &eval_stream)?;
        let report = evaluate_stream(&scores, &eval_track, cfg.ap_variant)?;
        let avg = report.avg_map.unwrap_or(f64::NAN);
        writeln!(w, "{window_len},{avg:.6}")?;
        eprintln!("sweep: L = {window_len} -> avg mAP {avg:.4}");
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::timebase::NUM_CLASSES;

    #[test]
    fn config_defaults_and_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");

        // Empty file: all defaults.
        std::fs::write(&path, "").unwrap();
        let cfg = parse_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());

        // File beats defaults; flags beat the file.
        std::fs::write(&path, "fps = 5\nseed = 9 # comment\n").unwrap();
        let overrides = vec![("fps".to_string(), "10".to_string())];
        let cfg = parse_config(Some(&path), &overrides).unwrap();
        assert_eq!(cfg.fps, 10);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn config_rejects_unknown_key_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "hiden_dim = 64\n").unwrap();
        match parse_config(Some(&path), &[]) {
            Err(Error::UnknownKey(key)) => assert_eq!(key, "hiden_dim"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn config_rejects_type_and_invariant_violations() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.apply_kv("epochs", "three"),
            Err(Error::InvalidConfig(_))
        ));
        cfg.apply_kv("warmup_fraction", "1.5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_echo_lists_every_key() {
        let echo = RunConfig::default().echo();
        for key in CONFIG_KEYS {
            assert!(
                echo.lines().any(|l| l.starts_with(&format!("{key} = "))),
                "echo missing {key}"
            );
        }
    }

    #[test]
    fn stream_mode_zero_weights_never_triggers() {
        let cfg = ModelConfig::new(2, 2, 2, 2);
        let params = GruParams::zeros(cfg).unwrap();
        let input = "0.5 0.5\n1.0 -1.0\n";
        let mut out = Vec::new();
        let mut diag = Vec::new();
        let emitted =
            stream_mode(&params, 0.5, input.as_bytes(), &mut out, &mut diag).unwrap();
        assert_eq!(emitted, 2);
        let lines: Vec<StreamRecord> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        for (i, rec) in lines.iter().enumerate() {
            assert_eq!(rec.frame, i);
            assert!(!rec.trigger, "uniform 1/3 never exceeds 0.5");
            assert_eq!(rec.probs.len(), 2 * NUM_CLASSES);
        }
    }

    #[test]
    fn stream_mode_zero_threshold_always_triggers() {
        let cfg = ModelConfig::new(2, 2, 2, 1);
        let params = GruParams::zeros(cfg).unwrap();
        let input = "0.0 0.0\n";
        let mut out = Vec::new();
        stream_mode(&params, 0.0, input.as_bytes(), &mut out, std::io::sink()).unwrap();
        let rec: StreamRecord =
            serde_json::from_str(String::from_utf8(out).unwrap().lines().next().unwrap()).unwrap();
        assert!(rec.trigger);
    }

    #[test]
    fn stream_mode_skips_malformed_and_rejects_bad_dim() {
        let cfg = ModelConfig::new(2, 2, 2, 1);
        let params = init_params(cfg, 1).unwrap();
        let input = "0.1 0.2\nnot numbers\n0.3 0.4\n";
        let mut out = Vec::new();
        let mut diag = Vec::new();
        let emitted = stream_mode(&params, 0.5, input.as_bytes(), &mut out, &mut diag).unwrap();
        assert_eq!(emitted, 2);
        assert!(String::from_utf8(diag).unwrap().contains("line 2"));

        let bad_dim = "0.1 0.2 0.3\n";
        let err = stream_mode(&params, 0.5, bad_dim.as_bytes(), std::io::sink(), std::io::sink());
        assert!(matches!(err, Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn stream_replay_matches_stream_forward_bitwise() {
        let cfg = ModelConfig::new(3, 4, 4, 2);
        let params = init_params(cfg, 8).unwrap();
        let synth = SynthConfig {
            dim: 3,
            seed: 4,
            ..SynthConfig::default()
        };
        let (stream, _) = synth_conversation(&synth, 50, FrameClock::default()).unwrap();
        let expected = stream_forward(&params, &stream).unwrap();

        let mut out = Vec::new();
        stream_file(&params, 0.5, &stream, &mut out).unwrap();
        let records: Vec<StreamRecord> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.len(), expected.len());
        for (rec, exp) in records.iter().zip(&expected) {
            assert_eq!(rec.probs, exp.probs, "JSON round trip must be bit-exact");
        }
    }
}
