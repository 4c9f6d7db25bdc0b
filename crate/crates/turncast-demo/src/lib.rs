//! wasm-bindgen bindings for the browser demo: three interactive operations
//! over the core engine.
//!
//! 1. `synthesize` builds a labeled synthetic conversation (train + held-out
//!    streams) from the slider parameters.
//! 2. `train_epoch` runs one training epoch and returns the loss curve
//!    points so the page can animate training.
//! 3. `evaluate` scores the held-out stream: per-frame class probabilities,
//!    speak triggers, per-offset AP against the random baseline.
//!
//! All drawing happens in the page; this module only moves JSON.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use turncast::baselines::random_baseline_scores;
use turncast::eval::{evaluate_stream, ApVariant};
use turncast::features::{synth_conversation, FeatureStream, SynthConfig};
use turncast::labeling::anticipation_targets;
use turncast::model::{init_params, stream_forward, GruParams, ModelConfig};
use turncast::timebase::{FrameClock, LabelTrack, NUM_CLASSES};
use turncast::training::{
    adam_step, backward_window, lr_at, AdamState, GruGrads, TrainConfig, WindowSampler,
};

#[derive(Debug, Clone, Deserialize)]
struct DemoConfig {
    seed: u64,
    train_frames: usize,
    eval_frames: usize,
    dim: usize,
    separation: f64,
    noise_sigma: f64,
    cue_lead: usize,
    dwell_mean: f64,
    d_embed: usize,
    d_hidden: usize,
    horizon: usize,
    window_len: usize,
    epochs: usize,
    batch_size: usize,
    peak_lr: f64,
    threshold: f64,
}

impl DemoConfig {
    fn synth(&self, seed_offset: u64) -> SynthConfig {
        SynthConfig {
            state_dwell_mean_frames: [self.dwell_mean; NUM_CLASSES],
            dim: self.dim,
            class_mean_separation: self.separation,
            noise_sigma: self.noise_sigma,
            cue_lead_frames: self.cue_lead,
            seed: self.seed.wrapping_add(seed_offset),
            ..SynthConfig::default()
        }
    }

    fn model(&self) -> ModelConfig {
        ModelConfig::new(self.dim, self.d_embed, self.d_hidden, self.horizon)
    }

    fn train(&self) -> TrainConfig {
        TrainConfig {
            window_len: self.window_len,
            peak_lr: self.peak_lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Serialize)]
struct SynthesizeOut {
    train_labels: Vec<u8>,
    eval_labels: Vec<u8>,
    total_iters: usize,
}

#[derive(Serialize)]
struct LossPoint {
    iter: usize,
    lr: f64,
    loss: f64,
}

#[derive(Serialize)]
struct TrainEpochOut {
    epoch: usize,
    epochs_total: usize,
    points: Vec<LossPoint>,
    done: bool,
}

#[derive(Serialize)]
struct EvaluateOut {
    /// Per-frame probabilities at the first anticipated offset,
    /// `[background, target, other]` per frame.
    probs_offset1: Vec<[f64; 3]>,
    gt: Vec<u8>,
    trigger_frames: Vec<usize>,
    /// `ap[offset][class]`, NaN-free: absent cells come through as null.
    ap: Vec<Vec<Option<f64>>>,
    map_per_offset: Vec<Option<f64>>,
    avg_map: Option<f64>,
    random_avg_map: Option<f64>,
    offsets_s: Vec<f64>,
}

struct Trainer {
    params: GruParams,
    adam: AdamState,
    sampler: WindowSampler,
    epoch: usize,
    global_iter: usize,
    total_iters: usize,
}

/// The demo state machine, free of wasm types so it tests natively.
pub struct DemoCore {
    cfg: DemoConfig,
    train_clip: Option<(FeatureStream, LabelTrack)>,
    eval_clip: Option<(FeatureStream, LabelTrack)>,
    trainer: Option<Trainer>,
}

fn err_js(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl DemoCore {
    pub fn new(config_json: &str) -> Result<DemoCore, String> {
        let cfg: DemoConfig = serde_json::from_str(config_json).map_err(err_js)?;
        Ok(DemoCore {
            cfg,
            train_clip: None,
            eval_clip: None,
            trainer: None,
        })
    }

    /// Generates the train and held-out conversations and resets the
    /// trainer. Returns both label ribbons.
    pub fn synthesize(&mut self) -> Result<String, String> {
        let clock = FrameClock::default();
        let train = synth_conversation(&self.cfg.synth(1), self.cfg.train_frames, clock)
            .map_err(err_js)?;
        let eval = synth_conversation(&self.cfg.synth(2), self.cfg.eval_frames, clock)
            .map_err(err_js)?;

        let model_cfg = self.cfg.model();
        let params = init_params(model_cfg, self.cfg.seed).map_err(err_js)?;
        let adam = AdamState::new(&params);
        let sampler = WindowSampler::new(&[train.0.num_frames()], self.cfg.window_len);
        if sampler.usable_windows() == 0 {
            return Err(err_js("train stream shorter than the training window"));
        }
        let batches_per_epoch = (sampler.usable_windows() / self.cfg.batch_size).max(1);
        let total_iters = batches_per_epoch * self.cfg.epochs.max(1);

        let out = SynthesizeOut {
            train_labels: train.1.labels.iter().map(|c| c.code()).collect(),
            eval_labels: eval.1.labels.iter().map(|c| c.code()).collect(),
            total_iters,
        };
        self.trainer = Some(Trainer {
            params,
            adam,
            sampler,
            epoch: 0,
            global_iter: 0,
            total_iters,
        });
        self.train_clip = Some(train);
        self.eval_clip = Some(eval);
        serde_json::to_string(&out).map_err(err_js)
    }

    /// Runs one epoch of window-sampled training and returns its loss
    /// curve points.
    pub fn train_epoch(&mut self) -> Result<String, String> {
        let trainer = self
            .trainer
            .as_mut()
            .ok_or_else(|| err_js("call synthesize first"))?;
        let (stream, track) = self
            .train_clip
            .as_ref()
            .ok_or_else(|| err_js("call synthesize first"))?;
        if trainer.epoch >= self.cfg.epochs {
            return Err(err_js("all epochs already trained"));
        }
        let train_cfg = self.cfg.train();
        let horizon = self.cfg.horizon;
        let mut points = Vec::new();
        for batch in trainer
            .sampler
            .epoch_batches(train_cfg.batch_size, train_cfg.seed, trainer.epoch)
        {
            let lr = lr_at(trainer.global_iter, trainer.total_iters, &train_cfg).map_err(err_js)?;
            let mut grads = GruGrads::zeros_like(&trainer.params);
            let mut loss_sum = 0.0;
            for wref in &batch {
                let window = stream.slice(
                    wref.end_frame + 1 - train_cfg.window_len,
                    wref.end_frame + 1,
                );
                let targets =
                    anticipation_targets(track, wref.end_frame, horizon).map_err(err_js)?;
                let (g, loss) =
                    backward_window(&trainer.params, &window, &targets).map_err(err_js)?;
                grads.add_scaled(&g, 1.0 / batch.len() as f64);
                loss_sum += loss.value;
            }
            adam_step(
                &mut trainer.params,
                &grads,
                &mut trainer.adam,
                lr,
                train_cfg.weight_decay,
            )
            .map_err(err_js)?;
            points.push(LossPoint {
                iter: trainer.global_iter,
                lr,
                loss: loss_sum / batch.len() as f64,
            });
            trainer.global_iter += 1;
        }
        trainer.epoch += 1;
        let out = TrainEpochOut {
            epoch: trainer.epoch,
            epochs_total: self.cfg.epochs,
            points,
            done: trainer.epoch >= self.cfg.epochs,
        };
        serde_json::to_string(&out).map_err(err_js)
    }

    /// Scores the held-out stream with the current parameters.
    pub fn evaluate(&self) -> Result<String, String> {
        let trainer = self
            .trainer
            .as_ref()
            .ok_or_else(|| err_js("call synthesize first"))?;
        let (stream, track) = self
            .eval_clip
            .as_ref()
            .ok_or_else(|| err_js("call synthesize first"))?;
        let scores = stream_forward(&trainer.params, stream).map_err(err_js)?;
        let report = evaluate_stream(&scores, track, ApVariant::PositivesRank).map_err(err_js)?;

        let random = random_baseline_scores(track.len(), self.cfg.horizon, self.cfg.seed ^ 0x5AD)
            .map_err(err_js)?;
        let random_report = evaluate_stream(&random, track, ApVariant::PositivesRank).map_err(err_js)?;

        let probs_offset1: Vec<[f64; 3]> = scores
            .iter()
            .map(|s| [s.prob(0, 0), s.prob(0, 1), s.prob(0, 2)])
            .collect();
        let trigger_frames: Vec<usize> = scores
            .iter()
            .enumerate()
            .filter(|(_, s)| s.prob(0, 1) > self.cfg.threshold)
            .map(|(t, _)| t)
            .collect();
        let out = EvaluateOut {
            probs_offset1,
            gt: track.labels.iter().map(|c| c.code()).collect(),
            trigger_frames,
            ap: report.ap.iter().map(|row| row.to_vec()).collect(),
            map_per_offset: report.map_per_offset.clone(),
            avg_map: report.avg_map,
            random_avg_map: random_report.avg_map,
            offsets_s: (0..report.horizon).map(|j| report.offset_seconds(j)).collect(),
        };
        serde_json::to_string(&out).map_err(err_js)
    }
}

/// wasm-bindgen wrapper over [`DemoCore`].
#[wasm_bindgen]
pub struct Demo(DemoCore);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(config_json: &str) -> Result<Demo, JsValue> {
        DemoCore::new(config_json)
            .map(Demo)
            .map_err(|e| JsValue::from_str(&e))
    }

    pub fn synthesize(&mut self) -> Result<String, JsValue> {
        self.0.synthesize().map_err(|e| JsValue::from_str(&e))
    }

    pub fn train_epoch(&mut self) -> Result<String, JsValue> {
        self.0.train_epoch().map_err(|e| JsValue::from_str(&e))
    }

    pub fn evaluate(&self) -> Result<String, JsValue> {
        self.0.evaluate().map_err(|e| JsValue::from_str(&e))
    }
}
