//! Window-sampled supervised training: masked cross-entropy over
//! anticipation targets, exact backpropagation through time, Adam with a
//! warmup-cosine schedule.
//!
//! The loss is applied at the final window step only and averaged over the
//! anticipated offsets. The backward pass recomputes the forward in f64 from
//! the f32 parameters, so gradients are exact for the loss the finite
//! difference oracle sees.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureStream;
use crate::labeling::{anticipation_targets, AnticipationTargets};
use crate::linalg::{axpy_f64, dot_f64, Mat64};
use crate::model::{
    softmax_stable, AnticipationScores, BlockKind, GruParams, ModelConfig, BLOCK_NAMES,
};
use crate::timebase::{LabelTrack, NUM_CLASSES};

/// Probability floor before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Window length in frames.
    pub window_len: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Desk-scale default learning rate; the full-scale preset keeps the
        // reference 7e-5.
        TrainConfig {
            window_len: 32,
            peak_lr: 1e-3,
            weight_decay: 5e-5,
            warmup_fraction: 0.4,
            epochs: 3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reference full-scale hyperparameters: peak 7e-5, decay 5e-5, 40%
    /// linear warmup.
    pub fn full_scale() -> Self {
        TrainConfig {
            peak_lr: 7e-5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::InvalidConfig("window_len must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidConfig("peak_lr must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "warmup_fraction must be in (0, 1)".into(),
            ));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-step loss weights over a training window. Recurrent-model training
/// supervises the final step only, which is the mask [`backward_window`]
/// realizes implicitly by reading the head at the last hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMask {
    pub alpha_t: Vec<f64>,
}

impl LossMask {
    /// Mask for a window of `len` steps with the designated step at the end.
    pub fn final_step(len: usize) -> Self {
        let mut alpha_t = vec![0.0; len];
        if let Some(last) = alpha_t.last_mut() {
            *last = 1.0;
        }
        LossMask { alpha_t }
    }

    /// Exactly one step carries weight 1 and it is the last one.
    pub fn validate(&self) -> Result<()> {
        let ones = self.alpha_t.iter().filter(|&&w| w == 1.0).count();
        let zeros = self.alpha_t.iter().filter(|&&w| w == 0.0).count();
        if ones != 1 || zeros != self.alpha_t.len() - 1 || self.alpha_t.last() != Some(&1.0) {
            return Err(Error::InvalidConfig(
                "loss mask must be 1 at the final step and 0 elsewhere".into(),
            ));
        }
        Ok(())
    }
}

/// Cross-entropy outcome, with the edge-case flags the contract names.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// True when the target list was empty (loss defined as 0).
    pub no_target: bool,
    /// Count of offsets where the true-class probability hit the clamp.
    pub clamped: usize,
}

/// Mean over anticipated offsets of `-log scores[j][targets[j]]`.
pub fn cross_entropy_loss(scores: &AnticipationScores, targets: &AnticipationTargets) -> Result<CrossEntropy> {
    let m = targets.targets.len();
    if m > scores.horizon {
        return Err(Error::DimMismatch {
            expected: scores.horizon,
            got: m,
            context: "targets longer than horizon",
        });
    }
    if m == 0 {
        return Ok(CrossEntropy {
            value: 0.0,
            no_target: true,
            clamped: 0,
        });
    }
    let mut sum = 0.0;
    let mut clamped = 0;
    for (j, target) in targets.targets.iter().enumerate() {
        let p = scores.prob(j, target.code() as usize);
        let p = if p < PROB_CLAMP {
            clamped += 1;
            PROB_CLAMP
        } else {
            p
        };
        sum -= p.ln();
    }
    Ok(CrossEntropy {
        value: sum / m as f64,
        no_target: false,
        clamped,
    })
}

/// Gradients, shaped like the parameters but in f64.
#[derive(Debug, Clone)]
pub struct GruGrads {
    pub blocks: Vec<Vec<f64>>,
}

impl GruGrads {
    pub fn zeros_like(params: &GruParams) -> Self {
        GruGrads {
            blocks: params
                .blocks()
                .iter()
                .map(|(_, data, _)| vec![0.0; data.len()])
                .collect(),
        }
    }

    pub fn block(&self, name: &str) -> &[f64] {
        let idx = BLOCK_NAMES.iter().position(|&n| n == name).expect("known block");
        &self.blocks[idx]
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &GruGrads, scale: f64) {
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            axpy_f64(scale, src, dst);
        }
    }
}

/// f64 view of the parameters used by the training-path forward/backward.
struct Params64 {
    cfg: ModelConfig,
    w_embed: Mat64,
    b_embed: Vec<f64>,
    w_z: Mat64,
    u_z: Mat64,
    b_z: Vec<f64>,
    w_r: Mat64,
    u_r: Mat64,
    b_r: Vec<f64>,
    w_h: Mat64,
    u_h: Mat64,
    b_h: Vec<f64>,
    w_out: Mat64,
    b_out: Vec<f64>,
}

impl Params64 {
    fn from_params(p: &GruParams) -> Self {
        let up = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| f64::from(x)).collect() };
        Params64 {
            cfg: p.cfg,
            w_embed: Mat64::from_f32(&p.w_embed),
            b_embed: up(&p.b_embed),
            w_z: Mat64::from_f32(&p.w_z),
            u_z: Mat64::from_f32(&p.u_z),
            b_z: up(&p.b_z),
            w_r: Mat64::from_f32(&p.w_r),
            u_r: Mat64::from_f32(&p.u_r),
            b_r: up(&p.b_r),
            w_h: Mat64::from_f32(&p.w_h),
            u_h: Mat64::from_f32(&p.u_h),
            b_h: up(&p.b_h),
            w_out: Mat64::from_f32(&p.w_out),
            b_out: up(&p.b_out),
        }
    }
}

fn sigmoid64(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Forward trace of one window, everything kept for the backward pass.
struct Trace {
    /// Raw input frames, cast to f64.
    x: Vec<Vec<f64>>,
    embedded: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    cand: Vec<Vec<f64>>,
    /// h[0] is the initial zero state; h[t+1] follows step t.
    h: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

fn forward_trace(p: &Params64, window: &FeatureStream) -> Result<Trace> {
    let cfg = &p.cfg;
    let steps = window.num_frames();
    let mut trace = Trace {
        x: Vec::with_capacity(steps),
        embedded: Vec::with_capacity(steps),
        z: Vec::with_capacity(steps),
        r: Vec::with_capacity(steps),
        cand: Vec::with_capacity(steps),
        h: vec![vec![0.0; cfg.d_hidden]],
        probs: Vec::new(),
    };
    for t in 0..steps {
        let x: Vec<f64> = window.frame(t).iter().map(|&v| f64::from(v)).collect();
        let mut e = vec![0.0; cfg.d_embed];
        for (j, ej) in e.iter_mut().enumerate() {
            *ej = (dot_f64(p.w_embed.row(j), &x) + p.b_embed[j]).tanh();
        }
        let h_prev = trace.h.last().expect("initialized").clone();
        let mut z = vec![0.0; cfg.d_hidden];
        let mut r = vec![0.0; cfg.d_hidden];
        for i in 0..cfg.d_hidden {
            z[i] = sigmoid64(dot_f64(p.w_z.row(i), &e) + dot_f64(p.u_z.row(i), &h_prev) + p.b_z[i]);
            r[i] = sigmoid64(dot_f64(p.w_r.row(i), &e) + dot_f64(p.u_r.row(i), &h_prev) + p.b_r[i]);
        }
        let rh: Vec<f64> = r.iter().zip(&h_prev).map(|(ri, hi)| ri * hi).collect();
        let mut cand = vec![0.0; cfg.d_hidden];
        let mut h_next = vec![0.0; cfg.d_hidden];
        for i in 0..cfg.d_hidden {
            cand[i] = (dot_f64(p.w_h.row(i), &e) + dot_f64(p.u_h.row(i), &rh) + p.b_h[i]).tanh();
            h_next[i] = (1.0 - z[i]) * h_prev[i] + z[i] * cand[i];
        }
        trace.x.push(x);
        trace.embedded.push(e);
        trace.z.push(z);
        trace.r.push(r);
        trace.cand.push(cand);
        trace.h.push(h_next);
    }
    let h_final = trace.h.last().expect("at least the initial state");
    for j in 0..cfg.horizon {
        let logits: Vec<f64> = (0..NUM_CLASSES)
            .map(|k| {
                let o = j * NUM_CLASSES + k;
                dot_f64(p.w_out.row(o), h_final) + p.b_out[o]
            })
            .collect();
        trace.probs.extend_from_slice(&softmax_stable(&logits)?);
    }
    Ok(trace)
}

/// Loss of one window under the f64 training-path forward. This is the exact
/// function [`backward_window`] differentiates.
pub fn window_loss(params: &GruParams, window: &FeatureStream, targets: &AnticipationTargets) -> Result<CrossEntropy> {
    check_window(params, window)?;
    let p64 = Params64::from_params(params);
    let trace = forward_trace(&p64, window)?;
    let scores = AnticipationScores {
        horizon: params.cfg.horizon,
        probs: trace.probs,
    };
    cross_entropy_loss(&scores, targets)
}

fn check_window(params: &GruParams, window: &FeatureStream) -> Result<()> {
    if window.dim() != params.cfg.d_in {
        return Err(Error::DimMismatch {
            expected: params.cfg.d_in,
            got: window.dim(),
            context: "training window",
        });
    }
    if window.num_frames() == 0 {
        return Err(Error::InvalidValue("empty training window".into()));
    }
    Ok(())
}

/// Exact gradients of the final-step cross-entropy with respect to every
/// parameter, via reverse-mode accumulation through all window steps.
pub fn backward_window(
    params: &GruParams,
    window: &FeatureStream,
    targets: &AnticipationTargets,
) -> Result<(GruGrads, CrossEntropy)> {
    check_window(params, window)?;
    let cfg = params.cfg;
    let p = Params64::from_params(params);
    let trace = forward_trace(&p, window)?;
    let scores = AnticipationScores {
        horizon: cfg.horizon,
        probs: trace.probs.clone(),
    };
    let loss = cross_entropy_loss(&scores, targets)?;

    let mut grads = GruGrads::zeros_like(params);
    let m = targets.targets.len();
    if m == 0 {
        return Ok((grads, loss));
    }

    let steps = window.num_frames();
    let dh_dim = cfg.d_hidden;

    // Split the gradient blocks mutably by name, in serialization order.
    let mut block_iter = grads.blocks.iter_mut();
    let g_w_embed = block_iter.next().expect("w_embed");
    let g_b_embed = block_iter.next().expect("b_embed");
    let g_w_z = block_iter.next().expect("w_z");
    let g_u_z = block_iter.next().expect("u_z");
    let g_b_z = block_iter.next().expect("b_z");
    let g_w_r = block_iter.next().expect("w_r");
    let g_u_r = block_iter.next().expect("u_r");
    let g_b_r = block_iter.next().expect("b_r");
    let g_w_h = block_iter.next().expect("w_h");
    let g_u_h = block_iter.next().expect("u_h");
    let g_b_h = block_iter.next().expect("b_h");
    let g_w_out = block_iter.next().expect("w_out");
    let g_b_out = block_iter.next().expect("b_out");

    // Head: dlogits = (p - onehot(y)) / m on supervised offset rows.
    let h_final = &trace.h[steps];
    let mut dh = vec![0.0; dh_dim];
    for (j, target) in targets.targets.iter().enumerate() {
        for k in 0..NUM_CLASSES {
            let o = j * NUM_CLASSES + k;
            let mut dlogit = scores.prob(j, k);
            if k == target.code() as usize {
                // Offsets clamped at the probability floor keep the raw
                // softmax gradient; the clamp only guards the log.
                dlogit -= 1.0;
            }
            dlogit /= m as f64;
            g_b_out[o] += dlogit;
            axpy_f64(dlogit, h_final, &mut g_w_out[o * dh_dim..(o + 1) * dh_dim]);
            axpy_f64(dlogit, p.w_out.row(o), &mut dh);
        }
    }

    // BPTT through the recurrent steps.
    for t in (0..steps).rev() {
        let h_prev = &trace.h[t];
        let z = &trace.z[t];
        let r = &trace.r[t];
        let cand = &trace.cand[t];
        let e = &trace.embedded[t];
        let x = &trace.x[t];

        let mut dz = vec![0.0; dh_dim];
        let mut dcand_pre = vec![0.0; dh_dim];
        let mut dh_prev = vec![0.0; dh_dim];
        for i in 0..dh_dim {
            dz[i] = dh[i] * (cand[i] - h_prev[i]) * z[i] * (1.0 - z[i]);
            dcand_pre[i] = dh[i] * z[i] * (1.0 - cand[i] * cand[i]);
            dh_prev[i] = dh[i] * (1.0 - z[i]);
        }

        // Candidate path: pre-activation feeds W_h e + U_h (r . h_prev) + b_h.
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(ri, hi)| ri * hi).collect();
        let mut drh = vec![0.0; dh_dim];
        for i in 0..dh_dim {
            g_b_h[i] += dcand_pre[i];
            axpy_f64(dcand_pre[i], e, &mut g_w_h[i * cfg.d_embed..(i + 1) * cfg.d_embed]);
            axpy_f64(dcand_pre[i], &rh, &mut g_u_h[i * dh_dim..(i + 1) * dh_dim]);
            axpy_f64(dcand_pre[i], p.u_h.row(i), &mut drh);
        }
        let mut dr = vec![0.0; dh_dim];
        for i in 0..dh_dim {
            dr[i] = drh[i] * h_prev[i] * r[i] * (1.0 - r[i]);
            dh_prev[i] += drh[i] * r[i];
        }

        // Gate paths.
        let mut de = vec![0.0; cfg.d_embed];
        for i in 0..dh_dim {
            g_b_z[i] += dz[i];
            axpy_f64(dz[i], e, &mut g_w_z[i * cfg.d_embed..(i + 1) * cfg.d_embed]);
            axpy_f64(dz[i], h_prev, &mut g_u_z[i * dh_dim..(i + 1) * dh_dim]);
            axpy_f64(dz[i], p.u_z.row(i), &mut dh_prev);
            axpy_f64(dz[i], p.w_z.row(i), &mut de);

            g_b_r[i] += dr[i];
            axpy_f64(dr[i], e, &mut g_w_r[i * cfg.d_embed..(i + 1) * cfg.d_embed]);
            axpy_f64(dr[i], h_prev, &mut g_u_r[i * dh_dim..(i + 1) * dh_dim]);
            axpy_f64(dr[i], p.u_r.row(i), &mut dh_prev);
            axpy_f64(dr[i], p.w_r.row(i), &mut de);

            axpy_f64(dcand_pre[i], p.w_h.row(i), &mut de);
        }

        // Embedding: e = tanh(W_e x + b_e).
        for j in 0..cfg.d_embed {
            let da = de[j] * (1.0 - e[j] * e[j]);
            g_b_embed[j] += da;
            axpy_f64(da, x, &mut g_w_embed[j * cfg.d_in..(j + 1) * cfg.d_in]);
        }

        dh = dh_prev;
    }

    for (name, block) in BLOCK_NAMES.iter().zip(&grads.blocks) {
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { block: name });
        }
    }
    Ok((grads, loss))
}

/// Learning rate at `iter` of `total_iters`: linear warmup to the peak over
/// the first `warmup_fraction`, then cosine decay to zero.
pub fn lr_at(iter: usize, total_iters: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_iters == 0 {
        return Err(Error::InvalidConfig("total_iters must be >= 1".into()));
    }
    if iter > total_iters {
        return Err(Error::InvalidValue(format!(
            "iter {iter} beyond total {total_iters}"
        )));
    }
    let w = cfg.warmup_fraction * total_iters as f64;
    let i = iter as f64;
    if i < w {
        Ok(cfg.peak_lr * i / w)
    } else {
        let progress = (i - w) / (total_iters as f64 - w);
        Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Adam moment state, aligned with the parameter blocks.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &GruParams) -> Self {
        AdamState {
            m: params
                .blocks()
                .iter()
                .map(|(_, data, _)| vec![0.0; data.len()])
                .collect(),
            v: params
                .blocks()
                .iter()
                .map(|(_, data, _)| vec![0.0; data.len()])
                .collect(),
            step: 0,
        }
    }
}

/// One Adam update with decoupled weight decay (`wd * lr`, weights only).
pub fn adam_step(
    params: &mut GruParams,
    grads: &GruGrads,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (b, (_, data, kind)) in params.blocks_mut().into_iter().enumerate() {
        let g = &grads.blocks[b];
        if g.len() != data.len() {
            return Err(Error::DimMismatch {
                expected: data.len(),
                got: g.len(),
                context: "adam gradient block",
            });
        }
        let m = &mut state.m[b];
        let v = &mut state.v[b];
        for i in 0..data.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut theta = f64::from(data[i]);
            theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if kind == BlockKind::Weight {
                theta -= lr * weight_decay * theta;
            }
            data[i] = theta as f32;
        }
    }
    Ok(())
}

/// One training sample: a clip index plus a window end-frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub clip: usize,
    /// Window covers frames `end_frame - L + 1 ..= end_frame`.
    pub end_frame: usize,
}

/// Deterministic per-epoch window sampler: end-frames uniform over
/// `[L, T-1]` of each clip, clips weighted by their usable window count.
/// Clips shorter than `L + 1` frames are skipped.
pub struct WindowSampler {
    /// (clip index, first valid end-frame, count of valid end-frames)
    ranges: Vec<(usize, usize, usize)>,
    total: usize,
    pub skipped_clips: usize,
}

impl WindowSampler {
    pub fn new(clip_lengths: &[usize], window_len: usize) -> Self {
        let mut ranges = Vec::new();
        let mut total = 0;
        let mut skipped = 0;
        for (clip, &t) in clip_lengths.iter().enumerate() {
            if t > window_len {
                let count = t - window_len; // end frames L ..= T-1
                ranges.push((clip, window_len, count));
                total += count;
            } else {
                skipped += 1;
            }
        }
        WindowSampler {
            ranges,
            total,
            skipped_clips: skipped,
        }
    }

    pub fn usable_windows(&self) -> usize {
        self.total
    }

    fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
        // splitmix64 over (seed, epoch) so epochs draw independent streams.
        let mut s = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        s = (s ^ (s >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        s = (s ^ (s >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        ChaCha8Rng::seed_from_u64(s ^ (s >> 31))
    }

    /// All batches for one epoch, deterministic per (seed, epoch).
    pub fn epoch_batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: usize,
    ) -> Vec<Vec<WindowRef>> {
        if self.total == 0 {
            return Vec::new();
        }
        let mut rng = Self::epoch_rng(seed, epoch);
        let num_batches = (self.total / batch_size).max(1);
        let mut batches = Vec::with_capacity(num_batches);
        for _ in 0..num_batches {
            let mut batch = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                let mut idx = rng.random_range(0..self.total);
                for &(clip, first, count) in &self.ranges {
                    if idx < count {
                        batch.push(WindowRef {
                            clip,
                            end_frame: first + idx,
                        });
                        break;
                    }
                    idx -= count;
                }
            }
            batches.push(batch);
        }
        batches
    }
}

/// One loss-log record, serialized as CSV `epoch,iter,lr,loss`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Output of [`train_model`].
pub struct TrainOutcome {
    pub params: GruParams,
    pub log: Vec<LossRecord>,
}

pub fn write_loss_log(log: &[LossRecord], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,iter,lr,loss")?;
    for rec in log {
        writeln!(w, "{},{},{},{}", rec.epoch, rec.iter, rec.lr, rec.loss)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the model on (features, labels) clips. Deterministic per config;
/// writes a checkpoint per epoch into `checkpoint_dir` when given. On
/// divergence (non-finite or > 1e4 loss) aborts and returns the last
/// epoch-end snapshot.
pub fn train_model(
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    data: &[(FeatureStream, LabelTrack)],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    for (stream, track) in data {
        if stream.dim() != model_cfg.d_in {
            return Err(Error::DimMismatch {
                expected: model_cfg.d_in,
                got: stream.dim(),
                context: "training clip features",
            });
        }
        if stream.num_frames() != track.len() {
            return Err(Error::DimMismatch {
                expected: stream.num_frames(),
                got: track.len(),
                context: "training clip labels",
            });
        }
    }

    let lengths: Vec<usize> = data.iter().map(|(s, _)| s.num_frames()).collect();
    let sampler = WindowSampler::new(&lengths, train_cfg.window_len);
    if sampler.skipped_clips > 0 {
        eprintln!(
            "warning: skipped {} clip(s) shorter than window length {}",
            sampler.skipped_clips, train_cfg.window_len
        );
    }
    if sampler.usable_windows() == 0 && train_cfg.epochs > 0 {
        return Err(Error::InvalidValue(
            "no clip is longer than the window length".into(),
        ));
    }

    let mut params = init_params_for_training(model_cfg, train_cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut log = Vec::new();

    let batches_per_epoch = if train_cfg.epochs == 0 {
        0
    } else {
        (sampler.usable_windows() / train_cfg.batch_size).max(1)
    };
    let total_iters = batches_per_epoch * train_cfg.epochs;

    let mut global_iter = 0usize;
    for epoch in 0..train_cfg.epochs {
        for batch in sampler.epoch_batches(train_cfg.batch_size, train_cfg.seed, epoch) {
            let lr = lr_at(global_iter, total_iters, train_cfg)?;
            let mut batch_grads = GruGrads::zeros_like(&params);
            let mut batch_loss = 0.0;
            for wref in &batch {
                let (stream, track) = &data[wref.clip];
                let window =
                    stream.slice(wref.end_frame + 1 - train_cfg.window_len, wref.end_frame + 1);
                let targets = anticipation_targets(track, wref.end_frame, model_cfg.horizon)?;
                let (grads, loss) = backward_window(&params, &window, &targets)?;
                batch_grads.add_scaled(&grads, 1.0 / batch.len() as f64);
                batch_loss += loss.value;
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() || batch_loss > 1e4 {
                return Err(Error::TrainingDiverged {
                    epoch,
                    iter: global_iter,
                    loss: batch_loss,
                });
            }
            adam_step(&mut params, &batch_grads, &mut adam, lr, train_cfg.weight_decay)?;
            log.push(LossRecord {
                epoch,
                iter: global_iter,
                lr,
                loss: batch_loss,
            });
            global_iter += 1;
        }
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            crate::model::write_checkpoint(&params, &dir.join(format!("epoch_{epoch:03}.egck")))?;
        }
    }
    Ok(TrainOutcome { params, log })
}

fn init_params_for_training(cfg: ModelConfig, seed: u64) -> Result<GruParams> {
    crate::model::init_params(cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_conversation, SynthConfig};
    use crate::model::init_params;
    use crate::timebase::{ClassId, FrameClock};

    fn clock5() -> FrameClock {
        FrameClock::new(5).unwrap()
    }

    fn uniform_scores(horizon: usize) -> AnticipationScores {
        AnticipationScores {
            horizon,
            probs: vec![1.0 / 3.0; horizon * NUM_CLASSES],
        }
    }

    fn targets_of(codes: &[u8]) -> AnticipationTargets {
        AnticipationTargets {
            origin_frame: 0,
            horizon: codes.len(),
            targets: codes.iter().map(|&c| ClassId::from_code(c).unwrap()).collect(),
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let scores = AnticipationScores {
            horizon: 1,
            probs: vec![0.2, 0.7, 0.1],
        };
        let ce = cross_entropy_loss(&scores, &targets_of(&[1])).unwrap();
        assert!((ce.value - 0.356675).abs() < 1e-6);
        assert!(!ce.no_target);
        assert_eq!(ce.clamped, 0);

        // Uniform rows, any targets, m = 10 -> ln 3.
        let ce = cross_entropy_loss(&uniform_scores(10), &targets_of(&[0, 1, 2, 0, 1, 2, 0, 1, 2, 0]))
            .unwrap();
        assert!((ce.value - 3f64.ln()).abs() < 1e-12);

        // Perfect one-hot prediction (clamped away from exact zero elsewhere).
        let scores = AnticipationScores {
            horizon: 1,
            probs: vec![0.0, 1.0, 0.0],
        };
        let ce = cross_entropy_loss(&scores, &targets_of(&[1])).unwrap();
        assert!(ce.value.abs() < 1e-12);

        // Zero probability at the true class clamps and flags.
        let ce = cross_entropy_loss(&scores, &targets_of(&[0])).unwrap();
        assert_eq!(ce.clamped, 1);
        assert!((ce.value - (-PROB_CLAMP.ln())).abs() < 1e-6);

        // Empty target list.
        let ce = cross_entropy_loss(&uniform_scores(4), &targets_of(&[])).unwrap();
        assert_eq!(ce.value, 0.0);
        assert!(ce.no_target);
    }

    #[test]
    fn head_bias_gradient_at_zero_weights() {
        // With all weights zero the head sees softmax(0) = 1/3 per class,
        // so d/db = (1/3 - onehot) / m per supervised offset row.
        let cfg = ModelConfig::new(2, 3, 4, 3);
        let params = GruParams::zeros(cfg).unwrap();
        let window = FeatureStream::new(clock5(), 2, vec![0.5, -0.25, 0.75, 0.1], "t").unwrap();
        let targets = targets_of(&[1, 2]);
        let (grads, loss) = backward_window(&params, &window, &targets).unwrap();
        assert!((loss.value - 3f64.ln()).abs() < 1e-12);
        let g = grads.block("b_out");
        let third: f64 = 1.0 / 3.0;
        let m = 2.0;
        let expected = [
            third / m,
            (third - 1.0) / m,
            third / m,
            third / m,
            third / m,
            (third - 1.0) / m,
            0.0,
            0.0,
            0.0,
        ];
        for (i, (got, want)) in g.iter().zip(expected).enumerate() {
            assert!((got - want).abs() < 1e-12, "b_out[{i}]: {got} vs {want}");
        }
    }

    #[test]
    fn structural_zero_beyond_truncated_targets() {
        let cfg = ModelConfig::new(3, 4, 5, 4);
        let params = init_params(cfg, 21).unwrap();
        let window = FeatureStream::new(
            clock5(),
            3,
            (0..18).map(|i| (i as f32) * 0.1 - 0.9).collect(),
            "t",
        )
        .unwrap();
        // Only 2 of 4 offsets supervised: head rows 2 and 3 get zero grads.
        let targets = targets_of(&[0, 2]);
        let (grads, _) = backward_window(&params, &window, &targets).unwrap();
        let g_w = grads.block("w_out");
        let g_b = grads.block("b_out");
        let dh = cfg.d_hidden;
        for o in (2 * NUM_CLASSES)..(4 * NUM_CLASSES) {
            assert_eq!(g_b[o], 0.0);
            assert!(g_w[o * dh..(o + 1) * dh].iter().all(|&v| v == 0.0));
        }
    }

    /// Central finite differences with the actually realized f32 steps.
    fn finite_diff_check(cfg: ModelConfig, window_len: usize, seed: u64) -> f64 {
        let params = init_params(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let frames: Vec<f32> = (0..window_len * cfg.d_in)
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect();
        let window = FeatureStream::new(clock5(), cfg.d_in, frames, "t").unwrap();
        let target_codes: Vec<u8> = (0..cfg.horizon.min(window_len))
            .map(|_| rng.random_range(0..3) as u8)
            .collect();
        let targets = targets_of(&target_codes);

        let (grads, _) = backward_window(&params, &window, &targets).unwrap();
        let h_step = 1e-4f64;
        let mut max_rel = 0.0f64;
        for (b, (_, data, _)) in params.blocks().iter().enumerate() {
            for i in 0..data.len() {
                let orig = data[i];
                let plus = (f64::from(orig) + h_step) as f32;
                let minus = (f64::from(orig) - h_step) as f32;
                let mut p_plus = params.clone();
                p_plus.blocks_mut()[b].1[i] = plus;
                let mut p_minus = params.clone();
                p_minus.blocks_mut()[b].1[i] = minus;
                let j_plus = window_loss(&p_plus, &window, &targets).unwrap().value;
                let j_minus = window_loss(&p_minus, &window, &targets).unwrap().value;
                let realized = f64::from(plus) - f64::from(minus);
                let fd = (j_plus - j_minus) / realized;
                let an = grads.blocks[b][i];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
        max_rel
    }

    #[test]
    fn finite_difference_gradient_check_small_model() {
        let cfg = ModelConfig::new(3, 4, 4, 2);
        let max_rel = finite_diff_check(cfg, 5, 1234);
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn loss_mask_final_step_only() {
        let mask = LossMask::final_step(5);
        assert_eq!(mask.alpha_t, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        mask.validate().unwrap();
        let bad = LossMask {
            alpha_t: vec![1.0, 0.0, 1.0],
        };
        assert!(bad.validate().is_err());
        let wrong_position = LossMask {
            alpha_t: vec![1.0, 0.0, 0.0],
        };
        assert!(wrong_position.validate().is_err());
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig {
            peak_lr: 2.0,
            warmup_fraction: 0.4,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, 100, &cfg).unwrap(), 0.0);
        assert!((lr_at(40, 100, &cfg).unwrap() - 2.0).abs() < 1e-15);
        assert!((lr_at(70, 100, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!(lr_at(100, 100, &cfg).unwrap() < 1e-12);
        assert!(lr_at(0, 0, &cfg).is_err());
    }

    #[test]
    fn lr_schedule_is_continuous_with_single_peak() {
        let cfg = TrainConfig {
            peak_lr: 1.0,
            warmup_fraction: 0.4,
            ..TrainConfig::default()
        };
        let total = 1000;
        let values: Vec<f64> = (0..=total).map(|i| lr_at(i, total, &cfg).unwrap()).collect();
        for pair in values.windows(2) {
            assert!((pair[1] - pair[0]).abs() < 0.01, "jump {} -> {}", pair[0], pair[1]);
        }
        let peak_count = values
            .windows(3)
            .filter(|w| w[1] > w[0] && w[1] >= w[2])
            .count();
        assert_eq!(peak_count, 1, "expected exactly one local maximum");
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 1.0).abs() < 1e-9);
    }

    #[test]
    fn adam_fixed_point_and_first_step() {
        let cfg = ModelConfig::new(2, 2, 2, 1);
        let mut params = init_params(cfg, 5).unwrap();
        let reference = params.clone();
        let zero_grads = GruGrads::zeros_like(&params);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &zero_grads, &mut state, 0.1, 0.0).unwrap();
        assert_eq!(params, reference, "zero gradient and zero decay must be a fixed point");

        // First step with any nonzero gradient moves each coordinate by ~lr.
        let mut grads = GruGrads::zeros_like(&params);
        for g in grads.blocks.iter_mut() {
            for v in g.iter_mut() {
                *v = 0.37;
            }
        }
        let lr = 0.01;
        let mut state = AdamState::new(&params);
        let before = params.clone();
        adam_step(&mut params, &grads, &mut state, lr, 0.0).unwrap();
        for ((_, after, _), (_, prev, _)) in params.blocks().iter().zip(before.blocks().iter()) {
            for (a, p) in after.iter().zip(prev.iter()) {
                let delta = f64::from(p - a);
                assert!((delta - lr).abs() < lr * 0.01, "delta {delta} vs lr {lr}");
            }
        }
    }

    #[test]
    fn adam_decoupled_decay_only() {
        let cfg = ModelConfig::new(1, 1, 1, 1);
        let mut params = GruParams::zeros(cfg).unwrap();
        params.w_embed.data_mut()[0] = 1.0;
        params.b_embed[0] = 1.0;
        let grads = GruGrads::zeros_like(&params);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1.0, 0.1).unwrap();
        assert!((params.w_embed.data()[0] - 0.9).abs() < 1e-7, "weights decay");
        assert_eq!(params.b_embed[0], 1.0, "biases must not decay");
    }

    #[test]
    fn sampler_is_deterministic_and_exact_length() {
        let sampler = WindowSampler::new(&[100, 15, 60], 20);
        assert_eq!(sampler.skipped_clips, 1);
        assert_eq!(sampler.usable_windows(), 80 + 40);
        let a = sampler.epoch_batches(8, 42, 0);
        let b = sampler.epoch_batches(8, 42, 0);
        assert_eq!(a, b);
        let c = sampler.epoch_batches(8, 42, 1);
        assert_ne!(a, c, "epochs must draw different streams");
        for batch in &a {
            assert_eq!(batch.len(), 8);
            for w in batch {
                assert!(w.end_frame >= 20);
            }
        }
    }

    #[test]
    fn sampler_end_frames_are_uniform() {
        let t = 220;
        let l = 20;
        let sampler = WindowSampler::new(&[t], l);
        let mut histogram = [0usize; 20];
        let mut drawn = 0usize;
        for epoch in 0.. {
            for batch in sampler.epoch_batches(100, 7, epoch) {
                for w in &batch {
                    histogram[(w.end_frame - l) * 20 / (t - l)] += 1;
                    drawn += 1;
                }
            }
            if drawn >= 10_000 {
                break;
            }
        }
        let expected = drawn as f64 / 20.0;
        for (bin, &count) in histogram.iter().enumerate() {
            let dev = (count as f64 - expected).abs() / expected;
            assert!(dev <= 0.2, "bin {bin} off by {:.1}%", dev * 100.0);
        }
    }

    #[test]
    fn train_zero_epochs_returns_init() {
        let model_cfg = ModelConfig::new(4, 4, 4, 2);
        let train_cfg = TrainConfig {
            epochs: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let synth = SynthConfig {
            dim: 4,
            seed: 1,
            ..SynthConfig::default()
        };
        let clip = synth_conversation(&synth, 100, clock5()).unwrap();
        let out = train_model(model_cfg, &train_cfg, &[clip], None).unwrap();
        assert_eq!(out.params, init_params(model_cfg, 3).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn train_is_bit_reproducible() {
        let model_cfg = ModelConfig::new(4, 8, 8, 3);
        let train_cfg = TrainConfig {
            window_len: 10,
            epochs: 2,
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let synth = SynthConfig {
            dim: 4,
            seed: 2,
            ..SynthConfig::default()
        };
        let clip = synth_conversation(&synth, 400, clock5()).unwrap();
        let a = train_model(model_cfg, &train_cfg, std::slice::from_ref(&clip), None).unwrap();
        let b = train_model(model_cfg, &train_cfg, &[clip], None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn train_beats_uniform_on_separable_data() {
        let model_cfg = ModelConfig::new(8, 16, 16, 3);
        let train_cfg = TrainConfig {
            window_len: 12,
            epochs: 3,
            batch_size: 16,
            seed: 5,
            ..TrainConfig::default()
        };
        let synth = SynthConfig {
            dim: 8,
            class_mean_separation: 4.0,
            noise_sigma: 0.5,
            seed: 9,
            ..SynthConfig::default()
        };
        let clip = synth_conversation(&synth, 3000, clock5()).unwrap();
        let out = train_model(model_cfg, &train_cfg, &[clip], None).unwrap();
        let tail: Vec<f64> = out.log.iter().rev().take(10).map(|r| r.loss).collect();
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(
            tail_mean < 3f64.ln() - 0.3,
            "final training loss {tail_mean} must beat uniform ln 3 by 0.3"
        );
    }

    #[test]
    fn loss_log_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let log = vec![
            LossRecord { epoch: 0, iter: 0, lr: 0.0, loss: 1.0986 },
            LossRecord { epoch: 0, iter: 1, lr: 0.0005, loss: 1.0012 },
        ];
        write_loss_log(&log, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,iter,lr,loss"));
        assert_eq!(lines.count(), 2);
    }
}
