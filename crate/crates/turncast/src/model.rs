//! Online recurrent model: embedding -> gated recurrent cell -> anticipation
//! head producing an [horizon x 3] probability tensor per frame, strictly
//! causal.
//!
//! Inference runs in f32 (softmax in f64); checkpoints store f32. The cell
//! uses the original gating convention `h' = (1-z) h + z h_cand` with the
//! reset gate applied before the candidate.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureStream;
use crate::linalg::{dot_f32, Mat};
use crate::timebase::NUM_CLASSES;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    /// Anticipation horizon: future steps predicted per frame.
    pub horizon: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(d_in: usize, d_embed: usize, d_hidden: usize, horizon: usize) -> Self {
        ModelConfig {
            d_in,
            d_embed,
            d_hidden,
            horizon,
            num_classes: NUM_CLASSES,
        }
    }

    /// Desk-scale default.
    pub fn desk() -> Self {
        Self::new(64, 64, 64, 10)
    }

    /// Full-scale preset: 2048-dim embeddings, 1024-dim hidden units.
    pub fn full_scale() -> Self {
        Self::new(2048, 2048, 1024, 10)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_embed == 0 || self.d_hidden == 0 || self.horizon == 0 {
            return Err(Error::InvalidConfig(
                "all model dimensions and the horizon must be >= 1".into(),
            ));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be {NUM_CLASSES}"
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.horizon * self.num_classes
    }
}

/// Whether a parameter block participates in weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Weight,
    Bias,
}

/// All trainable weights: embedding, gated recurrent cell, anticipation head.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub cfg: ModelConfig,
    pub w_embed: Mat,
    pub b_embed: Vec<f32>,
    pub w_z: Mat,
    pub u_z: Mat,
    pub b_z: Vec<f32>,
    pub w_r: Mat,
    pub u_r: Mat,
    pub b_r: Vec<f32>,
    pub w_h: Mat,
    pub u_h: Mat,
    pub b_h: Vec<f32>,
    pub w_out: Mat,
    pub b_out: Vec<f32>,
}

/// Serialization order of the parameter blocks. Matrices are row-major with
/// rows indexing the output dimension.
pub const BLOCK_NAMES: [&str; 13] = [
    "w_embed", "b_embed", "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h", "w_out",
    "b_out",
];

impl GruParams {
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (di, de, dh, ho) = (cfg.d_in, cfg.d_embed, cfg.d_hidden, cfg.head_dim());
        Ok(GruParams {
            cfg,
            w_embed: Mat::zeros(de, di),
            b_embed: vec![0.0; de],
            w_z: Mat::zeros(dh, de),
            u_z: Mat::zeros(dh, dh),
            b_z: vec![0.0; dh],
            w_r: Mat::zeros(dh, de),
            u_r: Mat::zeros(dh, dh),
            b_r: vec![0.0; dh],
            w_h: Mat::zeros(dh, de),
            u_h: Mat::zeros(dh, dh),
            b_h: vec![0.0; dh],
            w_out: Mat::zeros(ho, dh),
            b_out: vec![0.0; ho],
        })
    }

    /// Blocks in serialization order.
    pub fn blocks(&self) -> [(&'static str, &[f32], BlockKind); 13] {
        use BlockKind::*;
        [
            ("w_embed", self.w_embed.data(), Weight),
            ("b_embed", &self.b_embed, Bias),
            ("w_z", self.w_z.data(), Weight),
            ("u_z", self.u_z.data(), Weight),
            ("b_z", &self.b_z, Bias),
            ("w_r", self.w_r.data(), Weight),
            ("u_r", self.u_r.data(), Weight),
            ("b_r", &self.b_r, Bias),
            ("w_h", self.w_h.data(), Weight),
            ("u_h", self.u_h.data(), Weight),
            ("b_h", &self.b_h, Bias),
            ("w_out", self.w_out.data(), Weight),
            ("b_out", &self.b_out, Bias),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f32>, BlockKind); 13] {
        use BlockKind::*;
        [
            ("w_embed", self.w_embed.data_mut(), Weight),
            ("b_embed", &mut self.b_embed, Bias),
            ("w_z", self.w_z.data_mut(), Weight),
            ("u_z", self.u_z.data_mut(), Weight),
            ("b_z", &mut self.b_z, Bias),
            ("w_r", self.w_r.data_mut(), Weight),
            ("u_r", self.u_r.data_mut(), Weight),
            ("b_r", &mut self.b_r, Bias),
            ("w_h", self.w_h.data_mut(), Weight),
            ("u_h", self.u_h.data_mut(), Weight),
            ("b_h", &mut self.b_h, Bias),
            ("w_out", self.w_out.data_mut(), Weight),
            ("b_out", &mut self.b_out, Bias),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, data, _)| data.len()).sum()
    }
}

/// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per weight matrix;
/// biases zero. Deterministic per seed.
pub fn init_params(cfg: ModelConfig, seed: u64) -> Result<GruParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = GruParams::zeros(cfg)?;
    let mut fill = |m: &mut Mat| {
        let bound = 1.0 / (m.cols() as f32).sqrt();
        for v in m.data_mut().iter_mut() {
            let u: f32 = rng.random();
            *v = bound * (2.0 * u - 1.0);
        }
    };
    fill(&mut params.w_embed);
    fill(&mut params.w_z);
    fill(&mut params.u_z);
    fill(&mut params.w_r);
    fill(&mut params.u_r);
    fill(&mut params.w_h);
    fill(&mut params.u_h);
    fill(&mut params.w_out);
    Ok(params)
}

/// Recurrent state for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f32>,
}

impl HiddenState {
    pub fn zeros(d_hidden: usize) -> Self {
        HiddenState {
            h: vec![0.0; d_hidden],
        }
    }
}

/// Per-frame [horizon x 3] probability tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnticipationScores {
    pub horizon: usize,
    /// Row-major, `horizon * 3` probabilities.
    pub probs: Vec<f64>,
}

impl AnticipationScores {
    pub fn row(&self, offset: usize) -> &[f64] {
        &self.probs[offset * NUM_CLASSES..(offset + 1) * NUM_CLASSES]
    }

    pub fn prob(&self, offset: usize, class: usize) -> f64 {
        self.probs[offset * NUM_CLASSES + class]
    }

    /// Checks that every row is a distribution (sum within 1e-6 of 1).
    pub fn validate(&self) -> Result<()> {
        for j in 0..self.horizon {
            let row = self.row(j);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidValue(format!("row {j} out of [0,1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidValue(format!("row {j} sums to {sum}")));
            }
        }
        Ok(())
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Numerically stable softmax: `p_k = exp(l_k - max) / sum exp(l_j - max)`.
pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidValue("empty logit vector".into()));
    }
    if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index: bad,
            context: "softmax logits",
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// One cell update. `x` is the embedded input.
pub fn gru_step(params: &GruParams, h: &HiddenState, x: &[f32]) -> Result<HiddenState> {
    if x.len() != params.cfg.d_embed {
        return Err(Error::DimMismatch {
            expected: params.cfg.d_embed,
            got: x.len(),
            context: "gru_step input",
        });
    }
    if h.h.len() != params.cfg.d_hidden {
        return Err(Error::DimMismatch {
            expected: params.cfg.d_hidden,
            got: h.h.len(),
            context: "gru_step hidden state",
        });
    }
    let mut next = h.clone();
    let mut scratch = StepScratch::new(&params.cfg);
    step_into(params, &mut next.h, x, &mut scratch);
    Ok(next)
}

struct StepScratch {
    z: Vec<f32>,
    r: Vec<f32>,
    rh: Vec<f32>,
    embedded: Vec<f32>,
    logits: Vec<f32>,
}

impl StepScratch {
    fn new(cfg: &ModelConfig) -> Self {
        StepScratch {
            z: vec![0.0; cfg.d_hidden],
            r: vec![0.0; cfg.d_hidden],
            rh: vec![0.0; cfg.d_hidden],
            embedded: vec![0.0; cfg.d_embed],
            logits: vec![0.0; cfg.head_dim()],
        }
    }
}

/// z = sigma(W_z x + U_z h + b_z); r = sigma(W_r x + U_r h + b_r);
/// cand = tanh(W_h x + U_h (r . h) + b_h); h' = (1-z) h + z cand.
#[allow(clippy::needless_range_loop)]
fn step_into(params: &GruParams, h: &mut [f32], x: &[f32], s: &mut StepScratch) {
    let dh = params.cfg.d_hidden;
    for i in 0..dh {
        s.z[i] = sigmoid(dot_f32(params.w_z.row(i), x) + dot_f32(params.u_z.row(i), h) + params.b_z[i]);
        s.r[i] = sigmoid(dot_f32(params.w_r.row(i), x) + dot_f32(params.u_r.row(i), h) + params.b_r[i]);
    }
    for i in 0..dh {
        s.rh[i] = s.r[i] * h[i];
    }
    for i in 0..dh {
        let cand = (dot_f32(params.w_h.row(i), x) + dot_f32(params.u_h.row(i), &s.rh) + params.b_h[i])
            .tanh();
        h[i] = (1.0 - s.z[i]) * h[i] + s.z[i] * cand;
    }
}

fn embed_into(params: &GruParams, frame: &[f32], out: &mut [f32]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = (dot_f32(params.w_embed.row(j), frame) + params.b_embed[j]).tanh();
    }
}

fn head_scores(params: &GruParams, h: &[f32], logits: &mut [f32]) -> Result<AnticipationScores> {
    for (o, l) in logits.iter_mut().enumerate() {
        *l = dot_f32(params.w_out.row(o), h) + params.b_out[o];
    }
    let horizon = params.cfg.horizon;
    let mut probs = Vec::with_capacity(horizon * NUM_CLASSES);
    for j in 0..horizon {
        let row: Vec<f64> = logits[j * NUM_CLASSES..(j + 1) * NUM_CLASSES]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        probs.extend_from_slice(&softmax_stable(&row)?);
    }
    Ok(AnticipationScores { horizon, probs })
}

/// Incremental engine for live streams: one hidden state, one frame at a
/// time, strictly causal.
pub struct StreamState<'a> {
    params: &'a GruParams,
    h: Vec<f32>,
    scratch: StepScratch,
    frames_seen: usize,
}

impl<'a> StreamState<'a> {
    pub fn new(params: &'a GruParams) -> Self {
        StreamState {
            params,
            h: vec![0.0; params.cfg.d_hidden],
            scratch: StepScratch::new(&params.cfg),
            frames_seen: 0,
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Consumes one raw feature frame and returns the anticipation scores
    /// for it.
    pub fn push_frame(&mut self, frame: &[f32]) -> Result<AnticipationScores> {
        if frame.len() != self.params.cfg.d_in {
            return Err(Error::DimMismatch {
                expected: self.params.cfg.d_in,
                got: frame.len(),
                context: "stream frame",
            });
        }
        let (scratch, h) = (&mut self.scratch, &mut self.h);
        embed_into(self.params, frame, &mut scratch.embedded);
        let embedded = std::mem::take(&mut scratch.embedded);
        step_into(self.params, h, &embedded, scratch);
        scratch.embedded = embedded;
        self.frames_seen += 1;
        head_scores(self.params, h, &mut self.scratch.logits)
    }
}

/// Runs the model over a window and returns the scores at its final frame.
pub fn forward_window(params: &GruParams, window: &FeatureStream) -> Result<AnticipationScores> {
    let mut state = StreamState::new(params);
    let mut last = None;
    for i in 0..window.num_frames() {
        last = Some(state.push_frame(window.frame(i))?);
    }
    last.ok_or_else(|| Error::InvalidValue("empty window".into()))
}

/// Block size for the recorded-stream fast path.
const STREAM_BLOCK: usize = 16;

/// Runs the model across a whole stream with one persistent hidden state,
/// producing scores for every frame. Scores at frame t depend only on
/// frames <= t, bit-identical to the per-frame [`StreamState`] path.
///
/// The embedding and the gates' input projections do not depend on the
/// hidden state, so they are computed in blocks of [`STREAM_BLOCK`] frames;
/// each weight row is then streamed from memory once per block instead of
/// once per frame. Only the recurrent U matrices remain per-frame work.
pub fn stream_forward(params: &GruParams, stream: &FeatureStream) -> Result<Vec<AnticipationScores>> {
    let cfg = params.cfg;
    if stream.dim() != cfg.d_in {
        return Err(Error::DimMismatch {
            expected: cfg.d_in,
            got: stream.dim(),
            context: "stream frame",
        });
    }
    let total = stream.num_frames();
    let (de, dh) = (cfg.d_embed, cfg.d_hidden);
    let mut out = Vec::with_capacity(total);
    let mut h = vec![0.0f32; dh];
    let mut rh = vec![0.0f32; dh];
    let mut z = vec![0.0f32; dh];
    let mut logits = vec![0.0f32; cfg.head_dim()];
    let mut embedded = vec![0.0f32; STREAM_BLOCK * de];
    let mut pre_z = vec![0.0f32; STREAM_BLOCK * dh];
    let mut pre_r = vec![0.0f32; STREAM_BLOCK * dh];
    let mut pre_c = vec![0.0f32; STREAM_BLOCK * dh];

    for start in (0..total).step_by(STREAM_BLOCK) {
        let block = STREAM_BLOCK.min(total - start);

        // e_t = tanh(W_e x_t + b_e), one embedding row across the block.
        for j in 0..de {
            let row = params.w_embed.row(j);
            let bias = params.b_embed[j];
            for t in 0..block {
                embedded[t * de + j] = (dot_f32(row, stream.frame(start + t)) + bias).tanh();
            }
        }

        // Input projections W_g e_t, one gate at a time so a single weight
        // row stays hot across the block.
        for (mat, pre) in [
            (&params.w_z, &mut pre_z),
            (&params.w_r, &mut pre_r),
            (&params.w_h, &mut pre_c),
        ] {
            for i in 0..dh {
                let row = mat.row(i);
                for t in 0..block {
                    pre[t * dh + i] = dot_f32(row, &embedded[t * de..(t + 1) * de]);
                }
            }
        }

        // Sequential recurrence and head.
        for t in 0..block {
            for i in 0..dh {
                z[i] = sigmoid(pre_z[t * dh + i] + dot_f32(params.u_z.row(i), &h) + params.b_z[i]);
                let r = sigmoid(pre_r[t * dh + i] + dot_f32(params.u_r.row(i), &h) + params.b_r[i]);
                rh[i] = r * h[i];
            }
            for i in 0..dh {
                let cand =
                    (pre_c[t * dh + i] + dot_f32(params.u_h.row(i), &rh) + params.b_h[i]).tanh();
                h[i] = (1.0 - z[i]) * h[i] + z[i] * cand;
            }
            out.push(head_scores(params, &h, &mut logits)?);
        }
    }
    Ok(out)
}

/// Writes a checkpoint: magic "EGCK" | version u32 | d_in, d_embed,
/// d_hidden, horizon, num_classes (u32 each) | blocks f32 little-endian in
/// [`BLOCK_NAMES`] order.
pub fn write_checkpoint(params: &GruParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for dim in [
        params.cfg.d_in,
        params.cfg.d_embed,
        params.cfg.d_hidden,
        params.cfg.horizon,
        params.cfg.num_classes,
    ] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for (_, data, _) in params.blocks() {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<GruParams> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let mut u32buf = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        read_exact_or_truncated(&mut r, &mut u32buf, "config")?;
        *d = u32::from_le_bytes(u32buf) as usize;
    }
    let cfg = ModelConfig {
        d_in: dims[0],
        d_embed: dims[1],
        d_hidden: dims[2],
        horizon: dims[3],
        num_classes: dims[4],
    };
    cfg.validate()?;
    let mut params = GruParams::zeros(cfg)?;
    for (_, data, _) in params.blocks_mut() {
        let mut bytes = vec![0u8; data.len() * 4];
        read_exact_or_truncated(&mut r, &mut bytes, "parameter block")?;
        for (v, c) in data.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: bad,
                context: "checkpoint parameters",
            });
        }
    }
    Ok(params)
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], context: &'static str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => {
                return Err(Error::Truncated {
                    expected: buf.len() - filled,
                    context,
                })
            }
            n => filled += n,
        }
    }
    Ok(())
}
