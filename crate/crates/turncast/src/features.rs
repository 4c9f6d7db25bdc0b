//! Per-frame feature streams: binary file IO, modality concatenation, and a
//! seeded semi-Markov conversation synthesizer for desk-scale experiments.
//!
//! Feature file layout (little-endian, bit-exact):
//! magic "EGF1" (4 bytes) | version u32 = 1 | dim u32 | num_frames u64 |
//! fps f32 | tag_len u32 | tag UTF-8 bytes | payload num_frames*dim f32
//! row-major.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::timebase::{ClassId, FrameClock, LabelTrack, NUM_CLASSES};

pub const FEATURE_MAGIC: [u8; 4] = *b"EGF1";
pub const FEATURE_VERSION: u32 = 1;

/// T x D matrix of per-frame features at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    pub clock: FrameClock,
    dim: usize,
    /// Row-major, `num_frames * dim` values.
    frames: Vec<f32>,
    pub modality_tag: String,
}

impl FeatureStream {
    pub fn new(
        clock: FrameClock,
        dim: usize,
        frames: Vec<f32>,
        modality_tag: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidValue("feature dim must be >= 1".into()));
        }
        if frames.is_empty() || !frames.len().is_multiple_of(dim) {
            return Err(Error::InvalidValue(format!(
                "payload of {} values is not a positive multiple of dim {dim}",
                frames.len()
            )));
        }
        if let Some(bad) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: bad,
                context: "feature payload",
            });
        }
        Ok(FeatureStream {
            clock,
            dim,
            frames,
            modality_tag: modality_tag.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frames_flat(&self) -> &[f32] {
        &self.frames
    }

    /// Rows `start..end` as a new stream.
    pub fn slice(&self, start: usize, end: usize) -> FeatureStream {
        FeatureStream {
            clock: self.clock,
            dim: self.dim,
            frames: self.frames[start * self.dim..end * self.dim].to_vec(),
            modality_tag: self.modality_tag.clone(),
        }
    }
}

fn read_exact_or_truncated(
    r: &mut impl Read,
    buf: &mut [u8],
    context: &'static str,
) -> Result<()> {
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

fn read_u32(r: &mut impl Read, context: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, context: &'static str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b, context)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, context: &'static str) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, context)?;
    Ok(f32::from_le_bytes(b))
}

/// Writes a stream in the binary feature format.
pub fn write_feature_file(stream: &FeatureStream, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(stream.dim as u32).to_le_bytes())?;
    w.write_all(&(stream.num_frames() as u64).to_le_bytes())?;
    w.write_all(&(stream.clock.fps() as f32).to_le_bytes())?;
    let tag = stream.modality_tag.as_bytes();
    w.write_all(&(tag.len() as u32).to_le_bytes())?;
    w.write_all(tag)?;
    for v in &stream.frames {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a stream written by [`write_feature_file`]; `read(write(s)) == s`
/// bit-exactly.
pub fn read_feature_file(path: &Path) -> Result<FeatureStream> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            expected: FEATURE_VERSION,
            found: version,
        });
    }
    let dim = read_u32(&mut r, "dim")? as usize;
    let num_frames = read_u64(&mut r, "num_frames")? as usize;
    let fps = read_f32(&mut r, "fps")?;
    if !(fps.is_finite() && fps > 0.0 && fps.fract() == 0.0) {
        return Err(Error::InvalidFps(format!(
            "file fps {fps} is not a positive whole number"
        )));
    }
    let clock = FrameClock::new(fps as u32)?;
    let tag_len = read_u32(&mut r, "tag_len")? as usize;
    let mut tag_bytes = vec![0u8; tag_len];
    read_exact_or_truncated(&mut r, &mut tag_bytes, "tag")?;
    let tag = String::from_utf8(tag_bytes)
        .map_err(|_| Error::InvalidValue("modality tag is not UTF-8".into()))?;
    let count = num_frames
        .checked_mul(dim)
        .ok_or_else(|| Error::InvalidValue("frame count overflow".into()))?;
    let mut payload = vec![0u8; count * 4];
    read_exact_or_truncated(&mut r, &mut payload, "payload")?;
    let frames: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(bad) = frames.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index: bad,
            context: "feature payload",
        });
    }
    FeatureStream::new(clock, dim, frames, tag)
}

/// Concatenates two modalities frame-wise. The longer stream is truncated to
/// the shorter; the tag becomes `"a+b"`.
pub fn concat_modalities(a: &FeatureStream, b: &FeatureStream) -> Result<FeatureStream> {
    if a.clock.fps() != b.clock.fps() {
        return Err(Error::FpsMismatch {
            a: a.clock.fps(),
            b: b.clock.fps(),
        });
    }
    let t = a.num_frames().min(b.num_frames());
    let dim = a.dim + b.dim;
    let mut frames = Vec::with_capacity(t * dim);
    for i in 0..t {
        frames.extend_from_slice(a.frame(i));
        frames.extend_from_slice(b.frame(i));
    }
    FeatureStream::new(
        a.clock,
        dim,
        frames,
        format!("{}+{}", a.modality_tag, b.modality_tag),
    )
}

/// Configuration for the synthetic conversation generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Mean dwell (frames) per class; geometric dwell with this mean.
    pub state_dwell_mean_frames: [f64; NUM_CLASSES],
    /// Row-stochastic transition matrix with zero diagonal.
    pub transition_weights: [[f64; NUM_CLASSES]; NUM_CLASSES],
    pub dim: usize,
    /// Norm of the mutually orthogonal class mean vectors.
    pub class_mean_separation: f64,
    pub noise_sigma: f64,
    /// Features start drifting toward the next state's mean this many frames
    /// before a transition, which is what makes anticipation learnable.
    pub cue_lead_frames: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            state_dwell_mean_frames: [10.0; NUM_CLASSES],
            transition_weights: [[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]],
            dim: 16,
            class_mean_separation: 3.0,
            noise_sigma: 1.0,
            cue_lead_frames: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (c, &mean) in self.state_dwell_mean_frames.iter().enumerate() {
            if !(mean >= 1.0 && mean.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "dwell mean for class {c} must be >= 1, got {mean}"
                )));
            }
        }
        for (c, row) in self.transition_weights.iter().enumerate() {
            if row[c] != 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "transition matrix diagonal must be zero (class {c})"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                return Err(Error::InvalidConfig(format!(
                    "transition row {c} must be a distribution, sums to {sum}"
                )));
            }
        }
        // Class means are scaled axis vectors, so the feature space must
        // have at least one axis per class.
        if self.dim < NUM_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "dim must be >= {NUM_CLASSES}, got {}",
                self.dim
            )));
        }
        if !(self.class_mean_separation >= 0.0 && self.class_mean_separation.is_finite()) {
            return Err(Error::InvalidConfig(
                "class_mean_separation must be non-negative".into(),
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// A maximal run of one state in the synthesized label sequence.
struct Run {
    state: usize,
    start: usize,
    /// exclusive
    end: usize,
}

/// Geometric dwell on {1, 2, ...} with mean `mean` (success prob 1/mean).
fn sample_dwell(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let p = 1.0 / mean;
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.random();
    1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize
}

fn sample_transition(rng: &mut ChaCha8Rng, row: &[f64; NUM_CLASSES]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (next, &w) in row.iter().enumerate() {
        acc += w;
        if u < acc {
            return next;
        }
    }
    row.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates a labeled synthetic conversation of `num_frames` frames at the
/// given clock. Labels follow a semi-Markov chain; features are the class
/// mean plus Gaussian noise, with a linear drift toward the next state's
/// mean during the last `cue_lead_frames` frames before each transition.
/// Deterministic for a given config.
pub fn synth_conversation(
    cfg: &SynthConfig,
    num_frames: usize,
    clock: FrameClock,
) -> Result<(FeatureStream, LabelTrack)> {
    cfg.validate()?;
    if num_frames == 0 {
        return Err(Error::InvalidValue("num_frames must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // State runs, sampled one past the end of the track so the final
    // in-track transition (if any) still gets its cue ramp.
    let mut runs: Vec<Run> = Vec::new();
    let mut state = rng.random_range(0..NUM_CLASSES);
    let mut t = 0usize;
    while t < num_frames {
        let dwell = sample_dwell(&mut rng, cfg.state_dwell_mean_frames[state]);
        runs.push(Run {
            state,
            start: t,
            end: t + dwell,
        });
        t += dwell;
        state = sample_transition(&mut rng, &cfg.transition_weights[state]);
    }
    let next_state_of_last = state;

    let mut labels = vec![ClassId::Background; num_frames];
    for run in &runs {
        for label in labels.iter_mut().take(run.end.min(num_frames)).skip(run.start) {
            *label = ClassId::from_code(run.state as u8).expect("state in range");
        }
    }

    // Class means: orthogonal scaled axis vectors.
    let s = cfg.class_mean_separation;
    let mean_of = |class: usize, coord: usize| -> f64 {
        if coord == class {
            s
        } else {
            0.0
        }
    };

    let tau = cfg.cue_lead_frames;
    let normal = StandardNormal;
    let mut frames = Vec::with_capacity(num_frames * cfg.dim);
    for (ri, run) in runs.iter().enumerate() {
        let next_state = runs
            .get(ri + 1)
            .map(|r| r.state)
            .unwrap_or(next_state_of_last);
        for i in run.start..run.end.min(num_frames) {
            // Distance to the transition; within the cue lead, drift toward
            // the next state's mean without ever reaching it.
            let dist = run.end - i;
            let w = if tau > 0 && dist <= tau {
                (tau + 1 - dist) as f64 / (tau + 1) as f64
            } else {
                0.0
            };
            for d in 0..cfg.dim {
                let mu = (1.0 - w) * mean_of(run.state, d) + w * mean_of(next_state, d);
                let noise: f64 = normal.sample(&mut rng);
                frames.push((mu + cfg.noise_sigma * noise) as f32);
            }
        }
    }

    let stream = FeatureStream::new(clock, cfg.dim, frames, "synthetic")?;
    Ok((stream, LabelTrack::new(clock, labels)))
}
