//! Non-learned baselines: uniform-random labeling and the silence-triggered
//! speaker with its generous scoring transform.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::AnticipationScores;
use crate::timebase::{ClassId, LabelTrack, NUM_CLASSES};

/// Default silence interval in milliseconds (3 frames at 5 fps).
pub const DEFAULT_SILENCE_MS: u32 = 600;

/// Default grace window, in frames, for matching a trigger to an upcoming
/// target segment.
pub const DEFAULT_GRACE_FRAMES: usize = 3;

/// Frame at which the silence baseline initiates speech.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerEvent {
    pub frame: usize,
}

/// Per-frame one-hot score tensor: for each frame and offset one class is
/// drawn uniformly and scored 1. Deterministic per seed.
pub fn random_baseline_scores(num_frames: usize, horizon: usize, seed: u64) -> Result<Vec<AnticipationScores>> {
    if num_frames == 0 || horizon == 0 {
        return Err(Error::InvalidValue(
            "num_frames and horizon must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_frames);
    for _ in 0..num_frames {
        let mut probs = vec![0.0; horizon * NUM_CLASSES];
        for j in 0..horizon {
            let class = rng.random_range(0..NUM_CLASSES);
            probs[j * NUM_CLASSES + class] = 1.0;
        }
        out.push(AnticipationScores { horizon, probs });
    }
    Ok(out)
}

/// Emits a trigger at frame `t` exactly when the preceding
/// `silence_ms / frame_duration` frames are all Background and the frame
/// before them is OtherSpeaker. One trigger per other-speech run; any
/// non-Background frame aborts the countdown.
pub fn silence_triggers(track: &LabelTrack, silence_ms: u32) -> Result<Vec<TriggerEvent>> {
    let fps = track.clock.fps();
    if (u64::from(silence_ms) * u64::from(fps)) % 1000 != 0 {
        return Err(Error::SilenceNotFrameAligned { silence_ms, fps });
    }
    let silence_frames = (u64::from(silence_ms) * u64::from(fps) / 1000) as usize;
    if silence_frames == 0 {
        return Err(Error::SilenceNotFrameAligned { silence_ms, fps });
    }
    let labels = &track.labels;
    let mut triggers = Vec::new();
    for t in (silence_frames + 1)..labels.len() {
        let window_ok = labels[t - silence_frames..t]
            .iter()
            .all(|&c| c == ClassId::Background);
        if window_ok && labels[t - silence_frames - 1] == ClassId::OtherSpeaker {
            triggers.push(TriggerEvent { frame: t });
        }
    }
    Ok(triggers)
}

/// The generous scoring transform: a trigger that lands inside a
/// ground-truth target segment (or at most `grace_frames` before one starts)
/// marks that entire segment correct; otherwise only the trigger frame
/// itself scores 1.
pub fn generous_score_track(
    triggers: &[TriggerEvent],
    gt: &LabelTrack,
    grace_frames: usize,
) -> Result<Vec<f64>> {
    let len = gt.len();
    let mut scores = vec![0.0; len];
    for pair in triggers.windows(2) {
        if pair[1].frame < pair[0].frame {
            return Err(Error::UnsortedSegments { index: 1 });
        }
    }
    for trigger in triggers {
        let t = trigger.frame;
        if t >= len {
            return Err(Error::FrameOutOfBounds { index: t, len });
        }
        // Find a target segment containing t or starting within the grace
        // window.
        let mut segment_start = None;
        if gt.labels[t] == ClassId::TargetSpeaker {
            let mut s = t;
            while s > 0 && gt.labels[s - 1] == ClassId::TargetSpeaker {
                s -= 1;
            }
            segment_start = Some(s);
        } else {
            for f in t..=(t + grace_frames).min(len - 1) {
                if gt.labels[f] == ClassId::TargetSpeaker {
                    segment_start = Some(f);
                    break;
                }
            }
        }
        match segment_start {
            Some(start) => {
                let mut e = start;
                while e < len && gt.labels[e] == ClassId::TargetSpeaker {
                    scores[e] = 1.0;
                    e += 1;
                }
            }
            None => scores[t] = 1.0,
        }
    }
    Ok(scores)
}

/// Lifts a per-frame scalar target-class score sequence into the
/// `[horizon x 3]` tensor shape the evaluator consumes: the score fills the
/// TargetSpeaker channel at every offset, other channels stay 0.
pub fn target_scores_to_tensor(scores: &[f64], horizon: usize) -> Vec<AnticipationScores> {
    scores
        .iter()
        .map(|&s| {
            let mut probs = vec![0.0; horizon * NUM_CLASSES];
            for j in 0..horizon {
                probs[j * NUM_CLASSES + ClassId::TargetSpeaker.code() as usize] = s;
            }
            AnticipationScores { horizon, probs }
        })
        .collect()
}

/// Writes triggers as CSV with header `frame`.
pub fn write_triggers_csv(triggers: &[TriggerEvent], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "frame")?;
    for t in triggers {
        writeln!(w, "{}", t.frame)?;
    }
    w.flush()?;
    Ok(())
}
