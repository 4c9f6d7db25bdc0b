//! Transcript segments and VAD spans to per-frame labels, plus anticipation
//! target extraction.
//!
//! A frame is labeled by midpoint containment: TargetSpeaker if any target
//! segment contains the midpoint, else OtherSpeaker if any other-speaker
//! segment does, else Background. Target takes precedence during overlap.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timebase::{frame_midpoint, ClassId, FrameClock, LabelTrack, Segment, Span, Speaker};

/// Default minimum duration for smoothing, in seconds (200 ms).
pub const DEFAULT_MIN_DUR_S: f64 = 0.2;

/// Future-class targets for one origin frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnticipationTargets {
    pub origin_frame: usize,
    pub horizon: usize,
    /// `targets[j]` is the label at frame `origin_frame + 1 + j`; shorter
    /// than `horizon` only when the track ends first.
    pub targets: Vec<ClassId>,
}

/// Result of [`segments_to_labels`], with a count of segments that were
/// clipped at the track end.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelingOutcome {
    pub track: LabelTrack,
    pub clipped_segments: usize,
}

/// Rasterizes speaker segments into a per-frame label track of
/// `floor(duration_s * fps)` frames.
pub fn segments_to_labels(
    segments: &[Segment],
    duration_s: f64,
    clock: FrameClock,
) -> Result<LabelingOutcome> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::InvalidValue(format!("duration {duration_s} s")));
    }
    for seg in segments {
        if !(seg.start_s >= 0.0 && seg.start_s < seg.end_s) {
            return Err(Error::InvalidSegment {
                start_s: seg.start_s,
                end_s: seg.end_s,
            });
        }
    }
    let clipped_segments = segments.iter().filter(|s| s.end_s > duration_s).count();
    let num_frames = (duration_s * f64::from(clock.fps())).floor() as usize;
    let mut labels = vec![ClassId::Background; num_frames];
    for (i, label) in labels.iter_mut().enumerate() {
        let mid = frame_midpoint(i, clock);
        if mid >= duration_s {
            break;
        }
        let mut hit_other = false;
        for seg in segments {
            if seg.contains(mid) {
                if seg.speaker.is_target() {
                    *label = ClassId::TargetSpeaker;
                    hit_other = false;
                    break; // target precedence
                }
                hit_other = true;
            }
        }
        if hit_other {
            *label = ClassId::OtherSpeaker;
        }
    }
    Ok(LabelingOutcome {
        track: LabelTrack::new(clock, labels),
        clipped_segments,
    })
}

/// Inverse of [`segments_to_labels`] up to frame quantization: maximal runs
/// of TargetSpeaker/OtherSpeaker become segments spanning
/// `[first_frame/fps, (last_frame+1)/fps)`.
pub fn labels_to_segments(track: &LabelTrack) -> Vec<Segment> {
    let fps = f64::from(track.clock.fps());
    let mut segments = Vec::new();
    let mut run_start: Option<(usize, ClassId)> = None;
    for i in 0..=track.labels.len() {
        let current = track.labels.get(i).copied();
        match (run_start, current) {
            (Some((start, class)), next) if next != Some(class) => {
                if class != ClassId::Background {
                    let speaker = if class == ClassId::TargetSpeaker {
                        Speaker::Target
                    } else {
                        Speaker::Other(String::new())
                    };
                    segments.push(Segment {
                        speaker,
                        start_s: start as f64 / fps,
                        end_s: i as f64 / fps,
                    });
                }
                run_start = next.map(|c| (i, c));
            }
            (None, Some(c)) => run_start = Some((i, c)),
            _ => {}
        }
    }
    segments
}

/// Applies the 200 ms rule to binary speech spans: first merge consecutive
/// spans separated by gaps shorter than `min_dur_s`, then drop spans shorter
/// than `min_dur_s`. Idempotent.
pub fn smooth_segments(spans: &[Span], min_dur_s: f64) -> Result<Vec<Span>> {
    if !(min_dur_s >= 0.0 && min_dur_s.is_finite()) {
        return Err(Error::InvalidValue(format!("min duration {min_dur_s} s")));
    }
    for (i, span) in spans.iter().enumerate() {
        if !(span.start_s >= 0.0 && span.start_s < span.end_s) {
            return Err(Error::InvalidSegment {
                start_s: span.start_s,
                end_s: span.end_s,
            });
        }
        if i > 0 && span.start_s < spans[i - 1].end_s {
            return Err(Error::UnsortedSegments { index: i });
        }
    }

    // Pass 1: merge gaps shorter than min_dur_s.
    let mut merged: Vec<Span> = Vec::with_capacity(spans.len());
    for span in spans {
        match merged.last_mut() {
            Some(prev) if span.start_s - prev.end_s < min_dur_s => {
                prev.end_s = prev.end_s.max(span.end_s);
            }
            _ => merged.push(*span),
        }
    }

    // Pass 2: drop spans shorter than min_dur_s.
    merged.retain(|s| s.duration_s() >= min_dur_s);
    Ok(merged)
}

/// Labels at frames `t+1 .. t+horizon` of `track`, truncated at track end.
pub fn anticipation_targets(
    track: &LabelTrack,
    t: usize,
    horizon: usize,
) -> Result<AnticipationTargets> {
    let len = track.labels.len();
    if t >= len {
        return Err(Error::FrameOutOfBounds { index: t, len });
    }
    let end = (t + 1 + horizon).min(len);
    Ok(AnticipationTargets {
        origin_frame: t,
        horizon,
        targets: track.labels[t + 1..end].to_vec(),
    })
}

/// One transcript record: a timed segment attributed to a named speaker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub speaker: String,
    pub is_target: bool,
    pub start: f64,
    pub end: f64,
}

/// One VAD record: a timed binary speech span.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VadRecord {
    pub start: f64,
    pub end: f64,
}

/// Reads a line-delimited JSON transcript into segments.
pub fn read_transcript(path: &Path) -> Result<Vec<Segment>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut segments = Vec::new();
    for (line_no, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TranscriptRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: line_no + 1,
                reason: e.to_string(),
            })?;
        let speaker = if rec.is_target {
            Speaker::Target
        } else {
            Speaker::Other(rec.speaker)
        };
        segments.push(Segment::new(speaker, rec.start, rec.end)?);
    }
    Ok(segments)
}

/// Reads a line-delimited JSON VAD file into spans.
pub fn read_vad(path: &Path) -> Result<Vec<Span>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut spans = Vec::new();
    for (line_no, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VadRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no + 1,
            reason: e.to_string(),
        })?;
        spans.push(Span::new(rec.start, rec.end)?);
    }
    Ok(spans)
}

/// Writes spans as line-delimited JSON VAD records.
pub fn write_vad(spans: &[Span], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for span in spans {
        let rec = VadRecord {
            start: span.start_s,
            end: span.end_s,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("span is serializable"))?;
    }
    w.flush()?;
    Ok(())
}

/// Converts smoothed binary speech spans into a pseudo-label track mapping
/// speech to OtherSpeaker and silence to Background.
pub fn vad_to_labels(spans: &[Span], duration_s: f64, clock: FrameClock) -> Result<LabelingOutcome> {
    let segments: Vec<Segment> = spans
        .iter()
        .map(|s| Segment {
            speaker: Speaker::Other(String::new()),
            start_s: s.start_s,
            end_s: s.end_s,
        })
        .collect();
    segments_to_labels(&segments, duration_s, clock)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clock5() -> FrameClock {
        FrameClock::new(5).unwrap()
    }

    fn target(start: f64, end: f64) -> Segment {
        Segment::new(Speaker::Target, start, end).unwrap()
    }

    fn other(start: f64, end: f64) -> Segment {
        Segment::new(Speaker::Other("spk1".into()), start, end).unwrap()
    }

    fn codes(track: &LabelTrack) -> Vec<u8> {
        track.labels.iter().map(|c| c.code()).collect()
    }

    #[test]
    fn segments_to_labels_midpoint_rule() {
        let out = segments_to_labels(&[target(0.0, 0.4)], 1.0, clock5()).unwrap();
        assert_eq!(codes(&out.track), vec![1, 1, 0, 0, 0]);
        assert_eq!(out.clipped_segments, 0);
    }

    #[test]
    fn segments_to_labels_empty_is_background() {
        let out = segments_to_labels(&[], 0.6, clock5()).unwrap();
        assert_eq!(codes(&out.track), vec![0, 0, 0]);
    }

    #[test]
    fn segments_to_labels_target_precedence() {
        let out =
            segments_to_labels(&[target(0.0, 1.0), other(0.0, 1.0)], 1.0, clock5()).unwrap();
        assert_eq!(codes(&out.track), vec![1, 1, 1, 1, 1]);
    }

    #[test]
    fn segments_to_labels_clips_overlong() {
        let out = segments_to_labels(&[target(0.0, 2.0)], 1.0, clock5()).unwrap();
        assert_eq!(out.track.len(), 5);
        assert_eq!(out.clipped_segments, 1);
    }

    #[test]
    fn labels_to_segments_examples() {
        let track = LabelTrack::new(
            clock5(),
            [1u8, 1, 0, 0, 0]
                .iter()
                .map(|&c| ClassId::from_code(c).unwrap())
                .collect(),
        );
        let segs = labels_to_segments(&track);
        assert_eq!(segs.len(), 1);
        assert!(segs[0].speaker.is_target());
        assert!((segs[0].start_s - 0.0).abs() < 1e-12);
        assert!((segs[0].end_s - 0.4).abs() < 1e-12);

        let empty = LabelTrack::new(clock5(), vec![ClassId::Background; 3]);
        assert!(labels_to_segments(&empty).is_empty());

        let alternating = LabelTrack::new(
            clock5(),
            [1u8, 2, 1]
                .iter()
                .map(|&c| ClassId::from_code(c).unwrap())
                .collect(),
        );
        let segs = labels_to_segments(&alternating);
        assert_eq!(segs.len(), 3);
        assert!(segs[0].speaker.is_target());
        assert!((segs[0].start_s, segs[0].end_s) == (0.0, 0.2));
        assert!(!segs[1].speaker.is_target());
        assert!((segs[1].start_s - 0.2).abs() < 1e-12 && (segs[1].end_s - 0.4).abs() < 1e-12);
        assert!(segs[2].speaker.is_target());
        assert!((segs[2].start_s - 0.4).abs() < 1e-12 && (segs[2].end_s - 0.6).abs() < 1e-12);
    }

    #[test]
    fn smooth_merges_short_gap() {
        let spans = vec![Span::new(0.0, 1.0).unwrap(), Span::new(1.1, 2.0).unwrap()];
        let out = smooth_segments(&spans, DEFAULT_MIN_DUR_S).unwrap();
        assert_eq!(out, vec![Span::new(0.0, 2.0).unwrap()]);
    }

    #[test]
    fn smooth_drops_short_span() {
        let spans = vec![Span::new(0.0, 0.15).unwrap()];
        let out = smooth_segments(&spans, DEFAULT_MIN_DUR_S).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn smooth_keeps_well_separated() {
        let spans = vec![Span::new(0.0, 1.0).unwrap(), Span::new(1.5, 2.5).unwrap()];
        let out = smooth_segments(&spans, DEFAULT_MIN_DUR_S).unwrap();
        assert_eq!(out, spans);
    }

    #[test]
    fn smooth_rejects_unsorted() {
        let spans = vec![Span::new(1.0, 2.0).unwrap(), Span::new(0.0, 0.5).unwrap()];
        assert!(matches!(
            smooth_segments(&spans, 0.2),
            Err(Error::UnsortedSegments { index: 1 })
        ));
        let overlapping = vec![Span::new(0.0, 1.0).unwrap(), Span::new(0.5, 2.0).unwrap()];
        assert!(smooth_segments(&overlapping, 0.2).is_err());
    }

    #[test]
    fn anticipation_targets_examples() {
        let track = LabelTrack::new(
            clock5(),
            [0u8, 0, 1, 1, 1]
                .iter()
                .map(|&c| ClassId::from_code(c).unwrap())
                .collect(),
        );
        let t1 = anticipation_targets(&track, 1, 3).unwrap();
        assert_eq!(
            t1.targets,
            vec![ClassId::TargetSpeaker; 3],
        );
        let t3 = anticipation_targets(&track, 3, 3).unwrap();
        assert_eq!(t3.targets, vec![ClassId::TargetSpeaker]);
        let t0 = anticipation_targets(&track, 0, 0).unwrap();
        assert!(t0.targets.is_empty());
        assert!(anticipation_targets(&track, 5, 3).is_err());
    }

    #[test]
    fn transcript_and_vad_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transcript.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"speaker\":\"wearer\",\"is_target\":true,\"start\":0.0,\"end\":0.4}\n",
                "{\"speaker\":\"guest\",\"is_target\":false,\"start\":0.5,\"end\":1.0}\n",
            ),
        )
        .unwrap();
        let segs = read_transcript(&path).unwrap();
        assert_eq!(segs.len(), 2);
        assert!(segs[0].speaker.is_target());
        assert_eq!(segs[1].speaker, Speaker::Other("guest".into()));

        let vad_path = dir.path().join("vad.jsonl");
        let spans = vec![Span::new(0.0, 0.4).unwrap(), Span::new(0.7, 1.0).unwrap()];
        write_vad(&spans, &vad_path).unwrap();
        assert_eq!(read_vad(&vad_path).unwrap(), spans);
    }

    #[test]
    fn vad_labels_map_to_other() {
        let spans = vec![Span::new(0.0, 0.4).unwrap()];
        let out = vad_to_labels(&spans, 1.0, clock5()).unwrap();
        assert_eq!(codes(&out.track), vec![2, 2, 0, 0, 0]);
    }

    /// Random non-overlapping segment lists with all boundaries on frames
    /// and at least one frame per segment/gap.
    fn arb_segments() -> impl Strategy<Value = Vec<Segment>> {
        prop::collection::vec((1usize..6, 1usize..6, prop::bool::ANY), 0..6).prop_map(|runs| {
            let mut segments = Vec::new();
            let mut t = 0usize; // in frames at 5 fps
            for (gap, len, is_target) in runs {
                t += gap;
                let start = t as f64 * 0.2;
                t += len;
                let end = t as f64 * 0.2;
                let speaker = if is_target {
                    Speaker::Target
                } else {
                    Speaker::Other(String::new())
                };
                segments.push(Segment { speaker, start_s: start, end_s: end });
            }
            segments
        })
    }

    proptest! {
        /// Round trip reproduces every boundary within one frame.
        #[test]
        fn round_trip_boundaries_within_one_frame(segments in arb_segments()) {
            let clock = clock5();
            let duration = segments.last().map(|s| s.end_s + 0.4).unwrap_or(1.0);
            let out = segments_to_labels(&segments, duration, clock).unwrap();
            let rebuilt = labels_to_segments(&out.track);
            prop_assert_eq!(rebuilt.len(), segments.len());
            let tol = clock.frame_duration_s() + 1e-9;
            for (orig, back) in segments.iter().zip(&rebuilt) {
                prop_assert_eq!(orig.speaker.is_target(), back.speaker.is_target());
                prop_assert!((orig.start_s - back.start_s).abs() <= tol);
                prop_assert!((orig.end_s - back.end_s).abs() <= tol);
            }
        }

        #[test]
        fn smoothing_is_idempotent_and_non_increasing(
            raw in prop::collection::vec((0.0f64..5.0, 0.01f64..1.5), 0..12)
        ) {
            let mut spans = Vec::new();
            let mut t = 0.0;
            for (gap, len) in raw {
                let start = t + gap;
                let end = start + len;
                spans.push(Span { start_s: start, end_s: end });
                t = end;
            }
            let once = smooth_segments(&spans, DEFAULT_MIN_DUR_S).unwrap();
            let twice = smooth_segments(&once, DEFAULT_MIN_DUR_S).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.len() <= spans.len());
            for (i, span) in once.iter().enumerate() {
                prop_assert!(span.duration_s() >= DEFAULT_MIN_DUR_S - 1e-12);
                if i > 0 {
                    prop_assert!(span.start_s - once[i - 1].end_s >= DEFAULT_MIN_DUR_S - 1e-12);
                }
            }
        }

        #[test]
        fn labels_are_valid_codes(segments in arb_segments()) {
            let duration = segments.last().map(|s| s.end_s + 0.4).unwrap_or(1.0);
            let out = segments_to_labels(&segments, duration, clock5()).unwrap();
            for label in &out.track.labels {
                prop_assert!(label.code() <= 2);
            }
        }
    }
}
