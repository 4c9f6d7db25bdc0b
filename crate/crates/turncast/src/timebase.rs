//! Fixed-rate frame clock and the label/segment vocabulary shared by all modules.
//!
//! Frame `i` covers the half-open interval `[i/fps, (i+1)/fps)`; boundaries
//! belong to the later frame.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Number of frame classes.
pub const NUM_CLASSES: usize = 3;

/// Three-way frame class. Numeric codes are stable across serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ClassId {
    Background = 0,
    TargetSpeaker = 1,
    OtherSpeaker = 2,
}

impl ClassId {
    pub const ALL: [ClassId; NUM_CLASSES] = [
        ClassId::Background,
        ClassId::TargetSpeaker,
        ClassId::OtherSpeaker,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ClassId::Background),
            1 => Ok(ClassId::TargetSpeaker),
            2 => Ok(ClassId::OtherSpeaker),
            other => Err(Error::InvalidValue(format!("class code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Background => "background",
            ClassId::TargetSpeaker => "target_speaker",
            ClassId::OtherSpeaker => "other_speaker",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// Fixed frame rate, stored as a positive integer so that
/// `frame_duration_s * fps == 1` holds exactly in rational form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameClock {
    fps: u32,
}

impl FrameClock {
    pub const DEFAULT_FPS: u32 = 5;

    pub fn new(fps: u32) -> Result<Self> {
        if fps == 0 {
            return Err(Error::InvalidFps("fps must be positive".into()));
        }
        Ok(FrameClock { fps })
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn frame_duration_s(&self) -> f64 {
        1.0 / f64::from(self.fps)
    }
}

impl Default for FrameClock {
    fn default() -> Self {
        FrameClock {
            fps: Self::DEFAULT_FPS,
        }
    }
}

/// Who a transcript segment belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Speaker {
    Target,
    /// Another speaker, with whatever identifier the transcript carried.
    Other(String),
}

impl Speaker {
    pub fn is_target(&self) -> bool {
        matches!(self, Speaker::Target)
    }
}

/// A speech segment attributed to one speaker, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub speaker: Speaker,
    pub start_s: f64,
    pub end_s: f64,
}

impl Segment {
    pub fn new(speaker: Speaker, start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s >= 0.0 && start_s < end_s) {
            return Err(Error::InvalidSegment { start_s, end_s });
        }
        Ok(Segment {
            speaker,
            start_s,
            end_s,
        })
    }

    /// Half-open containment, consistent with the frame convention.
    pub fn contains(&self, t_s: f64) -> bool {
        self.start_s <= t_s && t_s < self.end_s
    }
}

/// A speaker-less time span, as produced by voice activity detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub start_s: f64,
    pub end_s: f64,
}

impl Span {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s >= 0.0 && start_s < end_s) {
            return Err(Error::InvalidSegment { start_s, end_s });
        }
        Ok(Span { start_s, end_s })
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Per-frame class sequence at a fixed frame rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTrack {
    pub clock: FrameClock,
    pub labels: Vec<ClassId>,
}

impl LabelTrack {
    pub fn new(clock: FrameClock, labels: Vec<ClassId>) -> Self {
        LabelTrack { clock, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Writes the track as CSV with header `frame,class`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "frame,class")?;
        for (i, label) in self.labels.iter().enumerate() {
            writeln!(w, "{},{}", i, label.code())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a track written by [`LabelTrack::write_csv`]. Frames must be
    /// contiguous starting at 0.
    pub fn read_csv(path: &Path, clock: FrameClock) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut labels = Vec::new();
        for (line_no, line) in file.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line_no == 0 {
                if line != "frame,class" {
                    return Err(Error::MalformedRecord {
                        line: 1,
                        reason: format!("expected header `frame,class`, found `{line}`"),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let malformed = |reason: &str| Error::MalformedRecord {
                line: line_no + 1,
                reason: reason.to_string(),
            };
            let frame: usize = parts
                .next()
                .ok_or_else(|| malformed("missing frame"))?
                .trim()
                .parse()
                .map_err(|_| malformed("bad frame index"))?;
            let class: u8 = parts
                .next()
                .ok_or_else(|| malformed("missing class"))?
                .trim()
                .parse()
                .map_err(|_| malformed("bad class code"))?;
            if frame != labels.len() {
                return Err(malformed("frames must be contiguous from 0"));
            }
            labels.push(ClassId::from_code(class)?);
        }
        Ok(LabelTrack { clock, labels })
    }
}

/// Frame index containing time `t_s`: `floor(t_s * fps)`.
pub fn time_to_frame(t_s: f64, clock: FrameClock) -> Result<usize> {
    if !t_s.is_finite() || t_s < 0.0 {
        return Err(Error::NegativeTime(t_s));
    }
    Ok((t_s * f64::from(clock.fps())).floor() as usize)
}

/// Midpoint of frame `i` in seconds: `(i + 0.5) / fps`.
pub fn frame_midpoint(i: usize, clock: FrameClock) -> f64 {
    (i as f64 + 0.5) / f64::from(clock.fps())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clock5() -> FrameClock {
        FrameClock::new(5).unwrap()
    }

    #[test]
    fn class_codes_are_stable() {
        assert_eq!(ClassId::Background.code(), 0);
        assert_eq!(ClassId::TargetSpeaker.code(), 1);
        assert_eq!(ClassId::OtherSpeaker.code(), 2);
        for c in ClassId::ALL {
            assert_eq!(ClassId::from_code(c.code()).unwrap(), c);
        }
        assert!(ClassId::from_code(3).is_err());
    }

    #[test]
    fn time_to_frame_examples() {
        assert_eq!(time_to_frame(0.0, clock5()).unwrap(), 0);
        // Exact boundary maps to the next frame.
        assert_eq!(time_to_frame(0.2, clock5()).unwrap(), 1);
        // floor(0.39 * 5) = floor(1.95) = 1.
        assert_eq!(time_to_frame(0.39, clock5()).unwrap(), 1);
    }

    #[test]
    fn time_to_frame_rejects_negative() {
        assert!(matches!(
            time_to_frame(-0.1, clock5()),
            Err(Error::NegativeTime(_))
        ));
    }

    #[test]
    fn frame_midpoint_examples() {
        assert!((frame_midpoint(0, clock5()) - 0.1).abs() < 1e-12);
        assert!((frame_midpoint(4, clock5()) - 0.9).abs() < 1e-12);
        assert!((frame_midpoint(9, clock5()) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clock_duration_is_reciprocal() {
        let clock = FrameClock::new(5).unwrap();
        assert_eq!(clock.frame_duration_s() * clock.fps() as f64, 1.0);
        assert!(FrameClock::new(0).is_err());
    }

    #[test]
    fn segment_validation() {
        assert!(Segment::new(Speaker::Target, 0.0, 1.0).is_ok());
        assert!(Segment::new(Speaker::Target, 1.0, 1.0).is_err());
        assert!(Segment::new(Speaker::Target, -0.5, 1.0).is_err());
    }

    #[test]
    fn label_track_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.csv");
        let track = LabelTrack::new(
            clock5(),
            vec![
                ClassId::Background,
                ClassId::TargetSpeaker,
                ClassId::OtherSpeaker,
                ClassId::TargetSpeaker,
            ],
        );
        track.write_csv(&path).unwrap();
        let back = LabelTrack::read_csv(&path, clock5()).unwrap();
        assert_eq!(back, track);
    }

    proptest! {
        #[test]
        fn time_to_frame_monotone(a in 0.0f64..1e6, b in 0.0f64..1e6) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let clock = clock5();
            prop_assert!(time_to_frame(lo, clock).unwrap() <= time_to_frame(hi, clock).unwrap());
        }

        #[test]
        fn midpoint_lies_inside_frame(t in 0.0f64..1e6) {
            let clock = clock5();
            let i = time_to_frame(t, clock).unwrap();
            let mid = frame_midpoint(i, clock);
            let lo = i as f64 / clock.fps() as f64;
            let hi = (i + 1) as f64 / clock.fps() as f64;
            prop_assert!(mid >= lo && mid < hi);
            prop_assert!((mid - t).abs() <= clock.frame_duration_s());
        }
    }
}
