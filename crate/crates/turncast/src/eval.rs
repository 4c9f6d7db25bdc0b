//! Anticipatory per-frame average precision: AP per class per future
//! offset, aggregated to per-offset means and an overall average.
//!
//! Ties are broken by ascending frame index after descending score, so
//! heavily tied binary baseline tracks evaluate deterministically. Classes
//! with zero positives yield an absent AP (never 0) and are excluded from
//! the means.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::AnticipationScores;
use crate::timebase::{ClassId, LabelTrack, NUM_CLASSES};

/// Which set of precision values the AP averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApVariant {
    /// Standard non-interpolated AP: mean of precision at each positive's
    /// rank.
    #[default]
    PositivesRank,
    /// Mean of precision at every rank.
    AllThresholds,
}

impl ApVariant {
    pub fn name(self) -> &'static str {
        match self {
            ApVariant::PositivesRank => "positives-rank",
            ApVariant::AllThresholds => "all-thresholds",
        }
    }
}

/// Average precision of `scores` against binary `positives`. `None` when
/// there are no positives (absent, not zero).
pub fn average_precision(scores: &[f64], positives: &[bool], variant: ApVariant) -> Result<Option<f64>> {
    if scores.len() != positives.len() || scores.is_empty() {
        return Err(Error::DimMismatch {
            expected: scores.len(),
            got: positives.len(),
            context: "average_precision inputs",
        });
    }
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            index: bad,
            context: "confidence scores",
        });
    }
    if !positives.iter().any(|&p| p) {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Descending score, ascending index on ties.
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut true_positives = 0usize;
    let mut sum = 0.0;
    let mut terms = 0usize;
    for (rank0, &idx) in order.iter().enumerate() {
        let rank = rank0 + 1;
        if positives[idx] {
            true_positives += 1;
        }
        let precision = true_positives as f64 / rank as f64;
        match variant {
            ApVariant::PositivesRank => {
                if positives[idx] {
                    sum += precision;
                    terms += 1;
                }
            }
            ApVariant::AllThresholds => {
                sum += precision;
                terms += 1;
            }
        }
    }
    Ok(Some(sum / terms as f64))
}

/// Per-class, per-offset average precision with aggregate means.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub horizon: usize,
    pub fps: u32,
    pub variant: ApVariant,
    /// `ap[offset][class]`, absent where a class has no positives.
    pub ap: Vec<[Option<f64>; NUM_CLASSES]>,
    /// Mean over present classes per offset.
    pub map_per_offset: Vec<Option<f64>>,
    /// Mean over offsets of `map_per_offset`.
    pub avg_map: Option<f64>,
    /// Mean over offsets per class.
    pub per_class_avg: [Option<f64>; NUM_CLASSES],
    /// Count of absent (offset, class) cells excluded from the means.
    pub absent_cells: usize,
}

impl EvalReport {
    pub fn offset_seconds(&self, offset_idx: usize) -> f64 {
        (offset_idx + 1) as f64 / f64::from(self.fps)
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Scores every (offset, class) cell of a prediction stream against the
/// ground-truth track: pairs `(pred[t].prob(j-1, k), gt[t+j] == k)` over all
/// `t` with `t + j < T`.
#[allow(clippy::needless_range_loop)]
pub fn evaluate_stream(
    pred: &[AnticipationScores],
    gt: &LabelTrack,
    variant: ApVariant,
) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch {
            expected: gt.len(),
            got: pred.len(),
            context: "prediction stream length",
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidValue("empty prediction stream".into()));
    }
    let horizon = pred[0].horizon;
    if horizon == 0 {
        return Err(Error::InvalidValue("horizon must be >= 1".into()));
    }
    if pred.iter().any(|s| s.horizon != horizon) {
        return Err(Error::InvalidValue("inconsistent horizon across frames".into()));
    }

    let t_total = gt.len();
    let mut ap = vec![[None; NUM_CLASSES]; horizon];
    let mut absent_cells = 0usize;
    for j in 1..=horizon {
        let pairs = t_total.saturating_sub(j);
        if pairs == 0 {
            absent_cells += NUM_CLASSES;
            continue;
        }
        for class in ClassId::ALL {
            let k = class.code() as usize;
            let mut scores = Vec::with_capacity(pairs);
            let mut positives = Vec::with_capacity(pairs);
            for t in 0..pairs {
                scores.push(pred[t].prob(j - 1, k));
                positives.push(gt.labels[t + j] == class);
            }
            let cell = average_precision(&scores, &positives, variant)?;
            if cell.is_none() {
                absent_cells += 1;
            }
            ap[j - 1][k] = cell;
        }
    }

    let map_per_offset: Vec<Option<f64>> = ap
        .iter()
        .map(|row| mean_present(row.iter().copied()))
        .collect();
    let avg_map = mean_present(map_per_offset.iter().copied());
    let mut per_class_avg = [None; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        per_class_avg[k] = mean_present(ap.iter().map(|row| row[k]));
    }

    Ok(EvalReport {
        horizon,
        fps: gt.clock.fps(),
        variant,
        ap,
        map_per_offset,
        avg_map,
        per_class_avg,
        absent_cells,
    })
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes the human-readable table (offset columns as seconds plus an Avg
/// column) followed by a machine-readable CSV matrix `offset_s,class,ap`.
pub fn write_report(report: &EvalReport, text_path: &Path, csv_path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(text_path)?);
    writeln!(w, "anticipatory average precision (variant: {})", report.variant.name())?;
    write!(w, "{:<16}", "class")?;
    for j in 0..report.horizon {
        write!(w, "{:>10}", format!("{:.2}s", report.offset_seconds(j)))?;
    }
    writeln!(w, "{:>10}", "Avg")?;
    for class in ClassId::ALL {
        let k = class.code() as usize;
        write!(w, "{:<16}", class.name())?;
        for j in 0..report.horizon {
            write!(w, "{:>10}", fmt_cell(report.ap[j][k]))?;
        }
        writeln!(w, "{:>10}", fmt_cell(report.per_class_avg[k]))?;
    }
    write!(w, "{:<16}", "mAP")?;
    for j in 0..report.horizon {
        write!(w, "{:>10}", fmt_cell(report.map_per_offset[j]))?;
    }
    writeln!(w, "{:>10}", fmt_cell(report.avg_map))?;
    writeln!(w, "absent cells excluded from means: {}", report.absent_cells)?;
    w.flush()?;

    let mut c = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
    writeln!(c, "offset_s,class,ap")?;
    for j in 0..report.horizon {
        for class in ClassId::ALL {
            writeln!(
                c,
                "{:.2},{},{}",
                report.offset_seconds(j),
                class.code(),
                fmt_cell(report.ap[j][class.code() as usize])
            )?;
        }
    }
    c.flush()?;
    Ok(())
}

/// Reads back the CSV matrix written by [`write_report`].
pub fn read_report_csv(path: &Path) -> Result<Vec<(f64, u8, Option<f64>)>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for (line_no, line) in file.lines().enumerate() {
        let line = line?;
        if line_no == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::MalformedRecord {
                line: line_no + 1,
                reason: "expected offset_s,class,ap".into(),
            });
        }
        let offset: f64 = parts[0].parse().map_err(|_| Error::MalformedRecord {
            line: line_no + 1,
            reason: "bad offset".into(),
        })?;
        let class: u8 = parts[1].parse().map_err(|_| Error::MalformedRecord {
            line: line_no + 1,
            reason: "bad class".into(),
        })?;
        let ap = if parts[2].is_empty() {
            None
        } else {
            Some(parts[2].parse().map_err(|_| Error::MalformedRecord {
                line: line_no + 1,
                reason: "bad ap".into(),
            })?)
        };
        rows.push((offset, class, ap));
    }
    Ok(rows)
}

pub mod oracle {
    //! Brute-force AP oracle over exact rational arithmetic. Test
    //! infrastructure: deliberately independent of the incremental
    //! implementation in this module so the two can check each other.

    /// Unreduced rational accumulator on i128.
    #[derive(Debug, Clone, Copy)]
    pub struct Ratio {
        num: i128,
        den: i128,
    }

    impl Ratio {
        pub fn new(num: i128, den: i128) -> Self {
            assert!(den != 0);
            Ratio { num, den }.reduced()
        }

        fn reduced(self) -> Self {
            fn gcd(a: i128, b: i128) -> i128 {
                if b == 0 {
                    a.abs()
                } else {
                    gcd(b, a % b)
                }
            }
            let g = gcd(self.num, self.den).max(1);
            Ratio {
                num: self.num / g,
                den: self.den / g,
            }
        }

        pub fn plus(self, other: Ratio) -> Ratio {
            Ratio::new(self.num * other.den + other.num * self.den, self.den * other.den)
        }

        pub fn div_int(self, k: i128) -> Ratio {
            Ratio::new(self.num, self.den * k)
        }

        pub fn to_f64(self) -> f64 {
            self.num as f64 / self.den as f64
        }
    }

    /// Exact AP by rank enumeration: stable sort on descending score (stable
    /// sort preserves index order on ties), then exact rational precision
    /// sums.
    pub fn average_precision_exact(scores: &[f64], positives: &[bool], all_thresholds: bool) -> Option<f64> {
        let mut items: Vec<(f64, bool)> = scores.iter().copied().zip(positives.iter().copied()).collect();
        items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        if !positives.iter().any(|&p| p) {
            return None;
        }
        let mut tp: i128 = 0;
        let mut acc = Ratio::new(0, 1);
        let mut terms: i128 = 0;
        for (rank0, &(_, positive)) in items.iter().enumerate() {
            let rank = rank0 as i128 + 1;
            if positive {
                tp += 1;
            }
            if all_thresholds || positive {
                acc = acc.plus(Ratio::new(tp, rank));
                terms += 1;
            }
        }
        Some(acc.div_int(terms).to_f64())
    }
}
