//! Runtime analysis: measured inference throughput, parameter count, and an
//! analytic FLOP estimate per frame.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::features::{synth_conversation, SynthConfig};
use crate::model::{stream_forward, GruParams, ModelConfig};
use crate::timebase::FrameClock;

/// Throughput and cost summary for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub frames_per_second: f64,
    pub param_count: usize,
    pub flops_per_frame: u64,
    pub wall_clock_s: f64,
    pub num_frames: usize,
    pub repeats: usize,
    pub config: ModelConfig,
}

/// Scalar parameter count of the architecture:
/// embedding + three gates + head, biases included.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (di, de, dh) = (cfg.d_in, cfg.d_embed, cfg.d_hidden);
    let head = cfg.horizon * cfg.num_classes;
    di * de + de + 3 * (de * dh + dh * dh + dh) + dh * head + head
}

/// Analytic FLOPs per frame: 2 FLOPs per multiply-accumulate of the
/// embedding, the three gates, and the head; element-wise ops ignored.
pub fn flops_per_frame(cfg: &ModelConfig) -> u64 {
    let (di, de, dh) = (cfg.d_in as u64, cfg.d_embed as u64, cfg.d_hidden as u64);
    let head = (cfg.horizon * cfg.num_classes) as u64;
    2 * (di * de + 3 * (de * dh + dh * dh) + dh * head)
}

/// Runs `stream_forward` over synthetic data and reports the median
/// frames-per-second over `repeats` timed passes, after one warm-up pass.
pub fn measure_throughput(
    params: &GruParams,
    num_frames: usize,
    repeats: usize,
) -> Result<BenchResult> {
    if num_frames < 1000 {
        return Err(Error::InvalidValue(
            "use at least 1000 frames for stable timing".into(),
        ));
    }
    if repeats == 0 {
        return Err(Error::InvalidValue("repeats must be >= 1".into()));
    }
    let cfg = params.cfg;
    let synth = SynthConfig {
        dim: cfg.d_in.max(3),
        seed: 1,
        ..SynthConfig::default()
    };
    let (stream, _) = synth_conversation(&synth, num_frames, FrameClock::default())?;
    let stream = if synth.dim == cfg.d_in {
        stream
    } else {
        // d_in < 3: truncate each frame to the model's input width.
        let mut vals = Vec::with_capacity(num_frames * cfg.d_in);
        for i in 0..num_frames {
            vals.extend_from_slice(&stream.frame(i)[..cfg.d_in]);
        }
        crate::features::FeatureStream::new(stream.clock, cfg.d_in, vals, "synthetic")?
    };

    // Warm-up pass, excluded from timing.
    let out = stream_forward(params, &stream)?;
    assert_eq!(out.len(), num_frames);

    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = stream_forward(params, &stream)?;
        let elapsed = start.elapsed().as_secs_f64();
        debug_assert_eq!(out.len(), num_frames);
        times.push(elapsed);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let median = times[times.len() / 2];
    Ok(BenchResult {
        frames_per_second: num_frames as f64 / median,
        param_count: count_params(&cfg),
        flops_per_frame: flops_per_frame(&cfg),
        wall_clock_s: times.iter().sum(),
        num_frames,
        repeats,
        config: cfg,
    })
}

/// Appends one CSV row `config,params,flops_per_frame,fps` (with header on a
/// fresh file).
pub fn write_bench_csv(result: &BenchResult, path: &Path) -> Result<()> {
    let fresh = !path.exists();
    let mut w = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?,
    );
    if fresh {
        writeln!(w, "config,params,flops_per_frame,fps")?;
    }
    let cfg = &result.config;
    writeln!(
        w,
        "in{}-e{}-h{}-a{},{},{},{:.1}",
        cfg.d_in,
        cfg.d_embed,
        cfg.d_hidden,
        cfg.horizon,
        result.param_count,
        result.flops_per_frame,
        result.frames_per_second
    )?;
    w.flush()?;
    Ok(())
}
