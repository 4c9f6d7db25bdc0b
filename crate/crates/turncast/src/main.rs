use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use turncast::cli::{
    self, parse_config, BaselineArgs, BaselineKind, BenchArgs, EvalArgs, LabelArgs, RunConfig,
    SweepArgs, SynthArgs, TrainArgs,
};
use turncast::features::read_feature_file;
use turncast::model::read_checkpoint;
use turncast::Error;

#[derive(Parser)]
#[command(
    name = "turncast",
    about = "Streaming speech-initiation prediction: synthesis, labeling, training, evaluation, baselines, benchmarking"
)]
struct Cli {
    /// Flat key = value config file, applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flag overrides; each one beats the config file.
#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    fps: Option<u32>,
    #[arg(long, global = true)]
    d_in: Option<usize>,
    #[arg(long, global = true)]
    d_embed: Option<usize>,
    #[arg(long, global = true)]
    d_hidden: Option<usize>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    #[arg(long, global = true)]
    window_len: Option<usize>,
    #[arg(long, global = true)]
    peak_lr: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    warmup_fraction: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    separation: Option<f64>,
    #[arg(long, global = true)]
    noise_sigma: Option<f64>,
    #[arg(long, global = true)]
    cue_lead: Option<usize>,
    #[arg(long, global = true)]
    dwell_background: Option<f64>,
    #[arg(long, global = true)]
    dwell_target: Option<f64>,
    #[arg(long, global = true)]
    dwell_other: Option<f64>,
    #[arg(long, global = true)]
    p_bg_to_target: Option<f64>,
    #[arg(long, global = true)]
    p_target_to_bg: Option<f64>,
    #[arg(long, global = true)]
    p_other_to_bg: Option<f64>,
    #[arg(long, global = true)]
    num_frames: Option<usize>,
    #[arg(long, global = true)]
    trigger_threshold: Option<f64>,
    #[arg(long, global = true)]
    silence_ms: Option<u32>,
    #[arg(long, global = true)]
    grace_frames: Option<usize>,
    #[arg(long, global = true)]
    ap_variant: Option<String>,
}

impl Overrides {
    fn as_kv(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        macro_rules! push {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    kv.push((stringify!($field).to_string(), v.to_string()));
                }
            };
        }
        push!(fps);
        push!(d_in);
        push!(d_embed);
        push!(d_hidden);
        push!(horizon);
        push!(window_len);
        push!(peak_lr);
        push!(weight_decay);
        push!(warmup_fraction);
        push!(epochs);
        push!(batch_size);
        push!(seed);
        push!(dim);
        push!(separation);
        push!(noise_sigma);
        push!(cue_lead);
        push!(dwell_background);
        push!(dwell_target);
        push!(dwell_other);
        push!(p_bg_to_target);
        push!(p_target_to_bg);
        push!(p_other_to_bg);
        push!(num_frames);
        push!(trigger_threshold);
        push!(silence_ms);
        push!(grace_frames);
        push!(ap_variant);
        kv
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled conversation: features + label track.
    Synth {
        #[arg(long)]
        out_features: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
    /// Convert a transcript or VAD file into a per-frame label track.
    Label {
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long)]
        vad: Option<PathBuf>,
        /// Apply the 200 ms merge/drop rule to VAD spans first.
        #[arg(long)]
        smooth: bool,
        /// Clip duration in seconds.
        #[arg(long)]
        duration: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the online model on one or more (features, labels) clips.
    Train {
        #[arg(long, required = true)]
        features: Vec<PathBuf>,
        #[arg(long, required = true)]
        labels: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint against ground-truth labels.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Report file prefix; writes <prefix>.txt and <prefix>.csv.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Evaluate a non-learned baseline against ground-truth labels.
    Baseline {
        #[arg(value_parser = ["random", "silence"])]
        kind: String,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out_prefix: PathBuf,
        /// Also export silence-baseline trigger frames as CSV.
        #[arg(long)]
        triggers_csv: Option<PathBuf>,
    },
    /// Measure throughput and report parameters and analytic FLOPs.
    Bench {
        /// Use the full-scale preset instead of the configured dims.
        #[arg(long)]
        full_scale: bool,
        #[arg(long, default_value_t = 10_000)]
        frames: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Stream frames through a checkpoint, emitting one JSON record per
    /// frame with a speak trigger.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Read frames from a feature file instead of stdin lines.
        #[arg(long)]
        input_file: Option<PathBuf>,
    },
    /// Train at several window lengths and report held-out avg mAP per
    /// length.
    #[command(name = "sweep-L")]
    SweepL {
        /// Comma-separated window lengths, e.g. 8,16,32.
        #[arg(long, value_delimiter = ',', required = true)]
        window_lens: Vec<usize>,
        #[arg(long)]
        out_csv: PathBuf,
    },
}

fn run(cli: Cli) -> turncast::Result<()> {
    let cfg: RunConfig = parse_config(cli.config.as_deref(), &cli.overrides.as_kv())?;
    eprint!("resolved config:\n{}", cfg.echo());
    match cli.command {
        Command::Synth {
            out_features,
            out_labels,
        } => cli::run_synth(
            &cfg,
            &SynthArgs {
                out_features,
                out_labels,
            },
        ),
        Command::Label {
            transcript,
            vad,
            smooth,
            duration,
            out,
        } => cli::run_label(
            &cfg,
            &LabelArgs {
                transcript,
                vad,
                smooth,
                duration_s: duration,
                out,
            },
        ),
        Command::Train {
            features,
            labels,
            out_dir,
        } => cli::run_train(
            &cfg,
            &TrainArgs {
                features,
                labels,
                out_dir,
            },
        ),
        Command::Eval {
            checkpoint,
            features,
            labels,
            out_prefix,
        } => cli::run_eval(
            &cfg,
            &EvalArgs {
                checkpoint,
                features,
                labels,
                out_prefix,
            },
        )
        .map(|_| ()),
        Command::Baseline {
            kind,
            labels,
            out_prefix,
            triggers_csv,
        } => cli::run_baseline(
            &cfg,
            &BaselineArgs {
                kind: if kind == "random" {
                    BaselineKind::Random
                } else {
                    BaselineKind::Silence
                },
                labels,
                out_prefix,
                triggers_csv,
            },
        )
        .map(|_| ()),
        Command::Bench {
            full_scale,
            frames,
            repeats,
            out_csv,
        } => cli::run_bench(
            &cfg,
            &BenchArgs {
                full_scale,
                frames,
                repeats,
                out_csv,
            },
        ),
        Command::Stream {
            checkpoint,
            input_file,
        } => {
            let params = read_checkpoint(&checkpoint)?;
            let stdout = std::io::stdout().lock();
            let emitted = match input_file {
                Some(path) => {
                    let stream = read_feature_file(&path)?;
                    cli::stream_file(&params, cfg.trigger_threshold, &stream, stdout)?
                }
                None => {
                    let stdin = BufReader::new(std::io::stdin().lock());
                    cli::stream_mode(
                        &params,
                        cfg.trigger_threshold,
                        stdin,
                        stdout,
                        std::io::stderr().lock(),
                    )?
                }
            };
            eprintln!("stream: emitted {emitted} records");
            Ok(())
        }
        Command::SweepL {
            window_lens,
            out_csv,
        } => cli::run_sweep(
            &cfg,
            &SweepArgs {
                window_lens,
                out_csv,
            },
        ),
    }
}

/// Exit codes: 0 success, 2 config error, 3 runtime/data error.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::UnknownKey(_) | Error::InvalidFps(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
