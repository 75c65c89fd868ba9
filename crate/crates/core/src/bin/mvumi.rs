use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mvumi::eval::ablate::{ablate, AblationConfig};
use mvumi::eval::report::{self, render_text};
use mvumi::eval::{rollout, DeployMode};
use mvumi::inpaint::{inpaint_session, MaskSource};
use mvumi::policy::{samples_from, train, write_loss_trace, PolicyParams, TrainConfig};
use mvumi::segment::{segment_session, BgSubParams, PromptSet, SegmenterKind};
use mvumi::session::{validate_episode, write_bytes};
use mvumi::sim::{generate_session, SimConfig};
use mvumi::sync::{read_dataset, sync_session};
use mvumi::types::Embodiment;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "mvumi",
    version,
    about = "Cross-embodiment demonstration pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a recording session into a directory.
    Sim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        embodiment: Embodiment,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment the embodiment in the third-person stream.
    Segment {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        kind: SegmenterKind,
        /// Prompt file; defaults to the session's own prompts.json.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Replace masked pixels with the background reference.
    Inpaint {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        masks: MaskSource,
        #[arg(long, default_value_t = 0)]
        feather: u32,
    },
    /// Pair the streams, label actions and write the dataset.
    Sync {
        #[arg(long)]
        session: PathBuf,
    },
    /// Train a policy on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        p0: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        iters: usize,
        #[arg(long)]
        lr: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Zero the third view at train and deploy time.
        #[arg(long)]
        ego_only: bool,
        /// Train on the unprocessed third stream.
        #[arg(long)]
        raw_third: bool,
    },
    /// Closed-loop evaluation on the robot embodiment.
    Rollout {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: DeployMode,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "bgsub")]
        segmenter: SegmenterKind,
        /// Write per-episode traces as CSV.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Run the five-arm ablation and write the report.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the report from an ablation directory; exit 3 on failure.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}

fn loss_trace_path(blob: &Path) -> PathBuf {
    blob.with_extension("loss.csv")
}

fn run(command: Command) -> mvumi::Result<ExitCode> {
    match command {
        Command::Sim {
            config,
            embodiment,
            episodes,
            seed,
            out,
        } => {
            let mut cfg = SimConfig::load(&config)?;
            cfg.seed = seed;
            let events = generate_session(&cfg, embodiment, episodes, &out)?;
            println!(
                "{}",
                serde_json::to_string(&events).expect("events serialize")
            );
        }
        Command::Segment {
            session,
            kind,
            prompts,
        } => {
            let prompts = prompts.map(|p| PromptSet::load(&p)).transpose()?;
            let report = segment_session(&session, kind, prompts.as_ref(), BgSubParams::default())?;
            if !report.lost_timestamps.is_empty() {
                eprintln!(
                    "propagation lost at {} frames: {:?}",
                    report.lost_timestamps.len(),
                    report.lost_timestamps
                );
            }
            println!(
                "{}",
                serde_json::to_string(&report).expect("report serializes")
            );
        }
        Command::Inpaint {
            session,
            masks,
            feather,
        } => {
            let n = inpaint_session(&session, masks, feather)?;
            println!("inpainted {n} frames");
        }
        Command::Sync { session } => {
            let report = sync_session(&session)?;
            println!(
                "{}",
                serde_json::to_string(&report).expect("report serializes")
            );
            let ds = read_dataset(&session)?;
            let mut violations = 0;
            for ep in &ds.episodes {
                for v in validate_episode(&ep.record, &ds.manifest) {
                    eprintln!("{}: {v}", ep.record.episode_id);
                    violations += 1;
                }
            }
            if violations > 0 {
                eprintln!("{violations} violations");
                return Ok(ExitCode::from(EXIT_DATA));
            }
        }
        Command::Train {
            dataset,
            p0,
            lambda,
            iters,
            lr,
            seed,
            out,
            ego_only,
            raw_third,
        } => {
            let ds = read_dataset(&dataset)?;
            let cfg = TrainConfig {
                p0,
                lambda,
                iters,
                lr,
                seed,
                ego_only,
                w_max: ds.manifest.w_max,
                ..TrainConfig::default()
            };
            let records: Vec<_> = ds.episodes.iter().map(|e| e.record.clone()).collect();
            let raws: Vec<_> = ds.episodes.iter().map(|e| e.third_raw.clone()).collect();
            let samples = samples_from(&records, raw_third.then_some(raws.as_slice()), cfg.horizon);
            let output = train(&samples, &cfg)?;
            output.params.save(&out, Some(&cfg))?;
            write_loss_trace(&loss_trace_path(&out), &output.trace)?;
            let last = output.trace.last().map_or(f64::NAN, |r| r.loss);
            println!("trained {} samples, final loss {last:.6}", samples.len());
        }
        Command::Rollout {
            policy,
            config,
            mode,
            episodes,
            seed,
            segmenter,
            traces,
        } => {
            let mut params = PolicyParams::load(&policy)?;
            let cfg = SimConfig::load(&config)?;
            let result = rollout(&mut params, &cfg, mode, segmenter, episodes, seed)?;
            if let Some(path) = traces {
                write_bytes(&path, &report::traces_csv(&result)?)?;
            }
            println!(
                "success {:.4} pick {:.4} fallbacks {}",
                result.success_rate, result.pick_rate, result.fallbacks
            );
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = AblationConfig::load(&config)?;
            let runs = ablate(&cfg, &seeds, |line| eprintln!("{line}"))?;
            let report = report::write_outputs(&out, &runs)?;
            print!("{}", render_text(&report));
        }
        Command::Report { input } => {
            let runs = report::read_runs(&input)?;
            let report = report::write_report(&input, &runs)?;
            print!("{}", render_text(&report));
            if !report.pass {
                return Ok(ExitCode::from(EXIT_ACCEPTANCE));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
