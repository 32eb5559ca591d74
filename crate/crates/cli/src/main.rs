use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tagslam::channel::{center_frequency_hz, plan_channels, ChannelPlan};
use tagslam::csi::{direct_path_aoa, read_csi_trace, AoaTofEstimator, CsiMatrix, CsiRecord, SearchGrid};
use tagslam::harness::{paper_scenario, run_scenario, rx_geometry, Scenario};
use tagslam::Error;

#[derive(Parser)]
#[command(name = "tagslam", version, about = "Robot and backscatter tag localization from WiFi AoA and IMU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario end to end and write its outputs.
    Run {
        /// `paper` or a scenario JSON file.
        #[arg(long, default_value = "paper")]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Multiplies every noise standard deviation.
        #[arg(long)]
        noise_scale: Option<f64>,
        /// Number of robot states kept in the window.
        #[arg(long)]
        window_size: Option<usize>,
    },
    /// Assign shift frequencies and receive channels to tags.
    PlanChannels {
        #[arg(long)]
        tags: usize,
        #[arg(long, default_value_t = 165)]
        excitation: u32,
        /// Write the plan here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate direct-path bearings from a recorded CSI trace.
    Estimate {
        trace: PathBuf,
        /// Channel plan giving each tag's receive channel.
        #[arg(long, conflicts_with = "channel")]
        plan: Option<PathBuf>,
        /// Receive channel used for every record when no plan is given.
        #[arg(long, default_value_t = 165)]
        channel: u32,
        /// Consecutive packets of one tag closer than this form one dwell, s.
        #[arg(long, default_value_t = 0.1)]
        dwell: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a scenario file, the paper scenario by default.
    Scenario {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_scenario(name: &str) -> Result<Scenario> {
    if name == "paper" {
        return Ok(paper_scenario());
    }
    Scenario::load(name.as_ref()).with_context(|| format!("loading scenario {name}"))
}

fn run(scenario: &str, seed: Option<u64>, out_dir: &PathBuf, noise_scale: Option<f64>, window: Option<usize>) -> Result<()> {
    let mut s = load_scenario(scenario)?;
    if let Some(seed) = seed {
        s = s.with_seed(seed);
    }
    if let Some(k) = noise_scale {
        s = s.with_noise_scale(k);
    }
    if let Some(n) = window {
        s = s.with_window_size(n);
    }
    let out = run_scenario(&s)?;
    out.write_to(out_dir)?;
    let r = &out.report;
    println!("scenario {} seed {}", r.scenario, r.seed);
    println!("robot mean error {:.3} m, rmse {:.3} m", r.robot_mean_error_m, r.robot_rmse_m);
    for t in &r.tags {
        match t.error_m {
            Some(e) => println!("tag {} error {:.3} m", t.tag_id, e),
            None => println!("tag {} not localized", t.tag_id),
        }
    }
    println!("median solve {:.2} ms", r.latency.median_ms);
    println!("outputs in {}", out_dir.display());
    Ok(())
}

/// Splits a trace into dwells: runs of one tag starting within `dwell_s` of
/// the run's first packet.
fn dwells(records: Vec<CsiRecord>, dwell_s: f64) -> Vec<Vec<CsiRecord>> {
    let mut out: Vec<Vec<CsiRecord>> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some(d) if d[0].tag_id == r.tag_id && r.t.seconds() - d[0].t.seconds() < dwell_s => d.push(r),
            _ => out.push(vec![r]),
        }
    }
    out
}

fn estimate(trace: &PathBuf, plan: &Option<PathBuf>, channel: u32, dwell_s: f64, out: &Option<PathBuf>) -> Result<()> {
    if !(dwell_s > 0.0) {
        bail!("dwell must be positive, got {dwell_s}");
    }
    let plan = plan.as_ref().map(|p| ChannelPlan::load(p)).transpose()?;
    let rx_channel = |tag: u32| -> Result<u32> {
        match &plan {
            Some(p) => p
                .assignments
                .iter()
                .find(|a| a.tag_id == tag)
                .map(|a| a.rx_channel)
                .with_context(|| format!("tag {tag} is not in the channel plan")),
            None => Ok(channel),
        }
    };
    // entries are read at a placeholder carrier and re-tagged per dwell
    let file = File::open(trace).with_context(|| format!("opening {}", trace.display()))?;
    let records = read_csi_trace(BufReader::new(file), center_frequency_hz(channel)?)?;

    let mut w = csv::Writer::from_writer(output(out)?);
    w.write_record(["t", "tag_id", "theta", "tof", "confidence"])?;
    for d in dwells(records, dwell_s) {
        let tag = d[0].tag_id;
        let hz = center_frequency_hz(rx_channel(tag)?)?;
        let est = AoaTofEstimator::new(rx_geometry(hz), SearchGrid::default())?;
        let packets = d
            .iter()
            .map(|r| CsiMatrix::from_entries(r.csi.entries().to_vec(), hz))
            .collect::<tagslam::Result<Vec<_>>>()?;
        let peaks = match est.estimate(&packets) {
            Ok(p) => p,
            Err(Error::EstimationFailed(msg)) => {
                eprintln!("skipping dwell of tag {tag} at {}: {msg}", d[0].t.seconds());
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let a = direct_path_aoa(&peaks, tag, d[0].t)?;
        w.serialize((a.t.seconds(), a.tag_id, a.theta, a.tau, a.confidence))?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            scenario,
            seed,
            out_dir,
            noise_scale,
            window_size,
        } => run(&scenario, seed, &out_dir, noise_scale, window_size),
        Command::PlanChannels { tags, excitation, out } => {
            let plan = plan_channels(tags, excitation)?;
            plan.write_csv(output(&out)?)?;
            Ok(())
        }
        Command::Estimate {
            trace,
            plan,
            channel,
            dwell,
            out,
        } => estimate(&trace, &plan, channel, dwell, &out),
        Command::Scenario { out } => {
            let mut w = output(&out)?;
            writeln!(w, "{}", serde_json::to_string_pretty(&paper_scenario())?)?;
            Ok(())
        }
    }
}
