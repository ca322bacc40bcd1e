//! Command-line front end.
//!
//! Every flag may also come from a flat `key = value` config file given with
//! `--config FILE`; keys are flag names without the leading dashes. Flags on
//! the command line override the file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::chroma::{Connectivity, HsvRange, DEFAULT_ALPHA, DEFAULT_MIN_BLOB};
use crate::error::{Error, Result};
use crate::unet::{TrainConfig, UnetConfig};

use super::commands::{
    cmd_boundary, cmd_compare, cmd_detect, cmd_synth, cmd_train, default_workers, BoundaryOptions, CompareOptions,
    DetectInput, DetectOptions, SynthOptions, TrainOptions,
};
use super::report::DetectParams;

#[derive(Debug, Parser)]
#[command(name = "hemoscan", version, about = "Unsupervised blood-smear boundary learning and malaria screening")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat key=value file supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the boundary network on a directory of PNGs.
    Train(TrainArgs),
    /// Predict a boundary map for one image.
    Boundary(BoundaryArgs),
    /// Flag chromatically anomalous regions.
    Detect(DetectArgs),
    /// Compare the detector with k-means and fixed HSV range baselines.
    Compare(CompareArgs),
    /// Generate synthetic smear scenes with ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 256)]
    pub tile: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub base_width: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f32,
    /// Loss history CSV; defaults to the model path with a .csv extension.
    #[arg(long, value_name = "FILE")]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundaryArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Row for the cross-section profile CSV.
    #[arg(long, value_name = "ROW", requires = "csv")]
    pub profile: Option<usize>,
    #[arg(long, value_name = "FILE", requires = "profile")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long, value_name = "FILE", conflicts_with = "data", required_unless_present = "data")]
    pub image: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_BLOB)]
    pub min_blob: usize,
    #[arg(long, default_value_t = 8, value_parser = parse_conn)]
    pub conn: u32,
    /// Overlay PNG (directory when --data is used).
    #[arg(long, value_name = "PATH")]
    pub overlay: Option<PathBuf>,
    /// Worker threads for --data.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Ground-truth mask PNG (nonzero pixels are positive).
    #[arg(long, value_name = "FILE")]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_BLOB)]
    pub min_blob: usize,
    #[arg(long, default_value_t = 8, value_parser = parse_conn)]
    pub conn: u32,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub tile: usize,
}

fn parse_conn(s: &str) -> std::result::Result<u32, String> {
    match s {
        "4" => Ok(4),
        "8" => Ok(8),
        _ => Err(format!("connectivity must be 4 or 8, got {s:?}")),
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.replace('_', "-"), v.trim_matches('"').to_owned()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let names: Vec<String> = Cli::command().get_subcommands().map(|c| c.get_name().to_owned()).collect();
    args.iter().position(|a| names.iter().any(|n| a.to_string_lossy() == *n))
}

/// Inserts config-file flags right after the subcommand name, so that later
/// command-line flags override them. Keys that belong to other subcommands
/// are ignored; keys unknown to every subcommand are an error.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let pairs = parse_config(&text)?;
    let Some(idx) = subcommand_index(&args) else {
        return Ok(args);
    };
    let cmd = Cli::command();
    let sub_name = args[idx].to_string_lossy().into_owned();
    let sub = cmd.find_subcommand(&sub_name).expect("index points at a subcommand");
    let longs = |c: &clap::Command| -> Vec<String> { c.get_arguments().filter_map(|a| a.get_long().map(str::to_owned)).collect() };
    let own = longs(sub);
    let all: Vec<String> = cmd.get_subcommands().flat_map(longs).collect();
    let mut injected = Vec::new();
    for (k, v) in pairs {
        if k == "config" {
            continue;
        }
        if own.contains(&k) {
            injected.push(OsString::from(format!("--{k}")));
            injected.push(OsString::from(v));
        } else if !all.contains(&k) {
            return Err(Error::Config(format!("{}: unknown key {k:?}", path.display())));
        }
    }
    let mut out = args;
    out.splice(idx + 1..idx + 1, injected);
    Ok(out)
}

fn detect_params(alpha: f64, min_blob: usize, conn: u32) -> Result<DetectParams> {
    let p = DetectParams {
        alpha,
        min_blob,
        connectivity: Connectivity::try_from(conn)?,
    };
    p.validate()?;
    Ok(p)
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let opts = TrainOptions {
                data: a.data,
                out: a.out,
                history: a.history,
                unet: UnetConfig {
                    input_size: a.tile,
                    base_width: a.base_width,
                    depth: a.depth,
                    dropout: a.dropout,
                    seed: a.seed,
                },
                train: TrainConfig {
                    epochs: a.epochs,
                    lr: a.lr,
                    batch_size: a.batch,
                    seed: a.seed,
                    shuffle: true,
                },
            };
            let outcome = cmd_train(&opts)?;
            let last = outcome.report.history.last().expect("epochs >= 1");
            println!(
                "trained {} epochs on {} images (epochs={} lr={}): final loss {:.6}, checksum {}",
                outcome.metadata.epochs,
                outcome.metadata.images,
                opts.train.epochs,
                opts.train.lr,
                last.total,
                outcome.metadata.checksum
            );
        }
        Command::Boundary(a) => {
            require_exists(&a.image, "image")?;
            cmd_boundary(&BoundaryOptions {
                model: a.model,
                image: a.image,
                out: a.out,
                profile: a.profile,
                csv: a.csv,
            })?;
        }
        Command::Detect(a) => {
            let input = match (a.image, a.data) {
                (Some(i), None) => {
                    require_exists(&i, "image")?;
                    DetectInput::Image(i)
                }
                (None, Some(d)) => {
                    require_exists(&d, "data directory")?;
                    DetectInput::Data(d)
                }
                _ => return Err(Error::Config("exactly one of --image and --data is required".into())),
            };
            let reports = cmd_detect(&DetectOptions {
                input,
                out: a.out,
                params: detect_params(a.alpha, a.min_blob, a.conn)?,
                overlay: a.overlay,
                workers: a.workers.unwrap_or_else(default_workers),
            })?;
            for r in &reports {
                println!("{}: infected={} components={}", r.image, r.infected, r.components.len());
            }
        }
        Command::Compare(a) => {
            require_exists(&a.image, "image")?;
            cmd_compare(&CompareOptions {
                image: a.image,
                truth: a.truth,
                k: a.k,
                seed: a.seed,
                params: detect_params(a.alpha, a.min_blob, a.conn)?,
                range: HsvRange::default(),
                out: a.out,
            })?;
        }
        Command::Synth(a) => {
            let m = cmd_synth(&SynthOptions {
                n: a.n,
                tile: a.tile,
                seed: a.seed,
                out: a.out,
            })?;
            let infected = m.scenes.iter().filter(|s| s.infected).count();
            println!("wrote {} scenes ({infected} infected)", m.scenes.len());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), applies the config file and
/// runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
