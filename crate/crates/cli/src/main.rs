//! `sgmm`: data generation, UBM training, code extraction, training, evaluation,
//! gradient checks and recommendation experiments.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "sgmm", version, about = "Smoothed GMM pooling pipeline", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on this value.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// File of `key = value` lines used as defaults for the other flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic classification corpus (train/val/test VSEQ files).
    GenSynth(commands::GenSynthArgs),
    /// Simulate users and watch sessions over a VSEQ corpus.
    GenCowatch(commands::GenCowatchArgs),
    /// Fit a background GMM to the frames of a corpus.
    TrainUbm(commands::TrainUbmArgs),
    /// Compute unsupervised video codes into a VCOD file.
    Extract(commands::ExtractArgs),
    /// Train a pooling layer and classifier head end to end.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a corpus and print GAP and Hit@1 as JSON.
    Eval(commands::EvalArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(commands::GradcheckArgs),
    /// Train a video embedding with the co-watch triplet loss.
    RecoTrain(commands::RecoTrainArgs),
    /// Score held-out watches with similarity aggregation and GLMix.
    RecoEval(commands::RecoEvalArgs),
}

/// Failure of a command, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl From<sgmm::Error> for Failure {
    fn from(e: sgmm::Error) -> Self {
        match e {
            sgmm::Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

pub type CmdResult = Result<(), Failure>;

/// Reads `key = value` lines; blank lines and `#` comments are ignored.
fn read_config(path: &PathBuf) -> Result<Vec<(String, String)>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key == "config" {
            return Err(Failure::Usage(format!("{}:{}: config files cannot nest", path.display(), n + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Splices config-file entries in front of the explicit flags so the latter win.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else if a == "--config" {
            path = strs.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let Some(sub_at) = strs.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(argv);
    };
    let mut out: Vec<OsString> = argv[..=sub_at].to_vec();
    for (k, v) in read_config(&path)? {
        out.push(format!("--{k}").into());
        out.push(v.into());
    }
    out.extend_from_slice(&argv[sub_at + 1..]);
    Ok(out)
}

fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let mut cmd = Cli::command().args_override_self(true);
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    let matches: ArgMatches = cmd.try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

/// Prints the resolved flags in the config-file format.
pub fn print_config<T: Serialize>(name: &str, args: &T) {
    eprintln!("# sgmm {name}: resolved config");
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(args) {
        print_map("", &map);
    }
}

fn print_map(prefix: &str, map: &serde_json::Map<String, serde_json::Value>) {
    for (k, v) in map {
        match v {
            serde_json::Value::Object(inner) => print_map(prefix, inner),
            serde_json::Value::Null => eprintln!("# {prefix}{k} ="),
            serde_json::Value::String(s) => eprintln!("{prefix}{k} = {s}"),
            other => eprintln!("{prefix}{k} = {other}"),
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::GenCowatch(a) => commands::gen_cowatch(a),
        Command::TrainUbm(a) => commands::train_ubm(a),
        Command::Extract(a) => commands::extract(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::RecoTrain(a) => commands::reco_train(a),
        Command::RecoEval(a) => commands::reco_eval(a),
    }
}

pub fn init_threads(common: &Common) -> CmdResult {
    if common.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    // A second initialization only happens in tests and is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global();
    Ok(())
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            return ExitCode::from(EXIT_USAGE);
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            return ExitCode::from(EXIT_DATA);
        }
    };
    let cli = match parse(argv) {
        Ok(c) => c,
        Err(e) => {
            let informational =
                matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion);
            let _ = e.print();
            return if informational { ExitCode::SUCCESS } else { ExitCode::from(EXIT_USAGE) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
