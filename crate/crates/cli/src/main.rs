//! `rnnt`: toy data generation, training, decoding, graph building, lattice
//! utilities and the real-time-factor benchmark.
//!
//! Every command writes `run_manifest.json` (its arguments plus versions) to
//! the output directory; `rnnt rerun <manifest>` executes it again.
//!
//! Exit codes: 0 success, 2 usage, 3 data or validation, 4 numeric abort.

mod commands;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rnnt_core::model::{ModelConfig, ModelError, SynthConfig, TrainConfig};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "rnnt", version, about = "Transducer training and FSA-based decoding on a toy task")]
pub struct Cli {
    /// Seed for data generation, initialization, shuffling and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for decoding (utterances are split across them).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Where outputs and the run manifest go.
    #[arg(long, global = true, env = "RNNT_OUT_DIR", default_value = "rnnt-out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Toygen(ToygenArgs),
    /// Train a toy transducer on a dataset.
    Train(TrainArgs),
    /// Decode a dataset with a trained checkpoint.
    Decode(DecodeArgs),
    /// Build a decoding graph.
    #[command(subcommand)]
    Graph(GraphCommand),
    /// Inspect a lattice written by `decode --method fsa-beam`.
    #[command(subcommand)]
    Lattice(LatticeCommand),
    /// Measure decoding wall time and real-time factor.
    Bench(BenchArgs),
    /// Run the command recorded in a run manifest again.
    Rerun {
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ToygenArgs {
    #[arg(long, default_value_t = SynthConfig::default().num_items)]
    pub num: usize,
    #[arg(long, default_value_t = SynthConfig::default().vocab_size)]
    pub vocab: usize,
    #[arg(long, default_value_t = SynthConfig::default().feat_dim)]
    pub feat_dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().min_len)]
    pub min_len: usize,
    #[arg(long, default_value_t = SynthConfig::default().max_len)]
    pub max_len: usize,
    #[arg(long, default_value_t = SynthConfig::default().frames_per_token)]
    pub frames_per_token: usize,
    #[arg(long, default_value_t = SynthConfig::default().noise_std)]
    pub noise_std: f32,
    #[arg(long, default_value_t = SynthConfig::default().lead_frames)]
    pub lead_frames: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Regular,
    Modified,
    Constrained,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `toygen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "constrained")]
    pub variant: VariantArg,
    #[arg(long, default_value_t = TrainConfig::default().lm_scale)]
    pub lm_scale: f64,
    #[arg(long, default_value_t = TrainConfig::default().lambda_simple)]
    pub lambda_simple: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f32,
    /// Utterances per parameter update.
    #[arg(long, default_value_t = TrainConfig::default().accum)]
    pub accum: usize,
    #[arg(long, default_value_t = ModelConfig::default().enc_dim)]
    pub enc_dim: usize,
    #[arg(long, default_value_t = ModelConfig::default().emb_dim)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = ModelConfig::default().joiner_dim)]
    pub joiner_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Greedy,
    Beam,
    FsaBeam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MergeArg {
    Max,
    LogAdd,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "greedy")]
    pub method: MethodArg,
    /// Symbols per frame: a positive integer or `inf`.
    #[arg(long, default_value = "1")]
    pub max_symbols: String,
    #[arg(long, default_value_t = 4)]
    pub beam_size: usize,
    #[arg(long, value_enum, default_value = "max")]
    pub merge_op: MergeArg,
    /// Paths sampled per lattice when fsa-beam uses `--merge-op log-add`.
    #[arg(long, default_value_t = 20)]
    pub nbest: usize,
    #[arg(long)]
    pub length_norm: bool,
    /// Decoding graph for fsa-beam: `trivial` or an FSA text file.
    #[arg(long, default_value = "trivial")]
    pub graph: String,
    #[arg(long, default_value_t = 20.0)]
    pub beam: f64,
    #[arg(long, default_value_t = 64)]
    pub max_states: usize,
    #[arg(long, default_value_t = 8)]
    pub max_contexts: usize,
    /// Decode utterances in batches (greedy with one symbol per frame, fsa-beam).
    #[arg(long)]
    pub batched: bool,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Debug, Subcommand)]
pub enum GraphCommand {
    /// One-state graph accepting every token sequence.
    Trivial {
        #[arg(long)]
        vocab: usize,
    },
    /// Token-level n-gram graph from an ARPA file.
    Ngram {
        #[arg(long)]
        arpa: PathBuf,
        /// Lines of `symbol id`; id 0 (blank) entries are ignored.
        #[arg(long)]
        tokens: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum LatticeCommand {
    /// Highest-scoring path.
    BestPath { lattice: PathBuf },
    /// Log of the summed probability of all paths.
    Total { lattice: PathBuf },
    /// Paths sampled in proportion to their probability (seeded by `--seed`).
    Nbest {
        #[arg(long)]
        n: usize,
        lattice: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subset of greedy, beam, fsa-beam.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "greedy,beam,fsa-beam")]
    pub methods: Vec<MethodArg>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

/// Flags and versions of one run, enough to execute it again.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub checkpoint_version: u32,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    /// Output directory after applying the environment default.
    pub out_dir: PathBuf,
}

/// Invalid flag combination found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn write_manifest(cli: &Cli, args: &[String]) -> anyhow::Result<()> {
    let manifest = RunManifest {
        tool: "rnnt".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        checkpoint_version: rnnt_core::model::CHECKPOINT_VERSION,
        args: args.to_vec(),
        seed: cli.seed,
        threads: cli.threads,
        out_dir: cli.out_dir.clone(),
    };
    let path = cli.out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: Cli, args: Vec<String>) -> anyhow::Result<()> {
    if cli.threads == 0 {
        return Err(UsageError("--threads must be at least 1".into()).into());
    }
    if let Command::Rerun { manifest } = &cli.command {
        let out_dir = has_flag(&args, "--out-dir").then(|| cli.out_dir.clone());
        return rerun(manifest, out_dir);
    }
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    match &cli.command {
        Command::Toygen(a) => commands::toygen(&cli, a)?,
        Command::Train(a) => commands::train(&cli, a)?,
        Command::Decode(a) => commands::decode(&cli, a)?,
        Command::Graph(g) => commands::graph(&cli, g)?,
        Command::Lattice(l) => commands::lattice(&cli, l)?,
        Command::Bench(a) => commands::bench(&cli, a)?,
        Command::Rerun { .. } => unreachable!("handled above"),
    }
    write_manifest(&cli, &args)
}

fn has_flag(args: &[String], flag: &str) -> bool {
    args.iter().any(|a| a == flag || a.strip_prefix(flag).is_some_and(|rest| rest.starts_with('=')))
}

/// Replays the recorded arguments, writing to `out_dir` if given and to the
/// recorded output directory otherwise.
fn rerun(path: &Path, out_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    let out_dir = out_dir.unwrap_or(manifest.out_dir);
    // Drop any recorded --out-dir so the replayed manifest names the one used.
    let mut args = Vec::with_capacity(manifest.args.len() + 2);
    let mut recorded = manifest.args.into_iter();
    while let Some(a) = recorded.next() {
        if a == "--out-dir" {
            recorded.next();
        } else if !a.starts_with("--out-dir=") {
            args.push(a);
        }
    }
    args.push("--out-dir".into());
    args.push(out_dir.display().to_string());
    let cli = Cli::try_parse_from(std::iter::once("rnnt".to_string()).chain(args.iter().cloned()))
        .map_err(|e| UsageError(format!("manifest arguments do not parse: {e}")))?;
    if matches!(cli.command, Command::Rerun { .. }) {
        return Err(UsageError("a manifest cannot record another rerun".into()).into());
    }
    execute(cli, args)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<clap::Error>() {
            return 2;
        }
        if let Some(ModelError::Diverged { .. }) = cause.downcast_ref::<ModelError>() {
            return 4;
        }
    }
    3
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse_from(std::iter::once("rnnt".to_string()).chain(args.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
