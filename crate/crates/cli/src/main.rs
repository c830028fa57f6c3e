//! `csmil`: one binary driving generation, embedding, clustering, bag
//! audit, training, evaluation, attention maps and ablation sweeps.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csmil::toydata::{DatasetKind, Split};

use crate::config::TrainFlags;

#[derive(Parser, Debug)]
#[command(name = "csmil", version, about = "Cross-scale attention MIL on synthetic multi-scale data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a toy dataset: patch images, manifest.jsonl, dataset.json.
    GenToy(GenToyArgs),
    /// Embed every patch of a manifest into a feature cache.
    Embed(EmbedArgs),
    /// Per-region phenotype clustering of a feature cache.
    Cluster(ClusterArgs),
    /// Build bags and dump their composition for audit.
    Bags(BagsArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Attention maps of one region.
    Attnmap(AttnmapArgs),
    /// Train and score every cell of a variant grid.
    Ablate(AblateArgs),
    /// Full pipeline into out/{dataset}/{variant}/, skipping stages whose
    /// inputs are unchanged.
    RunAll(RunAllArgs),
}

#[derive(Args, Debug)]
pub struct GenToyArgs {
    /// TOML run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse::<DatasetKind>)]
    pub kind: Option<DatasetKind>,
    /// Regions per class, split 3:1:2 into train/val/test.
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub grid_step: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// manifest.jsonl or the directory holding it.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub feats: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BagsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub feats: PathBuf,
    /// Cluster table; train bags are drawn uniformly without it.
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    #[arg(long, default_value = "train", value_parser = parse::<Split>)]
    pub split: Split,
    #[arg(long)]
    pub bag_size: Option<usize>,
    /// Bags per region.
    #[arg(long)]
    pub bags: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Line-delimited output, one bag per line.
    #[arg(long)]
    pub dump: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checked against the feature cache when given.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub feats: PathBuf,
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub feats: PathBuf,
    #[arg(long)]
    pub bags: Option<usize>,
    #[arg(long)]
    pub bag_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "test", value_parser = parse::<Split>)]
    pub split: Split,
    /// Name for the record; derived from the checkpoint when omitted.
    #[arg(long)]
    pub variant: Option<String>,
    /// Also write the record here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttnmapArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub feats: PathBuf,
    #[arg(long)]
    pub region: usize,
    #[arg(long)]
    pub bags: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub feats: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    /// method | kernel | clustering
    #[arg(long, default_value = "method")]
    pub grid: String,
    /// Comma-separated variant names; replaces --grid.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RunAllArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse::<DatasetKind>)]
    pub kind: Option<DatasetKind>,
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub grid_step: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub test_bags: Option<usize>,
    /// Sets every stage seed at once.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated variant names; defaults to the method grid.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

pub fn parse<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::GenToy(a) => stages::gen_toy(a),
        Cmd::Embed(a) => stages::embed(a),
        Cmd::Cluster(a) => stages::cluster(a),
        Cmd::Bags(a) => stages::bags(a),
        Cmd::Train(a) => stages::train(a),
        Cmd::Eval(a) => stages::eval(a),
        Cmd::Attnmap(a) => stages::attnmap(a),
        Cmd::Ablate(a) => stages::ablate(a),
        Cmd::RunAll(a) => stages::run_all(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let kind = match code {
                2 => "config",
                4 => "numerical",
                _ => "data",
            };
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("csmil: error code={code} kind={kind}: {msg}");
            ExitCode::from(code as u8)
        }
    }
}
