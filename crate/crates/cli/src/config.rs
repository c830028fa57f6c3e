//! Run configuration: a TOML file mirroring the flags, flags on top, and
//! the resolved result echoed next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args};
use csmil::net::{Activation, FusionMode};
use csmil::pipeline::RunConfig;
use csmil::toydata::Scale;
use csmil::{Error, Result};

use crate::parse;

/// Training flags shared by `train`, `ablate` and `run-all`.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long, value_parser = parse::<FusionMode>)]
    pub mode: Option<FusionMode>,
    #[arg(long = "act", value_parser = parse::<Activation>)]
    pub activation: Option<Activation>,
    /// One encoder for all scales (true) or one per scale (false).
    #[arg(long, action = ArgAction::Set)]
    pub shared: Option<bool>,
    /// Comma-separated scales, e.g. 20x,10x.
    #[arg(long, value_delimiter = ',', value_parser = parse::<Scale>)]
    pub scales: Vec<Scale>,
    /// Cluster-stratified train bags (true) or uniform draws (false).
    #[arg(long, action = ArgAction::Set)]
    pub use_clusters: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub bags_per_group: Option<usize>,
    #[arg(long)]
    pub bag_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub val_bags: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub att_dim: Option<usize>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set!(t.mode, self.mode);
        set!(t.activation, self.activation);
        set!(t.shared, self.shared);
        set!(t.use_clusters, self.use_clusters);
        if !self.scales.is_empty() {
            t.scales = self.scales.clone();
        }
        set!(t.epochs, self.epochs);
        set!(t.bags_per_group, self.bags_per_group);
        set!(t.bag_size, self.bag_size);
        set!(t.adam.lr, self.lr);
        set!(t.adam.weight_decay, self.weight_decay);
        set!(t.eval_every, self.eval_every);
        set!(t.val_bags, self.val_bags);
        set!(t.hidden, self.hidden);
        set!(t.att_dim, self.att_dim);
    }
}

pub(crate) use set;

/// Defaults, overlaid by the config file when one is given.
pub fn load(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))
        }
    }
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(format!("config does not serialize: {e}")))
}

/// Writes the resolved config to `path`.
pub fn echo(cfg: &RunConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_toml(cfg)?).map_err(|e| Error::io(path, e))
}

/// `ckpt.csml` → `ckpt.csml.config.toml`.
pub fn echo_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.train.scales = vec![Scale::X5];
        c.train.adam.lr = 3e-4;
        let back: RunConfig = toml::from_str(&to_toml(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("dataset = \"macro\"\n[train]\nepochs = 8\n").unwrap();
        assert_eq!(c.train.epochs, 8);
        assert_eq!(c.k, RunConfig::default().k);
        assert_eq!(c.train.bag_size, RunConfig::default().train.bag_size);
    }
}
