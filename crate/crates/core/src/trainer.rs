//! Training loop, validation selection and bag-level evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bagging::{group_rows, make_test_bags, make_train_bags, Bag, DEFAULT_BAG_SIZE};
use crate::embedder::FeatureSet;
use crate::error::{Error, Result};
use crate::metrics::{roc_auc, slide_score, summarize, Summary};
use crate::net::{Activation, CsMilParams, ForwardTrace, FusionMode, NetConfig, NLL_FLOOR};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::toydata::{derive_seed, Scale, Split};

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BAGS_PER_GROUP: usize = 32;
pub const DEFAULT_EVAL_EVERY: usize = 4;
pub const DEFAULT_VAL_BAGS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub bags_per_group: usize,
    pub bag_size: usize,
    pub adam: AdamConfig,
    pub eval_every: usize,
    /// Bags drawn per validation region at each evaluation.
    pub val_bags: usize,
    pub seed: u64,
    pub mode: FusionMode,
    pub activation: Activation,
    pub shared: bool,
    pub hidden: usize,
    pub att_dim: usize,
    pub scales: Vec<Scale>,
    /// Stratify training bags by phenotype cluster.
    pub use_clusters: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            bags_per_group: DEFAULT_BAGS_PER_GROUP,
            bag_size: DEFAULT_BAG_SIZE,
            adam: AdamConfig::default(),
            eval_every: DEFAULT_EVAL_EVERY,
            val_bags: DEFAULT_VAL_BAGS,
            seed: 0,
            mode: FusionMode::Cs,
            activation: Activation::Relu,
            shared: true,
            hidden: crate::net::DEFAULT_HIDDEN,
            att_dim: crate::net::DEFAULT_ATT_DIM,
            scales: Scale::ALL.to_vec(),
            use_clusters: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 || self.epochs < self.eval_every {
            return Err(Error::Config(format!(
                "need epochs >= eval_every >= 1 (epochs {}, eval_every {})",
                self.epochs, self.eval_every
            )));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.adam.lr)));
        }
        if self.bags_per_group == 0 || self.bag_size == 0 || self.val_bags == 0 {
            return Err(Error::Config("bag counts and sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn net_config(&self, in_dim: usize) -> NetConfig {
        NetConfig {
            mode: self.mode,
            activation: self.activation,
            shared: self.shared,
            in_dim,
            hidden: self.hidden,
            att_dim: self.att_dim,
            scales: self.scales.clone(),
            bag_size: self.bag_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// 1-based epoch of the selected checkpoint.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainLog {
    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == "train").map(|r| r.loss).collect()
    }

    pub fn val_records(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| r.split == "val")
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).unwrap());
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Stacks the bag's rows of every selected scale into `n×D` matrices.
pub fn bag_inputs(fs: &FeatureSet, scales: &[Scale], instances: &[usize]) -> Vec<Tensor> {
    scales
        .iter()
        .map(|s| {
            let mut data = Vec::with_capacity(instances.len() * fs.dim);
            for &i in instances {
                data.extend_from_slice(fs.row(s.index(), i));
            }
            Tensor::matrix(instances.len(), fs.dim, data).unwrap()
        })
        .collect()
}

pub fn nll_loss(probs: &[f64], class: usize) -> Result<f64> {
    let sum: f64 = probs.iter().sum();
    if class >= probs.len() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Numerical(format!("invalid probability vector {probs:?} for class {class}")));
    }
    Ok(-probs[class].max(NLL_FLOOR).ln())
}

fn rows_of(fs: &FeatureSet, split: Split) -> Vec<usize> {
    (0..fs.len()).filter(|&i| fs.splits[i] == split).collect()
}

/// Scored regions of one split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub region_ids: Vec<usize>,
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
    /// Mean bag NLL.
    pub loss: f64,
    pub bags: Vec<Bag>,
    pub traces: Vec<ForwardTrace>,
}

impl Evaluation {
    pub fn auc(&self) -> Result<f64> {
        roc_auc(&self.scores, &self.labels)
    }

    pub fn summary(&self) -> Result<Summary> {
        summarize(&self.scores, &self.labels)
    }
}

/// Scores every region of `split` as the mean positive probability of
/// `n_bags` random bags.
pub fn evaluate(
    params: &CsMilParams,
    fs: &FeatureSet,
    split: Split,
    n_bags: usize,
    seed: u64,
) -> Result<Evaluation> {
    let groups = group_rows(&fs.region_ids, &fs.labels, rows_of(fs, split));
    if groups.is_empty() {
        return Err(Error::Data(format!("no {split} regions")));
    }
    let mut out = Evaluation {
        region_ids: Vec::new(),
        labels: Vec::new(),
        scores: Vec::new(),
        loss: 0.0,
        bags: Vec::new(),
        traces: Vec::new(),
    };
    let mut total_loss = 0.0;
    for g in &groups {
        let bags = make_test_bags(g, params.config.bag_size, n_bags, seed, out.bags.len())?;
        let mut probs = Vec::with_capacity(bags.len());
        for bag in &bags {
            let tr = params.forward_bag(&bag_inputs(fs, &params.config.scales, &bag.instances))?;
            total_loss += nll_loss(&tr.probs, bag.label as usize)?;
            probs.push(tr.positive_prob());
            out.traces.push(tr);
        }
        out.region_ids.push(g.group_id);
        out.labels.push(g.label);
        out.scores.push(slide_score(&probs)?);
        out.bags.extend(bags);
    }
    out.loss = total_loss / out.bags.len() as f64;
    Ok(out)
}

pub struct TrainOutcome {
    pub params: CsMilParams,
    pub log: TrainLog,
}

/// Trains on the train split and returns the parameters of the evaluation
/// with the lowest validation loss (earliest on ties).
///
/// `clusters` gives a phenotype cluster per feature row and is used only
/// when `cfg.use_clusters` is set.
pub fn train(fs: &FeatureSet, clusters: Option<&[usize]>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = cfg.net_config(fs.dim);
    let mut params = CsMilParams::init(net, derive_seed(cfg.seed, 0x696e_6974, 0))?;
    let mut groups = group_rows(&fs.region_ids, &fs.labels, rows_of(fs, Split::Train));
    if groups.is_empty() {
        return Err(Error::Data("no training regions".into()));
    }
    if rows_of(fs, Split::Val).is_empty() {
        return Err(Error::Data("no validation regions".into()));
    }
    if cfg.use_clusters {
        let cl = clusters.ok_or_else(|| Error::Config("cluster-stratified bags need cluster labels".into()))?;
        if cl.len() != fs.len() {
            return Err(Error::Data(format!("{} cluster labels for {} patches", cl.len(), fs.len())));
        }
        for g in &mut groups {
            g.clusters = Some(g.members.iter().map(|&i| cl[i]).collect());
        }
    }

    let mut opt = Adam::new(cfg.adam, &params.tensors);
    let mut log = TrainLog {
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best = params.clone();
    let val_seed = derive_seed(cfg.seed, 0x7661_6c00, 0);

    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, 0x6570_6f63, epoch as u64);
        let mut bags = Vec::new();
        for g in &groups {
            let next = bags.len();
            bags.extend(make_train_bags(g, cfg.bag_size, cfg.bags_per_group, epoch_seed, next)?);
        }
        bags.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        let mut sum = 0.0;
        for bag in &bags {
            let x = bag_inputs(fs, &params.config.scales, &bag.instances);
            let (loss, grads) = params.loss_and_grads(&x, bag.label)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss became {loss} at epoch {epoch}, bag {}", bag.bag_id)));
            }
            sum += loss;
            opt.step(&mut params.tensors, &grads);
        }
        log.records.push(LogRecord {
            epoch,
            split: "train".into(),
            loss: sum / bags.len() as f64,
            auc: None,
        });

        if epoch % cfg.eval_every == 0 {
            let ev = evaluate(&params, fs, Split::Val, cfg.val_bags, val_seed)?;
            if !ev.loss.is_finite() {
                return Err(Error::Numerical(format!("validation loss became {} at epoch {epoch}", ev.loss)));
            }
            log.records.push(LogRecord {
                epoch,
                split: "val".into(),
                loss: ev.loss,
                auc: ev.auc().ok(),
            });
            if ev.loss < log.best_val_loss {
                log.best_val_loss = ev.loss;
                log.best_epoch = epoch;
                best = params.clone();
            }
        }
    }
    Ok(TrainOutcome { params: best, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_values() {
        assert_eq!(nll_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((nll_loss(&[0.5, 0.5], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let clamped = nll_loss(&[1.0 - 1e-15, 1e-15], 1).unwrap();
        assert!((clamped - (-(1e-12f64).ln())).abs() < 1e-12);
        assert!(nll_loss(&[0.7, 0.7], 0).is_err());
        assert!(nll_loss(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn config_checks() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.eval_every = 0;
        assert!(c.validate().is_err());
        c.eval_every = 4;
        c.epochs = 3;
        assert!(c.validate().is_err());
        c.epochs = 4;
        c.adam.lr = -1.0;
        assert!(c.validate().is_err());
    }
}
