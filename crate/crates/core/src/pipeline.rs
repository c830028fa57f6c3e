//! End-to-end runs: generation, embedding, clustering, training, scoring
//! and the ablation sweeps built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bagging::DEFAULT_TEST_BAGS;
use crate::container::Container;
use crate::embedder::{embed_toy, EmbedderSpec, FeatureSet, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans_fit, DEFAULT_K, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::metrics::Summary;
use crate::net::{Activation, CsMilParams, FusionMode};
use crate::toydata::{derive_seed, generate, DatasetKind, Scale, Split, SplitSizes, ToyConfig, ToyDataset, DEFAULT_GRID_STEP};
use crate::tensor::Tensor;
use crate::trainer::{evaluate, train, Evaluation, TrainConfig, TrainLog};

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_seed: u64,
    pub sizes: SplitSizes,
    pub grid_step: usize,
    pub embed_seed: u64,
    pub embed_dim: usize,
    pub k: usize,
    pub cluster_seed: u64,
    pub test_bags: usize,
    pub eval_seed: u64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Micro,
            data_seed: 0,
            sizes: SplitSizes::default(),
            grid_step: DEFAULT_GRID_STEP,
            embed_seed: 0,
            embed_dim: DEFAULT_DIM,
            k: DEFAULT_K,
            cluster_seed: 0,
            test_bags: DEFAULT_TEST_BAGS,
            eval_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            kind: self.dataset,
            seed: self.data_seed,
            sizes: self.sizes,
            grid_step: self.grid_step,
        }
    }
}

/// Per-region phenotype clusters of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct PhenotypeClusters {
    pub dim: usize,
    /// Cluster index per feature row, local to the row's region.
    pub assignments: Vec<usize>,
    /// All regions' centroids stacked, `total × dim`.
    pub centroids: Vec<f64>,
    /// Region and local index of each stacked centroid.
    pub centroid_keys: Vec<(usize, usize)>,
}

impl PhenotypeClusters {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let n = self.centroid_keys.len();
        c.insert("centroids", Tensor::matrix(n, self.dim, self.centroids.clone()).unwrap());
        c.insert(
            "centroid_keys",
            Tensor::matrix(
                n,
                2,
                self.centroid_keys.iter().flat_map(|&(r, j)| [r as f64, j as f64]).collect(),
            )
            .unwrap(),
        );
        c.insert(
            "assignments",
            Tensor::vector(self.assignments.iter().map(|&a| a as f64).collect()),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cent = c.require("centroids")?;
        let keys = c.require("centroid_keys")?;
        let (n, dim) = cent.dims2();
        if keys.shape() != [n, 2] {
            return Err(Error::Data(format!("centroid_keys has shape {:?}", keys.shape())));
        }
        Ok(Self {
            dim,
            assignments: c.require("assignments")?.data().iter().map(|&v| v as usize).collect(),
            centroids: cent.data().to_vec(),
            centroid_keys: keys.data().chunks(2).map(|k| (k[0] as usize, k[1] as usize)).collect(),
        })
    }
}

/// Clusters each region on its own 20× embeddings; regions with fewer
/// than `k` patches use one cluster per patch.
pub fn cluster_regions(fs: &FeatureSet, k: usize, seed: u64) -> Result<PhenotypeClusters> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut by_region: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &r) in fs.region_ids.iter().enumerate() {
        by_region.entry(r).or_default().push(i);
    }
    let mut out = PhenotypeClusters {
        dim: fs.dim,
        assignments: vec![0; fs.len()],
        centroids: Vec::new(),
        centroid_keys: Vec::new(),
    };
    for (r, rows) in by_region {
        let pts: Vec<f64> = rows
            .iter()
            .flat_map(|&i| fs.row(Scale::X20.index(), i).iter().copied())
            .collect();
        let kk = k.min(rows.len());
        let model = kmeans_fit(
            &pts,
            fs.dim,
            kk,
            derive_seed(seed, 0x636c_7573, r as u64),
            DEFAULT_MAX_ITER,
            DEFAULT_TOL,
        )?;
        for (&i, &a) in rows.iter().zip(&model.assignments) {
            out.assignments[i] = a;
        }
        out.centroids.extend_from_slice(&model.centroids);
        out.centroid_keys.extend((0..kk).map(|j| (r, j)));
    }
    Ok(out)
}

/// Generated and embedded data with its phenotype clusters.
pub struct Prepared {
    pub dataset: ToyDataset,
    pub embedder: EmbedderSpec,
    pub features: FeatureSet,
    pub clusters: PhenotypeClusters,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let dataset = generate(&cfg.toy_config())?;
    let mut embedder = EmbedderSpec::new(cfg.embed_seed, cfg.embed_dim);
    let features = embed_toy(&dataset, &mut embedder)?;
    let clusters = cluster_regions(&features, cfg.k, cfg.cluster_seed)?;
    Ok(Prepared {
        dataset,
        embedder,
        features,
        clusters,
    })
}

/// A named model variant of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub mode: FusionMode,
    pub activation: Activation,
    pub shared: bool,
    pub scales: Vec<Scale>,
    pub use_clusters: bool,
}

impl Variant {
    pub fn cs() -> Self {
        Self {
            name: "cs".into(),
            mode: FusionMode::Cs,
            activation: Activation::Relu,
            shared: true,
            scales: Scale::ALL.to_vec(),
            use_clusters: true,
        }
    }

    pub fn fusion(mode: FusionMode) -> Self {
        Self {
            name: mode.to_string(),
            mode,
            ..Self::cs()
        }
    }

    pub fn single(scale: Scale) -> Self {
        Self {
            name: format!("single_{}", scale.tag()),
            scales: vec![scale],
            ..Self::cs()
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            activation: self.activation,
            shared: self.shared,
            scales: self.scales.clone(),
            use_clusters: self.use_clusters,
            ..base.clone()
        }
    }
}

/// Single-scale models per scale plus the three fusions.
pub fn method_grid() -> Vec<Variant> {
    let mut v: Vec<Variant> = Scale::ALL.iter().map(|&s| Variant::single(s)).collect();
    v.push(Variant::fusion(FusionMode::Mean));
    v.push(Variant::fusion(FusionMode::Concat));
    v.push(Variant::cs());
    v
}

/// Shared/separate encoder × relu/tanh attention.
pub fn kernel_grid() -> Vec<Variant> {
    let mut v = Vec::new();
    for shared in [false, true] {
        for act in [Activation::Tanh, Activation::Relu] {
            v.push(Variant {
                name: format!("{}_{act}", if shared { "shared" } else { "separate" }),
                activation: act,
                shared,
                ..Variant::cs()
            });
        }
    }
    v
}

/// Cross-scale attention with and without cluster-stratified bags.
pub fn clustering_grid() -> Vec<Variant> {
    vec![
        Variant {
            name: "cs_naive".into(),
            use_clusters: false,
            ..Variant::cs()
        },
        Variant::cs(),
    ]
}

/// Every named variant of the built-in grids, first occurrence kept.
pub fn all_variants() -> Vec<Variant> {
    let mut out: Vec<Variant> = Vec::new();
    for v in method_grid().into_iter().chain(kernel_grid()).chain(clustering_grid()) {
        if !out.iter().any(|o| o.name == v.name) {
            out.push(v);
        }
    }
    out
}

pub fn variant_by_name(name: &str) -> Result<Variant> {
    all_variants().into_iter().find(|v| v.name == name).ok_or_else(|| {
        let names: Vec<String> = all_variants().into_iter().map(|v| v.name).collect();
        Error::Config(format!("unknown variant {name:?} (one of {})", names.join(", ")))
    })
}

/// A built-in grid by name: `method`, `kernel` or `clustering`.
pub fn grid_by_name(name: &str) -> Result<Vec<Variant>> {
    match name {
        "method" => Ok(method_grid()),
        "kernel" => Ok(kernel_grid()),
        "clustering" => Ok(clustering_grid()),
        _ => Err(Error::Config(format!("unknown grid {name:?} (method|kernel|clustering)"))),
    }
}

pub struct VariantResult {
    pub variant: Variant,
    pub params: CsMilParams,
    pub log: TrainLog,
    pub test: Evaluation,
    pub summary: Summary,
}

pub fn run_variant(
    fs: &FeatureSet,
    clusters: &PhenotypeClusters,
    cfg: &RunConfig,
    variant: &Variant,
) -> Result<VariantResult> {
    let tc = variant.apply(&cfg.train);
    let outcome = train(fs, Some(&clusters.assignments), &tc)?;
    let test = evaluate(&outcome.params, fs, Split::Test, cfg.test_bags, cfg.eval_seed)?;
    let summary = test.summary()?;
    Ok(VariantResult {
        variant: variant.clone(),
        params: outcome.params,
        log: outcome.log,
        test,
        summary,
    })
}

/// Single-scale run on one scale's features.
pub fn single_scale_run(prep: &Prepared, cfg: &RunConfig, scale: Scale) -> Result<VariantResult> {
    run_variant(&prep.features, &prep.clusters, cfg, &Variant::single(scale))
}

/// Trains and scores every variant; a failure names the cell.
pub fn ablate(
    fs: &FeatureSet,
    clusters: &PhenotypeClusters,
    cfg: &RunConfig,
    grid: &[Variant],
) -> Result<Vec<VariantResult>> {
    grid.iter()
        .map(|v| {
            run_variant(fs, clusters, cfg, v).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("cell {}: {m}", v.name)),
                Error::Config(m) => Error::Config(format!("cell {}: {m}", v.name)),
                Error::Data(m) => Error::Data(format!("cell {}: {m}", v.name)),
                other => other,
            })
        })
        .collect()
}

/// Aligned text table and CSV of per-variant AUC and AP.
pub fn results_tables(rows: &[(String, Summary)]) -> (String, String) {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
    let mut text = format!("{:<w$}  {:>6}  {:>6}\n", "variant", "AUC", "AP");
    let mut csv = String::from("variant,auc,ap\n");
    for (name, s) in rows {
        let _ = writeln!(text, "{name:<w$}  {:>6.4}  {:>6.4}", s.auc, s.ap);
        let _ = writeln!(csv, "{name},{},{}", s.auc, s.ap);
    }
    (text, csv)
}
