use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use csmil::attnmap::{map_stem, region_maps, scale_attention_stats, PatchGrid, INSTANCE_STEM};
use csmil::bagging::{group_rows, make_test_bags, make_train_bags, Bag};
use csmil::container::Container;
use csmil::embedder::{embed_dataset, EmbedderSpec, FeatureSet};
use csmil::net::{Activation, CsMilParams, ForwardTrace, FusionMode, NetConfig};
use csmil::pipeline::{
    cluster_regions, grid_by_name, method_grid, results_tables, run_variant, variant_by_name, PhenotypeClusters,
    RunConfig, Variant, VariantResult,
};
use csmil::toydata::{generate, write_dataset, DatasetKind, DatasetManifest, Split, SplitSizes, MANIFEST_FILE};
use csmil::trainer::{bag_inputs, evaluate, train as fit, Evaluation};
use csmil::{Error, Result};

use crate::config::{echo, echo_path, load, set, to_toml};
use crate::{AblateArgs, AttnmapArgs, BagsArgs, ClusterArgs, EmbedArgs, EvalArgs, GenToyArgs, RunAllArgs, TrainArgs};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_feats(path: &Path, manifest: Option<&Path>) -> Result<FeatureSet> {
    let fs = FeatureSet::from_container(&Container::load(path)?)?;
    if let Some(m) = manifest {
        fs.check_manifest(&DatasetManifest::load(m)?)?;
    }
    Ok(fs)
}

fn load_clusters(path: &Path, fs: &FeatureSet) -> Result<PhenotypeClusters> {
    let c = PhenotypeClusters::from_container(&Container::load(path)?)?;
    if c.assignments.len() != fs.len() {
        return Err(Error::Data(format!(
            "{}: {} assignments for {} feature rows",
            path.display(),
            c.assignments.len(),
            fs.len()
        )));
    }
    Ok(c)
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("record serializes")
}

pub fn gen_toy(a: GenToyArgs) -> Result<()> {
    let mut cfg = load(a.config.as_deref())?;
    set!(cfg.dataset, a.kind);
    set!(cfg.data_seed, a.seed);
    set!(cfg.grid_step, a.grid_step);
    if let Some(n) = a.regions {
        cfg.sizes = SplitSizes::from_total(n);
    }
    let ds = generate(&cfg.toy_config())?;
    let m = write_dataset(&ds, &cfg.toy_config(), &a.out)?;
    echo(&cfg, &a.out.join("config.toml"))?;
    eprintln!(
        "{} {}: {} regions, {} patches -> {}",
        cfg.dataset,
        cfg.data_seed,
        ds.regions.len(),
        m.records.len(),
        a.out.display()
    );
    Ok(())
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let mut cfg = load(a.config.as_deref())?;
    set!(cfg.embed_seed, a.seed);
    set!(cfg.embed_dim, a.dim);
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut spec = EmbedderSpec::new(cfg.embed_seed, cfg.embed_dim);
    let fs = embed_dataset(&manifest, &mut spec)?;
    fs.to_container().save(&a.out)?;
    echo(&cfg, &echo_path(&a.out))?;
    eprintln!("embedded {} patches, D={} -> {}", fs.len(), fs.dim, a.out.display());
    Ok(())
}

pub fn cluster(a: ClusterArgs) -> Result<()> {
    let mut cfg = load(a.config.as_deref())?;
    set!(cfg.k, a.k);
    set!(cfg.cluster_seed, a.seed);
    let fs = load_feats(&a.feats, None)?;
    let c = cluster_regions(&fs, cfg.k, cfg.cluster_seed)?;
    c.to_container().save(&a.out)?;
    echo(&cfg, &echo_path(&a.out))?;
    eprintln!("{} centroids over {} patches -> {}", c.centroid_keys.len(), fs.len(), a.out.display());
    Ok(())
}

pub fn bags(a: BagsArgs) -> Result<()> {
    let mut cfg = load(a.config.as_deref())?;
    set!(cfg.train.bag_size, a.bag_size);
    let fs = load_feats(&a.feats, None)?;
    let rows = (0..fs.len()).filter(|&i| fs.splits[i] == a.split);
    let mut groups = group_rows(&fs.region_ids, &fs.labels, rows);
    if groups.is_empty() {
        return Err(Error::Data(format!("no {} regions", a.split)));
    }
    let mut out = Vec::<Bag>::new();
    if a.split == Split::Train {
        let n = a.bags.unwrap_or(cfg.train.bags_per_group);
        let seed = a.seed.unwrap_or(cfg.train.seed);
        if let Some(p) = &a.clusters {
            let c = load_clusters(p, &fs)?;
            for g in &mut groups {
                g.clusters = Some(g.members.iter().map(|&i| c.assignments[i]).collect());
            }
        }
        for g in &groups {
            let next = out.len();
            out.extend(make_train_bags(g, cfg.train.bag_size, n, seed, next)?);
        }
    } else {
        let n = a.bags.unwrap_or(cfg.test_bags);
        let seed = a.seed.unwrap_or(cfg.eval_seed);
        for g in &groups {
            let next = out.len();
            out.extend(make_test_bags(g, cfg.train.bag_size, n, seed, next)?);
        }
    }
    let text: String = out.iter().map(|b| json_line(b) + "\n").collect();
    write(&a.dump, text)?;
    eprintln!("{} bags over {} regions -> {}", out.len(), groups.len(), a.dump.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load(a.config.as_deref())?;
    a.train.apply(&mut cfg);
    set!(cfg.train.seed, a.seed);
    let fs = load_feats(&a.feats, a.manifest.as_deref())?;
    let clusters = match &a.clusters {
        Some(p) => Some(load_clusters(p, &fs)?),
        None if cfg.train.use_clusters => {
            return Err(Error::Config(
                "--clusters is required unless --use-clusters false".into(),
            ))
        }
        None => None,
    };
    let out = fit(&fs, clusters.as_ref().map(|c| c.assignments.as_slice()), &cfg.train)?;
    out.params.save(&a.out)?;
    let log = a.log.unwrap_or_else(|| a.out.with_extension("log"));
    write(&log, out.log.to_jsonl())?;
    echo(&cfg, &echo_path(&a.out))?;
    eprintln!(
        "best epoch {} (val loss {:.4}) -> {}",
        out.log.best_epoch,
        out.log.best_val_loss,
        a.out.display()
    );
    Ok(())
}

/// Variant name of a checkpoint's architecture.
pub fn describe(cfg: &NetConfig) -> String {
    if cfg.scales.len() == 1 {
        return format!("single_{}", cfg.scales[0].tag());
    }
    match cfg.mode {
        FusionMode::Cs if cfg.shared && cfg.activation == Activation::Relu => "cs".into(),
        FusionMode::Cs => format!(
            "{}_{}",
            if cfg.shared { "shared" } else { "separate" },
            cfg.activation
        ),
        m => m.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub variant: String,
    pub split: String,
    pub auc: f64,
    pub ap: f64,
    pub accuracy: f64,
    pub regions: usize,
    pub loss: f64,
}

fn record(dataset: &str, variant: &str, split: Split, ev: &Evaluation) -> Result<MetricsRecord> {
    let s = ev.summary()?;
    Ok(MetricsRecord {
        dataset: dataset.into(),
        variant: variant.into(),
        split: split.to_string(),
        auc: s.auc,
        ap: s.ap,
        accuracy: s.accuracy,
        regions: s.n,
        loss: ev.loss,
    })
}

fn dataset_name(manifest: Option<&Path>, cfg: &RunConfig) -> Result<DatasetKind> {
    if let Some(m) = manifest {
        if let Some(info) = DatasetManifest::load(m)?.info {
            return Ok(info.kind);
        }
    }
    Ok(cfg.dataset)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load(a.config.as_deref())?;
    set!(cfg.test_bags, a.bags);
    set!(cfg.eval_seed, a.seed);
    let fs = load_feats(&a.feats, a.manifest.as_deref())?;
    let mut params = CsMilParams::load(&a.ckpt)?;
    set!(params.config.bag_size, a.bag_size);
    let ev = evaluate(&params, &fs, a.split, cfg.test_bags, cfg.eval_seed)?;
    let name = a.variant.unwrap_or_else(|| describe(&params.config));
    let rec = record(&dataset_name(a.manifest.as_deref(), &cfg)?.to_string(), &name, a.split, &ev)?;
    let line = json_line(&rec);
    println!("{line}");
    if let Some(p) = &a.out {
        write(p, line + "\n")?;
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Center spacing of a feature set, or `fallback` when every center sits
/// at the same coordinate.
fn grid_step(fs: &FeatureSet, fallback: usize) -> usize {
    let base = fs.centers.iter().map(|c| c.0.min(c.1)).min().unwrap_or(0);
    let g = fs
        .centers
        .iter()
        .flat_map(|&(x, y)| [x - base, y - base])
        .fold(0, gcd);
    if g == 0 {
        fallback
    } else {
        g
    }
}

fn region_traces(params: &CsMilParams, fs: &FeatureSet, region: usize, n: usize, seed: u64) -> Result<(Vec<Bag>, Vec<ForwardTrace>)> {
    let rows: Vec<usize> = (0..fs.len()).filter(|&i| fs.region_ids[i] == region).collect();
    if rows.is_empty() {
        return Err(Error::Data(format!("region {region} is not in the feature set")));
    }
    let g = &group_rows(&fs.region_ids, &fs.labels, rows)[0];
    let bags = make_test_bags(g, params.config.bag_size, n, seed, 0)?;
    let traces = bags
        .iter()
        .map(|b| params.forward_bag(&bag_inputs(fs, &params.config.scales, &b.instances)))
        .collect::<Result<Vec<_>>>()?;
    Ok((bags, traces))
}

fn write_maps(params: &CsMilParams, fs: &FeatureSet, region: usize, n: usize, seed: u64, step: usize, dir: &Path) -> Result<()> {
    let (bags, traces) = region_traces(params, fs, region, n, seed)?;
    let maps = region_maps(&bags, &traces, fs, region, PatchGrid::new(step)?)?;
    let scales = &params.config.scales;
    for (s, m) in maps.iter().take(scales.len()).enumerate() {
        m.export(dir, &map_stem(scales[s]))?;
    }
    maps[scales.len()].export(dir, INSTANCE_STEM)?;
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let stats = scale_attention_stats(&traces, &labels)?;
    write(
        &dir.join("attention_stats.json"),
        serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n",
    )
}

pub fn attnmap(a: AttnmapArgs) -> Result<()> {
    let mut cfg = load(a.config.as_deref())?;
    set!(cfg.test_bags, a.bags);
    set!(cfg.eval_seed, a.seed);
    let fs = load_feats(&a.feats, a.manifest.as_deref())?;
    let params = CsMilParams::load(&a.ckpt)?;
    let step = grid_step(&fs, cfg.grid_step);
    write_maps(&params, &fs, a.region, cfg.test_bags, cfg.eval_seed, step, &a.out)?;
    echo(&cfg, &a.out.join("config.toml"))?;
    eprintln!("maps of region {} -> {}", a.region, a.out.display());
    Ok(())
}

fn save_result(r: &VariantResult, dataset: &str, dir: &Path) -> Result<MetricsRecord> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    r.params.save(dir.join("ckpt.csml"))?;
    write(&dir.join("train.log"), r.log.to_jsonl())?;
    let mut scores = String::from("region_id,label,score\n");
    for ((id, l), s) in r.test.region_ids.iter().zip(&r.test.labels).zip(&r.test.scores) {
        scores += &format!("{id},{l},{s}\n");
    }
    write(&dir.join("test_scores.csv"), scores)?;
    let labels: Vec<u8> = r.test.bags.iter().map(|b| b.label).collect();
    let stats = scale_attention_stats(&r.test.traces, &labels)?;
    write(
        &dir.join("attention_stats.json"),
        serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n",
    )?;
    let rec = record(dataset, &r.variant.name, Split::Test, &r.test)?;
    write(&dir.join("metrics.json"), json_line(&rec) + "\n")?;
    Ok(rec)
}

fn write_tables(rows: &[MetricsRecord], dir: &Path) -> Result<()> {
    let rows: Vec<(String, csmil::metrics::Summary)> = rows
        .iter()
        .map(|r| {
            (
                r.variant.clone(),
                csmil::metrics::Summary {
                    auc: r.auc,
                    ap: r.ap,
                    accuracy: r.accuracy,
                    n: r.regions,
                },
            )
        })
        .collect();
    let (text, csv) = results_tables(&rows);
    write(&dir.join("results.txt"), &text)?;
    write(&dir.join("results.csv"), csv)?;
    print!("{text}");
    Ok(())
}

fn resolve_variants(names: &[String], default: Vec<Variant>) -> Result<Vec<Variant>> {
    if names.is_empty() {
        Ok(default)
    } else {
        names.iter().map(|n| variant_by_name(n)).collect()
    }
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = load(a.config.as_deref())?;
    a.train.apply(&mut cfg);
    set!(cfg.train.seed, a.seed);
    let fs = load_feats(&a.feats, a.manifest.as_deref())?;
    let clusters = load_clusters(&a.clusters, &fs)?;
    let grid = resolve_variants(&a.variants, grid_by_name(&a.grid)?)?;
    let dataset = dataset_name(a.manifest.as_deref(), &cfg)?.to_string();
    echo(&cfg, &a.out.join("config.toml"))?;
    let mut rows = Vec::new();
    for v in &grid {
        eprintln!("cell {}", v.name);
        let r = run_variant(&fs, &clusters, &cfg, v).map_err(|e| cell_error(&v.name, e))?;
        rows.push(save_result(&r, &dataset, &a.out.join(&v.name))?);
    }
    write_tables(&rows, &a.out)
}

fn cell_error(name: &str, e: Error) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("cell {name}: {m}")),
        Error::Config(m) => Error::Config(format!("cell {name}: {m}")),
        Error::Data(m) => Error::Data(format!("cell {name}: {m}")),
        other => Error::Data(format!("cell {name}: {other}")),
    }
}

fn sha_hex(h: Sha256) -> String {
    hex::encode(h.finalize())
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Hash of a generated dataset: manifest, sidecar, and every image.
fn dataset_hash(dir: &Path) -> Result<String> {
    let m = DatasetManifest::load(dir.join(MANIFEST_FILE))?;
    let mut h = Sha256::new();
    for f in [MANIFEST_FILE, csmil::toydata::INFO_FILE] {
        h.update(file_hash(&dir.join(f))?);
    }
    for r in &m.records {
        for s in csmil::toydata::Scale::ALL {
            h.update(file_hash(&m.resolve(r.path(s)))?);
        }
    }
    Ok(sha_hex(h))
}

fn stage_key(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    sha_hex(h)
}

fn sidecar(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

/// True when `artifact` exists and was produced from inputs hashing to `key`.
fn fresh(artifact: &Path, key: &str) -> bool {
    artifact.exists() && fs::read_to_string(sidecar(artifact)).map(|s| s.trim() == key).unwrap_or(false)
}

fn stamp(artifact: &Path, key: &str) -> Result<()> {
    write(&sidecar(artifact), format!("{key}\n"))
}

fn toml_of<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Config(format!("config does not serialize: {e}")))
}

pub fn run_all(a: RunAllArgs) -> Result<()> {
    let mut cfg = load(a.config.as_deref())?;
    set!(cfg.dataset, a.kind);
    set!(cfg.grid_step, a.grid_step);
    set!(cfg.embed_dim, a.dim);
    set!(cfg.k, a.k);
    set!(cfg.test_bags, a.test_bags);
    if let Some(n) = a.regions {
        cfg.sizes = SplitSizes::from_total(n);
    }
    if let Some(s) = a.seed {
        cfg.data_seed = s;
        cfg.embed_seed = s;
        cfg.cluster_seed = s;
        cfg.eval_seed = s;
        cfg.train.seed = s;
    }
    a.train.apply(&mut cfg);
    cfg.train.validate()?;
    let variants = resolve_variants(&a.variants, method_grid())?;

    let root = a.out.join(cfg.dataset.to_string());
    echo(&cfg, &root.join("config.toml"))?;

    let data = root.join("data");
    let data_key = stage_key(&["gen", &toml_of(&cfg.toy_config())?]);
    if fresh(&data, &data_key) {
        eprintln!("data: up to date");
    } else {
        eprintln!("data: generating");
        if data.exists() {
            fs::remove_dir_all(&data).map_err(|e| Error::io(&data, e))?;
        }
        let ds = generate(&cfg.toy_config())?;
        write_dataset(&ds, &cfg.toy_config(), &data)?;
        stamp(&data, &data_key)?;
    }

    let feats = root.join("feats.csml");
    let embed_key = stage_key(&[
        "embed",
        &cfg.embed_seed.to_string(),
        &cfg.embed_dim.to_string(),
        &dataset_hash(&data)?,
    ]);
    if fresh(&feats, &embed_key) {
        eprintln!("embed: up to date");
    } else {
        eprintln!("embed: running");
        let m = DatasetManifest::load(&data)?;
        let mut spec = EmbedderSpec::new(cfg.embed_seed, cfg.embed_dim);
        embed_dataset(&m, &mut spec)?.to_container().save(&feats)?;
        stamp(&feats, &embed_key)?;
    }
    let feats_hash = file_hash(&feats)?;

    let clusters = root.join("clusters.csml");
    let cluster_key = stage_key(&["cluster", &cfg.k.to_string(), &cfg.cluster_seed.to_string(), &feats_hash]);
    let fs_ = load_feats(&feats, Some(&data))?;
    if fresh(&clusters, &cluster_key) {
        eprintln!("cluster: up to date");
    } else {
        eprintln!("cluster: running");
        cluster_regions(&fs_, cfg.k, cfg.cluster_seed)?.to_container().save(&clusters)?;
        stamp(&clusters, &cluster_key)?;
    }
    let cl = load_clusters(&clusters, &fs_)?;
    let clusters_hash = file_hash(&clusters)?;

    let step = grid_step(&fs_, cfg.grid_step);
    let dataset = cfg.dataset.to_string();
    let mut rows = Vec::new();
    for v in &variants {
        let dir = root.join(&v.name);
        let metrics = dir.join("metrics.json");
        let mut vcfg = cfg.clone();
        vcfg.train = v.apply(&cfg.train);
        let key = stage_key(&["variant", &to_toml(&vcfg)?, &feats_hash, &clusters_hash]);
        if fresh(&metrics, &key) {
            eprintln!("{}: up to date", v.name);
            let text = fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
            rows.push(serde_json::from_str(text.trim()).map_err(|e| Error::Parse {
                path: metrics.clone(),
                offset: 0,
                msg: e.to_string(),
            })?);
            continue;
        }
        eprintln!("{}: training", v.name);
        let r = run_variant(&fs_, &cl, &cfg, v).map_err(|e| cell_error(&v.name, e))?;
        echo(&vcfg, &dir.join("config.toml"))?;
        let rec = save_result(&r, &dataset, &dir)?;
        for label in [1u8, 0] {
            if let Some(pos) = r.test.labels.iter().position(|&l| l == label) {
                let region = r.test.region_ids[pos];
                let mdir = dir.join("maps").join(format!("region_{region}"));
                write_maps(&r.params, &fs_, region, cfg.test_bags, cfg.eval_seed, step, &mdir)?;
            }
        }
        stamp(&metrics, &key)?;
        rows.push(rec);
    }
    write_tables(&rows, &root)
}
