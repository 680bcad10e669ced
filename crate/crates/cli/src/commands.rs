//! Subcommand bodies. Every command writes its outputs under one directory
//! and overwrites earlier files, so reruns with the same inputs reproduce
//! them byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use amean::data::{generate_blended, BlendedDataset, DataSpec, Split};
use amean::evaluation::{evaluate_bundle, export_embeddings, MetricsReport};
use amean::networks::{Group, ModelBundle};
use amean::trainer::{run_variant, TrainConfig, Variant};
use amean::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_json, DataManifest, DataSource, ExperimentConfig};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_dataset(ds: &BlendedDataset, path: &Path, spec_bytes: &[u8], seed: u64) -> Result<()> {
    write(path, ds.to_csv())?;
    let manifest = DataManifest::new(spec_bytes, seed, ds);
    write(&DataManifest::path_for(path), serde_json::to_string_pretty(&manifest)?)
}

pub fn generate(spec_path: &Path, out: &Path, seed: u64) -> Result<()> {
    let bytes = fs::read(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::config(format!("{}: not UTF-8", spec_path.display())))?;
    let spec: DataSpec = parse_json(spec_path, &text)?;
    let ds = generate_blended(&spec, seed)?;
    write_dataset(&ds, out, &bytes, seed)?;
    println!("wrote {} ({} source, {} target rows)", out.display(), ds.n_source(), ds.n_target());
    Ok(())
}

/// Overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
}

struct Experiment {
    cfg: ExperimentConfig,
    out: PathBuf,
    threads: usize,
    /// One dataset per seed, in seed order.
    data: Vec<(u64, BlendedDataset)>,
}

impl Experiment {
    fn load(config: &Path, opts: &RunOptions) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(config)?;
        if let Some(seed) = opts.seed {
            cfg.seeds = vec![seed];
        }
        let out = opts.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        let mut data = Vec::new();
        for &seed in &cfg.seeds {
            let ds = cfg.dataset(seed)?;
            if let DataSource::Spec(spec) = &cfg.data {
                let spec_bytes = serde_json::to_vec(spec)?;
                write_dataset(&ds, &out.join("data").join(format!("seed-{seed}.csv")), &spec_bytes, seed)?;
            }
            data.push((seed, ds));
        }
        Ok(Self { cfg, out, threads: opts.threads.max(1), data })
    }

    fn job(&self, variant: Variant, seed_idx: usize, tag: &str) -> Job<'_> {
        let (seed, ds) = &self.data[seed_idx];
        let mut train = TrainConfig { variant, seed: *seed, ..self.cfg.train.clone() };
        if variant == Variant::ExplicitSubTarget {
            train.arch.subtargets = ds.k();
        }
        Job { train, ds, dir: self.out.join(tag).join(format!("seed-{seed}")) }
    }
}

struct Job<'a> {
    train: TrainConfig,
    ds: &'a BlendedDataset,
    dir: PathBuf,
}

impl Job<'_> {
    fn run(&self) -> Result<MetricsReport> {
        let cfg = &self.train;
        let oracle = (cfg.variant == Variant::ExplicitSubTarget).then(|| self.ds.oracle().train_subtargets());
        let (bundle, history) = run_variant(self.ds.train_view(), oracle.as_deref(), cfg)?;
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        bundle.save(&self.dir.join("checkpoint.bin"))?;
        history.save_csv(&self.dir.join("history.csv"))?;
        write(&self.dir.join("summary.json"), history.summary_json()?)?;
        if let Some(p) = history.final_partition() {
            p.partition.write_csv(&self.dir.join("partition.csv"))?;
        }
        let report = evaluate_bundle(&bundle, self.ds, Split::Test, cfg.dec.dof, cfg.seed, &cfg.variant.to_string())?;
        report.save(&self.dir.join("metrics.json"))?;
        println!("{} seed {}: acc_btda {:.4}", cfg.variant, cfg.seed, report.acc_btda);
        Ok(report)
    }
}

/// Runs independent jobs on a pool of `threads` workers; results keep the
/// job order.
fn execute(jobs: &[Job<'_>], threads: usize) -> Result<Vec<MetricsReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(Job::run).collect())
}

pub fn train(config: &Path, opts: &RunOptions) -> Result<()> {
    let exp = Experiment::load(config, opts)?;
    let variant = exp.cfg.train.variant;
    let jobs: Vec<Job> = (0..exp.data.len()).map(|i| exp.job(variant, i, &variant.to_string())).collect();
    execute(&jobs, exp.threads)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableRow {
    pub name: String,
    pub seeds: usize,
    pub mean_acc_btda: f64,
    /// Sample standard deviation over seeds; zero for a single seed.
    pub std_acc_btda: f64,
}

impl TableRow {
    fn new(name: String, accs: &[f64]) -> Self {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = if accs.len() > 1 { (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { name, seeds: accs.len(), mean_acc_btda: mean, std_acc_btda: std }
    }
}

fn table_csv(key: &str, rows: &[TableRow]) -> String {
    let mut out = format!("{key},seeds,mean_acc_btda,std_acc_btda\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.name, r.seeds, r.mean_acc_btda, r.std_acc_btda));
    }
    out
}

pub fn ablate(config: &Path, opts: &RunOptions) -> Result<()> {
    let exp = Experiment::load(config, opts)?;
    let jobs: Vec<Job> = Variant::ABLATION
        .iter()
        .flat_map(|&v| (0..exp.data.len()).map(move |i| (v, i)))
        .map(|(v, i)| exp.job(v, i, &v.to_string()))
        .collect();
    let reports = execute(&jobs, exp.threads)?;
    let n = exp.data.len();
    // Source-only comes first in the ablation order.
    let (source_only, rest) = reports.split_at(n);
    for (i, (job, report)) in jobs[n..].iter().zip(rest).enumerate() {
        report.clone().with_source_only(&source_only[i % n])?.save(&job.dir.join("metrics.json"))?;
    }
    let rows: Vec<TableRow> = Variant::ABLATION
        .iter()
        .zip(reports.chunks(n))
        .map(|(v, chunk)| TableRow::new(v.to_string(), &chunk.iter().map(|r| r.acc_btda).collect::<Vec<_>>()))
        .collect();
    write(&exp.out.join("ablation.csv"), table_csv("variant", &rows))?;
    write(&exp.out.join("ablation.json"), serde_json::to_string_pretty(&serde_json::json!({ "rows": rows }))?)?;
    for r in &rows {
        println!("{:<22} mean {:.4} std {:.4} over {} seeds", r.name, r.mean_acc_btda, r.std_acc_btda, r.seeds);
    }
    Ok(())
}

/// Parses `2,3,5` and inclusive ranges such as `2..8`.
pub fn parse_k_list(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::config(format!("invalid k-list `{text}`"));
    let mut ks = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (a.parse::<usize>().map_err(|_| bad())?, b.parse::<usize>().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                ks.extend(a..=b);
            }
            None => ks.push(part.parse().map_err(|_| bad())?),
        }
    }
    if ks.is_empty() {
        return Err(bad());
    }
    if let Some(k) = ks.iter().find(|&&k| k < 2) {
        return Err(Error::config(format!("k must be >= 2, got {k}")));
    }
    Ok(ks)
}

pub fn sweep_k(config: &Path, k_list: &[usize], opts: &RunOptions) -> Result<()> {
    let exp = Experiment::load(config, opts)?;
    let n = exp.data.len();
    let jobs: Vec<Job> = k_list
        .iter()
        .flat_map(|&k| (0..n).map(move |i| (k, i)))
        .map(|(k, i)| {
            let mut job = exp.job(Variant::Amean, i, &format!("k-{k}"));
            job.train.arch.subtargets = k;
            job
        })
        .collect();
    let reports = execute(&jobs, exp.threads)?;
    let rows: Vec<TableRow> = k_list
        .iter()
        .zip(reports.chunks(n))
        .map(|(k, chunk)| TableRow::new(k.to_string(), &chunk.iter().map(|r| r.acc_btda).collect::<Vec<_>>()))
        .collect();
    let best = rows.iter().max_by(|a, b| a.mean_acc_btda.total_cmp(&b.mean_acc_btda)).expect("non-empty k-list");
    let data_k = exp.data[0].1.k();
    write(&exp.out.join("sweep_k.csv"), table_csv("k", &rows))?;
    let summary = serde_json::json!({ "rows": rows, "best_k": best.name.parse::<usize>().ok(), "data_subtargets": data_k });
    write(&exp.out.join("sweep_k.json"), serde_json::to_string_pretty(&summary)?)?;
    for r in &rows {
        println!("k = {:<3} mean {:.4} std {:.4} over {} seeds", r.name, r.mean_acc_btda, r.std_acc_btda, r.seeds);
    }
    println!("best k {} (data has {data_k} sub-targets)", best.name);
    Ok(())
}

/// Rejects a checkpoint whose input or output layer does not fit the data.
fn check_compatible(bundle: &ModelBundle, ds: &BlendedDataset) -> Result<()> {
    let weight_names = |group: Group| -> Vec<String> {
        bundle
            .store
            .ids_in(&[group])
            .map(|id| bundle.store.param(id).name.clone())
            .filter(|n| n.ends_with(".weight"))
            .collect()
    };
    if bundle.arch.input_dim != ds.dim() {
        return Err(Error::Checkpoint {
            layer: weight_names(Group::Feature).first().cloned().unwrap_or_default(),
            detail: format!("checkpoint expects {} input columns, dataset has {}", bundle.arch.input_dim, ds.dim()),
        });
    }
    if bundle.arch.classes != ds.classes() {
        return Err(Error::Checkpoint {
            layer: weight_names(Group::Classifier).last().cloned().unwrap_or_default(),
            detail: format!("checkpoint predicts {} classes, dataset has {}", bundle.arch.classes, ds.classes()),
        });
    }
    Ok(())
}

pub struct EvalOptions {
    pub seed: u64,
    pub label: String,
    pub dof: f64,
}

pub fn eval(checkpoint: &Path, dataset: &Path, out: &Path, opts: &EvalOptions) -> Result<()> {
    let ds = BlendedDataset::load(dataset)?;
    let bundle = ModelBundle::load(checkpoint)?;
    check_compatible(&bundle, &ds)?;
    let report = evaluate_bundle(&bundle, &ds, Split::Test, opts.dof, opts.seed, &opts.label)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.save(&out.join("metrics.json"))?;
    export_embeddings(&bundle, &ds, &out.join("embeddings.csv"))?;
    println!("acc_btda {:.4} on {} test rows", report.acc_btda, ds.oracle().rows_in(Split::Test).len());
    Ok(())
}
