//! The outer training loop: alternate meta-sub-target discovery with `M`
//! adaptation iterations, plus the ablation and single-target variants.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{allocate, TrainView};
use crate::error::{Error, Result};
use crate::losses::{
    alternating_objective, joint_objective, source_only_objective, Batches, HyperParams, Objective, Phase,
    SourceBatch, TargetBatch, Terms,
};
use crate::meta::{split_targets, train_meta_learner, DecConfig, DecReport, MetaPartition};
use crate::networks::{Architecture, Group, Mode, ModelBundle};
use crate::optim::Sgd;
use crate::rng::{self, Rng};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Amean,
    NoMeta,
    ExplicitSubTarget,
    StaticKClustering,
    SourceOnly,
    /// Adaptation to sub-target `j` alone.
    SingleTarget(usize),
}

impl Variant {
    /// The five variants of the ablation table.
    pub const ABLATION: [Variant; 5] = [
        Variant::SourceOnly,
        Variant::NoMeta,
        Variant::ExplicitSubTarget,
        Variant::StaticKClustering,
        Variant::Amean,
    ];

    pub fn needs_oracle(self) -> bool {
        matches!(self, Variant::ExplicitSubTarget | Variant::SingleTarget(_))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Amean => f.write_str("amean"),
            Variant::NoMeta => f.write_str("no-meta"),
            Variant::ExplicitSubTarget => f.write_str("explicit-sub-target"),
            Variant::StaticKClustering => f.write_str("static-k-clustering"),
            Variant::SourceOnly => f.write_str("source-only"),
            Variant::SingleTarget(j) => write!(f, "single-target-{j}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub dec: DecConfig,
    /// Layer sizes and mode; input width and class count are taken from the
    /// data.
    pub arch: Architecture,
    pub outer_loops: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hyper: HyperParams::default(),
            dec: DecConfig::default(),
            arch: Architecture::default(),
            outer_loops: 5,
            seed: 0,
            variant: Variant::Amean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.dec.validate()?;
        self.arch.validate()?;
        if self.outer_loops == 0 {
            return Err(Error::config("outer_loops must be >= 1"));
        }
        Ok(())
    }

    /// Total adaptation iterations, `outer_loops * M`.
    pub fn max_iter(&self) -> usize {
        self.outer_loops * self.hyper.iterations
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based across all outer loops.
    pub iteration: usize,
    pub outer: usize,
    #[serde(flatten)]
    pub terms: Terms,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSnapshot {
    pub outer: usize,
    pub partition: MetaPartition,
    pub dec: Option<DecReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub variant: Variant,
    pub records: Vec<IterationRecord>,
    pub partitions: Vec<PartitionSnapshot>,
    pub meta_updates: usize,
    pub warnings: Vec<String>,
    /// Alternating mode: steps whose untouched networks were checksummed
    /// before and after, and the iterations where one of them changed.
    pub phase_checks: usize,
    pub phase_violations: Vec<usize>,
    /// Seconds spent training; kept out of every export so outputs stay
    /// identical across reruns.
    pub wall_clock: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,outer,v_st,v_mt,l_ent,l_vir,gamma,value\n");
        for r in &self.records {
            let t = &r.terms;
            let _ = writeln!(
                out,
                "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.iteration, r.outer, t.v_st, t.v_mt, t.l_ent, t.l_vir, t.gamma, t.value
            );
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Compact JSON summary: counts, warnings, partition sizes and the last
    /// record.
    pub fn summary_json(&self) -> Result<String> {
        let summary = serde_json::json!({
            "variant": self.variant.to_string(),
            "iterations": self.records.len(),
            "meta_updates": self.meta_updates,
            "warnings": self.warnings,
            "phase_checks": self.phase_checks,
            "phase_violations": self.phase_violations,
            "partition_sizes": self.partitions.iter().map(|p| p.partition.sizes()).collect::<Vec<_>>(),
            "meta_learner": self.partitions.iter().map(|p| &p.dec).collect::<Vec<_>>(),
            "final": self.records.last(),
        });
        Ok(serde_json::to_string_pretty(&summary)?)
    }

    /// Last partition in use, if any.
    pub fn final_partition(&self) -> Option<&PartitionSnapshot> {
        self.partitions.last()
    }
}

/// One drawn mini-batch plus the meta-sub-targets that had no members.
pub struct BatchDraw {
    pub batches: Batches,
    pub empty_groups: Vec<usize>,
}

/// `count` members of `group`, without repeats while the group is large
/// enough and by cycling reshuffled copies otherwise.
fn draw(group: &[usize], count: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut pool = group.to_vec();
        let take = (count - out.len()).min(pool.len());
        let (chosen, _) = pool.partial_shuffle(rng, take);
        out.extend_from_slice(chosen);
    }
    out
}

/// Half a batch of labelled source rows, half of target rows split equally
/// across the non-empty meta-sub-targets (or uniform without a partition).
pub fn make_batches(
    source_x: &Matrix,
    source_y: &[usize],
    target_x: &Matrix,
    partition: Option<&MetaPartition>,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<BatchDraw> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::config(format!("batch_size must be even and >= 2, got {batch_size}")));
    }
    if source_x.rows() == 0 || target_x.rows() == 0 {
        return Err(Error::contract("cannot draw batches from an empty set"));
    }
    let half = batch_size / 2;
    let src: Vec<usize> = (0..half).map(|_| rng.random_range(0..source_x.rows())).collect();
    let source = SourceBatch { x: source_x.select_rows(&src), labels: src.iter().map(|&i| source_y[i]).collect() };

    let (target, empty_groups) = match partition {
        None => {
            let idx: Vec<usize> = (0..half).map(|_| rng.random_range(0..target_x.rows())).collect();
            (TargetBatch { x: target_x.select_rows(&idx), groups: None }, vec![])
        }
        Some(p) => {
            if p.len() != target_x.rows() {
                return Err(Error::contract(format!("partition covers {} rows, target has {}", p.len(), target_x.rows())));
            }
            let groups = p.groups();
            let live: Vec<usize> = (0..groups.len()).filter(|&j| !groups[j].is_empty()).collect();
            let empty: Vec<usize> = (0..groups.len()).filter(|&j| groups[j].is_empty()).collect();
            let quotas = allocate(half, &vec![1.0 / live.len() as f64; live.len()]);
            let (mut idx, mut tags) = (Vec::with_capacity(half), Vec::with_capacity(half));
            for (&j, &q) in live.iter().zip(&quotas) {
                let members = draw(&groups[j], q, rng);
                tags.extend(std::iter::repeat_n(j, members.len()));
                idx.extend(members);
            }
            (TargetBatch { x: target_x.select_rows(&idx), groups: Some(tags) }, empty)
        }
    };
    Ok(BatchDraw { batches: Batches { source, target }, empty_groups })
}

fn check_finite(terms: &Terms, iteration: usize) -> Result<()> {
    match terms.non_finite() {
        Some(term) => Err(Error::NonFinite { term: term.into(), iteration }),
        None if !terms.value.is_finite() => Err(Error::NonFinite { term: "value".into(), iteration }),
        None => Ok(()),
    }
}

fn step(obj: &mut Objective, opt: &mut Sgd, bundle: &mut ModelBundle, iteration: usize) -> Result<()> {
    let grads = obj.gradients()?;
    if grads.iter().any(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { term: "gradient".into(), iteration });
    }
    opt.step(&mut bundle.store, &grads);
    Ok(())
}

/// The full meta-adaptation loop.
pub fn run_amean(view: TrainView<'_>, cfg: &TrainConfig) -> Result<(ModelBundle, TrainHistory)> {
    let mut cfg = cfg.clone();
    cfg.variant = Variant::Amean;
    run_variant(view, None, &cfg)
}

/// Trains `cfg.variant`. `oracle_groups` holds the true sub-target of every
/// row of `view.target_x()` and is required by the explicit-sub-target
/// variant only.
pub fn run_variant(view: TrainView<'_>, oracle_groups: Option<&[usize]>, cfg: &TrainConfig) -> Result<(ModelBundle, TrainHistory)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut arch = cfg.arch.clone();
    arch.input_dim = view.dim();
    arch.classes = view.classes();
    let mut bundle = ModelBundle::build(&arch, cfg.seed)?;
    let view = match cfg.variant {
        Variant::SingleTarget(j) => view.subtarget(j)?,
        _ => view,
    };
    let source_x = view.source_x();
    let source_y = view.source_labels();
    let target_x = view.target_x();
    if target_x.rows() == 0 {
        return Err(Error::config("no target training rows"));
    }
    let oracle = match (cfg.variant, oracle_groups) {
        (Variant::ExplicitSubTarget, None) => {
            return Err(Error::config("explicit-sub-target needs oracle sub-target ids"));
        }
        (Variant::ExplicitSubTarget, Some(g)) => {
            if g.len() != target_x.rows() {
                return Err(Error::config(format!("{} oracle ids for {} target rows", g.len(), target_x.rows())));
            }
            Some(MetaPartition::from_assignment(g.to_vec(), arch.subtargets)?)
        }
        _ => None,
    };

    let hp = &cfg.hyper;
    let mut batch_rng = rng::stream(cfg.seed, "batch");
    let mut vat_rng = rng::stream(cfg.seed, "vat");
    let mut dropout_rng = (arch.feature_dropout > 0.0).then(|| rng::stream(cfg.seed, "dropout"));
    let mut opt = Sgd::new(hp.learning_rate, hp.momentum);
    let mut history = TrainHistory { variant: cfg.variant, ..TrainHistory::default() };
    let mut partition: Option<MetaPartition> = None;
    let max_iter = cfg.max_iter();

    for outer in 0..cfg.outer_loops {
        let refit = match cfg.variant {
            Variant::Amean => true,
            Variant::StaticKClustering => outer == 0,
            _ => false,
        };
        let mut dec = None;
        if refit {
            let mut meta_rng = rng::substream(cfg.seed, "meta", outer as u64);
            dec = Some(train_meta_learner(&mut bundle, &target_x, &cfg.dec, &mut meta_rng)?);
            partition = Some(split_targets(&bundle, &target_x, cfg.dec.dof)?);
            history.meta_updates += 1;
        } else if oracle.is_some() {
            partition = oracle.clone();
        }
        if let Some(p) = &partition {
            history.partitions.push(PartitionSnapshot { outer, partition: p.clone(), dec });
        }

        for m in 0..hp.iterations {
            let iteration = outer * hp.iterations + m + 1;
            let draw = make_batches(source_x, source_y, &target_x, partition.as_ref(), hp.batch_size, &mut batch_rng)?;
            if m == 0 && !draw.empty_groups.is_empty() {
                history.warnings.push(format!(
                    "outer loop {outer}: empty meta-sub-targets {:?}, quota spread over the rest",
                    draw.empty_groups
                ));
            }
            let gamma = if partition.is_some() { hp.gamma.at(iteration, max_iter) } else { 0.0 };
            let terms = match (cfg.variant, arch.mode) {
                (Variant::SourceOnly, _) => {
                    let mut obj = source_only_objective(&bundle, &draw.batches.source, dropout_rng.as_mut())?;
                    check_finite(&obj.terms, iteration)?;
                    step(&mut obj, &mut opt, &mut bundle, iteration)?;
                    obj.terms
                }
                (_, Mode::Joint) => {
                    let mut obj = joint_objective(&bundle, &draw.batches, hp, gamma, &mut vat_rng, dropout_rng.as_mut())?;
                    check_finite(&obj.terms, iteration)?;
                    step(&mut obj, &mut opt, &mut bundle, iteration)?;
                    obj.terms
                }
                (_, Mode::Alternating) => {
                    let generator = bundle.store.checksum(&Group::GENERATOR);
                    let mut d = alternating_objective(&bundle, &draw.batches, hp, gamma, Phase::Discriminator, &mut vat_rng, dropout_rng.as_mut())?;
                    check_finite(&d.terms, iteration)?;
                    step(&mut d, &mut opt, &mut bundle, iteration)?;
                    let generator_moved = bundle.store.checksum(&Group::GENERATOR) != generator;
                    let discriminator = bundle.store.checksum(&Group::DISCRIMINATOR);
                    let mut g = alternating_objective(&bundle, &draw.batches, hp, gamma, Phase::Generator, &mut vat_rng, dropout_rng.as_mut())?;
                    check_finite(&g.terms, iteration)?;
                    step(&mut g, &mut opt, &mut bundle, iteration)?;
                    history.phase_checks += 2;
                    if generator_moved || bundle.store.checksum(&Group::DISCRIMINATOR) != discriminator {
                        history.phase_violations.push(iteration);
                    }
                    g.terms
                }
            };
            history.records.push(IterationRecord { iteration, outer, terms });
        }
    }
    history.wall_clock = start.elapsed().as_secs_f64();
    Ok((bundle, history))
}
