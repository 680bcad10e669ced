//! The unsupervised meta-learner: an autoencoder over `[x | F(x) | C(F(x))]`
//! whose embeddings are clustered with Student's-t soft assignments sharpened
//! towards an auxiliary target distribution, and the resulting split of the
//! target set into meta-sub-targets.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::losses::{clustering_loss, reconstruction_loss, KlSign};
use crate::networks::{Group, ModelBundle};
use crate::optim::Sgd;
use crate::rng::Rng;
use crate::tensor::{student_t_assign, Graph, Matrix};

/// Frequencies below this are treated as an empty cluster.
pub const MIN_FREQUENCY: f64 = 1e-12;

/// Row-normalised Student's-t kernel `q_ij ∝ (1 + |z_i - mu_j|^2 / dof)^(-(dof + 1) / 2)`.
pub fn soft_assign(z: &Matrix, centroids: &Matrix, dof: f64) -> Result<Matrix> {
    if z.cols() != centroids.cols() {
        return Err(Error::Dimension { op: "soft_assign", left: z.shape(), right: centroids.shape() });
    }
    if z.rows() == 0 {
        return Err(Error::contract("soft_assign needs at least one embedding"));
    }
    Ok(student_t_assign(z, centroids, dof))
}

/// Sharpened targets `p_ij ∝ q_ij^2 / f_j` with cluster frequencies
/// `f_j = sum_i q_ij`.
pub fn target_distribution(q: &Matrix) -> Result<Matrix> {
    if q.rows() < 2 {
        return Err(Error::contract("target distribution needs at least 2 rows"));
    }
    let k = q.cols();
    let mut freq = vec![0.0; k];
    for i in 0..q.rows() {
        for (f, v) in freq.iter_mut().zip(q.row(i)) {
            *f += v;
        }
    }
    if let Some((cluster, &frequency)) = freq.iter().enumerate().find(|(_, f)| !(**f >= MIN_FREQUENCY)) {
        return Err(Error::DegenerateCluster { cluster, frequency });
    }
    let mut p = Matrix::zeros(q.rows(), k);
    for i in 0..q.rows() {
        let row = p.row_mut(i);
        for (j, out) in row.iter_mut().enumerate() {
            let v = q.get(i, j);
            *out = v * v / freq[j];
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(p)
}

/// Gradient of the row-averaged `KL(P || Q)` with respect to the centroids,
/// `P` held fixed:
/// `-(dof + 1) / dof / n * sum_i (1 + |z_i - mu_j|^2 / dof)^-1 (p_ij - q_ij)(z_i - mu_j)`.
pub fn centroid_gradient(z: &Matrix, centroids: &Matrix, p: &Matrix, dof: f64) -> Result<Matrix> {
    let q = soft_assign(z, centroids, dof)?;
    if p.shape() != q.shape() {
        return Err(Error::Dimension { op: "centroid_gradient", left: p.shape(), right: q.shape() });
    }
    let n = z.rows() as f64;
    let c = -(dof + 1.0) / dof / n;
    let mut grad = Matrix::zeros(centroids.rows(), centroids.cols());
    for j in 0..centroids.rows() {
        let mu = centroids.row(j).to_vec();
        for i in 0..z.rows() {
            let zi = z.row(i);
            let d2: f64 = zi.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum();
            let w = c * (p.get(i, j) - q.get(i, j)) / (1.0 + d2 / dof);
            for ((gd, a), b) in grad.row_mut(j).iter_mut().zip(zi).zip(&mu) {
                *gd += w * (a - b);
            }
        }
    }
    Ok(grad)
}

/// k-means centroids of the embeddings, deterministic in `rng`.
pub fn init_centroids(embeddings: &Matrix, k: usize, rng: &mut Rng) -> Result<Matrix> {
    Ok(kmeans(embeddings, k, rng)?.centroids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecConfig {
    /// Student's-t degrees of freedom.
    pub dof: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Autoencoder steps on reconstruction alone before clustering.
    pub pretrain_iters: usize,
    /// Std of the Gaussian corruption applied to pretraining inputs.
    pub corruption_std: f64,
    pub max_epochs: usize,
    /// Stop once fewer than this fraction of hard assignments change in an epoch.
    pub threshold: f64,
    pub kl_sign: KlSign,
    /// Keep the previous meta-learner and centroids across meta-updates.
    pub warm_start: bool,
}

impl Default for DecConfig {
    fn default() -> Self {
        Self {
            dof: 1.0,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 256,
            pretrain_iters: 100,
            corruption_std: 0.0,
            max_epochs: 200,
            threshold: 0.001,
            kl_sign: KlSign::Dec,
            warm_start: false,
        }
    }
}

impl DecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dof > 0.0 && self.dof.is_finite()) {
            return Err(Error::config(format!("dof must be > 0, got {}", self.dof)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("meta-learner batch_size must be >= 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("meta-learner learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("meta-learner momentum must lie in [0, 1)"));
        }
        if !(self.corruption_std >= 0.0 && self.corruption_std.is_finite()) {
            return Err(Error::config("corruption_std must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Hard split of the target set into `k` meta-sub-targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPartition {
    pub assignment: Vec<usize>,
    /// Soft assignments the split was taken from.
    pub q: Matrix,
}

impl MetaPartition {
    /// Argmax of every row of `q`, ties to the smallest index.
    pub fn from_q(q: Matrix) -> Self {
        Self { assignment: q.argmax_rows(), q }
    }

    /// Partition with one-hot soft assignments from known group ids.
    pub fn from_assignment(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = assignment.iter().find(|&&j| j >= k) {
            return Err(Error::contract(format!("sub-target {bad} outside [0, {k})")));
        }
        let mut q = Matrix::zeros(assignment.len(), k);
        for (i, &j) in assignment.iter().enumerate() {
            q.row_mut(i)[j] = 1.0;
        }
        Ok(Self { assignment, q })
    }

    pub fn k(&self) -> usize {
        self.q.cols()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Target indices of every meta-sub-target.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k()];
        for (i, &j) in self.assignment.iter().enumerate() {
            groups[j].push(i);
        }
        groups
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups().iter().map(Vec::len).collect()
    }

    /// Checks that every index has exactly one in-range assignment that
    /// maximises its row of `q`.
    pub fn validate(&self) -> Result<()> {
        if self.q.rows() != self.assignment.len() {
            return Err(Error::contract("partition q and assignment lengths differ"));
        }
        for (i, &j) in self.assignment.iter().enumerate() {
            let row = self.q.row(i);
            if j >= row.len() || row.iter().any(|&v| v > row[j]) {
                return Err(Error::contract(format!("assignment of target {i} is not a row maximum")));
            }
        }
        Ok(())
    }

    /// CSV with columns `target_index,meta_subtarget,q_1..q_k`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("target_index,meta_subtarget");
        for j in 1..=self.k() {
            out.push_str(&format!(",q_{j}"));
        }
        out.push('\n');
        for (i, &j) in self.assignment.iter().enumerate() {
            out.push_str(&format!("{i},{j}"));
            for v in self.q.row(i) {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Diagnostics of one meta-learner fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecReport {
    pub initial_reconstruction: f64,
    pub pretrained_reconstruction: f64,
    pub epochs: usize,
    pub final_change: f64,
    pub restarts: usize,
}

/// Reconstruction loss over all rows.
pub fn reconstruction_error(bundle: &ModelBundle, meta_inputs: &Matrix) -> Result<f64> {
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, &[Group::Encoder, Group::Decoder], &[])?;
    let x = g.constant(meta_inputs)?;
    let z = bundle.encoder.forward(&mut g, &b, x, None)?;
    let r = bundle.decoder.forward(&mut g, &b, z, None)?;
    let e = reconstruction_loss(&mut g, r, x)?;
    g.scalar(e)
}

fn hard_assignments(bundle: &ModelBundle, meta_inputs: &Matrix, dof: f64) -> Result<Vec<usize>> {
    let z = bundle.embed(meta_inputs)?;
    Ok(soft_assign(&z, bundle.centroid_matrix(), dof)?.argmax_rows())
}

fn batches_of(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(|c| c.len() >= 2)
}

/// Fits the autoencoder and centroids on the target rows `target_x`.
/// F and C are only read.
pub fn train_meta_learner(bundle: &mut ModelBundle, target_x: &Matrix, cfg: &DecConfig, rng: &mut Rng) -> Result<DecReport> {
    cfg.validate()?;
    let k = bundle.arch.subtargets;
    let n = target_x.rows();
    if n < k.max(2) {
        return Err(Error::config(format!("{n} target rows cannot form {k} clusters")));
    }
    if !(cfg.warm_start && bundle.meta_fitted) {
        bundle.reinit_meta(rng);
    }
    bundle.fit_meta_scale(&bundle.raw_meta_inputs(target_x)?);
    let inputs = bundle.meta_inputs(target_x)?;
    let initial_reconstruction = reconstruction_error(bundle, &inputs)?;

    let mut order: Vec<usize> = (0..n).collect();
    let noise = Normal::new(0.0, cfg.corruption_std).map_err(|e| Error::config(e.to_string()))?;
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut done = 0;
    while done < cfg.pretrain_iters {
        order.shuffle(rng);
        for idx in batches_of(&order, cfg.batch_size) {
            if done == cfg.pretrain_iters {
                break;
            }
            let clean = inputs.select_rows(idx);
            let mut noisy = clean.clone();
            if cfg.corruption_std > 0.0 {
                noisy.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
            }
            let mut g = Graph::new();
            let b = bundle.bind(&mut g, &[], &[Group::Encoder, Group::Decoder])?;
            let xin = g.constant(&noisy)?;
            let target = g.constant(&clean)?;
            let z = bundle.encoder.forward(&mut g, &b, xin, None)?;
            let r = bundle.decoder.forward(&mut g, &b, z, None)?;
            let loss = reconstruction_loss(&mut g, r, target)?;
            if !g.scalar(loss)?.is_finite() {
                return Err(Error::NonFinite { term: "reconstruction".into(), iteration: done });
            }
            g.backward(loss)?;
            opt.step(&mut bundle.store, &b.grads(&g));
            done += 1;
        }
    }
    let pretrained_reconstruction = reconstruction_error(bundle, &inputs)?;

    if !(cfg.warm_start && bundle.meta_fitted) {
        let z = bundle.embed(&inputs)?;
        *bundle.store.get_mut(bundle.centroids) = init_centroids(&z, k, rng)?;
    }

    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut prev = hard_assignments(bundle, &inputs, cfg.dof)?;
    let (mut epochs, mut final_change, mut restarts) = (0, 1.0, 0);
    let meta_groups = Group::META;
    'epochs: while epochs < cfg.max_epochs {
        order.shuffle(rng);
        for idx in batches_of(&order, cfg.batch_size) {
            let batch = inputs.select_rows(idx);
            let mut g = Graph::new();
            let b = bundle.bind(&mut g, &[], &meta_groups)?;
            let terms = match clustering_loss(&mut g, bundle, &b, &batch, cfg.dof, cfg.kl_sign) {
                Err(Error::DegenerateCluster { .. }) if restarts == 0 => {
                    restarts += 1;
                    let z = bundle.embed(&inputs)?;
                    *bundle.store.get_mut(bundle.centroids) = init_centroids(&z, k, rng)?;
                    opt.reset();
                    prev = hard_assignments(bundle, &inputs, cfg.dof)?;
                    continue 'epochs;
                }
                other => other?,
            };
            if !g.scalar(terms.loss)?.is_finite() {
                return Err(Error::NonFinite { term: "clustering".into(), iteration: epochs });
            }
            g.backward(terms.loss)?;
            opt.step(&mut bundle.store, &b.grads(&g));
        }
        epochs += 1;
        let now = hard_assignments(bundle, &inputs, cfg.dof)?;
        final_change = now.iter().zip(&prev).filter(|(a, b)| a != b).count() as f64 / n as f64;
        prev = now;
        if final_change < cfg.threshold {
            break;
        }
    }
    bundle.meta_fitted = true;
    Ok(DecReport { initial_reconstruction, pretrained_reconstruction, epochs, final_change, restarts })
}

/// Assigns every target row to the meta-sub-target of largest soft assignment.
pub fn split_targets(bundle: &ModelBundle, target_x: &Matrix, dof: f64) -> Result<MetaPartition> {
    let z = bundle.embed(&bundle.meta_inputs(target_x)?)?;
    Ok(MetaPartition::from_q(soft_assign(&z, bundle.centroid_matrix(), dof)?))
}
