//! Scalar objectives: the source/target adversarial game, the multi-target
//! games, the entropy and virtual-adversarial penalties, the clustering
//! objective of the meta-learner, and their joint and alternating
//! compositions.
//!
//! Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before every
//! logarithm.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::target_distribution;
use crate::networks::{Bound, Group, Mode, ModelBundle, ParamId};
use crate::rng::Rng;
use crate::tensor::{Graph, Matrix, Tensor};

pub const PROB_FLOOR: f64 = 1e-12;
/// Finite-difference radius of the power-iteration step.
pub const VAT_XI: f64 = 1e-6;

/// Weight of the multi-target term: a constant or `iter / max_iter`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GammaRepr", into = "GammaRepr")]
pub enum Gamma {
    Constant(f64),
    Schedule,
}

pub const GAMMA_SCHEDULE: &str = "iter/max_iter";

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GammaRepr {
    Value(f64),
    Name(String),
}

impl TryFrom<GammaRepr> for Gamma {
    type Error = String;

    fn try_from(r: GammaRepr) -> Result<Self, String> {
        match r {
            GammaRepr::Value(v) => Ok(Gamma::Constant(v)),
            GammaRepr::Name(s) if s == GAMMA_SCHEDULE => Ok(Gamma::Schedule),
            GammaRepr::Name(s) => Err(format!("gamma must be a number or \"{GAMMA_SCHEDULE}\", got \"{s}\"")),
        }
    }
}

impl From<Gamma> for GammaRepr {
    fn from(g: Gamma) -> Self {
        match g {
            Gamma::Constant(v) => GammaRepr::Value(v),
            Gamma::Schedule => GammaRepr::Name(GAMMA_SCHEDULE.into()),
        }
    }
}

impl Gamma {
    /// Value at 1-based global iteration `iter` of `max_iter`.
    pub fn at(self, iter: usize, max_iter: usize) -> f64 {
        match self {
            Gamma::Constant(v) => v,
            Gamma::Schedule => iter as f64 / max_iter.max(1) as f64,
        }
    }
}

/// Sign of the KL term in the clustering objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlSign {
    /// Minimise `L_rec + KL(P || Q)`.
    #[default]
    Dec,
    /// Minimise `L_rec - KL(P || Q)`.
    Verbatim,
}

impl KlSign {
    pub fn factor(self) -> f64 {
        match self {
            KlSign::Dec => 1.0,
            KlSign::Verbatim => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub lambda: f64,
    pub gamma: Gamma,
    pub beta: f64,
    pub rho: f64,
    pub epsilon: f64,
    /// Adaptation iterations between meta-updates (`M`).
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: Gamma::Schedule,
            beta: 0.01,
            rho: 0.01,
            epsilon: 0.5,
            iterations: 500,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let gamma = match self.gamma {
            Gamma::Constant(v) => v,
            Gamma::Schedule => 0.0,
        };
        let named = [
            ("lambda", self.lambda),
            ("gamma", gamma),
            ("beta", self.beta),
            ("rho", self.rho),
            ("epsilon", self.epsilon),
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::config("momentum must be < 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations (M) must be >= 1"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config(format!("batch_size must be even and >= 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub x: Matrix,
    /// Meta-sub-target of every row; `None` when no partition is in use.
    pub groups: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batches {
    pub source: SourceBatch,
    pub target: TargetBatch,
}

/// `ln(clamp(p))`.
pub fn safe_log(g: &mut Graph, p: Tensor) -> Result<Tensor> {
    let c = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    g.log(c)
}

fn non_empty(g: &Graph, t: Tensor, what: &str) -> Result<usize> {
    match g.shape(t)[0] {
        0 => Err(Error::contract(format!("{what} batch is empty"))),
        n => Ok(n),
    }
}

/// Constant `n x cols` matrix with `value` at `(i, idx[i])`.
fn indicator(idx: &[usize], cols: usize, weight: impl Fn(usize) -> f64) -> Matrix {
    let mut w = Matrix::zeros(idx.len(), cols);
    for (i, &j) in idx.iter().enumerate() {
        w.row_mut(i)[j] = weight(j);
    }
    w
}

/// Mean of `log D(source)` plus mean of `log(1 - D(target))`.
pub fn adversarial(g: &mut Graph, mode: Mode, d_source: Tensor, d_target: Tensor) -> Result<Tensor> {
    non_empty(g, d_source, "source")?;
    non_empty(g, d_target, "target")?;
    let (src, not_tgt) = match mode {
        Mode::Joint => (g.column(d_source, 0)?, g.column(d_target, 1)?),
        Mode::Alternating => {
            let neg = g.scale(d_target, -1.0);
            (d_source, g.shift(neg, 1.0))
        }
    };
    let ls = safe_log(g, src)?;
    let lt = safe_log(g, not_tgt)?;
    let a = g.mean(ls);
    let b = g.mean(lt);
    g.add(a, b)
}

/// Mean of `-y^T log p` over the batch.
pub fn cross_entropy(g: &mut Graph, probs: Tensor, labels: &[usize]) -> Result<Tensor> {
    let [n, m] = g.shape(probs);
    non_empty(g, probs, "source")?;
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::contract(format!("label {bad} outside [0, {m})")));
    }
    let w = g.constant(&indicator(labels, m, |_| -1.0 / n as f64))?;
    let lp = safe_log(g, probs)?;
    let prod = g.mul(w, lp)?;
    Ok(g.sum(prod))
}

/// Sum over sub-targets of the mean log-probability each sample's own
/// sub-target receives. Sub-targets absent from the batch contribute 0.
pub fn subtarget_log_likelihood(g: &mut Graph, d_mt: Tensor, groups: &[usize]) -> Result<Tensor> {
    let [n, k] = g.shape(d_mt);
    non_empty(g, d_mt, "target")?;
    if groups.len() != n {
        return Err(Error::contract(format!("{} sub-target tags for {n} rows", groups.len())));
    }
    if let Some(&bad) = groups.iter().find(|&&j| j >= k) {
        return Err(Error::contract(format!("sub-target index {bad} outside [0, {k})")));
    }
    let mut counts = vec![0usize; k];
    for &j in groups {
        counts[j] += 1;
    }
    let w = g.constant(&indicator(groups, k, |j| 1.0 / counts[j] as f64))?;
    let lp = safe_log(g, d_mt)?;
    let prod = g.mul(w, lp)?;
    Ok(g.sum(prod))
}

/// Mean over rows of `p^T log p`.
pub fn neg_entropy(g: &mut Graph, probs: Tensor) -> Result<Tensor> {
    let n = non_empty(g, probs, "target")?;
    let lp = safe_log(g, probs)?;
    let prod = g.mul(probs, lp)?;
    let s = g.sum(prod);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Mean over rows of `KL(p_i || q_i)` with `p` held constant.
pub fn kl_rows(g: &mut Graph, p: &Matrix, q: Tensor) -> Result<Tensor> {
    if p.shape() != g.shape(q) {
        return Err(Error::Dimension { op: "kl_rows", left: p.shape(), right: g.shape(q) });
    }
    let n = non_empty(g, q, "kl")?;
    let pt = g.constant(p)?;
    let lp = safe_log(g, pt)?;
    let lq = safe_log(g, q)?;
    let d = g.sub(lp, lq)?;
    let prod = g.mul(pt, d)?;
    let s = g.sum(prod);
    Ok(g.scale(s, 1.0 / n as f64))
}

fn class_probs(g: &mut Graph, bundle: &ModelBundle, b: &Bound, x: Tensor, dropout: Option<&mut Rng>) -> Result<(Tensor, Tensor)> {
    let f = bundle.features(g, b, x, dropout)?;
    let p = bundle.classify(g, b, f)?;
    Ok((f, p))
}

/// `lambda * adversarial + cross-entropy` on fresh forward passes.
pub fn v_st(g: &mut Graph, bundle: &ModelBundle, b: &Bound, batches: &Batches, lambda: f64) -> Result<Tensor> {
    let xs = g.constant(&batches.source.x)?;
    let xt = g.constant(&batches.target.x)?;
    let (fs, ps) = class_probs(g, bundle, b, xs, None)?;
    let ft = bundle.features(g, b, xt, None)?;
    let ds = bundle.disc_source(g, b, fs)?;
    let dt = bundle.disc_source(g, b, ft)?;
    let adv = adversarial(g, bundle.arch.mode, ds, dt)?;
    let ce = cross_entropy(g, ps, &batches.source.labels)?;
    let adv = g.scale(adv, lambda);
    g.add(adv, ce)
}

fn groups_of(t: &TargetBatch) -> Result<&[usize]> {
    t.groups.as_deref().ok_or_else(|| Error::contract("target batch carries no sub-target tags"))
}

pub fn v_mt(g: &mut Graph, bundle: &ModelBundle, b: &Bound, target: &TargetBatch) -> Result<Tensor> {
    let groups = groups_of(target)?;
    let xt = g.constant(&target.x)?;
    let ft = bundle.features(g, b, xt, None)?;
    let d = bundle.disc_multi(g, b, ft)?;
    subtarget_log_likelihood(g, d, groups)
}

pub fn v_mt_confusion(g: &mut Graph, bundle: &ModelBundle, b: &Bound, x: &Matrix) -> Result<Tensor> {
    let xt = g.constant(x)?;
    let ft = bundle.features(g, b, xt, None)?;
    let d = bundle.disc_multi(g, b, ft)?;
    neg_entropy(g, d)
}

pub fn l_ent(g: &mut Graph, bundle: &ModelBundle, b: &Bound, x: &Matrix) -> Result<Tensor> {
    let xt = g.constant(x)?;
    let (_, p) = class_probs(g, bundle, b, xt, None)?;
    let ne = neg_entropy(g, p)?;
    Ok(g.scale(ne, -1.0))
}

/// Per-row perturbation of norm `epsilon` approximating the direction that
/// most increases `KL(C(F(x)) || C(F(x + r)))`, found with one power
/// iteration from a random Gaussian direction.
pub fn vat_perturbation(bundle: &ModelBundle, x: &Matrix, epsilon: f64, rng: &mut Rng) -> Result<Matrix> {
    let (n, d) = (x.rows(), x.cols());
    let mut u = Matrix::new(n, d, (0..n * d).map(|_| StandardNormal.sample(rng)).collect())?;
    for i in 0..n {
        let row = u.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row[0] = 1.0;
        }
    }
    if epsilon == 0.0 {
        return Ok(Matrix::zeros(n, d));
    }
    let p = bundle.predict(x)?;
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, &Group::GENERATOR, &[])?;
    let mut r0 = u.clone();
    r0.data_mut().iter_mut().for_each(|v| *v *= VAT_XI);
    let r0 = g.variable(&r0)?;
    let xc = g.constant(x)?;
    let xin = g.add(xc, r0)?;
    let (_, q) = class_probs(&mut g, bundle, &b, xin, None)?;
    let kl = kl_rows(&mut g, &p, q)?;
    g.backward(kl)?;
    let grad = g.grad_matrix(r0);
    let mut r = Matrix::zeros(n, d);
    for i in 0..n {
        let gi = grad.row(i);
        let norm = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (src, scale) = if norm > 0.0 && norm.is_finite() { (gi, epsilon / norm) } else { (u.row(i), epsilon) };
        for (dst, v) in r.row_mut(i).iter_mut().zip(src) {
            *dst = v * scale;
        }
    }
    Ok(r)
}

/// `KL(p || C(F(x + r)))` averaged over rows, with `p` and `r` fixed.
pub fn vat_kl(g: &mut Graph, bundle: &ModelBundle, b: &Bound, x: &Matrix, r: &Matrix, p: &Matrix) -> Result<Tensor> {
    let xc = g.constant(x)?;
    let rc = g.constant(r)?;
    let xin = g.add(xc, rc)?;
    let (_, q) = class_probs(g, bundle, b, xin, None)?;
    kl_rows(g, p, q)
}

/// Source VAT penalty plus `rho` times the target one.
#[allow(clippy::too_many_arguments)]
pub fn l_vir(
    g: &mut Graph,
    bundle: &ModelBundle,
    b: &Bound,
    source_x: &Matrix,
    target_x: &Matrix,
    epsilon: f64,
    rho: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::contract(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let rs = vat_perturbation(bundle, source_x, epsilon, rng)?;
    let ks = vat_kl(g, bundle, b, source_x, &rs, &bundle.predict(source_x)?)?;
    if rho == 0.0 {
        return Ok(ks);
    }
    let rt = vat_perturbation(bundle, target_x, epsilon, rng)?;
    let kt = vat_kl(g, bundle, b, target_x, &rt, &bundle.predict(target_x)?)?;
    let kt = g.scale(kt, rho);
    g.add(ks, kt)
}

/// Squared reconstruction error averaged over rows and coordinates.
pub fn reconstruction_loss(g: &mut Graph, recon: Tensor, target: Tensor) -> Result<Tensor> {
    let width = g.shape(target)[1] as f64;
    let se = g.squared_error(recon, target)?;
    Ok(g.scale(se, 1.0 / width))
}

pub struct ClusteringTerms {
    pub loss: Tensor,
    pub reconstruction: Tensor,
    pub kl: Tensor,
    pub q: Matrix,
    pub p: Matrix,
}

/// Reconstruction of the meta inputs through decoder and encoder, plus the
/// signed KL between the sharpened target `P` (held constant) and the soft
/// assignments `Q` of the embeddings to the centroids.
pub fn clustering_loss(
    g: &mut Graph,
    bundle: &ModelBundle,
    b: &Bound,
    meta_inputs: &Matrix,
    dof: f64,
    sign: KlSign,
) -> Result<ClusteringTerms> {
    clustering_loss_with_target(g, bundle, b, meta_inputs, dof, sign, None)
}

/// [`clustering_loss`] with an explicit target distribution in place of the
/// one sharpened from the current soft assignments.
pub fn clustering_loss_with_target(
    g: &mut Graph,
    bundle: &ModelBundle,
    b: &Bound,
    meta_inputs: &Matrix,
    dof: f64,
    sign: KlSign,
    target: Option<&Matrix>,
) -> Result<ClusteringTerms> {
    if meta_inputs.rows() < 2 {
        return Err(Error::contract("clustering loss needs a batch of at least 2 rows"));
    }
    let x = g.constant(meta_inputs)?;
    let z = bundle.encoder.forward(g, b, x, None)?;
    let recon = bundle.decoder.forward(g, b, z, None)?;
    let reconstruction = reconstruction_loss(g, recon, x)?;
    let mu = b.get(bundle.centroids)?;
    let qt = g.soft_assign(z, mu, dof)?;
    let q = g.to_matrix(qt);
    let p = match target {
        Some(p) => p.clone(),
        None => target_distribution(&q)?,
    };
    let kl = kl_rows(g, &p, qt)?;
    let signed = g.scale(kl, sign.factor());
    let loss = g.add(reconstruction, signed)?;
    Ok(ClusteringTerms { loss, reconstruction, kl, q, p })
}

/// Scalar values of the terms of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub v_st: f64,
    /// `V_mt` in joint mode, the confusion term in the alternating generator
    /// phase, 0 without a partition.
    pub v_mt: f64,
    pub l_ent: f64,
    pub l_vir: f64,
    pub gamma: f64,
    pub value: f64,
}

impl Terms {
    /// Name of the first non-finite term.
    pub fn non_finite(&self) -> Option<&'static str> {
        [("v_st", self.v_st), ("v_mt", self.v_mt), ("l_ent", self.l_ent), ("l_vir", self.l_vir)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// A built graph ready for one descent step on `loss`.
pub struct Objective {
    pub graph: Graph,
    pub bound: Bound,
    pub loss: Tensor,
    pub terms: Terms,
}

impl Objective {
    /// Runs backward and returns the gradient of every trainable parameter.
    pub fn gradients(&mut self) -> Result<Vec<(ParamId, Matrix)>> {
        self.graph.backward(self.loss)?;
        Ok(self.bound.grads(&self.graph))
    }
}

fn check_mode(bundle: &ModelBundle, want: Mode) -> Result<()> {
    if bundle.arch.mode != want {
        return Err(Error::contract(format!("objective needs a {want} bundle, got {}", bundle.arch.mode)));
    }
    Ok(())
}

/// Descent surrogate for `V_st + gamma V_mt + beta L_ent + L_vir`: the
/// discriminator terms pass through gradient reversal, so one descent step
/// lowers the value for F and C and raises it for both discriminators.
pub fn joint_objective(
    bundle: &ModelBundle,
    batches: &Batches,
    hp: &HyperParams,
    gamma: f64,
    vat_rng: &mut Rng,
    mut dropout: Option<&mut Rng>,
) -> Result<Objective> {
    check_mode(bundle, Mode::Joint)?;
    let mut g = Graph::new();
    let trainable = [Group::GENERATOR.as_slice(), Group::DISCRIMINATOR.as_slice()].concat();
    let b = bundle.bind(&mut g, &[], &trainable)?;
    let xs = g.constant(&batches.source.x)?;
    let xt = g.constant(&batches.target.x)?;
    let (fs, ps) = class_probs(&mut g, bundle, &b, xs, dropout.as_deref_mut())?;
    let (ft, pt) = class_probs(&mut g, bundle, &b, xt, dropout.as_deref_mut())?;
    let ce = cross_entropy(&mut g, ps, &batches.source.labels)?;

    let rs = g.grad_reverse(fs, 1.0)?;
    let rt = g.grad_reverse(ft, 1.0)?;
    let ds = bundle.disc_source(&mut g, &b, rs)?;
    let trunk_t = bundle.trunk_out(&mut g, &b, rt)?;
    let dt = bundle.source_head.forward(&mut g, &b, trunk_t, None)?;
    let adv = adversarial(&mut g, Mode::Joint, ds, dt)?;

    let vmt = match &batches.target.groups {
        Some(groups) => {
            let dm = bundle.multi_head.forward(&mut g, &b, trunk_t, None)?;
            Some(subtarget_log_likelihood(&mut g, dm, groups)?)
        }
        None => None,
    };
    let ent = {
        let ne = neg_entropy(&mut g, pt)?;
        g.scale(ne, -1.0)
    };
    let vir = l_vir(&mut g, bundle, &b, &batches.source.x, &batches.target.x, hp.epsilon, hp.rho, vat_rng)?;

    let mut loss = ce;
    let t = g.scale(ent, hp.beta);
    loss = g.add(loss, t)?;
    loss = g.add(loss, vir)?;
    let t = g.scale(adv, -hp.lambda);
    loss = g.add(loss, t)?;
    if let Some(v) = vmt {
        let t = g.scale(v, -gamma);
        loss = g.add(loss, t)?;
    }

    let v_st = hp.lambda * g.scalar(adv)? + g.scalar(ce)?;
    let v_mt = vmt.map(|v| g.scalar(v)).transpose()?.unwrap_or(0.0);
    let l_ent = g.scalar(ent)?;
    let l_vir = g.scalar(vir)?;
    let value = v_st + gamma * v_mt + hp.beta * l_ent + l_vir;
    let terms = Terms { v_st, v_mt, l_ent, l_vir, gamma, value };
    Ok(Objective { graph: g, bound: b, loss, terms })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
}

/// One phase of the alternating game. The discriminator phase's loss is the
/// negated `V_st + V_mt` with only discriminator parameters trainable; the
/// generator phase's loss is `V_st + gamma Ṽ_mt + beta L_ent + L_vir` with
/// only F and C trainable.
pub fn alternating_objective(
    bundle: &ModelBundle,
    batches: &Batches,
    hp: &HyperParams,
    gamma: f64,
    phase: Phase,
    vat_rng: &mut Rng,
    mut dropout: Option<&mut Rng>,
) -> Result<Objective> {
    check_mode(bundle, Mode::Alternating)?;
    let mut g = Graph::new();
    let b = match phase {
        Phase::Discriminator => bundle.bind(&mut g, &Group::GENERATOR, &Group::DISCRIMINATOR)?,
        Phase::Generator => bundle.bind(&mut g, &Group::DISCRIMINATOR, &Group::GENERATOR)?,
    };
    let xs = g.constant(&batches.source.x)?;
    let xt = g.constant(&batches.target.x)?;
    let (fs, ps) = class_probs(&mut g, bundle, &b, xs, dropout.as_deref_mut())?;
    let (ft, pt) = class_probs(&mut g, bundle, &b, xt, dropout.as_deref_mut())?;
    let ce = cross_entropy(&mut g, ps, &batches.source.labels)?;
    let ds = bundle.disc_source(&mut g, &b, fs)?;
    let trunk_t = bundle.trunk_out(&mut g, &b, ft)?;
    let dt = bundle.source_head.forward(&mut g, &b, trunk_t, None)?;
    let adv = adversarial(&mut g, Mode::Alternating, ds, dt)?;
    let adv_w = g.scale(adv, hp.lambda);
    let vst = g.add(adv_w, ce)?;
    let v_st = g.scalar(vst)?;

    match phase {
        Phase::Discriminator => {
            let mut ascent = adv_w;
            let mut v_mt = 0.0;
            if let Some(groups) = &batches.target.groups {
                let dm = bundle.multi_head.forward(&mut g, &b, trunk_t, None)?;
                let vmt = subtarget_log_likelihood(&mut g, dm, groups)?;
                v_mt = g.scalar(vmt)?;
                ascent = g.add(ascent, vmt)?;
            }
            let loss = g.scale(ascent, -1.0);
            let terms = Terms { v_st, v_mt, l_ent: 0.0, l_vir: 0.0, gamma, value: v_st + v_mt };
            Ok(Objective { graph: g, bound: b, loss, terms })
        }
        Phase::Generator => {
            let mut loss = vst;
            let mut v_mt = 0.0;
            if batches.target.groups.is_some() {
                let dm = bundle.multi_head.forward(&mut g, &b, trunk_t, None)?;
                let conf = neg_entropy(&mut g, dm)?;
                v_mt = g.scalar(conf)?;
                let t = g.scale(conf, gamma);
                loss = g.add(loss, t)?;
            }
            let ne = neg_entropy(&mut g, pt)?;
            let ent = g.scale(ne, -1.0);
            let t = g.scale(ent, hp.beta);
            loss = g.add(loss, t)?;
            let vir = l_vir(&mut g, bundle, &b, &batches.source.x, &batches.target.x, hp.epsilon, hp.rho, vat_rng)?;
            loss = g.add(loss, vir)?;
            let l_ent = g.scalar(ent)?;
            let l_vir = g.scalar(vir)?;
            let value = g.scalar(loss)?;
            let terms = Terms { v_st, v_mt, l_ent, l_vir, gamma, value };
            Ok(Objective { graph: g, bound: b, loss, terms })
        }
    }
}

/// Cross-entropy on the source batch alone, F and C trainable.
pub fn source_only_objective(bundle: &ModelBundle, source: &SourceBatch, dropout: Option<&mut Rng>) -> Result<Objective> {
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, &[], &Group::GENERATOR)?;
    let xs = g.constant(&source.x)?;
    let (_, ps) = class_probs(&mut g, bundle, &b, xs, dropout)?;
    let loss = cross_entropy(&mut g, ps, &source.labels)?;
    let v = g.scalar(loss)?;
    let terms = Terms { v_st: v, value: v, ..Terms::default() };
    Ok(Objective { graph: g, bound: b, loss, terms })
}
