//! Synthetic blended-target datasets.
//!
//! The source set is `m` Gaussian class clusters. Each hidden sub-target
//! pushes those clusters through its own transform: a label-conditional pull
//! of class `c` towards the centre of class `(c + j + 1) mod m`, a per-axis
//! scale, a rotation in the first two coordinates, a translation and extra
//! noise. The target set mixes the sub-targets by the mixture weights.
//!
//! Target class labels and sub-target ids are private. Training code reads a
//! dataset through [`TrainView`], which has no accessor for them; evaluation
//! reads them through [`OracleView`].

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Matrix;

pub const MAX_CENTER_ATTEMPTS: usize = 100;
/// Minimum pairwise centre distance in units of the cluster std.
pub const MIN_SEPARATION: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubTargetSpec {
    #[serde(default)]
    pub rotation_deg: f64,
    /// Length `d`; zeros when omitted.
    #[serde(default)]
    pub translation: Vec<f64>,
    /// Length `d`; ones when omitted.
    #[serde(default)]
    pub scale: Vec<f64>,
    /// Fraction of the way class `c` moves towards class `(c + j + 1) mod m`.
    #[serde(default)]
    pub label_offset: f64,
    #[serde(default)]
    pub noise_std: f64,
}

impl SubTargetSpec {
    pub fn identity() -> Self {
        Self { rotation_deg: 0.0, translation: vec![], scale: vec![], label_offset: 0.0, noise_std: 0.0 }
    }
}

/// Generation spec, read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub dim: usize,
    pub classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub mixture: Vec<f64>,
    pub cluster_std: f64,
    /// Class centres are drawn uniformly from `[-center_box, center_box]^d`.
    pub center_box: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub subtargets: Vec<SubTargetSpec>,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl Default for DataSpec {
    /// Two sub-targets in the plane; the second one shuffles classes towards
    /// their neighbours.
    fn default() -> Self {
        Self {
            dim: 2,
            classes: 4,
            n_source: 800,
            n_target: 1000,
            mixture: vec![0.6, 0.4],
            cluster_std: 0.5,
            center_box: 4.0,
            train_fraction: 0.8,
            subtargets: vec![
                SubTargetSpec {
                    rotation_deg: 25.0,
                    translation: vec![1.5, 0.0],
                    scale: vec![1.0, 1.0],
                    label_offset: 0.0,
                    noise_std: 0.1,
                },
                SubTargetSpec {
                    rotation_deg: -35.0,
                    translation: vec![-1.0, 2.0],
                    scale: vec![1.2, 0.8],
                    label_offset: 0.3,
                    noise_std: 0.1,
                },
            ],
        }
    }
}

impl DataSpec {
    pub fn k(&self) -> usize {
        self.subtargets.len()
    }

    /// The default task lifted to `dim` dimensions.
    pub fn with_dim(dim: usize) -> Self {
        let mut spec = Self::default();
        spec.dim = dim;
        for s in &mut spec.subtargets {
            s.translation.resize(dim, 0.0);
            s.scale.resize(dim, 1.0);
        }
        spec
    }

    /// `k` sub-targets with rotations, translations and label pulls spread
    /// evenly; used by the k sweep.
    pub fn with_subtargets(k: usize) -> Self {
        let mut spec = Self::default();
        spec.mixture = vec![1.0 / k as f64; k];
        spec.subtargets = (0..k)
            .map(|j| {
                let angle = std::f64::consts::TAU * j as f64 / k as f64;
                SubTargetSpec {
                    rotation_deg: 40.0 * (j as f64 / (k - 1).max(1) as f64) - 20.0,
                    translation: vec![1.5 * angle.cos(), 1.5 * angle.sin()],
                    scale: vec![1.0, 1.0],
                    label_offset: if j % 2 == 1 { 0.3 } else { 0.0 },
                    noise_std: 0.1,
                }
            })
            .collect();
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m, k) = (self.dim, self.classes, self.k());
        if d < 2 || m < 2 || k < 2 {
            return Err(Error::config(format!("need dim >= 2, classes >= 2 and >= 2 sub-targets, got {d}, {m}, {k}")));
        }
        if self.mixture.len() != k {
            return Err(Error::config(format!("mixture has {} weights for {k} sub-targets", self.mixture.len())));
        }
        if self.mixture.iter().any(|w| !(0.0..=1.0).contains(w)) || (self.mixture.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mixture {:?} is not on the simplex", self.mixture)));
        }
        if !(self.cluster_std > 0.0 && self.cluster_std.is_finite()) || !(self.center_box > 0.0 && self.center_box.is_finite()) {
            return Err(Error::config("cluster_std and center_box must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if self.n_source < m || self.n_target < k {
            return Err(Error::config("n_source must be >= classes and n_target >= sub-targets"));
        }
        for (j, s) in self.subtargets.iter().enumerate() {
            for (name, v) in [("translation", &s.translation), ("scale", &s.scale)] {
                if !v.is_empty() && v.len() != d {
                    return Err(Error::config(format!("sub-target {j}: {name} has {} entries for dim {d}", v.len())));
                }
            }
            if s.scale.iter().any(|&v| v == 0.0 || !v.is_finite()) {
                return Err(Error::config(format!("sub-target {j}: scales must be finite and nonzero")));
            }
            if !(0.0..=1.0).contains(&s.label_offset) || !(s.noise_std >= 0.0) || !s.rotation_deg.is_finite() {
                return Err(Error::config(format!("sub-target {j}: label_offset must lie in [0, 1] and noise_std >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlendedDataset {
    dim: usize,
    classes: usize,
    k: usize,
    /// Empirical sub-target proportions of the target set.
    mixture: Vec<f64>,
    source_x: Matrix,
    source_y: Vec<usize>,
    target_x: Matrix,
    target_split: Vec<Split>,
    target_class: Vec<usize>,
    target_subtarget: Vec<usize>,
}

/// Largest-remainder allocation of `n` items by `weights`.
pub fn allocate(n: usize, weights: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let short = n - counts.iter().sum::<usize>();
    for &j in order.iter().take(short) {
        counts[j] += 1;
    }
    counts
}

fn sample_centers(spec: &DataSpec, rng: &mut rng::Rng) -> Result<Vec<Vec<f64>>> {
    let min_d = MIN_SEPARATION * spec.cluster_std;
    for _ in 0..MAX_CENTER_ATTEMPTS {
        let centers: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| (0..spec.dim).map(|_| rng.random_range(-spec.center_box..=spec.center_box)).collect())
            .collect();
        let ok = (0..spec.classes).all(|a| {
            (a + 1..spec.classes).all(|b| {
                centers[a].iter().zip(&centers[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() >= min_d
            })
        });
        if ok {
            return Ok(centers);
        }
    }
    Err(Error::Generation(format!(
        "no {} centres {min_d} apart inside the box after {MAX_CENTER_ATTEMPTS} attempts",
        spec.classes
    )))
}

fn transform(spec: &DataSpec, sub: &SubTargetSpec, z: &mut [f64]) {
    for (i, v) in z.iter_mut().enumerate() {
        *v *= sub.scale.get(i).copied().unwrap_or(1.0);
    }
    let (s, c) = sub.rotation_deg.to_radians().sin_cos();
    let (a, b) = (z[0], z[1]);
    z[0] = c * a - s * b;
    z[1] = s * a + c * b;
    for (i, v) in z.iter_mut().enumerate().take(spec.dim) {
        *v += sub.translation.get(i).copied().unwrap_or(0.0);
    }
}

/// Draws a dataset from `spec`; identical for identical `(spec, seed)`.
pub fn generate_blended(spec: &DataSpec, seed: u64) -> Result<BlendedDataset> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "data");
    let (d, m) = (spec.dim, spec.classes);
    let centers = sample_centers(spec, &mut rng)?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut source = Vec::with_capacity(spec.n_source * d);
    let mut source_y = Vec::with_capacity(spec.n_source);
    for i in 0..spec.n_source {
        let c = i % m;
        source.extend(centers[c].iter().map(|mu| mu + spec.cluster_std * unit.sample(&mut rng)));
        source_y.push(c);
    }

    let sizes = allocate(spec.n_target, &spec.mixture);
    let mut target = Vec::with_capacity(spec.n_target * d);
    let (mut target_class, mut target_subtarget, mut target_split) = (vec![], vec![], vec![]);
    for (j, (sub, &n_j)) in spec.subtargets.iter().zip(&sizes).enumerate() {
        let class_sizes = allocate(n_j, &vec![1.0 / m as f64; m]);
        for (c, &n_jc) in class_sizes.iter().enumerate() {
            let pull = &centers[(c + j + 1) % m];
            let center: Vec<f64> = centers[c]
                .iter()
                .zip(pull)
                .map(|(a, b)| (1.0 - sub.label_offset) * a + sub.label_offset * b)
                .collect();
            let n_train = ((n_jc as f64) * spec.train_fraction).round() as usize;
            for r in 0..n_jc {
                let mut z: Vec<f64> = center.iter().map(|mu| mu + spec.cluster_std * unit.sample(&mut rng)).collect();
                transform(spec, sub, &mut z);
                for v in &mut z {
                    *v += sub.noise_std * unit.sample(&mut rng);
                }
                target.extend(z);
                target_class.push(c);
                target_subtarget.push(j);
                target_split.push(if r < n_train { Split::Train } else { Split::Test });
            }
        }
    }
    let n_t = target_class.len();
    Ok(BlendedDataset {
        dim: d,
        classes: m,
        k: spec.k(),
        mixture: sizes.iter().map(|&s| s as f64 / n_t as f64).collect(),
        source_x: Matrix::new(spec.n_source, d, source)?,
        source_y,
        target_x: Matrix::new(n_t, d, target)?,
        target_split,
        target_class,
        target_subtarget,
    })
}

/// What training code may see: labelled source rows and unlabelled target
/// training rows.
#[derive(Clone, Copy, Debug)]
pub struct TrainView<'a> {
    ds: &'a BlendedDataset,
    /// Only target training rows of this sub-target, when set.
    only: Option<usize>,
}

impl TrainView<'_> {
    pub fn dim(&self) -> usize {
        self.ds.dim
    }

    pub fn classes(&self) -> usize {
        self.ds.classes
    }

    pub fn source_x(&self) -> &Matrix {
        &self.ds.source_x
    }

    pub fn source_labels(&self) -> &[usize] {
        &self.ds.source_y
    }

    /// Dataset row indices of the visible target training rows.
    pub fn target_rows(&self) -> Vec<usize> {
        (0..self.ds.target_x.rows())
            .filter(|&i| self.ds.target_split[i] == Split::Train)
            .filter(|&i| self.only.is_none_or(|j| self.ds.target_subtarget[i] == j))
            .collect()
    }

    /// Visible target training inputs, in [`Self::target_rows`] order.
    pub fn target_x(&self) -> Matrix {
        self.ds.target_x.select_rows(&self.target_rows())
    }

    /// The same view restricted to the target rows of sub-target `j`.
    pub fn subtarget(self, j: usize) -> Result<Self> {
        self.ds.subtarget_view(j)
    }
}

/// Hidden ground truth, for evaluation and for the variants that are given
/// oracle sub-target ids.
#[derive(Clone, Copy, Debug)]
pub struct OracleView<'a> {
    ds: &'a BlendedDataset,
}

impl OracleView<'_> {
    pub fn k(&self) -> usize {
        self.ds.k
    }

    pub fn mixture(&self) -> &[f64] {
        &self.ds.mixture
    }

    pub fn target_x(&self) -> &Matrix {
        &self.ds.target_x
    }

    pub fn target_classes(&self) -> &[usize] {
        &self.ds.target_class
    }

    pub fn target_subtargets(&self) -> &[usize] {
        &self.ds.target_subtarget
    }

    pub fn target_splits(&self) -> &[Split] {
        &self.ds.target_split
    }

    /// Target row indices in `split`.
    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.ds.target_split.len()).filter(|&i| self.ds.target_split[i] == split).collect()
    }

    /// Sub-target ids of the visible training rows, aligned with
    /// [`TrainView::target_x`].
    pub fn train_subtargets(&self) -> Vec<usize> {
        self.rows_in(Split::Train).iter().map(|&i| self.ds.target_subtarget[i]).collect()
    }
}

const COLUMN_ROLE: &str = "role";
const COLUMN_SPLIT: &str = "split";
const COLUMN_CLASS: &str = "class";
const COLUMN_SUBTARGET: &str = "subtarget";

impl BlendedDataset {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_source(&self) -> usize {
        self.source_y.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_class.len()
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView { ds: self, only: None }
    }

    /// Training view whose target rows are those of sub-target `j` only.
    pub fn subtarget_view(&self, j: usize) -> Result<TrainView<'_>> {
        if j >= self.k {
            return Err(Error::config(format!("sub-target {j} outside [0, {})", self.k)));
        }
        Ok(TrainView { ds: self, only: Some(j) })
    }

    pub fn oracle(&self) -> OracleView<'_> {
        OracleView { ds: self }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("role,split");
        for i in 1..=self.dim {
            let _ = write!(out, ",x_{i}");
        }
        out.push_str(",class,subtarget\n");
        let row = |out: &mut String, x: &[f64]| {
            for v in x {
                let _ = write!(out, ",{v:.16e}");
            }
        };
        for i in 0..self.n_source() {
            out.push_str("source,train");
            row(&mut out, self.source_x.row(i));
            let _ = writeln!(out, ",{},", self.source_y[i]);
        }
        for i in 0..self.n_target() {
            let _ = write!(out, "target,{}", self.target_split[i].as_str());
            row(&mut out, self.target_x.row(i));
            let _ = writeln!(out, ",{},{}", self.target_class[i], self.target_subtarget[i]);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| Error::Schema("empty file".into()))?.split(',').collect();
        let dim = header.iter().filter(|h| h.starts_with("x_")).count();
        let mut expected = vec![COLUMN_ROLE.to_string(), COLUMN_SPLIT.to_string()];
        expected.extend((1..=dim.max(1)).map(|i| format!("x_{i}")));
        expected.push(COLUMN_CLASS.into());
        expected.push(COLUMN_SUBTARGET.into());
        for col in &expected {
            if !header.contains(&col.as_str()) {
                return Err(Error::Schema(format!("missing column {col}")));
            }
        }
        if header != expected {
            return Err(Error::Schema(format!("header must be {}", expected.join(","))));
        }
        if dim < 2 {
            return Err(Error::Schema("need at least columns x_1 and x_2".into()));
        }

        let (mut sx, mut sy, mut tx) = (vec![], vec![], vec![]);
        let (mut tsplit, mut tclass, mut tsub) = (vec![], vec![], vec![]);
        for (n, line) in lines.enumerate() {
            let line_no = n + 2;
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: line_no, message };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected.len() {
                return Err(err(format!("{} fields, expected {}", fields.len(), expected.len())));
            }
            let mut x = Vec::with_capacity(dim);
            for (i, f) in fields[2..2 + dim].iter().enumerate() {
                let v: f64 = f.parse().map_err(|_| err(format!("x_{} = {f:?} is not a number", i + 1)))?;
                if !v.is_finite() {
                    return Err(err(format!("x_{} is not finite", i + 1)));
                }
                x.push(v);
            }
            let class: usize = fields[2 + dim].parse().map_err(|_| err(format!("class {:?} is not an index", fields[2 + dim])))?;
            let sub = fields[3 + dim];
            match fields[0] {
                "source" => {
                    if fields[1] != "train" || !sub.is_empty() {
                        return Err(err("source rows need split train and an empty subtarget".into()));
                    }
                    sx.extend(x);
                    sy.push(class);
                }
                "target" => {
                    let split = match fields[1] {
                        "train" => Split::Train,
                        "test" => Split::Test,
                        other => return Err(err(format!("unknown split {other:?}"))),
                    };
                    let j: usize = sub.parse().map_err(|_| err(format!("subtarget {sub:?} is not an index")))?;
                    tx.extend(x);
                    tsplit.push(split);
                    tclass.push(class);
                    tsub.push(j);
                }
                other => return Err(err(format!("unknown role {other:?}"))),
            }
        }
        if sy.is_empty() || tclass.is_empty() {
            return Err(Error::Schema("need at least one source and one target row".into()));
        }
        let classes = sy.iter().chain(&tclass).max().map_or(0, |c| c + 1);
        let k = tsub.iter().max().map_or(0, |j| j + 1);
        let mut counts = vec![0usize; k];
        for &j in &tsub {
            counts[j] += 1;
        }
        let n_t = tsub.len();
        Ok(Self {
            dim,
            classes,
            k,
            mixture: counts.iter().map(|&c| c as f64 / n_t as f64).collect(),
            source_x: Matrix::new(sy.len(), dim, sx)?,
            source_y: sy,
            target_x: Matrix::new(n_t, dim, tx)?,
            target_split: tsplit,
            target_class: tclass,
            target_subtarget: tsub,
        })
    }
}

/// ```compile_fail
/// let ds = amean::data::generate_blended(&amean::data::DataSpec::default(), 0).unwrap();
/// let view = ds.train_view();
/// let _ = view.target_classes();
/// ```
///
/// ```compile_fail
/// let ds = amean::data::generate_blended(&amean::data::DataSpec::default(), 0).unwrap();
/// let view = ds.train_view();
/// let _ = view.ds.target_subtarget;
/// ```
#[allow(dead_code)]
fn train_view_hides_target_labels() {}
