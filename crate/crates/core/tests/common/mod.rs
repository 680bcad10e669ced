//! Shared test fixtures: finite-difference gradient checks, small
//! architectures and a plain-loop reference forward pass.

#![allow(dead_code)]

use amean::data::{generate_blended, BlendedDataset, DataSpec};
use amean::networks::{Activation, Architecture, Bound, Group, Mlp, Mode, ModelBundle};
use amean::rng::{self, Rng};
use amean::tensor::{Graph, Matrix, Tensor};
use amean::trainer::{TrainConfig, Variant};
use amean::Result;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|)`, with a tiny floor so exact zeros compare equal.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gaussian_like(shapes: &[[usize; 2]], rng: &mut Rng) -> Vec<Matrix> {
    let mut dirs: Vec<Matrix> = shapes
        .iter()
        .map(|&[r, c]| Matrix::new(r, c, (0..r * c).map(|_| StandardNormal.sample(rng)).collect()).unwrap())
        .collect();
    let norm = dirs.iter().flat_map(|m| m.data()).map(|v| v * v).sum::<f64>().sqrt();
    for m in &mut dirs {
        m.data_mut().iter_mut().for_each(|v| *v /= norm);
    }
    dirs
}

fn shifted(base: &[Matrix], dir: &[Matrix], t: f64) -> Vec<Matrix> {
    base.iter()
        .zip(dir)
        .map(|(b, d)| {
            let data = b.data().iter().zip(d.data()).map(|(x, y)| x + t * y).collect();
            Matrix::new(b.rows(), b.cols(), data).unwrap()
        })
        .collect()
}

/// Directional derivative checks of a scalar function of `inputs` along
/// `probes` random unit directions. Returns the relative error per probe.
pub fn check_inputs(
    inputs: &[Matrix],
    probes: usize,
    seed: u64,
    f: impl Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
) -> Vec<f64> {
    let mut g = Graph::new();
    let ts: Vec<Tensor> = inputs.iter().map(|m| g.variable(m).unwrap()).collect();
    let out = f(&mut g, &ts).unwrap();
    g.backward(out).unwrap();
    let grads: Vec<Matrix> = ts.iter().map(|&t| g.grad_matrix(t)).collect();
    let eval = |xs: &[Matrix]| {
        let mut g = Graph::new();
        let ts: Vec<Tensor> = xs.iter().map(|m| g.constant(m).unwrap()).collect();
        let out = f(&mut g, &ts).unwrap();
        g.scalar(out).unwrap()
    };
    let shapes: Vec<[usize; 2]> = inputs.iter().map(Matrix::shape).collect();
    let mut r = rng::stream(seed, "gradcheck");
    (0..probes)
        .map(|_| {
            let dir = gaussian_like(&shapes, &mut r);
            let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
            let numeric = (eval(&shifted(inputs, &dir, FD_STEP)) - eval(&shifted(inputs, &dir, -FD_STEP))) / (2.0 * FD_STEP);
            rel_err(analytic, numeric)
        })
        .collect()
}

/// Like [`check_inputs`] but over the parameters of `trainable` groups of
/// `bundle`. `f` builds the scalar from a graph where every group is bound.
pub fn check_params(
    bundle: &ModelBundle,
    trainable: &[Group],
    probes: usize,
    seed: u64,
    f: impl Fn(&ModelBundle, &mut Graph, &Bound) -> Result<Tensor>,
) -> Vec<f64> {
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, &Group::ALL, trainable).unwrap();
    let out = f(bundle, &mut g, &b).unwrap();
    g.backward(out).unwrap();
    let grads = b.grads(&g);
    let ids: Vec<_> = grads.iter().map(|(id, _)| *id).collect();
    let eval = |bd: &ModelBundle| {
        let mut g = Graph::new();
        let b = bd.bind(&mut g, &Group::ALL, &[]).unwrap();
        let out = f(bd, &mut g, &b).unwrap();
        g.scalar(out).unwrap()
    };
    let base: Vec<Matrix> = ids.iter().map(|&id| bundle.store.get(id).clone()).collect();
    let shapes: Vec<[usize; 2]> = base.iter().map(Matrix::shape).collect();
    let mut r = rng::stream(seed, "gradcheck");
    (0..probes)
        .map(|_| {
            let dir = gaussian_like(&shapes, &mut r);
            let analytic: f64 = grads
                .iter()
                .zip(&dir)
                .map(|((_, g), d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let side = |t: f64| {
                let mut bd = bundle.clone();
                for (id, m) in ids.iter().zip(shifted(&base, &dir, t)) {
                    *bd.store.get_mut(*id) = m;
                }
                eval(&bd)
            };
            let numeric = (side(FD_STEP) - side(-FD_STEP)) / (2.0 * FD_STEP);
            rel_err(analytic, numeric)
        })
        .collect()
}

pub fn assert_grads(name: &str, errs: &[f64]) {
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    assert!(worst < GRAD_TOL, "{name}: worst relative error {worst:e} over {} probes", errs.len());
}

/// Small widths so gradient checks and short runs stay fast.
pub fn small_arch(mode: Mode) -> Architecture {
    Architecture {
        input_dim: 2,
        classes: 3,
        subtargets: 2,
        feature_dim: 6,
        feature_hidden: vec![5],
        trunk_dim: 7,
        encoder_hidden: vec![8, 9],
        decoder_hidden: vec![9, 8],
        feature_dropout: 0.0,
        mode,
    }
}

/// A bundle whose centroids are random instead of zero.
pub fn small_bundle(mode: Mode, seed: u64) -> ModelBundle {
    let mut b = ModelBundle::build(&small_arch(mode), seed).unwrap();
    let k = b.arch.subtargets;
    *b.store.get_mut(b.centroids) = random_matrix(k, k, 1.0, &mut rng::stream(seed, "centroids"));
    b
}

/// Plain-loop forward pass of an MLP, independent of the graph.
pub fn reference_forward(mlp: &Mlp, bundle: &ModelBundle, x: &Matrix) -> Matrix {
    let mut h: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
    for layer in &mlp.layers {
        let w = bundle.store.get(layer.weight);
        let b = bundle.store.get(layer.bias);
        h = h
            .iter()
            .map(|row| {
                let mut z: Vec<f64> = (0..w.cols()).map(|j| b.get(0, j) + (0..w.rows()).map(|i| row[i] * w.get(i, j)).sum::<f64>()).collect();
                match layer.spec.activation {
                    Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
                    Activation::LeakyRelu(s) => z.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { s * *v }),
                    Activation::Sigmoid => z.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
                    Activation::Softmax => {
                        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                        let s: f64 = e.iter().sum();
                        z = e.iter().map(|v| v / s).collect();
                    }
                    Activation::Linear => {}
                }
                z
            })
            .collect();
    }
    Matrix::from_rows(&h).unwrap()
}

/// `F` then `C` by plain loops.
pub fn reference_predict(bundle: &ModelBundle, x: &Matrix) -> Matrix {
    reference_forward(&bundle.classifier, bundle, &reference_forward(&bundle.feature, bundle, x))
}

/// Source/target head output by plain loops.
pub fn reference_disc_source(bundle: &ModelBundle, x: &Matrix) -> Matrix {
    let f = reference_forward(&bundle.feature, bundle, x);
    reference_forward(&bundle.source_head, bundle, &reference_forward(&bundle.trunk, bundle, &f))
}

pub fn reference_disc_multi(bundle: &ModelBundle, x: &Matrix) -> Matrix {
    let f = reference_forward(&bundle.feature, bundle, x);
    reference_forward(&bundle.multi_head, bundle, &reference_forward(&bundle.trunk, bundle, &f))
}


/// Three isotropic unit-variance blobs whose centers are 6 apart, 150 points
/// each, with their true labels.
pub fn three_blobs(seed: u64) -> (Matrix, Vec<usize>) {
    let centers = [[0.0, 0.0], [6.0, 0.0], [3.0, 27f64.sqrt()]];
    let mut r = rng::stream(seed, "blobs");
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..150 {
            let nx: f64 = StandardNormal.sample(&mut r);
            let ny: f64 = StandardNormal.sample(&mut r);
            rows.push(vec![center[0] + nx, center[1] + ny]);
            labels.push(c);
        }
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}

/// A bundle whose F is the identity shifted into the linear range of its
/// activation, so the meta-learner sees the blob geometry.
pub fn blob_bundle(seed: u64) -> ModelBundle {
    let arch = Architecture {
        input_dim: 2,
        classes: 3,
        subtargets: 3,
        feature_dim: 2,
        feature_hidden: vec![],
        trunk_dim: 4,
        encoder_hidden: vec![64, 64],
        decoder_hidden: vec![64, 64],
        feature_dropout: 0.0,
        mode: Mode::Joint,
    };
    let mut b = ModelBundle::build(&arch, seed).unwrap();
    let layer = &b.feature.layers[0];
    let (w, bias) = (layer.weight, layer.bias);
    *b.store.get_mut(w) = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    *b.store.get_mut(bias) = Matrix::new(1, 2, vec![20.0, 20.0]).unwrap();
    b
}

/// A short training configuration on the small architecture.
pub fn quick_config(variant: Variant, mode: Mode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { seed, variant, outer_loops: 2, ..TrainConfig::default() };
    cfg.hyper.iterations = 15;
    cfg.hyper.batch_size = 32;
    cfg.arch = Architecture { subtargets: 2, encoder_hidden: vec![16], decoder_hidden: vec![16], ..small_arch(mode) };
    cfg.dec.pretrain_iters = 10;
    cfg.dec.max_epochs = 3;
    cfg
}

/// The default task with fewer rows.
pub fn quick_dataset(seed: u64) -> BlendedDataset {
    let spec = DataSpec { n_source: 200, n_target: 200, ..DataSpec::default() };
    generate_blended(&spec, seed).unwrap()
}

pub mod gradcases;
