//! Named gradient checks shared by the gradient tests and the acceptance
//! suite. Each case returns the relative error of every probe.

use amean::losses::{
    clustering_loss_with_target, l_ent, v_mt, v_mt_confusion, v_st, vat_kl, vat_perturbation, Batches, KlSign,
    SourceBatch, TargetBatch,
};
use amean::meta::{soft_assign, target_distribution};
use amean::networks::{Group, Mode, ModelBundle};
use amean::rng::{self, Rng};
use amean::tensor::{Graph, Matrix, Tensor};
use amean::Result;
use rand::Rng as _;

use super::{check_inputs, check_params, random_matrix, small_bundle};

pub type Case = (&'static str, Box<dyn Fn(usize) -> Vec<f64>>);

/// Reduces `out` to a scalar with fixed random weights so every entry of the
/// output gradient is distinct.
fn weighted_sum(g: &mut Graph, out: Tensor, seed: u64) -> Result<Tensor> {
    let [r, c] = g.shape(out);
    let w = g.constant(&random_matrix(r, c, 1.0, &mut rng::stream(seed, "weights")))?;
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

/// Entries uniform in `[lo, hi]` with random sign, keeping clear of kinks at 0.
fn away_from_zero(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn unary(name: &'static str, x: Matrix, op: fn(&mut Graph, Tensor) -> Result<Tensor>) -> Case {
    (name, Box::new(move |probes| check_inputs(&[x.clone()], probes, 1, |g, t| {
        let y = op(g, t[0])?;
        weighted_sum(g, y, 2)
    })))
}

fn binary(name: &'static str, a: Matrix, b: Matrix, op: fn(&mut Graph, Tensor, Tensor) -> Result<Tensor>) -> Case {
    (name, Box::new(move |probes| check_inputs(&[a.clone(), b.clone()], probes, 3, |g, t| {
        let y = op(g, t[0], t[1])?;
        weighted_sum(g, y, 4)
    })))
}

pub fn primitive_cases() -> Vec<Case> {
    let mut r = rng::stream(11, "inputs");
    let a34 = random_matrix(3, 4, 1.0, &mut r);
    let b34 = random_matrix(3, 4, 1.0, &mut r);
    let row4 = random_matrix(1, 4, 1.0, &mut r);
    let b42 = random_matrix(4, 2, 1.0, &mut r);
    let kinked = away_from_zero(3, 4, 0.1, 1.0, &mut r);
    let positive = Matrix::new(3, 4, (0..12).map(|_| r.random_range(0.5..2.0)).collect()).unwrap();
    let inside = Matrix::new(3, 4, (0..12).map(|_| r.random_range(0.2..0.8)).collect()).unwrap();
    let z = random_matrix(5, 3, 2.0, &mut r);
    let mu = random_matrix(4, 3, 2.0, &mut r);
    vec![
        binary("matmul", a34.clone(), b42, |g, a, b| g.matmul(a, b)),
        binary("add", a34.clone(), b34.clone(), |g, a, b| g.add(a, b)),
        binary("add (row broadcast)", a34.clone(), row4.clone(), |g, a, b| g.add(a, b)),
        binary("sub", a34.clone(), b34.clone(), |g, a, b| g.sub(a, b)),
        binary("sub (row broadcast)", a34.clone(), row4.clone(), |g, a, b| g.sub(a, b)),
        binary("mul", a34.clone(), b34.clone(), |g, a, b| g.mul(a, b)),
        binary("mul (row broadcast)", a34.clone(), row4, |g, a, b| g.mul(a, b)),
        binary("concat", a34.clone(), b34.clone(), |g, a, b| g.concat(&[a, b])),
        binary("squared_error", a34.clone(), b34, |g, a, b| g.squared_error(a, b)),
        binary("soft_assign", z, mu, |g, z, mu| g.soft_assign(z, mu, 1.0)),
        unary("scale", a34.clone(), |g, x| Ok(g.scale(x, -2.5))),
        unary("shift", a34.clone(), |g, x| Ok(g.shift(x, 0.7))),
        unary("relu", kinked.clone(), |g, x| Ok(g.relu(x))),
        unary("leaky_relu", kinked, |g, x| Ok(g.leaky_relu(x, 0.1))),
        unary("sigmoid", a34.clone(), |g, x| Ok(g.sigmoid(x))),
        unary("softmax", a34.clone(), |g, x| Ok(g.softmax(x))),
        unary("log", positive, |g, x| g.log(x)),
        unary("clamp", inside, |g, x| Ok(g.clamp(x, 0.1, 0.9))),
        unary("sum", a34.clone(), |g, x| Ok(g.sum(x))),
        unary("mean", a34.clone(), |g, x| Ok(g.mean(x))),
        unary("column", a34, |g, x| g.column(x, 2)),
    ]
}

pub fn fixture_batches(seed: u64, k: usize, classes: usize) -> Batches {
    let mut r = rng::stream(seed, "batches");
    let n = 6;
    Batches {
        source: SourceBatch { x: random_matrix(n, 2, 2.0, &mut r), labels: (0..n).map(|i| i % classes).collect() },
        target: TargetBatch { x: random_matrix(n, 2, 2.0, &mut r), groups: Some((0..n).map(|i| i % k).collect()) },
    }
}

pub fn loss_cases() -> Vec<Case> {
    let joint = small_bundle(Mode::Joint, 21);
    let alt = small_bundle(Mode::Alternating, 22);
    let batches = fixture_batches(5, 2, 3);
    let all = [Group::GENERATOR.as_slice(), Group::DISCRIMINATOR.as_slice()].concat();
    let mut cases: Vec<Case> = Vec::new();

    for (name, bundle) in [("v_st (joint)", joint.clone()), ("v_st (alternating)", alt)] {
        let (b, bt, all) = (bundle, batches.clone(), all.clone());
        cases.push((name, Box::new(move |p| check_params(&b, &all, p, 31, |bd, g, bnd| v_st(g, bd, bnd, &bt, 0.7)))));
    }
    {
        let (b, bt) = (joint.clone(), batches.clone());
        let groups = [Group::Feature, Group::Trunk, Group::MultiHead];
        cases.push(("v_mt", Box::new(move |p| check_params(&b, &groups, p, 32, |bd, g, bnd| v_mt(g, bd, bnd, &bt.target)))));
    }
    {
        let (b, x) = (joint.clone(), batches.target.x.clone());
        let groups = [Group::Feature, Group::Trunk, Group::MultiHead];
        cases.push(("v_mt_confusion", Box::new(move |p| check_params(&b, &groups, p, 33, |bd, g, bnd| v_mt_confusion(g, bd, bnd, &x)))));
    }
    {
        let (b, x) = (joint.clone(), batches.target.x.clone());
        cases.push(("l_ent", Box::new(move |p| check_params(&b, &Group::GENERATOR, p, 34, |bd, g, bnd| l_ent(g, bd, bnd, &x)))));
    }
    {
        let b = joint.clone();
        let x = batches.source.x.clone();
        let r = vat_perturbation(&b, &x, 0.5, &mut rng::stream(3, "vat")).unwrap();
        let pr = b.predict(&x).unwrap();
        cases.push(("l_vir outer value", Box::new(move |p| {
            check_params(&b, &Group::GENERATOR, p, 35, |bd, g, bnd| vat_kl(g, bd, bnd, &x, &r, &pr))
        })));
    }
    {
        let b = joint;
        let inputs = b.meta_inputs(&batches.target.x).unwrap();
        let z = b.embed(&inputs).unwrap();
        let target = target_distribution(&soft_assign(&z, b.centroid_matrix(), 1.0).unwrap()).unwrap();
        cases.push(("clustering loss", Box::new(move |p| {
            check_params(&b, &Group::META, p, 36, |bd, g, bnd| {
                Ok(clustering_loss_with_target(g, bd, bnd, &inputs, 1.0, KlSign::Dec, Some(&target))?.loss)
            })
        })));
    }
    cases
}

/// Centroid gradient of the bundle's KL term from the graph, for comparison
/// with the closed-form rule.
pub fn graph_centroid_gradient(bundle: &ModelBundle, inputs: &Matrix, target: &Matrix) -> Matrix {
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, &Group::ALL, &[Group::Centroids]).unwrap();
    let terms = clustering_loss_with_target(&mut g, bundle, &b, inputs, 1.0, KlSign::Dec, Some(target)).unwrap();
    g.backward(terms.kl).unwrap();
    b.grads(&g).into_iter().find(|(id, _)| *id == bundle.centroids).unwrap().1
}
