use std::sync::Arc;

use confgen_core::autodiff::{grad_check, Array, Tape, Var};
use confgen_core::equivariant::cg_table;
use confgen_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Contracts an output with fixed random weights so every output entry matters.
fn project(t: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let w = t.constant(random(&shape, -1.0, 1.0, &mut rng));
    let p = t.mul(y, w);
    t.sum(p)
}

fn check(name: &str, inputs: Vec<Array>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let report = grad_check(|t: &mut Tape, v: &[Var]| -> Result<Var> {
        let y = f(t, v);
        Ok(project(t, y, 99))
    }, &inputs, EPS)
    .unwrap();
    assert!(report.max_rel_error < TOL, "{name}: relative error {:e} at {:?}", report.max_rel_error, report.worst);
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], -2.0, 2.0, &mut rng);
    let b = random(&[3, 4], -2.0, 2.0, &mut rng);
    let pos = random(&[3, 4], 0.5, 3.0, &mut rng);
    check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check("div", vec![a.clone(), pos.clone()], |t, v| t.div(v[0], v[1]));
    check("neg", vec![a.clone()], |t, v| t.neg(v[0]));
    check("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7));
    check("add_scalar", vec![a.clone()], |t, v| t.add_scalar(v[0], 0.3));
    check("exp", vec![a.clone()], |t, v| t.exp(v[0]));
    check("ln", vec![pos.clone()], |t, v| t.ln(v[0]));
    check("sqrt", vec![pos.clone()], |t, v| t.sqrt(v[0]));
    check("powf", vec![pos.clone()], |t, v| t.powf(v[0], 1.5));
    check("square", vec![a.clone()], |t, v| t.square(v[0]));
    check("silu", vec![a.clone()], |t, v| t.silu(v[0]));
    check("gelu", vec![a], |t, v| t.gelu(v[0]));
}

#[test]
fn broadcasting_binary_ops_reduce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], -2.0, 2.0, &mut rng);
    let row = random(&[1, 4], 0.5, 2.0, &mut rng);
    check("add row", vec![a.clone(), row.clone()], |t, v| t.add(v[0], v[1]));
    check("mul row", vec![a.clone(), row.clone()], |t, v| t.mul(v[0], v[1]));
    check("div row", vec![a.clone(), row.clone()], |t, v| t.div(v[0], v[1]));
    check("broadcast_to", vec![row], |t, v| t.broadcast_to(v[0], &[3, 4]));
}

#[test]
fn reductions_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4, 2], -2.0, 2.0, &mut rng);
    let b = random(&[2, 4, 2], -2.0, 2.0, &mut rng);
    check("sum", vec![a.clone()], |t, v| t.sum(v[0]));
    check("mean", vec![a.clone()], |t, v| t.mean(v[0]));
    for axis in 0..3 {
        check("sum_axis", vec![a.clone()], |t, v| t.sum_axis(v[0], axis));
        check("mean_axis", vec![a.clone()], |t, v| t.mean_axis(v[0], axis));
    }
    check("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[12, 2]));
    check("concat", vec![a.clone(), b], |t, v| t.concat(&[v[0], v[1]], 0));
    check("slice", vec![a.clone()], |t, v| t.slice(v[0], 1, 1, 3));
    check("gather_rows", vec![a.clone()], |t, v| t.gather_rows(v[0], &[2, 0, 2, 1]));
    check("scatter_add_rows", vec![a], |t, v| t.scatter_add_rows(v[0], &[1, 1, 0], 2));
}

#[test]
fn linear_algebra_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[5, 3], -1.0, 1.0, &mut rng);
    let w = random(&[3, 4], -1.0, 1.0, &mut rng);
    check("matmul", vec![a.clone(), w], |t, v| t.matmul(v[0], v[1]));
    let x = random(&[4, 6], -2.0, 2.0, &mut rng);
    check("layer_norm", vec![x.clone()], |t, v| t.layer_norm(v[0], 1e-6));
    check("softmax", vec![x.clone()], |t, v| t.softmax(v[0], 1));
    check("softmax axis 0", vec![x], |t, v| t.softmax(v[0], 0));
}

#[test]
fn clebsch_gordan_coupling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = Arc::new(cg_table(1).unwrap());
    let a = random(&[2, 4, 3], -1.0, 1.0, &mut rng);
    let b = random(&[2, 4, 3], -1.0, 1.0, &mut rng);
    check("coupling", vec![a, b], |t, v| t.coupling(v[0], v[1], Arc::clone(&table)));
}

#[test]
fn composite_expression_through_reused_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 3], -1.0, 1.0, &mut rng);
    check("reuse", vec![x], |t, v| {
        let s = t.silu(v[0]);
        let p = t.mul(s, v[0]);
        let e = t.exp(p);
        let q = t.add(e, s);
        t.softmax(q, 1)
    });
}

#[test]
fn backward_rejects_non_scalar_losses() {
    let mut t = Tape::new();
    let x = t.leaf(Array::new(vec![2], vec![1.0, 2.0]));
    assert!(t.backward(x).is_err());
}
