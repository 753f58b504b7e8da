//! Central finite differences against the reverse pass, for every
//! differentiable operation.

use hpn_autograd::{BatchNormMode, RunningStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Builds `f` on fresh tapes and compares analytic and numeric gradients of
/// every input. Non-scalar outputs are contracted with fixed random weights
/// so the whole Jacobian is exercised.
fn check<F>(name: &str, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let loss_of = |tape: &mut Tape, vars: &[Var], weights: &mut Option<Tensor>, rng: &mut ChaCha8Rng| {
        let out = f(tape, vars);
        let shape = tape.value(out).shape().to_vec();
        if shape.iter().product::<usize>() == 1 {
            return out;
        }
        let w = weights
            .get_or_insert_with(|| random(rng, shape[0], shape[1], -1.0, 1.0))
            .clone();
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod)
    };

    let mut weights = None;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = loss_of(&mut tape, &vars, &mut weights, &mut rng);
    let grads = tape.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("input reaches loss").to_vec();
        let mut numeric = vec![0.0; input.len()];
        for e in 0..input.len() {
            let eval = |delta: f64| {
                let mut perturbed = inputs.clone();
                perturbed[k].data_mut()[e] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
                let mut w = weights.clone();
                let l = loss_of(&mut t, &vs, &mut w, &mut ChaCha8Rng::seed_from_u64(0));
                t.value(l).item()
            };
            numeric[e] = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = numeric
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(analytic.iter().map(|v| v * v).sum::<f64>().sqrt())
            .max(1e-12);
        assert!(
            diff / scale < TOL,
            "{name}: input {k} relative error {} (analytic {analytic:?}, numeric {numeric:?})",
            diff / scale
        );
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

#[test]
fn matmul_grad() {
    let mut r = rng();
    check("matmul", vec![random(&mut r, 3, 4, -2.0, 2.0), random(&mut r, 4, 2, -2.0, 2.0)], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
}

#[test]
fn elementwise_binary_grads() {
    let mut r = rng();
    let a = random(&mut r, 2, 3, -2.0, 2.0);
    let b = random(&mut r, 2, 3, -2.0, 2.0);
    check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check("maximum", vec![a, b], |t, v| t.maximum(v[0], v[1]).unwrap());
}

#[test]
fn broadcast_grads() {
    let mut r = rng();
    let x = random(&mut r, 3, 4, -2.0, 2.0);
    check("add_row", vec![x.clone(), random(&mut r, 1, 4, -2.0, 2.0)], |t, v| {
        t.add_row(v[0], v[1]).unwrap()
    });
    check("mul_scalar", vec![x.clone(), random(&mut r, 1, 1, -2.0, 2.0)], |t, v| {
        t.mul_scalar(v[0], v[1]).unwrap()
    });
    check("add_scalar", vec![x.clone(), random(&mut r, 1, 1, -2.0, 2.0)], |t, v| {
        t.add_scalar(v[0], v[1]).unwrap()
    });
    check("scale+add_const", vec![x], |t, v| {
        let s = t.scale(v[0], -1.5);
        t.add_const(s, 0.25)
    });
}

#[test]
fn unary_grads() {
    let mut r = rng();
    let x = random(&mut r, 3, 3, -2.0, 2.0);
    check("tanh", vec![x.clone()], |t, v| t.tanh(v[0]));
    check("sigmoid", vec![x.clone()], |t, v| t.sigmoid(v[0]));
    check("relu", vec![x.clone()], |t, v| t.relu(v[0]));
    check("exp", vec![x], |t, v| t.exp(v[0]));
    check("log", vec![random(&mut r, 3, 3, 0.5, 2.0)], |t, v| t.log(v[0]));
}

#[test]
fn shape_op_grads() {
    let mut r = rng();
    let x = random(&mut r, 3, 5, -2.0, 2.0);
    let y = random(&mut r, 3, 2, -2.0, 2.0);
    let z = random(&mut r, 2, 5, -2.0, 2.0);
    check("transpose", vec![x.clone()], |t, v| t.transpose(v[0]).unwrap());
    check("slice_cols", vec![x.clone()], |t, v| t.slice_cols(v[0], 1, 3).unwrap());
    check("slice_rows", vec![x.clone()], |t, v| t.slice_rows(v[0], 1, 2).unwrap());
    check("concat_cols", vec![x.clone(), y], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap());
    check("concat_rows", vec![x.clone(), z], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap());
    check("sum", vec![x.clone()], |t, v| t.sum(v[0]));
    check("mean", vec![x.clone()], |t, v| t.mean(v[0]));
    check("select", vec![x], |t, v| t.select(v[0], 2, 3).unwrap());
}

#[test]
fn softmax_grads() {
    let mut r = rng();
    let x = random(&mut r, 3, 4, -2.0, 2.0);
    let mask = [
        false, true, false, false, //
        false, false, false, false, //
        true, true, false, true,
    ];
    check("softmax", vec![x.clone()], |t, v| t.softmax_rows(v[0], None).unwrap());
    check("softmax masked", vec![x.clone()], move |t, v| t.softmax_rows(v[0], Some(&mask)).unwrap());
    check("log_softmax pick", vec![x.clone()], move |t, v| {
        let l = t.log_softmax_rows(v[0], Some(&mask)).unwrap();
        let a = t.select(l, 0, 2).unwrap();
        let b = t.select(l, 1, 1).unwrap();
        let c = t.select(l, 2, 2).unwrap();
        let ab = t.add(a, b).unwrap();
        t.add(ab, c).unwrap()
    });
}

#[test]
fn batch_norm_grads() {
    let mut r = rng();
    let x = random(&mut r, 5, 3, -2.0, 2.0);
    let g = random(&mut r, 1, 3, 0.5, 2.0);
    let b = random(&mut r, 1, 3, -2.0, 2.0);
    check("batch_norm train", vec![x.clone(), g.clone(), b.clone()], |t, v| {
        let mut rs = RunningStats::new(3);
        t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, &mut rs).unwrap()
    });
    check("batch_norm eval", vec![x, g, b], |t, v| {
        let mut rs = RunningStats::new(3);
        rs.mean = vec![0.3, -0.2, 1.0];
        rs.var = vec![0.5, 2.0, 1.5];
        t.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval, &mut rs).unwrap()
    });
}

#[test]
fn composite_grad() {
    // matmul -> tanh -> softmax -> log -> sum
    let mut r = rng();
    check(
        "composite",
        vec![random(&mut r, 2, 3, -2.0, 2.0), random(&mut r, 3, 4, -2.0, 2.0)],
        |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.tanh(h);
            let p = t.softmax_rows(h, None).unwrap();
            let l = t.log(p);
            t.sum(l)
        },
    );
}

#[test]
fn reused_value_accumulates_over_paths() {
    // y = sum(x * x) + sum(x) has gradient 2x + 1
    let mut t = Tape::new();
    let x = t.leaf(Tensor::row(vec![1.0, -3.0, 0.5]).with_grad());
    let sq = t.mul(x, x).unwrap();
    let a = t.sum(sq);
    let b = t.sum(x);
    let y = t.add(a, b).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0, -5.0, 2.0]);
}
