//! Independent oracles shared by the integration and acceptance tests:
//! central finite differences and a loop-based attention layer.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transfuser_core::nn::Graph;
use transfuser_core::tensor::{ParamStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Relative error with a floor on the denominator so entries whose true
/// gradient is near zero are judged on absolute error.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Like [`random`] but with every entry at least 0.1 away from zero, for
/// ops with a kink there.
pub fn random_off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Scalar probe `Σ f(x) ⊙ R` with a fixed random cotangent `R`.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let r = random(tape.shape(out), seed ^ 0xc0ffee);
    let r = tape.constant(r);
    let p = tape.mul(out, r).unwrap();
    tape.sum(p).unwrap()
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every input.
pub fn check_inputs(inputs: &[Tensor<f64>], seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().enumerate().map(|(i, x)| t.param(&format!("x{i}"), x)).collect();
        let out = f(&mut t, &vars);
        let l = probe(&mut t, out, seed);
        (t, l)
    };
    let (tape, loss) = eval(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(&format!("x{i}")).unwrap();
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let (tp, lp) = eval(&plus);
            let (tm, lm) = eval(&minus);
            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Same check with respect to every parameter of `store`.
pub fn check_params(store: &ParamStore<f64>, seed: u64, f: impl Fn(&mut Graph<'_, f64>) -> Var) -> f64 {
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let out = f(&mut g);
        let l = probe(&mut g.tape, out, seed);
        let v = g.value(l).item();
        (g.into_tape(), l, v)
    };
    let (tape, loss, _) = eval(store);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (name, t) in store.iter() {
        let analytic = grads.get(name).unwrap();
        for j in 0..t.len() {
            let mut s = store.clone();
            let mut p = t.clone();
            p.data_mut()[j] += FD_STEP;
            s.set(name, p.clone()).unwrap();
            let lp = eval(&s).2;
            p.data_mut()[j] -= 2.0 * FD_STEP;
            s.set(name, p).unwrap();
            let lm = eval(&s).2;
            worst = worst.max(rel_err(analytic.data()[j], (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn mat(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn linear(x: &[Vec<f64>], s: &ParamStore<f64>, name: &str) -> Vec<Vec<f64>> {
    let w = mat(s.get(&format!("{name}.w")).unwrap());
    let b = s.get(&format!("{name}.b")).unwrap().data().to_vec();
    matmul(x, &w)
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(v, bb)| v + bb).collect())
        .collect()
}

/// Loop implementation of one attention layer under `prefix`: per head
/// `softmax(Q_h K_hᵀ / √d_h) V_h`, heads concatenated and projected, then
/// `MLP(A) + x` with a ReLU hidden layer.
pub fn attention_oracle(s: &ParamStore<f64>, prefix: &str, x: &Tensor<f64>, heads: usize) -> Tensor<f64> {
    let xs = mat(x);
    let (n, d) = (xs.len(), xs[0].len());
    let dh = d / heads;
    let q = matmul(&xs, &mat(s.get(&format!("{prefix}.mq")).unwrap()));
    let k = matmul(&xs, &mat(s.get(&format!("{prefix}.mk")).unwrap()));
    let v = matmul(&xs, &mat(s.get(&format!("{prefix}.mv")).unwrap()));
    let mut a = vec![vec![0.0; d]; n];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|z| (z - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                a[i][h * dh + c] = (0..n).map(|j| e[j] / z * v[j][h * dh + c]).sum();
            }
        }
    }
    let a = matmul(&a, &mat(s.get(&format!("{prefix}.proj")).unwrap()));
    let hidden: Vec<Vec<f64>> = linear(&a, s, &format!("{prefix}.mlp.l0"))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let out = linear(&hidden, s, &format!("{prefix}.mlp.l1"));
    let data: Vec<f64> = out.iter().zip(&xs).flat_map(|(o, xi)| o.iter().zip(xi).map(|(a, b)| a + b).collect::<Vec<_>>()).collect();
    Tensor::new(&[n, d], data).unwrap()
}

/// Seeds used for every gradient check.
pub const GRAD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type OpCheck = (&'static str, Box<dyn Fn(u64) -> f64>);

/// One entry per differentiable tape op plus composite layers; each closure
/// returns the worst relative error for one seed.
pub fn gradient_suite() -> Vec<OpCheck> {
    use transfuser_core::fusion::{attention_layer, register_transformer};
    use transfuser_core::head::{decode_waypoints, l1_loss, register_head, reduce_mlp};
    use transfuser_core::nn::{gru_cell, register_gru};

    fn unary(seed: u64, shape: &[usize], off_zero: bool, f: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
        let x = if off_zero { random_off_zero(shape, seed) } else { random(shape, seed) };
        check_inputs(&[x], seed, |t, v| f(t, v[0]))
    }
    fn binary(seed: u64, a: &[usize], b: &[usize], f: impl Fn(&mut Tape<f64>, Var, Var) -> Var) -> f64 {
        check_inputs(&[random(a, seed), random(b, seed + 100)], seed, |t, v| f(t, v[0], v[1]))
    }
    vec![
        ("matmul", Box::new(|s| binary(s, &[3, 4], &[4, 2], |t, a, b| t.matmul(a, b).unwrap()))),
        ("add", Box::new(|s| binary(s, &[3, 4], &[3, 4], |t, a, b| t.add(a, b).unwrap()))),
        ("sub", Box::new(|s| binary(s, &[3, 4], &[3, 4], |t, a, b| t.sub(a, b).unwrap()))),
        ("mul", Box::new(|s| binary(s, &[3, 4], &[3, 4], |t, a, b| t.mul(a, b).unwrap()))),
        ("add_row", Box::new(|s| binary(s, &[3, 4], &[4], |t, a, b| t.add_row(a, b).unwrap()))),
        ("add_channel", Box::new(|s| binary(s, &[2, 3, 3], &[2], |t, a, b| t.add_channel(a, b).unwrap()))),
        ("scale", Box::new(|s| unary(s, &[3, 4], false, |t, x| t.scale(x, -1.7).unwrap()))),
        ("add_scalar", Box::new(|s| unary(s, &[3, 4], false, |t, x| t.add_scalar(x, 0.3).unwrap()))),
        ("relu", Box::new(|s| unary(s, &[3, 4], true, |t, x| t.relu(x).unwrap()))),
        ("sigmoid", Box::new(|s| unary(s, &[3, 4], false, |t, x| t.sigmoid(x).unwrap()))),
        ("tanh", Box::new(|s| unary(s, &[3, 4], false, |t, x| t.tanh(x).unwrap()))),
        ("abs", Box::new(|s| unary(s, &[3, 4], true, |t, x| t.abs(x).unwrap()))),
        ("softmax_rows", Box::new(|s| unary(s, &[3, 5], false, |t, x| t.softmax(x, 1).unwrap()))),
        ("softmax_cols", Box::new(|s| unary(s, &[3, 5], false, |t, x| t.softmax(x, 0).unwrap()))),
        ("sum", Box::new(|s| unary(s, &[3, 4], false, |t, x| t.sum(x).unwrap()))),
        ("mean", Box::new(|s| unary(s, &[3, 4], false, |t, x| t.mean(x).unwrap()))),
        ("transpose", Box::new(|s| unary(s, &[3, 4], false, |t, x| t.transpose(x).unwrap()))),
        ("reshape", Box::new(|s| unary(s, &[3, 4], false, |t, x| t.reshape(x, &[2, 6]).unwrap()))),
        ("narrow", Box::new(|s| unary(s, &[3, 5], false, |t, x| t.narrow(x, 1, 1, 3).unwrap()))),
        ("concat_rows", Box::new(|s| binary(s, &[2, 3], &[4, 3], |t, a, b| t.concat(&[a, b], 0).unwrap()))),
        ("concat_cols", Box::new(|s| binary(s, &[2, 3], &[2, 2], |t, a, b| t.concat(&[a, b], 1).unwrap()))),
        ("conv2d", Box::new(|s| binary(s, &[2, 5, 5], &[3, 2, 3, 3], |t, x, w| t.conv2d(x, w, 1, 1).unwrap()))),
        ("conv2d_strided", Box::new(|s| binary(s, &[2, 5, 5], &[2, 2, 3, 3], |t, x, w| t.conv2d(x, w, 2, 1).unwrap()))),
        ("avgpool2d", Box::new(|s| unary(s, &[2, 4, 6], false, |t, x| t.avgpool2d(x, 2, 3).unwrap()))),
        ("bilinear_up", Box::new(|s| unary(s, &[2, 2, 3], false, |t, x| t.bilinear_resize(x, 4, 5).unwrap()))),
        ("bilinear_down", Box::new(|s| unary(s, &[1, 6, 5], false, |t, x| t.bilinear_resize(x, 3, 2).unwrap()))),
        ("gather_rows", Box::new(|s| unary(s, &[4, 3], false, |t, x| t.gather_rows(x, &[2, 0, 2, 3]).unwrap()))),
        (
            "scatter_add_rows",
            Box::new(|s| unary(s, &[4, 3], false, |t, x| t.scatter_add_rows(x, &[1, 1, 4, 0], 5).unwrap())),
        ),
        (
            "attention_layer",
            Box::new(|s| {
                let mut store = ParamStore::new();
                register_transformer(&mut store, s, "t", 8, 1, 2).unwrap();
                let x = random(&[4, 8], s + 7);
                check_params(&store, s, |g| {
                    let xv = g.constant(x.clone());
                    attention_layer(g, "t.layer0", xv, 2).unwrap().0
                })
            }),
        ),
        (
            "gru_cell",
            Box::new(|s| {
                let mut store = ParamStore::new();
                register_gru(&mut store, s, "g", 4, 6).unwrap();
                let (x, h) = (random(&[1, 4], s + 1), random(&[1, 6], s + 2));
                check_params(&store, s, |g| {
                    let (xv, hv) = (g.constant(x.clone()), g.constant(h.clone()));
                    gru_cell(g, "g", xv, hv).unwrap()
                })
            }),
        ),
        (
            "waypoint_head_l1",
            Box::new(|s| {
                let mut store = ParamStore::new();
                register_head(&mut store, s, 8).unwrap();
                let f = random(&[1, 8], s + 3);
                let gt = random(&[4, 2], s + 4).map(|v| 3.0 * v);
                check_params(&store, s, |g| {
                    let fv = g.constant(f.clone());
                    let r = reduce_mlp(g, fv).unwrap();
                    let d = decode_waypoints(g, r, [4.0, -1.0]).unwrap();
                    let gv = g.constant(gt.clone());
                    l1_loss(g, d.waypoints, gv).unwrap()
                })
            }),
        ),
    ]
}
