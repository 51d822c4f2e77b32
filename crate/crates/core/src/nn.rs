//! Layer building blocks shared by the encoders and the waypoint head.
//!
//! Layers do not own weights: they are described by a name prefix, registered
//! once into a [`ParamStore`], and bound into a [`Graph`] on every forward.

use crate::tensor::{ParamStore, Real, Result, Tape, Tensor, TensorError, Var};

/// A tape plus the parameter store it binds from.
pub struct Graph<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
}

impl<'p, T: Real> Graph<'p, T> {
    /// Training graph: parameters are gradient-enabled leaves.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
        }
    }

    /// Inference graph: parameters are bound as constants.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            tape: Tape::inference(),
            params,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Binds parameter `name` (once per graph).
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.params.get(name)?;
        Ok(self.tape.param(name, t))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

/// Registers `{name}.w [in×out]` and `{name}.b [out]`.
pub fn register_linear<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    store.init_uniform(seed, &format!("{name}.w"), &[d_in, d_out], d_in)?;
    store.init_uniform(seed, &format!("{name}.b"), &[d_out], d_in)
}

/// `x[N×in] · w + b`.
pub fn linear<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var) -> Result<Var> {
    let w = g.p(&format!("{name}.w"))?;
    let b = g.p(&format!("{name}.b"))?;
    let y = g.tape.matmul(x, w)?;
    g.tape.add_row(y, b)
}

/// Registers a ReLU multilayer perceptron `{name}.l0 … {name}.l{n-1}`
/// through the given widths (`dims[0]` is the input width).
pub fn register_mlp<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    name: &str,
    dims: &[usize],
) -> Result<()> {
    for (i, pair) in dims.windows(2).enumerate() {
        register_linear(store, seed, &format!("{name}.l{i}"), pair[0], pair[1])?;
    }
    Ok(())
}

/// ReLU between layers, linear output.
pub fn mlp<T: Real>(g: &mut Graph<'_, T>, name: &str, layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, &format!("{name}.l{i}"), h)?;
        if i + 1 < layers {
            h = g.tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Registers a gated recurrent cell: `{name}.w_ih [in×3h]`, `{name}.w_hh
/// [h×3h]`, `{name}.b_ih`, `{name}.b_hh [3h]`, gate blocks ordered
/// reset, update, candidate.
pub fn register_gru<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    name: &str,
    d_in: usize,
    d_hidden: usize,
) -> Result<()> {
    let three = 3 * d_hidden;
    store.init_uniform(seed, &format!("{name}.w_ih"), &[d_in, three], d_hidden)?;
    store.init_uniform(seed, &format!("{name}.w_hh"), &[d_hidden, three], d_hidden)?;
    store.init_uniform(seed, &format!("{name}.b_ih"), &[three], d_hidden)?;
    store.init_uniform(seed, &format!("{name}.b_hh"), &[three], d_hidden)
}

/// One gated-recurrent-unit update on row vectors `x[1×in]`, `h[1×hid]`:
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z  = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var, h: Var) -> Result<Var> {
    let hidden = g.tape.shape(h)[1];
    let w_hh = g.p(&format!("{name}.w_hh"))?;
    if g.tape.shape(w_hh) != [hidden, 3 * hidden] {
        return Err(TensorError::ShapeMismatch {
            op: "gru_cell",
            lhs: g.tape.shape(h).to_vec(),
            rhs: g.tape.shape(w_hh).to_vec(),
        });
    }
    let w_ih = g.p(&format!("{name}.w_ih"))?;
    let b_ih = g.p(&format!("{name}.b_ih"))?;
    let b_hh = g.p(&format!("{name}.b_hh"))?;

    let gi = g.tape.matmul(x, w_ih)?;
    let gi = g.tape.add_row(gi, b_ih)?;
    let gh = g.tape.matmul(h, w_hh)?;
    let gh = g.tape.add_row(gh, b_hh)?;

    let block = |g: &mut Graph<'_, T>, v: Var, k: usize| g.tape.narrow(v, 1, k * hidden, hidden);
    let (gi_r, gi_z, gi_n) = (block(g, gi, 0)?, block(g, gi, 1)?, block(g, gi, 2)?);
    let (gh_r, gh_z, gh_n) = (block(g, gh, 0)?, block(g, gh, 1)?, block(g, gh, 2)?);

    let r = g.tape.add(gi_r, gh_r)?;
    let r = g.tape.sigmoid(r)?;
    let z = g.tape.add(gi_z, gh_z)?;
    let z = g.tape.sigmoid(z)?;
    let rn = g.tape.mul(r, gh_n)?;
    let n = g.tape.add(gi_n, rn)?;
    let n = g.tape.tanh(n)?;

    // (1 − z)·n + z·h  ==  n + z·(h − n)
    let diff = g.tape.sub(h, n)?;
    let zd = g.tape.mul(z, diff)?;
    g.tape.add(n, zd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// Scalar-loop reference for one GRU step.
    fn gru_oracle(store: &ParamStore<f64>, x: &[f64], h: &[f64]) -> Vec<f64> {
        let w_ih = store.get("g.w_ih").unwrap();
        let w_hh = store.get("g.w_hh").unwrap();
        let b_ih = store.get("g.b_ih").unwrap().data();
        let b_hh = store.get("g.b_hh").unwrap().data();
        let hid = h.len();
        let gate = |k: usize, j: usize| {
            let col = k * hid + j;
            let mut a = b_ih[col];
            for (i, &xi) in x.iter().enumerate() {
                a += xi * w_ih.at(&[i, col]);
            }
            let mut b = b_hh[col];
            for (i, &hi) in h.iter().enumerate() {
                b += hi * w_hh.at(&[i, col]);
            }
            (a, b)
        };
        (0..hid)
            .map(|j| {
                let (ar, br) = gate(0, j);
                let (az, bz) = gate(1, j);
                let (an, bn) = gate(2, j);
                let r = sigmoid(ar + br);
                let z = sigmoid(az + bz);
                let n = (an + r * bn).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }

    fn run_gru(store: &ParamStore<f64>, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut g = Graph::new(store);
        let xv = g.constant(Tensor::from_f64(&[1, x.len()], x).unwrap());
        let hv = g.constant(Tensor::from_f64(&[1, h.len()], h).unwrap());
        let out = gru_cell(&mut g, "g", xv, hv).unwrap();
        g.value(out).to_f64_vec()
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let mut store = ParamStore::<f64>::new();
        register_gru(&mut store, 0, "g", 4, 8).unwrap();
        for n in ["g.w_ih", "g.w_hh", "g.b_ih", "g.b_hh"] {
            let shape = store.get(n).unwrap().shape().to_vec();
            store.set(n, Tensor::zeros(&shape)).unwrap();
        }
        let h: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let out = run_gru(&store, &[0.3, -1.0, 2.0, 0.1], &h);
        for (o, hv) in out.iter().zip(&h) {
            assert_eq!(*o, 0.5 * hv);
        }
    }

    #[test]
    fn gru_saturated_update_gate_keeps_state() {
        let mut store = ParamStore::<f64>::new();
        register_gru(&mut store, 3, "g", 4, 8).unwrap();
        let mut b = store.get("g.b_ih").unwrap().clone();
        for v in &mut b.data_mut()[8..16] {
            *v = 100.0;
        }
        store.set("g.b_ih", b).unwrap();
        let h: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos()).collect();
        let out = run_gru(&store, &[0.3, -1.0, 2.0, 0.1], &h);
        for (o, hv) in out.iter().zip(&h) {
            assert!((o - hv).abs() < 1e-8, "{o} vs {hv}");
        }
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        for seed in 0..5u64 {
            let mut store = ParamStore::<f64>::new();
            register_gru(&mut store, seed, "g", 4, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let h: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = run_gru(&store, &x, &h);
            let want = gru_oracle(&store, &x, &h);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gru_rejects_wrong_hidden_width() {
        let mut store = ParamStore::<f64>::new();
        register_gru(&mut store, 0, "g", 4, 8).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let h = g.constant(Tensor::zeros(&[1, 6]));
        assert!(gru_cell(&mut g, "g", x, h).is_err());
    }

    #[test]
    fn mlp_zero_weights_give_zero() {
        let mut store = ParamStore::<f64>::new();
        register_mlp(&mut store, 1, "m", &[5, 7, 3]).unwrap();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[2, 5], 1.5));
        let y = mlp(&mut g, "m", 2, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(y).shape(), &[2, 3]);
    }
}
