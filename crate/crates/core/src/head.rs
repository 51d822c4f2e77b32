//! Feature reduction, autoregressive waypoint decoding and the L1 loss.

use serde::{Deserialize, Serialize};

use crate::nn::{self, Graph};
use crate::tensor::{ParamStore, Real, Result, Tensor, TensorError, Var};

/// Number of predicted waypoints.
pub const HORIZON: usize = 4;
/// Decoder hidden width.
pub const HIDDEN: usize = 64;
/// Widths of the reduction MLP after the encoder feature.
pub const REDUCE_DIMS: [usize; 3] = [256, 128, HIDDEN];

const REDUCE: &str = "head.reduce";
const GRU: &str = "head.gru";
const OUT: &str = "head.out";

/// `HORIZON` future ego-frame waypoints (m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: [[f64; 2]; HORIZON],
}

impl Trajectory {
    pub fn zeros() -> Self {
        Self {
            waypoints: [[0.0; 2]; HORIZON],
        }
    }

    /// Cumulative sums of per-step offsets, starting from the origin.
    pub fn from_deltas(deltas: &[[f64; 2]; HORIZON]) -> Self {
        let mut w = [[0.0; 2]; HORIZON];
        let mut cur = [0.0, 0.0];
        for (t, d) in deltas.iter().enumerate() {
            cur = [cur[0] + d[0], cur[1] + d[1]];
            w[t] = cur;
        }
        Self { waypoints: w }
    }

    pub fn is_finite(&self) -> bool {
        self.waypoints.iter().flatten().all(|v| v.is_finite())
    }

    /// `HORIZON × 2` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[HORIZON, 2], |i| T::of(self.waypoints[i / 2][i % 2]))
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.shape() != [HORIZON, 2] {
            return Err(TensorError::InvalidShape {
                op: "trajectory",
                msg: format!("expected [{HORIZON}, 2], got {:?}", t.shape()),
            });
        }
        let d = t.data();
        let mut w = [[0.0; 2]; HORIZON];
        for (i, p) in w.iter_mut().enumerate() {
            *p = [d[2 * i].as_f64(), d[2 * i + 1].as_f64()];
        }
        Ok(Self { waypoints: w })
    }
}

/// Registers the reduction MLP, the recurrent cell and the output layer.
pub fn register_head<T: Real>(store: &mut ParamStore<T>, seed: u64, feature_dim: usize) -> Result<()> {
    let mut dims = vec![feature_dim];
    dims.extend(REDUCE_DIMS);
    nn::register_mlp(store, seed, REDUCE, &dims)?;
    nn::register_gru(store, seed, GRU, 4, HIDDEN)?;
    nn::register_linear(store, seed, OUT, HIDDEN, 2)
}

/// `[1×C] → [1×64]`: two ReLU hidden layers, linear output.
pub fn reduce_mlp<T: Real>(g: &mut Graph<'_, T>, feature: Var) -> Result<Var> {
    nn::mlp(g, REDUCE, REDUCE_DIMS.len(), feature)
}

/// Decoder output on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `HORIZON × 2` absolute waypoints.
    pub waypoints: Var,
    /// `HORIZON × 2` per-step offsets.
    pub deltas: Var,
}

/// Unrolls the recurrent decoder from `w₀ = (0, 0)` with the 64-dim feature
/// as initial state; each step consumes `concat(w_{t−1}, goal)`.
pub fn decode_waypoints<T: Real>(g: &mut Graph<'_, T>, feature64: Var, goal: [f64; 2]) -> Result<Decoded> {
    let goal = g.constant(Tensor::from_f64(&[1, 2], &goal)?);
    let mut w = g.constant(Tensor::zeros(&[1, 2]));
    let mut h = feature64;
    let mut points = Vec::with_capacity(HORIZON);
    let mut deltas = Vec::with_capacity(HORIZON);
    for _ in 0..HORIZON {
        let x = g.tape.concat(&[w, goal], 1)?;
        h = nn::gru_cell(g, GRU, x, h)?;
        let d = nn::linear(g, OUT, h)?;
        w = g.tape.add(w, d)?;
        points.push(w);
        deltas.push(d);
    }
    Ok(Decoded {
        waypoints: g.tape.concat(&points, 0)?,
        deltas: g.tape.concat(&deltas, 0)?,
    })
}

/// Offsets read off the tape and the trajectory they telescope to. The
/// cumulative sum is taken in double precision, which is exact for
/// single-precision offsets of comparable magnitude.
pub fn read_trajectory<T: Real>(g: &Graph<'_, T>, d: &Decoded) -> ([[f64; 2]; HORIZON], Trajectory) {
    let v = g.value(d.deltas).data();
    let mut deltas = [[0.0; 2]; HORIZON];
    for (t, p) in deltas.iter_mut().enumerate() {
        *p = [v[2 * t].as_f64(), v[2 * t + 1].as_f64()];
    }
    (deltas, Trajectory::from_deltas(&deltas))
}

/// `Σ_t ‖pred_t − gt_t‖₁`.
pub fn l1_loss<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    let diff = g.tape.sub(pred, gt)?;
    let abs = g.tape.abs(diff)?;
    g.tape.sum(abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64, c: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        register_head(&mut s, seed, c).unwrap();
        s
    }

    fn run(s: &ParamStore<f64>, feat: &[f64], goal: [f64; 2]) -> ([[f64; 2]; 4], Trajectory) {
        let mut g = Graph::new(s);
        let f = g.constant(Tensor::from_f64(&[1, feat.len()], feat).unwrap());
        let f64v = reduce_mlp(&mut g, f).unwrap();
        let d = decode_waypoints(&mut g, f64v, goal).unwrap();
        read_trajectory(&g, &d)
    }

    #[test]
    fn reduce_output_width_and_zero_weights() {
        let mut s = store(1, 512);
        let mut g = Graph::new(&s);
        let f = g.constant(Tensor::full(&[1, 512], 0.3));
        let y = reduce_mlp(&mut g, f).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 64]);
        drop(g);
        s.zero_prefix("head.reduce");
        let mut g = Graph::new(&s);
        let f = g.constant(Tensor::full(&[1, 512], 0.3));
        let y = reduce_mlp(&mut g, f).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduce_matches_scalar_oracle() {
        let s = store(4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let layer = |inp: &[f64], name: &str, relu: bool| -> Vec<f64> {
            let w = s.get(&format!("{name}.w")).unwrap();
            let b = s.get(&format!("{name}.b")).unwrap();
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            (0..dout)
                .map(|j| {
                    let mut a = b.data()[j];
                    for i in 0..din {
                        a += inp[i] * w.at(&[i, j]);
                    }
                    if relu { a.max(0.0) } else { a }
                })
                .collect()
        };
        let h = layer(&x, "head.reduce.l0", true);
        let h = layer(&h, "head.reduce.l1", true);
        let want = layer(&h, "head.reduce.l2", false);
        let mut g = Graph::new(&s);
        let f = g.constant(Tensor::from_f64(&[1, 12], &x).unwrap());
        let y = reduce_mlp(&mut g, f).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_output_layer_gives_origin() {
        let mut s = store(2, 16);
        s.zero_prefix("head.out");
        let (_, t) = run(&s, &[0.5; 16], [10.0, 2.0]);
        assert_eq!(t, Trajectory::zeros());
    }

    #[test]
    fn forced_unit_steps_accumulate() {
        let mut s = store(2, 16);
        s.zero_prefix("head.out");
        s.set("head.out.b", Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap()).unwrap();
        let (_, t) = run(&s, &[0.5; 16], [10.0, 2.0]);
        assert_eq!(t.waypoints, [[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]]);
    }

    #[test]
    fn goal_conditions_the_decoder() {
        let s = store(5, 16);
        let (_, a) = run(&s, &[0.2; 16], [10.0, 0.0]);
        let (_, b) = run(&s, &[0.2; 16], [3.0, -6.0]);
        let diff = a
            .waypoints
            .iter()
            .flatten()
            .zip(b.waypoints.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn l1_loss_examples() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let p = g.constant(Tensor::from_f64(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let same = g.constant(g.value(p).clone());
        let off = g.constant(g.value(p).map(|v| v - 1.0));
        let zero = l1_loss(&mut g, p, same).unwrap();
        let eight = l1_loss(&mut g, p, off).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);
        assert_eq!(g.value(eight).item(), 8.0);
    }

    #[test]
    fn trajectory_tensor_round_trip() {
        let t = Trajectory::from_deltas(&[[1.0, 0.5], [1.0, -0.5], [0.25, 0.0], [2.0, 2.0]]);
        assert_eq!(Trajectory::from_tensor(&t.to_tensor::<f64>()).unwrap(), t);
        assert!(Trajectory::from_tensor(&Tensor::<f64>::zeros(&[3, 2])).is_err());
    }
}
