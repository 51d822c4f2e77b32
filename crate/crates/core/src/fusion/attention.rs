//! Multi-head self-attention layers without normalization.

use crate::nn::{self, Graph};
use crate::tensor::{ParamStore, Real, Result, TensorError, Var};

/// Registers `layers` attention layers under `{prefix}.layer{l}`: query,
/// key and value maps `mq`, `mk`, `mv` (`d×d`, heads are column blocks),
/// output projection `proj` (`d×d`) and the two-layer MLP `mlp`.
pub fn register_transformer<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    prefix: &str,
    d: usize,
    layers: usize,
    mlp_ratio: usize,
) -> Result<()> {
    for l in 0..layers {
        let p = format!("{prefix}.layer{l}");
        for m in ["mq", "mk", "mv", "proj"] {
            store.init_uniform(seed, &format!("{p}.{m}"), &[d, d], d)?;
        }
        nn::register_mlp(store, seed, &format!("{p}.mlp"), &[d, mlp_ratio * d, d])?;
    }
    Ok(())
}

/// One layer on `x[N×D]`:
///
/// ```text
/// Q = x M^q,  K = x M^k,  V = x M^v
/// A_h = softmax(Q_h K_hᵀ / √d_h) V_h      (d_h = D / heads)
/// A   = concat_h(A_h) M^proj
/// out = MLP(A) + x
/// ```
///
/// Returns the output and the per-head `N×N` attention weights.
pub fn attention_layer<T: Real>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let shape = g.tape.shape(x).to_vec();
    let mq = g.p(&format!("{prefix}.mq"))?;
    if shape.len() != 2 || g.tape.shape(mq)[0] != shape[1] {
        return Err(TensorError::ShapeMismatch {
            op: "attention_layer",
            lhs: shape,
            rhs: g.tape.shape(mq).to_vec(),
        });
    }
    let d = shape[1];
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::InvalidShape {
            op: "attention_layer",
            msg: format!("width {d} is not divisible by {heads} heads"),
        });
    }
    let dh = d / heads;
    let mk = g.p(&format!("{prefix}.mk"))?;
    let mv = g.p(&format!("{prefix}.mv"))?;
    let q = g.tape.matmul(x, mq)?;
    let k = g.tape.matmul(x, mk)?;
    let v = g.tape.matmul(x, mv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.tape.narrow(q, 1, h * dh, dh)?;
        let kh = g.tape.narrow(k, 1, h * dh, dh)?;
        let vh = g.tape.narrow(v, 1, h * dh, dh)?;
        let kt = g.tape.transpose(kh)?;
        let s = g.tape.matmul(qh, kt)?;
        let s = g.tape.scale(s, scale)?;
        let p = g.tape.softmax(s, 1)?;
        outs.push(g.tape.matmul(p, vh)?);
        probs.push(p);
    }
    let a = if heads == 1 { outs[0] } else { g.tape.concat(&outs, 1)? };
    let proj = g.p(&format!("{prefix}.proj"))?;
    let a = g.tape.matmul(a, proj)?;
    let m = nn::mlp(g, &format!("{prefix}.mlp"), 2, a)?;
    Ok((g.tape.add(m, x)?, probs))
}

/// `layers` stacked attention layers; returns per-layer head weights.
pub fn transformer<T: Real>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    x: Var,
    layers: usize,
    heads: usize,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let mut h = x;
    let mut all = Vec::with_capacity(layers);
    for l in 0..layers {
        let (out, probs) = attention_layer(g, &format!("{prefix}.layer{l}"), h, heads)?;
        h = out;
        all.push(probs);
    }
    Ok((h, all))
}
