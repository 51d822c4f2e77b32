//! Transformer fusion between the image and LiDAR streams.

use super::attention::{register_transformer, transformer};
use super::backbone::{register_backbone, Backbone, Stream};
use super::{BackboneSpec, FusionConfig, FusionError, Result, MODALITIES};
use crate::nn::Graph;
use crate::tensor::{ParamStore, Real, Var};

/// Parameter prefix of the fusion module after stage `k`.
pub(super) fn module_prefix(k: usize) -> String {
    format!("fusion.scale{k}")
}

/// Parameter prefix of the transformer used after stage `k`.
fn transformer_prefix(cfg: &FusionConfig, k: usize) -> String {
    if cfg.shared_transformer {
        "fusion.shared".to_string()
    } else {
        format!("{}.transformer", module_prefix(k))
    }
}

/// Width at which the shared transformer runs.
fn shared_width(cfg: &FusionConfig, backbone: &BackboneSpec) -> usize {
    cfg.fused_stages()
        .map(|k| backbone.stage_channels[k - 1])
        .max()
        .unwrap_or(1)
}

/// Registers positional/velocity embeddings and the transformers. With a
/// shared transformer, stages narrower than the widest fused stage get
/// bias-free adapters into and out of the shared width.
pub fn register_fusion<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    cfg: &FusionConfig,
    backbone: &BackboneSpec,
) -> Result<()> {
    let n = cfg.tokens();
    let ds = shared_width(cfg, backbone);
    if cfg.shared_transformer {
        register_transformer(store, seed, "fusion.shared", ds, cfg.layers, cfg.mlp_ratio)?;
    }
    for k in cfg.fused_stages() {
        let c = backbone.stage_channels[k - 1];
        let p = module_prefix(k);
        if cfg.positional_embedding {
            store.init_uniform(seed, &format!("{p}.pos"), &[n, c], c)?;
        }
        store.init_uniform(seed, &format!("{p}.vel.w"), &[c], 1)?;
        store.init_uniform(seed, &format!("{p}.vel.b"), &[c], 1)?;
        if cfg.shared_transformer {
            if c != ds {
                store.init_uniform(seed, &format!("{p}.adapt_in"), &[c, ds], c)?;
                store.init_uniform(seed, &format!("{p}.adapt_out"), &[ds, c], ds)?;
            }
        } else {
            register_transformer(store, seed, &transformer_prefix(cfg, k), c, cfg.layers, cfg.mlp_ratio)?;
        }
    }
    Ok(())
}

/// Embeddings plus transformer on a `N×C` token sequence for the module
/// after stage `k`. Returns the residual update `T(x) − x` (where `x` is the
/// embedded sequence) and the per-layer head weights.
pub fn token_mixer<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &FusionConfig,
    k: usize,
    tokens: Var,
    velocity: f64,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let p = module_prefix(k);
    let mut x = tokens;
    if cfg.positional_embedding {
        let pos = g.p(&format!("{p}.pos"))?;
        x = g.tape.add(x, pos)?;
    }
    let vw = g.p(&format!("{p}.vel.w"))?;
    let vb = g.p(&format!("{p}.vel.b"))?;
    let ve = g.tape.scale(vw, velocity)?;
    let ve = g.tape.add(ve, vb)?;
    x = g.tape.add_row(x, ve)?;

    let adapt = cfg.shared_transformer && g.params().contains(&format!("{p}.adapt_in"));
    let inner = if adapt {
        let a = g.p(&format!("{p}.adapt_in"))?;
        g.tape.matmul(x, a)?
    } else {
        x
    };
    let (out, probs) = transformer(g, &transformer_prefix(cfg, k), inner, cfg.layers, cfg.heads)?;
    let mut delta = g.tape.sub(out, inner)?;
    if adapt {
        let a = g.p(&format!("{p}.adapt_out"))?;
        delta = g.tape.matmul(delta, a)?;
    }
    Ok((delta, probs))
}

/// `C×h×w` map to `(h·w)×C` tokens.
fn to_tokens<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    let flat = g.tape.reshape(x, &[s[0], s[1] * s[2]])?;
    Ok(g.tape.transpose(flat)?)
}

/// `(h·w)×C` tokens back to a `C×h×w` map.
fn from_tokens<T: Real>(g: &mut Graph<'_, T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.tape.shape(t)[1];
    let tr = g.tape.transpose(t)?;
    Ok(g.tape.reshape(tr, &[c, h, w])?)
}

/// Head weights of every layer of one fusion step.
#[derive(Clone, Debug)]
pub struct ScaleAttention {
    /// Backbone stage the step follows (1-based).
    pub stage: usize,
    /// `[layer][head]` weights, each `N×N`.
    pub layers: Vec<Vec<Var>>,
}

/// Pools both maps to the token grid, mixes the joint sequence (image
/// tokens first), and adds the upsampled update back to each map.
pub fn fuse_at_scale<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &FusionConfig,
    k: usize,
    img: Var,
    lidar: Var,
    velocity: f64,
) -> Result<(Var, Var, ScaleAttention)> {
    let (si, sl) = (g.tape.shape(img).to_vec(), g.tape.shape(lidar).to_vec());
    if si != sl || si.len() != 3 {
        return Err(FusionError::Profile { got: sl, expected: si });
    }
    let (h, w, n) = (si[1], si[2], cfg.token_grid);
    let pooled: Vec<Var> = [img, lidar]
        .into_iter()
        .map(|m| {
            let m = if (h, w) == (n, n) { m } else { g.tape.avgpool2d(m, n, n)? };
            to_tokens(g, m)
        })
        .collect::<Result<_>>()?;
    let tokens = g.tape.concat(&pooled, 0)?;
    let (delta, probs) = token_mixer(g, cfg, k, tokens, velocity)?;
    let per = n * n;
    let mut fused = Vec::with_capacity(MODALITIES);
    for (m, base) in [img, lidar].into_iter().enumerate() {
        let part = g.tape.narrow(delta, 0, m * per, per)?;
        let mut map = from_tokens(g, part, n, n)?;
        if (h, w) != (n, n) {
            map = g.tape.bilinear_resize(map, h, w)?;
        }
        fused.push(g.tape.add(base, map)?);
    }
    Ok((fused[0], fused[1], ScaleAttention { stage: k, layers: probs }))
}

/// Encoder feature (`1×C_final`) plus the recorded attention weights.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub feature: Var,
    pub attention: Vec<ScaleAttention>,
}

/// Registers both backbones and the fusion modules.
pub fn register_transfuser<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    cfg: &FusionConfig,
    backbone: &BackboneSpec,
) -> Result<()> {
    register_backbone(store, seed, backbone, Stream::Image)?;
    register_backbone(store, seed, backbone, Stream::Lidar)?;
    register_fusion(store, seed, cfg, backbone)
}

/// Runs both streams stage by stage, fusing after each of the last
/// `cfg.scales` stages, then sums the globally pooled stream features.
pub fn transfuser_encode<T: Real>(
    g: &mut Graph<'_, T>,
    backbone: &BackboneSpec,
    cfg: &FusionConfig,
    image: Var,
    bev: Var,
    velocity: f64,
) -> Result<EncoderOutput> {
    let ib = Backbone::new(backbone, Stream::Image);
    let lb = Backbone::new(backbone, Stream::Lidar);
    let mut x = ib.stem(g, image)?;
    let mut y = lb.stem(g, bev)?;
    let mut attention = Vec::new();
    for k in 1..=4 {
        x = ib.stage(g, k, x)?;
        y = lb.stage(g, k, y)?;
        if cfg.fused_stages().contains(&k) {
            let (a, b, att) = fuse_at_scale(g, cfg, k, x, y, velocity)?;
            x = a;
            y = b;
            attention.push(att);
        }
    }
    let fx = Backbone::global_pool(g, x)?;
    let fy = Backbone::global_pool(g, y)?;
    Ok(EncoderOutput {
        feature: g.tape.add(fx, fy)?,
        attention,
    })
}
