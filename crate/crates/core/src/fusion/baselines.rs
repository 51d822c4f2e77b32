//! Late fusion, geometric (projection-based) fusion and the image-only
//! encoder. The baselines accept the ego velocity for interface parity but
//! only the transformer fusion consumes it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backbone::{register_backbone, Backbone, Stream};
use super::{BackboneSpec, Result};
use crate::bev::GridSpec;
use crate::nn::{self, Graph};
use crate::sim::CameraRig;
use crate::tensor::{fnv1a, ParamStore, Real, Var};

/// Points sampled per BEV cell or image cell.
pub const POINTS_PER_CELL: usize = 5;
const GEO_MLP_LAYERS: usize = 3;

/// Both backbones, stage by stage, without cross-modal exchange.
fn two_streams<T: Real>(
    g: &mut Graph<'_, T>,
    backbone: &BackboneSpec,
    image: Var,
    bev: Var,
    mut between: impl FnMut(&mut Graph<'_, T>, usize, Var, Var) -> Result<(Var, Var)>,
) -> Result<Var> {
    let ib = Backbone::new(backbone, Stream::Image);
    let lb = Backbone::new(backbone, Stream::Lidar);
    let mut x = ib.stem(g, image)?;
    let mut y = lb.stem(g, bev)?;
    for k in 1..=4 {
        x = ib.stage(g, k, x)?;
        y = lb.stage(g, k, y)?;
        (x, y) = between(g, k, x, y)?;
    }
    let fx = Backbone::global_pool(g, x)?;
    let fy = Backbone::global_pool(g, y)?;
    Ok(g.tape.add(fx, fy)?)
}

/// Sum of the independently pooled image and LiDAR features.
pub fn late_fusion_encode<T: Real>(
    g: &mut Graph<'_, T>,
    backbone: &BackboneSpec,
    image: Var,
    bev: Var,
    _velocity: f64,
) -> Result<Var> {
    two_streams(g, backbone, image, bev, |_, _, x, y| Ok((x, y)))
}

/// Image backbone only.
pub fn image_only_encode<T: Real>(
    g: &mut Graph<'_, T>,
    backbone: &BackboneSpec,
    image: Var,
    _velocity: f64,
) -> Result<Var> {
    let ib = Backbone::new(backbone, Stream::Image);
    let mut x = ib.stem(g, image)?;
    for k in 1..=4 {
        x = ib.stage(g, k, x)?;
    }
    Backbone::global_pool(g, x).map_err(Into::into)
}

/// Cell correspondences of one fused stage, as `(destination, source)`
/// token indices on a `side × side` grid.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageLinks {
    pub stage: usize,
    pub side: usize,
    /// BEV cell ← image cell.
    pub bev_from_image: Vec<(usize, usize)>,
    /// Image cell ← BEV cell.
    pub image_from_bev: Vec<(usize, usize)>,
}

/// Per-frame projection links for every fused stage.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GeoLinks {
    pub stages: Vec<StageLinks>,
}

fn cell_rng(frame_seed: u64, stage: usize, direction: u8, cell: usize) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(24);
    key.extend(frame_seed.to_le_bytes());
    key.extend((stage as u64).to_le_bytes());
    key.push(direction);
    key.extend((cell as u64).to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&key))
}

impl GeoLinks {
    /// For each stage in `stages` with feature side `sides[k-1]`: every
    /// LiDAR point inside the BEV grid that projects into the cropped image
    /// links its BEV cell and its image cell. At most five seeded-random
    /// points are kept per destination cell.
    pub fn build(
        points: &[[f32; 3]],
        camera: &CameraRig,
        grid: &GridSpec,
        sides: [usize; 4],
        stages: impl IntoIterator<Item = usize>,
        frame_seed: u64,
    ) -> Self {
        let stages = stages
            .into_iter()
            .map(|k| {
                let side = sides[k - 1];
                let coarse = grid.with_resolution(side);
                let crop = camera.crop;
                let pairs: Vec<(usize, usize)> = points
                    .iter()
                    .filter_map(|p| {
                        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
                        let (r, c) = coarse.cell_of(x, y)?;
                        let (pr, pc) = camera.crop_pixel([x, y, z])?;
                        Some((r * side + c, (pr * side / crop) * side + pc * side / crop))
                    })
                    .collect();
                let bev_from_image = sample_links(&pairs, side * side, |&(b, i)| (b, i), frame_seed, k, 0);
                let image_from_bev = sample_links(&pairs, side * side, |&(b, i)| (i, b), frame_seed, k, 1);
                StageLinks {
                    stage: k,
                    side,
                    bev_from_image,
                    image_from_bev,
                }
            })
            .collect();
        Self { stages }
    }

    pub fn stage(&self, k: usize) -> Option<&StageLinks> {
        self.stages.iter().find(|s| s.stage == k)
    }
}

/// Groups `(dst, src)` pairs by destination and keeps at most
/// `POINTS_PER_CELL` per destination, chosen by a per-cell seeded shuffle.
fn sample_links(
    pairs: &[(usize, usize)],
    cells: usize,
    orient: impl Fn(&(usize, usize)) -> (usize, usize),
    frame_seed: u64,
    stage: usize,
    direction: u8,
) -> Vec<(usize, usize)> {
    let mut by_cell: Vec<Vec<usize>> = vec![Vec::new(); cells];
    for p in pairs {
        let (dst, src) = orient(p);
        by_cell[dst].push(src);
    }
    let mut out = Vec::new();
    for (dst, mut srcs) in by_cell.into_iter().enumerate() {
        if srcs.len() > POINTS_PER_CELL {
            let mut rng = cell_rng(frame_seed, stage, direction, dst);
            srcs.partial_shuffle(&mut rng, POINTS_PER_CELL);
            srcs.truncate(POINTS_PER_CELL);
        }
        out.extend(srcs.into_iter().map(|s| (dst, s)));
    }
    out
}

/// Registers both backbones and the per-stage projection MLPs.
pub fn register_geometric<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    backbone: &BackboneSpec,
    stages: impl IntoIterator<Item = usize>,
) -> Result<()> {
    register_backbone(store, seed, backbone, Stream::Image)?;
    register_backbone(store, seed, backbone, Stream::Lidar)?;
    for k in stages {
        let c = backbone.stage_channels[k - 1];
        for dir in ["img2bev", "bev2img"] {
            nn::register_mlp(store, seed, &format!("geo.scale{k}.{dir}"), &[c; GEO_MLP_LAYERS + 1])?;
        }
    }
    Ok(())
}

/// Sums the linked source tokens per destination cell, passes the sums of
/// cells that have links through the MLP, and scatters them onto the grid.
fn cross_term<T: Real>(
    g: &mut Graph<'_, T>,
    mlp: &str,
    source_tokens: Var,
    links: &[(usize, usize)],
    cells: usize,
) -> Result<Option<Var>> {
    if links.is_empty() {
        return Ok(None);
    }
    let mut unique: Vec<usize> = links.iter().map(|l| l.0).collect();
    unique.dedup();
    let compact: Vec<usize> = links
        .iter()
        .map(|l| unique.binary_search(&l.0).expect("links are grouped by destination"))
        .collect();
    let src: Vec<usize> = links.iter().map(|l| l.1).collect();
    let gathered = g.tape.gather_rows(source_tokens, &src)?;
    let summed = g.tape.scatter_add_rows(gathered, &compact, unique.len())?;
    let mapped = nn::mlp(g, mlp, GEO_MLP_LAYERS, summed)?;
    Ok(Some(g.tape.scatter_add_rows(mapped, &unique, cells)?))
}

fn tokens_of<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    let flat = g.tape.reshape(x, &[s[0], s[1] * s[2]])?;
    Ok(g.tape.transpose(flat)?)
}

fn add_tokens<T: Real>(g: &mut Graph<'_, T>, map: Var, tokens: Var) -> Result<Var> {
    let s = g.tape.shape(map).to_vec();
    let t = g.tape.transpose(tokens)?;
    let t = g.tape.reshape(t, &s)?;
    Ok(g.tape.add(map, t)?)
}

/// Late fusion plus bidirectional projection-linked feature exchange after
/// each stage that has links.
pub fn geometric_fusion_encode<T: Real>(
    g: &mut Graph<'_, T>,
    backbone: &BackboneSpec,
    image: Var,
    bev: Var,
    links: &GeoLinks,
    _velocity: f64,
) -> Result<Var> {
    two_streams(g, backbone, image, bev, |g, k, x, y| {
        let Some(l) = links.stage(k) else {
            return Ok((x, y));
        };
        let cells = l.side * l.side;
        let it = tokens_of(g, x)?;
        let bt = tokens_of(g, y)?;
        let to_bev = cross_term(g, &format!("geo.scale{k}.img2bev"), it, &l.bev_from_image, cells)?;
        let to_img = cross_term(g, &format!("geo.scale{k}.bev2img"), bt, &l.image_from_bev, cells)?;
        let y = match to_bev {
            Some(t) => add_tokens(g, y, t)?,
            None => y,
        };
        let x = match to_img {
            Some(t) => add_tokens(g, x, t)?,
            None => x,
        };
        Ok((x, y))
    })
}
