//! Two-stream convolutional backbones with transformer fusion, the baseline
//! encoders, and attention statistics.

mod attention;
mod backbone;
mod baselines;
mod stats;
mod transfuser;

pub use attention::{attention_layer, register_transformer, transformer};
pub use backbone::{register_backbone, Backbone, Stream};
pub use baselines::{
    geometric_fusion_encode, image_only_encode, late_fusion_encode, register_geometric, GeoLinks, StageLinks,
};
pub use stats::{attention_stats, head_average, AttentionReport, ModalityStats, RowSpec, TOP_K};
pub use transfuser::{
    fuse_at_scale, register_fusion, register_transfuser, token_mixer, transfuser_encode, EncoderOutput, ScaleAttention,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

/// Two modalities share the token sequence.
pub const MODALITIES: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("{field} = {value} is out of range ({bound})")]
    Range {
        field: &'static str,
        value: i64,
        bound: String,
    },
    #[error("input shape {got:?} does not match the profile ({expected:?})")]
    Profile { got: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// Residual backbone layout shared by both streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// Average-pool factor applied to the raw input before the stem.
    pub input_pool: usize,
    pub stem_channels: usize,
    /// Average-pool factor after the stem convolution.
    pub stem_pool: usize,
    pub stage_channels: [usize; 4],
    /// Average-pool factor at the entry of each stage.
    pub stage_pools: [usize; 4],
    pub image_blocks: usize,
    pub lidar_blocks: usize,
}

impl BackboneSpec {
    pub fn paper() -> Self {
        Self {
            input_pool: 2,
            stem_channels: 64,
            stem_pool: 2,
            stage_channels: [64, 128, 256, 512],
            stage_pools: [1, 2, 2, 2],
            image_blocks: 2,
            lidar_blocks: 1,
        }
    }

    pub fn desk() -> Self {
        Self {
            input_pool: 2,
            stem_channels: 8,
            stem_pool: 1,
            stage_channels: [8, 16, 16, 16],
            stage_pools: [2, 2, 1, 1],
            image_blocks: 2,
            lidar_blocks: 1,
        }
    }

    /// Spatial side after each stage for a square input of side `input`.
    pub fn stage_sizes(&self, input: usize) -> [usize; 4] {
        let mut s = input / self.input_pool / self.stem_pool;
        let mut out = [0; 4];
        for (o, p) in out.iter_mut().zip(self.stage_pools) {
            s /= p;
            *o = s;
        }
        out
    }

    pub fn final_channels(&self) -> usize {
        self.stage_channels[3]
    }
}

/// Transformer fusion hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Fuse after the last `scales` stages.
    pub scales: usize,
    pub layers: usize,
    pub heads: usize,
    pub shared_transformer: bool,
    pub positional_embedding: bool,
    /// Side of the pooled token grid.
    pub token_grid: usize,
    /// MLP hidden width as a multiple of the token width.
    pub mlp_ratio: usize,
}

impl FusionConfig {
    pub fn paper() -> Self {
        Self {
            scales: 4,
            layers: 8,
            heads: 4,
            shared_transformer: false,
            positional_embedding: true,
            token_grid: 8,
            mlp_ratio: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            layers: 2,
            ..Self::paper()
        }
    }

    pub fn tokens(&self) -> usize {
        MODALITIES * self.token_grid * self.token_grid
    }

    /// Stage indices (1-based) followed by a fusion step.
    pub fn fused_stages(&self) -> std::ops::RangeInclusive<usize> {
        (5 - self.scales)..=4
    }

    pub fn validate(&self, backbone: &BackboneSpec, input: usize) -> Result<()> {
        let range = |field, value: usize, ok: bool, bound: String| {
            if ok {
                Ok(())
            } else {
                Err(FusionError::Range {
                    field,
                    value: value as i64,
                    bound,
                })
            }
        };
        range("scales", self.scales, (1..=4).contains(&self.scales), "1..=4".into())?;
        range("layers", self.layers, (1..=16).contains(&self.layers), "1..=16".into())?;
        range("heads", self.heads, self.heads >= 1, ">= 1".into())?;
        range("mlp_ratio", self.mlp_ratio, self.mlp_ratio >= 1, ">= 1".into())?;
        range("token_grid", self.token_grid, self.token_grid >= 1, ">= 1".into())?;
        let sizes = backbone.stage_sizes(input);
        for k in self.fused_stages() {
            let d = backbone.stage_channels[k - 1];
            range("heads", self.heads, d % self.heads == 0, format!("must divide stage {k} width {d}"))?;
            let h = sizes[k - 1];
            range(
                "token_grid",
                self.token_grid,
                h >= self.token_grid && h % self.token_grid == 0,
                format!("must divide stage {k} side {h}"),
            )?;
        }
        Ok(())
    }
}
