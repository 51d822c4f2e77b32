//! Cross-modal top-k attention statistics.

use serde::{Deserialize, Serialize};

use super::{FusionError, Result};
use crate::tensor::{Real, Tensor};

pub const TOP_K: usize = 5;

/// Query token rows on the `grid × grid` map of each modality, 1-based and
/// inclusive. Image tokens come first in the sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowSpec {
    pub grid: usize,
    pub image_rows: [usize; 2],
    pub lidar_rows: [usize; 2],
}

impl Default for RowSpec {
    fn default() -> Self {
        Self {
            grid: 8,
            image_rows: [2, 4],
            lidar_rows: [4, 6],
        }
    }
}

impl RowSpec {
    pub fn tokens_per_modality(&self) -> usize {
        self.grid * self.grid
    }

    fn check(&self, n: usize) -> Result<()> {
        let bad = |msg: String| FusionError::Range {
            field: "row_spec",
            value: n as i64,
            bound: msg,
        };
        if n != 2 * self.tokens_per_modality() {
            return Err(bad(format!("{n} tokens, expected {}", 2 * self.tokens_per_modality())));
        }
        for [a, b] in [self.image_rows, self.lidar_rows] {
            if a == 0 || a > b || b > self.grid {
                return Err(bad(format!("rows {a}..={b} outside 1..={}", self.grid)));
            }
        }
        Ok(())
    }

    fn rows_to_tokens(&self, rows: [usize; 2], offset: usize) -> Vec<usize> {
        (rows[0] - 1..rows[1])
            .flat_map(|r| (0..self.grid).map(move |c| offset + r * self.grid + c))
            .collect()
    }

    pub fn image_queries(&self) -> Vec<usize> {
        self.rows_to_tokens(self.image_rows, 0)
    }

    pub fn lidar_queries(&self) -> Vec<usize> {
        self.rows_to_tokens(self.lidar_rows, self.tokens_per_modality())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub tokens_available: usize,
    pub tokens_selected: usize,
    /// Queries evaluated (selected tokens × frames).
    pub queries: usize,
    /// Fraction whose top-k are all from the other modality.
    pub all_cross_modal: f64,
    /// Fraction whose top-k contain at least one token of the other modality.
    pub any_cross_modal: f64,
    /// How often each token index appeared in a top-k set.
    pub top_k_histogram: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub frames: usize,
    pub rows: RowSpec,
    pub image: ModalityStats,
    pub lidar: ModalityStats,
}

/// Mean over heads of `N×N` weight matrices.
pub fn head_average<T: Real>(heads: &[&Tensor<T>]) -> Tensor<f32> {
    let inv = 1.0 / heads.len() as f64;
    Tensor::from_fn(heads[0].shape(), |i| {
        (heads.iter().map(|h| h.data()[i].as_f64()).sum::<f64>() * inv) as f32
    })
}

/// Indices of the `k` largest entries, ties broken by lower index.
fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-k cross-modal fractions over head-averaged `N×N` matrices, one per
/// frame.
pub fn attention_stats(frames: &[Tensor<f32>], rows: &RowSpec) -> Result<AttentionReport> {
    let n = 2 * rows.tokens_per_modality();
    rows.check(frames.first().map_or(n, |f| f.shape()[0]))?;
    for f in frames {
        if f.shape() != [n, n] {
            return Err(FusionError::Profile {
                got: f.shape().to_vec(),
                expected: vec![n, n],
            });
        }
    }
    let half = rows.tokens_per_modality();
    let modality = |queries: Vec<usize>, is_cross: &dyn Fn(usize) -> bool| {
        let mut all = 0usize;
        let mut any = 0usize;
        let mut hist = vec![0u64; n];
        for f in frames {
            for &q in &queries {
                let top = top_k(&f.data()[q * n..(q + 1) * n], TOP_K);
                let cross = top.iter().filter(|&&t| is_cross(t)).count();
                all += usize::from(cross == TOP_K);
                any += usize::from(cross > 0);
                for t in top {
                    hist[t] += 1;
                }
            }
        }
        let total = queries.len() * frames.len();
        let frac = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
        ModalityStats {
            tokens_available: half,
            tokens_selected: queries.len(),
            queries: total,
            all_cross_modal: frac(all),
            any_cross_modal: frac(any),
            top_k_histogram: hist,
        }
    };
    Ok(AttentionReport {
        frames: frames.len(),
        rows: rows.clone(),
        image: modality(rows.image_queries(), &|t| t >= half),
        lidar: modality(rows.lidar_queries(), &|t| t < half),
    })
}
