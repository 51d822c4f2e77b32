//! `attn-stats`: top-k cross-modal attention statistics of a trained
//! transformer-fusion model.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use transfuser_core::fusion::{attention_stats, AttentionReport};
use transfuser_core::model::{attention_maps, Method, ModelError};
use transfuser_core::parallel::map_indexed;
use transfuser_core::sim::dataset::Manifest;
use transfuser_core::tensor::{write_blob_file, Tensor};
use transfuser_core::train::{load_checkpoint, load_samples};

use crate::{load_dataset, write_json, CliError, Result, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnSummary {
    pub checkpoint: PathBuf,
    /// Backbone stage whose fusion attention is analysed.
    pub stage: usize,
    /// Transformer layer, negative counting from the last.
    pub layer: isize,
    pub report: AttentionReport,
}

impl fmt::Display for AttnSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.report;
        writeln!(f, "{} frames, stage {} last layer, top-{}", r.frames, self.stage, transfuser_core::fusion::TOP_K)?;
        for (name, rows, m) in [("image", r.rows.image_rows, &r.image), ("lidar", r.rows.lidar_rows, &r.lidar)] {
            writeln!(
                f,
                "{name}: {} of {} tokens (rows {}-{}); all top-k cross-modal {:.2}%, at least one {:.2}%",
                m.tokens_selected,
                m.tokens_available,
                rows[0],
                rows[1],
                100.0 * m.all_cross_modal,
                100.0 * m.any_cross_modal
            )?;
            let mut hist: Vec<(usize, u64)> = m.top_k_histogram.iter().copied().enumerate().filter(|p| p.1 > 0).collect();
            hist.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let top: Vec<String> = hist.iter().take(8).map(|(i, c)| format!("{i}:{c}")).collect();
            writeln!(f, "  most attended tokens {}", top.join(" "))?;
        }
        write!(f, "checkpoint {}", self.checkpoint.display())
    }
}

pub fn attn_stats(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<AttnSummary> {
    cfg.validate()?;
    if !checkpoint.join("checkpoint.json").exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", checkpoint.display())));
    }
    let (m, trainer) = load_checkpoint(checkpoint)?;
    let spec = m.spec;
    if spec.method != Method::Transfuser {
        return Err(ModelError::Unsupported(spec.method).into());
    }
    let rows = &cfg.attention.rows;
    if rows.grid != spec.fusion.token_grid {
        return Err(CliError::Usage(format!(
            "attention.rows.grid {} does not match the checkpoint token grid {}",
            rows.grid, spec.fusion.token_grid
        )));
    }
    let manifest = load_dataset(data, &spec.rig, spec.profile.name())?;
    let n = cfg.attention.frames.min(manifest.frames.len());
    let subset = Manifest {
        frames: manifest.frames[..n].to_vec(),
        ..manifest
    };
    let samples = load_samples(&spec, data, &subset, None)?;
    let maps = map_indexed(samples.len(), |i| attention_maps(&spec, &trainer.params, &samples[i].input, -1))
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let mut dump: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut last = Vec::with_capacity(maps.len());
    let mut stage = 0;
    for (i, frame) in maps.into_iter().enumerate() {
        for (k, t) in &frame {
            dump.push((format!("frame{i:05}.stage{k}"), t.clone()));
        }
        let (k, t) = frame.into_iter().last().expect("at least one fused scale");
        stage = k;
        last.push(t);
    }
    std::fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write_blob_file(&out.join("attention.tfw"), &dump)?;
    let summary = AttnSummary {
        checkpoint: checkpoint.to_path_buf(),
        stage,
        layer: -1,
        report: attention_stats(&last, rows)?,
    };
    write_json(&out.join("attention_report.json"), &summary)?;
    Ok(summary)
}
