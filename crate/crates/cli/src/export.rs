//! Attention-map export for external plotting.

use std::fs;
use std::path::{Path, PathBuf};

use gist_core::data::read_dataset;
use gist_core::tensor::{Scalar, Tape};
use gist_core::vit::{load_checkpoint, Images, TokenRole, Vit};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{short, ExperimentConfig, Precision};
use crate::error::{CliError, CliResult};

/// Attention probabilities of one head in one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadAttention {
    pub layer: usize,
    pub head: usize,
    /// Role of every sequence position: CLS, PATCH, PROMPT or GIST.
    pub tokens: Vec<String>,
    /// `[sample][query][key]`; each query row sums to 1.
    pub samples: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportIndex {
    pub checkpoint_sha256: String,
    pub config_hash: Option<String>,
    pub sample_ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub files: Vec<String>,
}

pub fn role_name(role: TokenRole) -> &'static str {
    match role {
        TokenRole::Cls => "CLS",
        TokenRole::Patch => "PATCH",
        TokenRole::Prompt => "PROMPT",
        TokenRole::Gist => "GIST",
    }
}

/// Attention of an image batch, computed the way evaluation runs the model
/// (Gist token included when attached).
pub fn attention_maps<F: Scalar>(model: &Vit<F>, pixels: &[f32], batch: usize) -> CliResult<Vec<HeadAttention>> {
    let cfg = model.config();
    let images = Images {
        data: pixels,
        batch,
        channels: cfg.channels,
        height: cfg.image_side,
        width: cfg.image_side,
    };
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, images, model.gist_len().is_some())?;
    let tokens: Vec<String> = fwd.state.layout.iter().map(|&r| role_name(r).to_string()).collect();
    let (heads, seq) = (cfg.num_heads, tokens.len());
    let mut out = Vec::with_capacity(cfg.num_layers * heads);
    for (layer, &node) in fwd.attention.iter().enumerate() {
        let probs = tape
            .attention_probs(node)
            .ok_or_else(|| CliError::Runtime(format!("layer {layer} has no attention node")))?;
        for head in 0..heads {
            let samples = (0..batch)
                .map(|b| {
                    let base = (b * heads + head) * seq * seq;
                    probs[base..base + seq * seq]
                        .chunks(seq)
                        .map(|row| row.iter().map(|p| p.to_f64()).collect())
                        .collect()
                })
                .collect();
            out.push(HeadAttention {
                layer,
                head,
                tokens: tokens.clone(),
                samples,
            });
        }
    }
    Ok(out)
}

pub struct ExportArgs<'a> {
    pub checkpoint: &'a Path,
    pub images: &'a Path,
    pub out: &'a Path,
    pub count: usize,
    pub precision: Precision,
    /// When given, both files must carry a hash produced by this config.
    pub config: Option<&'a ExperimentConfig>,
}

/// Every hash an artifact produced by `cfg` may carry.
fn known_hashes(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = vec![cfg.pretrain_hash()];
    for task in &cfg.tasks {
        for &mode in &cfg.modes {
            out.extend(cfg.seeds.iter().map(|&s| cfg.run_hash(task, mode, s)));
        }
    }
    out
}

fn verify(what: &Path, hash: Option<&str>, known: &[String]) -> CliResult<()> {
    match hash {
        Some(h) if known.iter().any(|k| k == h) => Ok(()),
        Some(h) => Err(CliError::Validation(format!(
            "{} carries config hash {} which this config did not produce",
            what.display(),
            short(h)
        ))),
        None => Err(CliError::Validation(format!(
            "{} carries no config hash",
            what.display()
        ))),
    }
}

/// Writes `layer<l>-head<h>.json` per head plus `index.json` into
/// `<out>/attention-<checkpoint digest>/`.
pub fn export_attention(args: &ExportArgs<'_>) -> CliResult<PathBuf> {
    match args.precision {
        Precision::F32 => export_as::<f32>(args),
        Precision::F64 => export_as::<f64>(args),
    }
}

fn export_as<F: Scalar>(args: &ExportArgs<'_>) -> CliResult<PathBuf> {
    let bytes = fs::read(args.checkpoint)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", args.checkpoint.display())))?;
    let (model, meta) =
        load_checkpoint::<F>(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", args.checkpoint.display())))?;
    let (data, header) =
        read_dataset(args.images).map_err(|e| CliError::Runtime(format!("{}: {e}", args.images.display())))?;
    if let Some(cfg) = args.config {
        let known = known_hashes(cfg);
        verify(args.checkpoint, meta.config_hash.as_deref(), &known)?;
        verify(args.images, header.config_hash.as_deref(), &known)?;
    }
    let cfg = model.config();
    if data.channels != cfg.channels || data.side != cfg.image_side {
        return Err(CliError::Validation(format!(
            "image size mismatch: dataset has {}x{}x{}, model expects {}x{}x{}",
            data.channels, data.side, data.side, cfg.channels, cfg.image_side, cfg.image_side
        )));
    }
    if args.count == 0 {
        return Err(CliError::Validation("--count must be at least 1".into()));
    }
    let picked: Vec<usize> = (0..args.count.min(data.len())).collect();
    let (pixels, labels) = data.gather(&picked);
    let maps = attention_maps(&model, &pixels, picked.len())?;

    let digest = hex::encode(Sha256::digest(&bytes));
    let dir = args.out.join(format!("attention-{}", short(&digest)));
    fs::create_dir_all(&dir)?;
    let mut files = Vec::with_capacity(maps.len());
    for m in &maps {
        let name = format!("layer{}-head{}.json", m.layer, m.head);
        fs::write(dir.join(&name), serde_json::to_string(m).expect("attention serializes"))?;
        files.push(name);
    }
    let index = ExportIndex {
        checkpoint_sha256: digest,
        config_hash: meta.config_hash,
        sample_ids: picked.iter().map(|&i| data.ids[i]).collect(),
        labels,
        files,
    };
    fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index).expect("index serializes") + "\n",
    )?;
    Ok(dir)
}
