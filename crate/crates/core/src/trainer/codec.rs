use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{Stage, TrainConfig};
use super::optim::Adam;
use crate::error::{config_err, invalid, Result};
use crate::mesh::{pve, CanonicalMesh, RegisteredMesh};
use crate::synth::{Dataset, Split};
use crate::vqvae::{Codebook, CodecConfig, MeshVqVae};

#[derive(Clone, Debug, Serialize)]
pub struct CodecEpochLog {
    pub epoch: usize,
    pub quantized: bool,
    pub recon_loss: f64,
    pub commit_loss: f64,
    pub val_pve_mm: f64,
    pub codebook_usage: f64,
    pub reseeded: usize,
    pub learning_rate: f64,
}

pub struct CodecTrainOutcome {
    pub codec: MeshVqVae,
    pub history: Vec<CodecEpochLog>,
    pub best_epoch: usize,
    pub val_pve_mm: f64,
    /// Set when training stopped on a non-finite loss; `codec` then holds
    /// the last good state.
    pub aborted: Option<String>,
}

/// Mean round-trip PVE (mm) of `meshes` through `codec`.
pub fn reconstruction_pve(codec: &MeshVqVae, meshes: &[&CanonicalMesh]) -> Result<f64> {
    if meshes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in meshes.chunks(128) {
        let tokens = codec.tokenize_batch(chunk)?;
        let grids = tokens.iter().map(|t| codec.dequantize(t)).collect::<Result<Vec<_>>>()?;
        let decoded = codec.decode_batch(&grids.iter().collect::<Vec<_>>())?;
        for (d, m) in decoded.iter().zip(chunk) {
            total += pve(d.as_mesh(), m.as_mesh())?;
        }
    }
    Ok(total / meshes.len() as f64)
}

/// Fraction of codebook entries selected by at least one cell of `meshes`.
pub fn codebook_usage(codec: &MeshVqVae, meshes: &[&CanonicalMesh]) -> Result<f64> {
    let mut used = vec![false; codec.config().codebook_size];
    for chunk in meshes.chunks(256) {
        for t in codec.tokenize_batch(chunk)? {
            for &i in t.indices() {
                used[i as usize] = true;
            }
        }
    }
    Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
}

fn latent_rows(codec: &MeshVqVae, meshes: &[&RegisteredMesh]) -> Result<Vec<f32>> {
    let mut rows = Vec::new();
    for chunk in meshes.chunks(128) {
        let z = codec.encode_tensor(&codec.meshes_tensor(chunk)?)?;
        rows.extend(z.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
    }
    Ok(rows)
}

struct Snapshot {
    params: BTreeMap<String, Tensor>,
    codebook: Codebook,
}

/// Trains a codec on the canonical meshes of the training split, selecting
/// the epoch with the lowest validation PVE.
pub fn train_codec(config: &TrainConfig, codec_config: &CodecConfig, dataset: &Dataset) -> Result<CodecTrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Codec {
        return Err(config_err!("train_codec needs a codec-stage config"));
    }
    let train_canonical: Vec<&CanonicalMesh> = dataset.split(Split::Train).iter().map(|r| &r.gt_canonical).collect();
    let train: Vec<&RegisteredMesh> = train_canonical.iter().map(|m| m.as_mesh()).collect();
    let mut val: Vec<&CanonicalMesh> = dataset.split(Split::Val).iter().map(|r| &r.gt_canonical).collect();
    if val.is_empty() {
        val = train_canonical.iter().take(64).copied().collect();
    }
    if train.is_empty() {
        return Err(invalid!("codec training needs at least one training mesh"));
    }
    let mut codec = MeshVqVae::new(codec_config.clone(), dataset.topology.clone(), DType::F32, &Device::Cpu, config.seed)?;
    codec.data_fingerprint = Some(dataset.fingerprint().to_string());
    let steps_per_epoch = {
        let full = train.len().div_ceil(config.batch_size);
        if config.max_steps_per_epoch > 0 {
            full.min(config.max_steps_per_epoch)
        } else {
            full
        }
    };
    let mut opt = Adam::new(
        codec.params().vars(),
        config.learning_rate,
        steps_per_epoch * config.epochs,
        Some(config.grad_clip),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc0dec);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut since_best = 0;
    let mut aborted = None;
    let warmup = config.codec_warmup_epochs.min(config.epochs.saturating_sub(1));

    'epochs: for epoch in 0..config.epochs {
        let quantized = epoch >= warmup;
        if quantized && epoch == warmup {
            let rows = latent_rows(&codec, &train)?;
            let cb = Codebook::kmeans(
                codec_config.codebook_size,
                codec_config.latent_dim,
                &rows,
                config.kmeans_iterations,
                &mut rng,
            )?;
            codec.set_codebook(cb)?;
        }
        codec.codebook_mut().reset_usage();
        order.shuffle(&mut rng);
        let (mut recon_sum, mut commit_sum) = (0.0, 0.0);
        let mut recent_latents: Vec<f32> = Vec::new();
        let lr = opt.learning_rate();
        for step in 0..steps_per_epoch {
            let idx = &order[step * config.batch_size..((step + 1) * config.batch_size).min(order.len())];
            let batch: Vec<&RegisteredMesh> = idx.iter().map(|&i| train[i]).collect();
            let x = codec.meshes_tensor(&batch)?;
            let (loss, recon, commit, latent_flat, tokens) = if quantized {
                let fwd = codec.forward_vq(&x)?;
                let (loss, recon, commit) = codec.training_loss(&fwd, &x)?;
                let flat: Vec<f32> = fwd.latent.detach().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
                (loss, recon, commit.to_scalar::<f32>()? as f64, flat, fwd.tokens)
            } else {
                let z = codec.encode_tensor(&x)?;
                let out = codec.decode_tensor(&z)?;
                let recon = (&out - &x)?.sqr()?.sum(candle_core::D::Minus1)?.mean_all()?;
                (recon.clone(), recon, 0.0, Vec::new(), Vec::new())
            };
            let loss_value = loss.to_scalar::<f32>()? as f64;
            if !loss_value.is_finite() {
                aborted = Some(format!("non-finite codec loss at epoch {epoch}, step {step}"));
                break 'epochs;
            }
            opt.backward_step(&loss)?;
            recon_sum += recon.to_scalar::<f32>()? as f64;
            commit_sum += commit;
            if quantized {
                let decay = codec_config.ema_decay;
                let cb = codec.codebook_mut();
                cb.ema_update(&latent_flat, &tokens, decay);
                cb.record_usage(&tokens);
                recent_latents = latent_flat;
            }
        }
        let usage = codec.codebook().usage_fraction();
        let reseeded = if quantized && epoch + 1 < config.epochs {
            codec.codebook_mut().reseed_unused(&recent_latents, &mut rng)
        } else {
            0
        };
        let val_pve = reconstruction_pve(&codec, &val)?;
        let log = CodecEpochLog {
            epoch,
            quantized,
            recon_loss: recon_sum / steps_per_epoch as f64,
            commit_loss: commit_sum / steps_per_epoch as f64,
            val_pve_mm: val_pve,
            codebook_usage: usage,
            reseeded,
            learning_rate: lr,
        };
        log::info!("{}", serde_json::to_string(&log)?);
        history.push(log);
        if !quantized {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_pve < *b) {
            best = Some((
                val_pve,
                epoch,
                Snapshot {
                    params: codec.params().snapshot()?,
                    codebook: codec.codebook().clone(),
                },
            ));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                break;
            }
        }
    }
    let (val_pve_mm, best_epoch) = match best {
        Some((pve, epoch, snap)) => {
            codec.params().restore(&snap.params)?;
            codec.set_codebook(snap.codebook)?;
            (pve, epoch)
        }
        None => (f64::NAN, 0),
    };
    codec.reconstruction_pve_mm = val_pve_mm.is_finite().then_some(val_pve_mm);
    Ok(CodecTrainOutcome {
        codec,
        history,
        best_epoch,
        val_pve_mm,
        aborted,
    })
}
