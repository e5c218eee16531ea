use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{Stage, TrainConfig};
use super::evaluate::evaluate_predictor;
use super::optim::Adam;
use crate::error::{config_err, invalid, Error, Result};
use crate::losses::{
    cross_entropy_mesh, recon_3d_loss_tensor, reprojection_l1, rotation_mse, scalar, soft_codebook_mixture, LossReport,
};
use crate::model::{predict_tokens, ModelConfig, VqHps};
use crate::synth::{Dataset, SampleRecord, Split};
use crate::vqvae::MeshVqVae;

/// Tensors shared by every step.
pub struct StepContext<'a> {
    pub codec: &'a MeshVqVae,
    /// `(J, V)` joint regressor.
    pub regressor: Tensor,
    /// `(S, L)` codebook, used by the soft mixture of the 3D-loss ablation.
    pub codebook: Tensor,
    pub config: &'a TrainConfig,
}

impl<'a> StepContext<'a> {
    pub fn new(codec: &'a MeshVqVae, dataset: &Dataset, config: &'a TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        let r = &dataset.regressor;
        let regressor = Tensor::from_vec(r.weights().to_vec(), (r.joint_count(), r.vertex_count()), device)?.to_dtype(dtype)?;
        Ok(StepContext {
            codec,
            regressor,
            codebook: codec.codebook().to_tensor(dtype, device)?,
            config,
        })
    }

    fn weights(&self) -> BTreeMap<String, f64> {
        let w = &self.config.loss_weights;
        [("mesh_ce", w.mesh_ce), ("rot", w.rot), ("reproj", w.reproj), ("recon_3d", w.recon_3d)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }
}

/// Loss of one batch.
///
/// * token cross-entropy reaches only the mesh branch (the logit head sees a
///   detached rotation and camera);
/// * the rotation MSE reaches only the rotation branch;
/// * the reprojection term uses joints of the hard-decoded predicted tokens,
///   held constant, so it reaches the rotation and the camera only;
/// * with the 3D-loss ablation the cross-entropy is replaced by the mean
///   vertex distance of the oriented soft-mixture decode, with the rotation
///   detached.
pub fn predictor_losses(model: &VqHps, ctx: &StepContext, batch: &[&SampleRecord]) -> Result<(Tensor, LossReport)> {
    let (dtype, device) = (model.dtype(), model.device().clone());
    let b = batch.len();
    let images: Vec<_> = batch.iter().map(|r| &r.image).collect();
    let out = model.forward_tensors(&model.images_tensor(&images)?)?;
    let flags = &ctx.config.ablation;
    let w = &ctx.config.loss_weights;

    let gt_rot: Vec<f64> = batch.iter().flat_map(|r| r.gt_rotation.to_row_major()).collect();
    let gt_rot = Tensor::from_vec(gt_rot, (b, 3, 3), &device)?.to_dtype(dtype)?;
    let rot = rotation_mse(&out.rotation, &gt_rot)?;
    let mut total = (&rot * w.rot)?;
    let rot_value = scalar(&rot)?;

    let mut mesh_ce = None;
    let mut recon_3d = None;
    if flags.loss_3d {
        let mix = soft_codebook_mixture(&out.logits, &ctx.codebook, 1.0)?;
        let verts = ctx.codec.decode_tensor(&mix)?;
        let oriented = verts.matmul(&out.rotation.detach().transpose(1, 2)?)?;
        let gt: Vec<f64> = batch
            .iter()
            .map(|r| r.oriented_mesh())
            .collect::<Result<Vec<_>>>()?
            .iter()
            .flat_map(|m| m.vertices().iter().flat_map(|v| [v.x, v.y, v.z]).collect::<Vec<_>>())
            .collect();
        let gt = Tensor::from_vec(gt, oriented.dims(), &device)?.to_dtype(dtype)?;
        let l = recon_3d_loss_tensor(&oriented, &gt)?;
        recon_3d = Some(scalar(&l)?);
        total = (total + (l * w.recon_3d)?)?;
    } else {
        let gt: Vec<u32> = batch
            .iter()
            .map(|r| r.gt_tokens.as_ref().ok_or_else(|| invalid!("record {} has no ground-truth tokens", r.id)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flat_map(|t| t.indices().to_vec())
            .collect();
        let ce = cross_entropy_mesh(&out.logits, &gt)?;
        mesh_ce = Some(scalar(&ce)?);
        total = (total + (ce * w.mesh_ce)?)?;
    }

    let mut reproj = None;
    if !flags.no_reprojection {
        let tokens: Vec<u32> = predict_tokens(&out.logits)?.into_iter().flat_map(|t| t.0).collect();
        let verts = ctx.codec.decode_tensor(&ctx.codec.tokens_tensor(&tokens, b)?)?.detach().to_dtype(dtype)?;
        let joints = ctx.regressor.broadcast_matmul(&verts)?;
        let joints = joints.matmul(&out.rotation.transpose(1, 2)?)?;
        let gt2d: Vec<f64> = batch.iter().flat_map(|r| r.gt_joints_2d.iter().flat_map(|p| [p[0], p[1]])).collect();
        let gt2d = Tensor::from_vec(gt2d, (b, joints.dims()[1], 2), &device)?.to_dtype(dtype)?;
        let l = reprojection_l1(&joints, &out.camera, &gt2d)?;
        reproj = Some(scalar(&l)?);
        total = (total + (l * w.reproj)?)?;
    }
    let report = LossReport::new(mesh_ce, rot_value, reproj, recon_3d, ctx.weights());
    Ok((total, report))
}

#[derive(Clone, Debug, Serialize)]
pub struct PredictorEpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub val_pve_mm: Option<f64>,
    pub val_token_accuracy: Option<f64>,
    pub learning_rate: f64,
}

pub struct PredictorTrainOutcome {
    pub model: VqHps,
    pub history: Vec<PredictorEpochLog>,
    /// One report per optimizer step.
    pub steps: Vec<LossReport>,
    pub best_epoch: usize,
    pub val_pve_mm: Option<f64>,
    /// Codec parameter checksum, identical before and after training.
    pub codec_checksum: String,
    pub aborted: Option<String>,
}

/// Checks that `dataset` was tokenized by exactly this codec.
pub fn check_dataset_codec(dataset: &Dataset, codec: &MeshVqVae) -> Result<()> {
    let fp = codec.fingerprint()?;
    match &dataset.manifest.codec_fingerprint {
        Some(d) if *d == fp => Ok(()),
        Some(d) => Err(config_err!(
            "dataset tokens come from codec {} but codec {} was supplied; re-tokenize the dataset",
            &d[..d.len().min(12)],
            &fp[..12]
        )),
        None => Err(config_err!("dataset has no ground-truth tokens; tokenize it with the codec first")),
    }
}

/// Trains a predictor against a frozen codec, keeping the epoch with the
/// lowest validation PVE.
pub fn train_predictor(config: &TrainConfig, initial_pose: &[f64], dataset: &Dataset, codec: &MeshVqVae) -> Result<PredictorTrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Predictor {
        return Err(config_err!("train_predictor needs a predictor-stage config"));
    }
    check_dataset_codec(dataset, codec)?;
    let checksum_before = codec.params().checksum()?;
    let mut model_config = config
        .model
        .clone()
        .unwrap_or_else(|| ModelConfig::desk(codec.latent_cells(), codec.config().codebook_size));
    model_config.logit_head = config.logit_head;
    let mut model = VqHps::for_codec(model_config, initial_pose, codec, DType::F32, &Device::Cpu, config.seed)?;
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(invalid!("predictor training needs at least one training record"));
    }
    let has_val = !dataset.split(Split::Val).is_empty();
    let ctx = StepContext::new(codec, dataset, config, DType::F32, &Device::Cpu)?;
    let steps_per_epoch = {
        let full = train.len().div_ceil(config.batch_size);
        if config.max_steps_per_epoch > 0 {
            full.min(config.max_steps_per_epoch)
        } else {
            full
        }
    };
    let mut opt = Adam::new(model.params().vars(), config.learning_rate, steps_per_epoch * config.epochs, Some(config.grad_clip))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9ed1c7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut history, mut steps) = (Vec::new(), Vec::new());
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
    let (mut since_best, mut aborted) = (0, None);

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = opt.learning_rate();
        let mut sum = 0.0;
        for step in 0..steps_per_epoch {
            let idx = &order[step * config.batch_size..((step + 1) * config.batch_size).min(order.len())];
            let batch: Vec<&SampleRecord> = idx.iter().map(|&i| train[i]).collect();
            let (loss, report) = predictor_losses(&model, &ctx, &batch)?;
            if !report.weighted_total.is_finite() {
                aborted = Some(format!("non-finite predictor loss at epoch {epoch}, step {step}"));
                break 'epochs;
            }
            opt.backward_step(&loss)?;
            sum += report.weighted_total;
            log::debug!("{}", serde_json::to_string(&report)?);
            steps.push(report);
        }
        let (val_pve, val_acc) = if has_val {
            let s = evaluate_predictor(&model, codec, dataset, Split::Val)?.summary;
            (s.as_ref().map(|s| s.pve_mm), s.and_then(|s| s.token_accuracy))
        } else {
            (None, None)
        };
        let log = PredictorEpochLog {
            epoch,
            mean_total: sum / steps_per_epoch as f64,
            val_pve_mm: val_pve,
            val_token_accuracy: val_acc,
            learning_rate: lr,
        };
        log::info!("{}", serde_json::to_string(&log)?);
        history.push(log);
        let Some(pve) = val_pve else { continue };
        if best.as_ref().is_none_or(|(b, _, _)| pve < *b) {
            best = Some((pve, epoch, model.params().snapshot()?));
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
            model.params().restore(&snap)?;
            (Some(pve), epoch)
        }
        None => (None, history.len().saturating_sub(1)),
    };
    let checksum_after = codec.params().checksum()?;
    if checksum_after != checksum_before {
        return Err(Error::Runtime("codec parameters changed during predictor training".into()));
    }
    model.training_record = Some(serde_json::json!({
        "config": config,
        "best_epoch": best_epoch,
        "val_pve_mm": val_pve_mm,
        "dataset_fingerprint": dataset.fingerprint(),
    }));
    Ok(PredictorTrainOutcome {
        model,
        history,
        steps,
        best_epoch,
        val_pve_mm,
        codec_checksum: checksum_after,
        aborted,
    })
}
