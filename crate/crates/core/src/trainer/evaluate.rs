use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mesh::{apply_orientation, mpjpe, pa_mpjpe, pve, CameraParams, Rotation};
use crate::model::VqHps;
use crate::synth::{Dataset, SampleRecord, Split};
use crate::vqvae::{MeshVqVae, TokenSequence};

/// What a predictor emits for one record before decoding.
#[derive(Clone, Debug)]
pub struct RawPrediction {
    pub tokens: TokenSequence,
    pub rotation: Rotation,
    pub camera: CameraParams,
}

pub trait MeshPredictor {
    fn name(&self) -> &str;
    fn predict_records(&self, records: &[&SampleRecord]) -> Result<Vec<RawPrediction>>;
}

impl MeshPredictor for VqHps {
    fn name(&self) -> &str {
        "model"
    }

    fn predict_records(&self, records: &[&SampleRecord]) -> Result<Vec<RawPrediction>> {
        let images: Vec<_> = records.iter().map(|r| &r.image).collect();
        Ok(self
            .predict_raw(&images)?
            .into_iter()
            .map(|(tokens, rotation, camera)| RawPrediction {
                tokens,
                rotation,
                camera,
            })
            .collect())
    }
}

/// Ground-truth tokens, rotation and camera: the codec's quantization floor.
pub struct GroundTruthOracle;

impl MeshPredictor for GroundTruthOracle {
    fn name(&self) -> &str {
        "ground_truth_tokens"
    }

    fn predict_records(&self, records: &[&SampleRecord]) -> Result<Vec<RawPrediction>> {
        records
            .iter()
            .map(|r| {
                Ok(RawPrediction {
                    tokens: r.gt_tokens.clone().ok_or_else(|| invalid!("record {} has no ground-truth tokens", r.id))?,
                    rotation: r.gt_rotation,
                    camera: r.camera,
                })
            })
            .collect()
    }
}

/// The most frequent training token in every cell, oriented with the
/// rotation and camera of another predictor.
pub struct MeanTokenBaseline<'a> {
    pub tokens: TokenSequence,
    pub pose_source: &'a dyn MeshPredictor,
}

impl<'a> MeanTokenBaseline<'a> {
    pub fn from_dataset(dataset: &Dataset, codebook_size: usize, pose_source: &'a dyn MeshPredictor) -> Result<Self> {
        Ok(MeanTokenBaseline {
            tokens: most_frequent_tokens(dataset.split(Split::Train).iter().filter_map(|r| r.gt_tokens.as_ref()), codebook_size)?,
            pose_source,
        })
    }
}

/// Per-cell mode; ties go to the lowest index.
pub fn most_frequent_tokens<'t>(tokens: impl Iterator<Item = &'t TokenSequence>, codebook_size: usize) -> Result<TokenSequence> {
    let mut counts: Vec<Vec<u64>> = Vec::new();
    for t in tokens {
        if counts.is_empty() {
            counts = vec![vec![0; codebook_size]; t.len()];
        }
        if t.len() != counts.len() {
            return Err(Error::shape("token sequence", counts.len(), t.len()));
        }
        for (cell, &i) in t.indices().iter().enumerate() {
            *counts[cell]
                .get_mut(i as usize)
                .ok_or_else(|| invalid!("token {i} is out of range for S = {codebook_size}"))? += 1;
        }
    }
    if counts.is_empty() {
        return Err(invalid!("no tokenized training records to take the most frequent tokens from"));
    }
    Ok(TokenSequence(
        counts
            .iter()
            .map(|c| {
                let mut best = 0;
                for (i, &n) in c.iter().enumerate() {
                    if n > c[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect(),
    ))
}

impl MeshPredictor for MeanTokenBaseline<'_> {
    fn name(&self) -> &str {
        "mean_token_baseline"
    }

    fn predict_records(&self, records: &[&SampleRecord]) -> Result<Vec<RawPrediction>> {
        Ok(self
            .pose_source
            .predict_records(records)?
            .into_iter()
            .map(|p| RawPrediction {
                tokens: self.tokens.clone(),
                ..p
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: usize,
    pub pve_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub token_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub count: usize,
    pub pve_mm: f64,
    pub median_pve_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub token_accuracy: Option<f64>,
}

impl MetricsSummary {
    pub fn from_samples(samples: &[SampleMetrics]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let mut pves: Vec<f64> = samples.iter().map(|s| s.pve_mm).collect();
        pves.sort_by(f64::total_cmp);
        let mid = pves.len() / 2;
        let median = if pves.len() % 2 == 1 {
            pves[mid]
        } else {
            0.5 * (pves[mid - 1] + pves[mid])
        };
        let acc: Option<Vec<f64>> = samples.iter().map(|s| s.token_accuracy).collect();
        Some(MetricsSummary {
            count: samples.len(),
            pve_mm: mean(|s| s.pve_mm),
            median_pve_mm: median,
            mpjpe_mm: mean(|s| s.mpjpe_mm),
            pa_mpjpe_mm: mean(|s| s.pa_mpjpe_mm),
            token_accuracy: acc.map(|a| a.iter().sum::<f64>() / n),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub predictor: String,
    pub summary: Option<MetricsSummary>,
    /// Reference rows evaluated on the same records.
    #[serde(default)]
    pub comparisons: BTreeMap<String, MetricsSummary>,
    pub samples: Vec<SampleMetrics>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// One row per sample: `id,pve_mm,mpjpe_mm,pa_mpjpe_mm,token_accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,pve_mm,mpjpe_mm,pa_mpjpe_mm,token_accuracy\n");
        for s in &self.samples {
            let acc = s.token_accuracy.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", s.id, s.pve_mm, s.mpjpe_mm, s.pa_mpjpe_mm, acc));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Decodes each prediction, orients it and scores it against the record.
pub fn evaluate_predictor(predictor: &dyn MeshPredictor, codec: &MeshVqVae, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let records = dataset.split(split);
    let mut warnings = Vec::new();
    if records.is_empty() {
        let msg = format!("split {} is empty; nothing to evaluate", split.name());
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut samples = Vec::with_capacity(records.len());
    for chunk in records.chunks(64) {
        let preds = predictor.predict_records(chunk)?;
        let grids = preds.iter().map(|p| codec.dequantize(&p.tokens)).collect::<Result<Vec<_>>>()?;
        let meshes = codec.decode_batch(&grids.iter().collect::<Vec<_>>())?;
        for ((record, pred), canonical) in chunk.iter().zip(&preds).zip(meshes) {
            let oriented = apply_orientation(&canonical, &pred.rotation)?;
            let gt = record.oriented_mesh()?;
            let joints = dataset.regressor.regress(&oriented)?;
            let token_accuracy = record.gt_tokens.as_ref().map(|gt| {
                let hits = gt.indices().iter().zip(pred.tokens.indices()).filter(|(a, b)| a == b).count();
                hits as f64 / gt.len() as f64
            });
            samples.push(SampleMetrics {
                id: record.id,
                pve_mm: pve(&oriented, &gt)?,
                mpjpe_mm: mpjpe(&joints, &record.gt_joints_3d)?,
                pa_mpjpe_mm: pa_mpjpe(&joints, &record.gt_joints_3d)?,
                token_accuracy,
            });
        }
    }
    Ok(EvalReport {
        split,
        predictor: predictor.name().to_string(),
        summary: MetricsSummary::from_samples(&samples),
        comparisons: BTreeMap::new(),
        samples,
        warnings,
    })
}

/// Model metrics plus the mean-token baseline and, when the records carry
/// tokens, the ground-truth-token floor.
pub fn evaluate(model: &VqHps, codec: &MeshVqVae, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    model.check_codec_shape(codec)?;
    let mut report = evaluate_predictor(model, codec, dataset, split)?;
    let tokenized = dataset.records.iter().all(|r| r.gt_tokens.is_some());
    if report.samples.is_empty() || !tokenized {
        if !tokenized {
            report.warnings.push("records carry no ground-truth tokens; comparison rows skipped".into());
        }
        return Ok(report);
    }
    let baseline = MeanTokenBaseline::from_dataset(dataset, codec.config().codebook_size, model)?;
    for p in [&baseline as &dyn MeshPredictor, &GroundTruthOracle] {
        if let Some(s) = evaluate_predictor(p, codec, dataset, split)?.summary {
            report.comparisons.insert(p.name().to_string(), s);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_per_cell_with_low_index_ties() {
        let seqs = [TokenSequence(vec![1, 2, 3]), TokenSequence(vec![1, 0, 2]), TokenSequence(vec![0, 0, 3])];
        assert_eq!(most_frequent_tokens(seqs.iter(), 4).unwrap(), TokenSequence(vec![1, 0, 3]));
        let ties = [TokenSequence(vec![3]), TokenSequence(vec![2])];
        assert_eq!(most_frequent_tokens(ties.iter(), 4).unwrap(), TokenSequence(vec![2]));
        assert!(most_frequent_tokens(std::iter::empty(), 4).is_err());
        assert!(most_frequent_tokens([TokenSequence(vec![4])].iter(), 4).is_err());
    }

    #[test]
    fn summary_statistics() {
        let s = |id, pve| SampleMetrics {
            id,
            pve_mm: pve,
            mpjpe_mm: 2.0 * pve,
            pa_mpjpe_mm: pve,
            token_accuracy: Some(0.5),
        };
        let m = MetricsSummary::from_samples(&[s(0, 1.0), s(1, 3.0), s(2, 8.0), s(3, 4.0)]).unwrap();
        assert_eq!((m.count, m.pve_mm, m.median_pve_mm, m.mpjpe_mm), (4, 4.0, 3.5, 8.0));
        assert_eq!(m.token_accuracy, Some(0.5));
        assert!(MetricsSummary::from_samples(&[]).is_none());
    }
}
