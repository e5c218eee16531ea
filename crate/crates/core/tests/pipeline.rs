use candle_core::{DType, Device};
use meshtok::model::VqHps;
use meshtok::synth::{build_dataset, ArticulatedTemplate, Dataset, Split};
use meshtok::trainer::{evaluate, train_codec, train_predictor, Stage, TrainConfig};
use meshtok::vqvae::{CodecConfig, MeshVqVae};

fn short(stage: Stage) -> TrainConfig {
    let mut cfg = match stage {
        Stage::Codec => TrainConfig::desk_codec(),
        Stage::Predictor => TrainConfig::desk_predictor(),
    };
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.max_steps_per_epoch = 2;
    cfg.kmeans_iterations = 2;
    cfg
}

#[test]
fn dataset_rebuild_and_reload_keep_fingerprint() {
    let template = ArticulatedTemplate::desk();
    let a = build_dataset(&template, 12, 3, None).unwrap();
    let b = build_dataset(&template, 12, 3, None).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), build_dataset(&template, 12, 4, None).unwrap().fingerprint());

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.len(), a.len());
    assert_eq!(back.fingerprint(), a.fingerprint());
    for split in [Split::Train, Split::Val, Split::Test] {
        assert_eq!(back.split(split).len(), a.split(split).len());
    }
}

#[test]
fn codec_save_load_preserves_tokens() {
    let template = ArticulatedTemplate::desk();
    let dataset = build_dataset(&template, 24, 5, None).unwrap();
    let codec = train_codec(&short(Stage::Codec), &CodecConfig::desk(), &dataset).unwrap().codec;

    let dir = tempfile::tempdir().unwrap();
    codec.save(dir.path()).unwrap();
    let loaded = MeshVqVae::load(dir.path(), DType::F32, &Device::Cpu, false).unwrap();
    assert_eq!(loaded.fingerprint().unwrap(), codec.fingerprint().unwrap());

    let meshes: Vec<_> = dataset.split(Split::Train).iter().map(|r| &r.gt_canonical).take(4).collect();
    assert_eq!(loaded.tokenize_batch(&meshes).unwrap(), codec.tokenize_batch(&meshes).unwrap());
    let tokens = codec.tokenize(meshes[0]).unwrap();
    assert_eq!(tokens.0.len(), codec.latent_cells());
    assert!(tokens.0.iter().all(|&t| (t as usize) < codec.config().codebook_size));
}

#[test]
fn short_predictor_run_evaluates_and_reloads() {
    let template = ArticulatedTemplate::desk();
    let mut dataset = build_dataset(&template, 24, 9, None).unwrap();
    let codec = train_codec(&short(Stage::Codec), &CodecConfig::desk(), &dataset).unwrap().codec;
    dataset.populate_tokens(&codec).unwrap();

    let out = train_predictor(&short(Stage::Predictor), &template.initial_pose().unwrap(), &dataset, &codec).unwrap();
    assert!(out.aborted.is_none());
    assert_eq!(out.history.len(), 2);
    assert!(out.steps.iter().all(|s| s.weighted_total.is_finite()));

    let report = evaluate(&out.model, &codec, &dataset, Split::Test).unwrap();
    let summary = report.summary.clone().unwrap();
    assert_eq!(report.samples.len(), dataset.split(Split::Test).len());
    assert!(summary.pve_mm.is_finite() && summary.mpjpe_mm.is_finite());

    let dir = tempfile::tempdir().unwrap();
    out.model.save(dir.path()).unwrap();
    let loaded = VqHps::load(dir.path(), DType::F32, &Device::Cpu, false).unwrap();
    let again = evaluate(&loaded, &codec, &dataset, Split::Test).unwrap();
    for (x, y) in report.samples.iter().zip(&again.samples) {
        assert_eq!(x.pve_mm.to_bits(), y.pve_mm.to_bits());
    }
}
