use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use meshtok::mesh::obj::{read_obj, write_obj};
use meshtok::mesh::{CanonicalMesh, RegisteredMesh};
use meshtok::model::VqHps;
use meshtok::synth::{build_dataset_sized, ArticulatedTemplate, Dataset, Split};
use meshtok::trainer::{evaluate, train_codec, train_predictor, Stage, TrainConfig};
use meshtok::vqvae::{interpolate_latent, swap_body_part, CodecConfig, LatentGrid, MeshVqVae, TokenFile, TokenSequence};
use serde_json::json;

use crate::{CodecCommand, Command, CommandResult, EditCommand, Pair, SplitArg, StageArg};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Missing(PathBuf),
    Core(meshtok::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Missing(_) => EXIT_VALIDATION,
            CliError::Core(e) if e.is_validation() => EXIT_VALIDATION,
            CliError::Core(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Missing(p) => write!(f, "input path {} does not exist", p.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<meshtok::Error> for CliError {
    fn from(e: meshtok::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(meshtok::Error::Runtime(e.to_string()))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn ok(artifacts: Vec<PathBuf>, summary: serde_json::Value) -> Result<CommandResult> {
    Ok(CommandResult {
        exit_code: 0,
        artifacts,
        summary,
    })
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn load_codec(dir: &Path) -> Result<MeshVqVae> {
    exists(dir)?;
    Ok(MeshVqVae::load(dir, DType::F32, &Device::Cpu, false)?)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    exists(dir)?;
    Ok(Dataset::load(dir)?)
}

/// Single-threaded kernels, so repeated runs give identical weights.
fn apply_deterministic_mode(config: &TrainConfig) {
    if config.deterministic_mode() {
        log::info!("deterministic mode: single-threaded kernels");
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
}

pub fn run(command: Command) -> Result<CommandResult> {
    match command {
        Command::GenData {
            count,
            seed,
            out,
            codec,
            image_size,
        } => gen_data(count as usize, seed, &out, codec.as_deref(), image_size),
        Command::Train {
            stage,
            config,
            data,
            out,
            codec,
            ablation,
            epochs,
        } => {
            let mut cfg = match (&config, stage) {
                (Some(p), _) => {
                    exists(p)?;
                    TrainConfig::load(p)?
                }
                (None, StageArg::Codec) => TrainConfig::desk_codec(),
                (None, StageArg::Predictor) => TrainConfig::desk_predictor(),
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            match stage {
                StageArg::Codec => {
                    if ablation.is_some() || codec.is_some() {
                        return Err(CliError::Usage("--ablation and --codec apply to the predictor stage only".into()));
                    }
                    cfg.stage = Stage::Codec;
                    train_codec_cmd(cfg, &data, &out)
                }
                StageArg::Predictor => {
                    let codec = codec.ok_or_else(|| CliError::Usage("the predictor stage needs --codec".into()))?;
                    if let Some(a) = &ablation {
                        cfg = cfg.with_ablation(a)?;
                    }
                    cfg.stage = Stage::Predictor;
                    train_predictor_cmd(cfg, &data, &codec, &out)
                }
            }
        }
        Command::Eval {
            model,
            codec,
            data,
            report,
            split,
        } => eval(&model, &codec, &data, &report, split),
        Command::Codec(CodecCommand::Encode { mesh, codec, out }) => encode(&mesh, &codec, &out),
        Command::Codec(CodecCommand::Decode { tokens, codec, out }) => decode(&tokens, &codec, &out),
        Command::Edit(EditCommand::Swap { pair, indices }) => swap(&pair, &indices),
        Command::Edit(EditCommand::Interp { pair, t, frames }) => interp(&pair, t, frames),
    }
}

fn gen_data(count: usize, seed: u64, out: &Path, codec: Option<&Path>, image_size: usize) -> Result<CommandResult> {
    let codec = codec.map(load_codec).transpose()?;
    let template = ArticulatedTemplate::desk();
    let ds = build_dataset_sized(&template, count, seed, image_size, codec.as_ref())?;
    ds.save(out)?;
    ok(
        vec![out.to_path_buf(), out.join("manifest.json")],
        json!({
            "count": ds.len(),
            "fingerprint": ds.fingerprint(),
            "split_sizes": ds.manifest.split_sizes,
            "codec_fingerprint": ds.manifest.codec_fingerprint,
        }),
    )
}

fn write_lines<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_config(out: &Path, cfg: &TrainConfig) -> Result<PathBuf> {
    let path = out.join("config.toml");
    fs::write(&path, cfg.to_toml()?)?;
    Ok(path)
}

fn train_codec_cmd(cfg: TrainConfig, data: &Path, out: &Path) -> Result<CommandResult> {
    cfg.validate()?;
    apply_deterministic_mode(&cfg);
    let ds = load_dataset(data)?;
    let codec_config = cfg.codec.clone().unwrap_or_else(CodecConfig::desk);
    let outcome = train_codec(&cfg, &codec_config, &ds)?;
    let manifest = outcome.codec.save(out)?;
    let log = out.join("train_log.jsonl");
    write_lines(&log, &outcome.history)?;
    let config = write_config(out, &cfg)?;
    let summary = json!({
        "stage": "codec",
        "val_pve_mm": manifest.reconstruction_pve_mm,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
        "codebook_usage": outcome.history.last().map(|h| h.codebook_usage),
        "fingerprint": manifest.fingerprint,
        "aborted": outcome.aborted,
    });
    Ok(CommandResult {
        exit_code: if outcome.aborted.is_some() { EXIT_RUNTIME } else { 0 },
        artifacts: vec![out.join("manifest.json"), out.join("weights.safetensors"), log, config],
        summary,
    })
}

fn train_predictor_cmd(cfg: TrainConfig, data: &Path, codec: &Path, out: &Path) -> Result<CommandResult> {
    cfg.validate()?;
    apply_deterministic_mode(&cfg);
    let codec = load_codec(codec)?;
    let mut ds = load_dataset(data)?;
    if ds.manifest.codec_fingerprint.is_none() {
        log::info!("dataset has no ground-truth tokens; tokenizing with the supplied codec");
        ds.populate_tokens(&codec)?;
    }
    let template = ArticulatedTemplate::desk();
    if ds.manifest.template_hash != template.hash() {
        return Err(meshtok::Error::Config("predictor training needs a dataset rendered from the desk template".into()).into());
    }
    let outcome = train_predictor(&cfg, &template.initial_pose()?, &ds, &codec)?;
    outcome.model.save(out)?;
    let log = out.join("train_log.jsonl");
    write_lines(&log, &outcome.steps)?;
    let epochs = out.join("epochs.jsonl");
    write_lines(&epochs, &outcome.history)?;
    let config = write_config(out, &cfg)?;
    let summary = json!({
        "stage": "predictor",
        "val_pve_mm": outcome.val_pve_mm,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
        "steps": outcome.steps.len(),
        "codec_checksum": outcome.codec_checksum,
        "ablation": cfg.ablation,
        "aborted": outcome.aborted,
    });
    Ok(CommandResult {
        exit_code: if outcome.aborted.is_some() { EXIT_RUNTIME } else { 0 },
        artifacts: vec![out.join("manifest.json"), out.join("weights.safetensors"), log, epochs, config],
        summary,
    })
}

fn eval(model: &Path, codec: &Path, data: &Path, report_path: &Path, split: SplitArg) -> Result<CommandResult> {
    exists(model)?;
    let codec = load_codec(codec)?;
    let model = VqHps::load(model, DType::F32, &Device::Cpu, false)?;
    model.check_codec(&codec)?;
    let mut ds = load_dataset(data)?;
    if ds.manifest.codec_fingerprint.as_deref() != Some(codec.fingerprint()?.as_str()) {
        ds.populate_tokens(&codec)?;
    }
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let mut report = evaluate(&model, &codec, &ds, split)?;
    let violations = report.samples.iter().filter(|s| s.pa_mpjpe_mm > s.mpjpe_mm).count();
    if violations > 0 {
        report
            .warnings
            .push(format!("{violations} samples have PA-MPJPE above MPJPE"));
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    create_parent(report_path)?;
    report.save_json(report_path)?;
    let csv = report_path.with_extension("csv");
    report.save_csv(&csv)?;
    ok(
        vec![report_path.to_path_buf(), csv],
        json!({
            "split": split.name(),
            "summary": report.summary,
            "comparisons": report.comparisons,
            "pa_above_mpjpe": violations,
            "warnings": report.warnings,
        }),
    )
}

fn read_mesh(path: &Path, codec: &MeshVqVae) -> Result<CanonicalMesh> {
    exists(path)?;
    let (vertices, faces) = read_obj(path)?;
    if faces.len() != codec.topology().faces().len() {
        log::warn!("{} has {} faces, the codec topology has {}", path.display(), faces.len(), codec.topology().faces().len());
    }
    let mesh = RegisteredMesh::new(codec.topology().clone(), vertices)?;
    Ok(CanonicalMesh::recentered(&mesh)?)
}

fn read_tokens(path: &Path, codec: &MeshVqVae) -> Result<TokenSequence> {
    exists(path)?;
    let file = TokenFile::load(path)?;
    file.validate_for(codec)?;
    Ok(file.tokens)
}

fn is_obj(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj"))
}

fn write_mesh(path: &Path, mesh: &CanonicalMesh, codec: &MeshVqVae) -> Result<()> {
    create_parent(path)?;
    Ok(write_obj(path, mesh.vertices(), codec.topology().faces())?)
}

fn encode(mesh: &Path, codec: &Path, out: &Path) -> Result<CommandResult> {
    let codec = load_codec(codec)?;
    let canonical = read_mesh(mesh, &codec)?;
    let file = TokenFile::new(&codec, codec.tokenize(&canonical)?)?;
    create_parent(out)?;
    file.save(out)?;
    ok(
        vec![out.to_path_buf()],
        json!({ "n": file.n, "s": file.s, "codec_fingerprint": file.codec_fingerprint }),
    )
}

fn decode(tokens: &Path, codec: &Path, out: &Path) -> Result<CommandResult> {
    let codec = load_codec(codec)?;
    let tokens = read_tokens(tokens, &codec)?;
    let mesh = codec.decode_tokens(&tokens)?;
    write_mesh(out, &mesh, &codec)?;
    ok(vec![out.to_path_buf()], json!({ "vertices": mesh.vertices().len() }))
}

fn tokens_of(path: &Path, codec: &MeshVqVae) -> Result<TokenSequence> {
    if is_obj(path) {
        Ok(codec.tokenize(&read_mesh(path, codec)?)?)
    } else {
        read_tokens(path, codec)
    }
}

fn parse_indices(text: &str) -> Result<BTreeSet<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::Usage(format!("`{s}` is not a token index"))))
        .collect()
}

fn swap(pair: &Pair, indices: &str) -> Result<CommandResult> {
    let indices = parse_indices(indices)?;
    let codec = load_codec(&pair.codec)?;
    let a = tokens_of(&pair.a, &codec)?;
    let b = tokens_of(&pair.b, &codec)?;
    let tokens = swap_body_part(&a, &b, &indices)?;
    write_mesh(&pair.out, &codec.decode_tokens(&tokens)?, &codec)?;
    ok(
        vec![pair.out.clone()],
        json!({ "swapped": indices.len(), "tokens": tokens }),
    )
}

/// Continuous latent of a mesh, or the dequantized grid of a token file.
fn latent_of(path: &Path, codec: &MeshVqVae) -> Result<LatentGrid> {
    if is_obj(path) {
        Ok(codec.encode(&read_mesh(path, codec)?)?)
    } else {
        let q = codec.dequantize(&read_tokens(path, codec)?)?;
        Ok(LatentGrid::new(q.rows, q.dim, q.values)?)
    }
}

fn interp(pair: &Pair, t: Option<f64>, frames: Option<u64>) -> Result<CommandResult> {
    if t.is_none() && frames.is_none() {
        return Err(CliError::Usage("edit interp needs --t or --frames".into()));
    }
    let codec = load_codec(&pair.codec)?;
    let z1 = latent_of(&pair.a, &codec)?;
    let z2 = latent_of(&pair.b, &codec)?;
    if let Some(t) = t {
        write_mesh(&pair.out, &interpolate_latent(&codec, &z1, &z2, t)?, &codec)?;
        return ok(vec![pair.out.clone()], json!({ "t": [t] }));
    }
    let k = frames.unwrap_or(2) as usize;
    fs::create_dir_all(&pair.out)?;
    let mut artifacts = Vec::with_capacity(k);
    let mut ts = Vec::with_capacity(k);
    for i in 0..k {
        let t = i as f64 / (k - 1) as f64;
        let path = pair.out.join(format!("frame_{i:03}.obj"));
        write_mesh(&path, &interpolate_latent(&codec, &z1, &z2, t)?, &codec)?;
        artifacts.push(path);
        ts.push(t);
    }
    ok(artifacts, json!({ "t": ts }))
}
