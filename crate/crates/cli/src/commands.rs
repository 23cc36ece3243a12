use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use capvid::checkpoint::{
    attention_container, file_hash, load_checkpoint, records_from_container, save_checkpoint, sha256_hex, Container,
};
use capvid::conditioning::Vocabulary;
use capvid::config::{canonical_json, RunConfig};
use capvid::control::AttentionStore;
use capvid::denoiser::{AttnKind, Denoiser};
use capvid::frames::{Clip, Image, Mask};
use capvid::metrics::{AttributeEmbedder, FeatureExtractor, MetricReport, ReportInputs};
use capvid::pipeline::{edit_video, EditOptions, EditRequest, EditSettings};
use capvid::synthdata::{generate_corpus, load_masks};
use capvid::train::{load_training_set, train};
use log::{info, warn};
use ndarray::Axis;
use serde::Serialize;

use crate::ablation::{ablation_cases, evaluate, run_case, CaseOutcome, OrderingCheck};
use crate::figures::{frame_grid, heatmap_tiles};

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

/// Existing output that needs `--force` to be replaced.
#[derive(Debug)]
pub struct OutputExists(pub PathBuf);

impl std::fmt::Display for OutputExists {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} exists and is not empty (pass --force to replace it)",
            self.0.display()
        )
    }
}

impl std::error::Error for OutputExists {}

/// Loads the config file (or defaults) and applies `--seed`.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.corpus.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    let non_empty = dir.is_dir() && std::fs::read_dir(dir)?.next().is_some();
    if non_empty {
        if !force {
            return Err(OutputExists(dir.to_path_buf()).into());
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    seed: u64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    inputs: BTreeMap<String, String>,
}

fn write_provenance(dir: &Path, command: &str, cfg: &RunConfig, inputs: BTreeMap<String, String>) -> Result<()> {
    let p = Provenance {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs,
    };
    write_json(&dir.join("provenance.json"), &p)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Denoiser<f32>, serde_json::Value, String)> {
    let path = checkpoint.map_or_else(|| cfg.checkpoint_path(), Path::to_path_buf);
    let (model, meta) = load_checkpoint::<f32>(&path)?;
    Ok((model, meta, file_hash(&path)?))
}

/// Writes a synthetic corpus; returns its directory.
pub fn cmd_generate_data(common: &Common) -> Result<PathBuf> {
    let cfg = load_config(common)?;
    let dir = common.out.clone().unwrap_or_else(|| cfg.corpus_dir());
    prepare_out(&dir, common.force)?;
    let c = &cfg.corpus;
    let manifest = generate_corpus(c.n_clips, c.seed, c.n_frames, c.resolution, c.val_fraction)?;
    manifest.write(&dir)?;
    let hash = file_hash(&dir.join("manifest.jsonl"))?;
    info!(
        "wrote {} clips to {} (manifest {hash})",
        manifest.entries.len(),
        dir.display()
    );
    write_provenance(&dir, "generate-data", &cfg, BTreeMap::from([("manifest".into(), hash)]))?;
    Ok(dir)
}

/// Trains a model on the corpus; returns the checkpoint path.
pub fn cmd_train(common: &Common) -> Result<PathBuf> {
    let cfg = load_config(common)?;
    let corpus = cfg.corpus_dir();
    let data = load_training_set::<f32>(&corpus, Default::default())
        .with_context(|| format!("loading corpus {}", corpus.display()))?;
    let schedule = cfg.noise_schedule()?;
    let mut model = Denoiser::<f32>::init(cfg.model.clone(), cfg.seed)?;
    let log = train(
        &mut model,
        &data,
        &schedule,
        &cfg.train,
        &Vocabulary::default(),
        |_, _| {},
    )?;
    if let (Some(a), Some(b)) = (log.first_loss(), log.last_loss()) {
        info!("loss {a:.5} -> {b:.5}");
    }
    let path = match &common.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            dir.join("model.ckpt")
        }
        None => cfg.checkpoint_path(),
    };
    if path.exists() && !common.force {
        return Err(OutputExists(path).into());
    }
    save_checkpoint(&model, log.meta(&cfg.hash()), &path)?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    write_json(&dir.join("train_log.json"), &log)?;
    let inputs = BTreeMap::from([
        ("checkpoint".into(), file_hash(&path)?),
        ("corpus_manifest".into(), file_hash(&corpus.join("manifest.jsonl"))?),
    ]);
    write_provenance(&dir, "train", &cfg, inputs)?;
    Ok(path)
}

#[derive(Debug, Clone, Default)]
pub struct EditArgs {
    pub common: Common,
    pub video: PathBuf,
    pub source_prompt: Option<String>,
    pub edit_prompt: String,
    pub reference_image: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Save cross-attention of every n-th ladder step; 0 saves none.
    pub attn_every: usize,
}

/// Runs one edit and writes its result directory.
pub fn cmd_edit(args: &EditArgs) -> Result<PathBuf> {
    let cfg = load_config(&args.common)?;
    let (model, meta, ckpt_hash) = load_model(&cfg, args.checkpoint.as_deref())?;
    let clip = Clip::load_dir(&args.video)?;
    let reference = args.reference_image.as_deref().map(Image::load_png).transpose()?;
    let settings = EditSettings {
        source_prompt: args.source_prompt.clone().unwrap_or_else(|| clip.caption.clone()),
        edit_prompt: args.edit_prompt.clone(),
        controller: cfg.controller.clone(),
        sampler: cfg.sampler.clone(),
        finetune: cfg.finetune.clone(),
        placement: Default::default(),
        autoencoder: Default::default(),
        seed: cfg.seed,
    };
    let out = args.common.out.clone().unwrap_or_else(|| cfg.home().join("edit"));
    prepare_out(&out, args.common.force)?;
    let trained = AttributeEmbedder::from_checkpoint(&model, &meta).is_ok();
    if !trained {
        warn!("checkpoint has no trained attribute classifier; metrics are skipped");
    }
    let request = EditRequest {
        frames: clip.frames.clone(),
        reference,
        settings,
    };
    let options = EditOptions {
        compute_metrics: trained,
        audit: None,
    };
    let schedule = cfg.schedule.build(0)?;
    let (result, outcome) = edit_video(&model, &schedule, &request, &Vocabulary::default(), options)?;

    let as_clip = |frames: &[Image], caption: &str| Clip {
        frames: frames.to_vec(),
        fps: clip.fps,
        caption: caption.to_string(),
    };
    as_clip(&result.reconstructed, &request.settings.source_prompt).save_dir(&out.join("reconstructed"))?;
    as_clip(&result.edited, &request.settings.edit_prompt).save_dir(&out.join("edited"))?;
    let masks_dir = out.join("masks");
    std::fs::create_dir_all(&masks_dir)?;
    for (i, m) in result.masks.iter().enumerate() {
        m.to_image().save_png(&masks_dir.join(format!("mask_{i:04}.png")))?;
    }
    if let Some(report) = &result.metrics {
        report.write_json(&out.join("metrics.json"))?;
    }
    write_json(&out.join("finetune.json"), &outcome.finetune_log)?;
    frame_grid(&[&clip.frames, &result.reconstructed, &result.edited]).save_png(&out.join("grid.png"))?;
    if args.attn_every > 0 {
        let ladder = schedule_ladder(&cfg)?;
        let keep = |t: usize| {
            ladder
                .iter()
                .position(|&s| s == t)
                .is_some_and(|i| i % args.attn_every == 0)
        };
        let dump = |store: &AttentionStore<f32>, name: &str| -> Result<()> {
            let recs = store.history_records(keep);
            let c = attention_container(&recs, serde_json::json!({ "branch": name }));
            c.write(&out.join(format!("attention_{name}.bin")))?;
            Ok(())
        };
        dump(&outcome.source_store, "source")?;
        dump(&outcome.edit_stores[0], "edit")?;
    }
    let mut inputs = BTreeMap::from([
        ("checkpoint".to_string(), ckpt_hash),
        ("edit_config_hash".to_string(), result.provenance.config_hash.clone()),
        ("source_frames".to_string(), result.provenance.source_hash.clone()),
    ]);
    if let Some(r) = &result.provenance.reference_hash {
        inputs.insert("reference".into(), r.clone());
    }
    write_provenance(&out, "edit", &cfg, inputs)?;
    Ok(out)
}

fn schedule_ladder(cfg: &RunConfig) -> Result<Vec<usize>> {
    Ok(cfg.noise_schedule()?.ddim_timesteps().to_vec())
}

#[derive(Debug, Clone, Default)]
pub struct AblateArgs {
    pub common: Common,
    pub cases: usize,
    pub checkpoint: Option<PathBuf>,
}

/// Runs the ablation suite; writes `report.csv`, `report.json` and the
/// ordering checks.
pub fn cmd_ablate(args: &AblateArgs) -> Result<(PathBuf, Vec<OrderingCheck>)> {
    let cfg = load_config(&args.common)?;
    let (model, _, ckpt_hash) = load_model(&cfg, args.checkpoint.as_deref())?;
    let out = args.common.out.clone().unwrap_or_else(|| cfg.home().join("ablate"));
    prepare_out(&out, args.common.force)?;
    let mut template = EditSettings::new("", "");
    template.controller = cfg.controller.clone();
    template.sampler = cfg.sampler.clone();
    template.finetune = cfg.finetune.clone();
    template.seed = cfg.seed;
    let schedule = cfg.schedule.build(0)?;
    let vocab = Vocabulary::default();
    let cases = ablation_cases(args.cases, cfg.seed, cfg.corpus.n_frames, cfg.model.image_size);
    let mut outcomes: Vec<CaseOutcome> = Vec::with_capacity(cases.len());
    for case in &cases {
        info!(
            "ablation case {}: {} -> {}",
            case.id,
            case.source_prompt(),
            case.edit_prompt()
        );
        outcomes.push(run_case(&model, &schedule, case, &template, &vocab, None)?);
    }
    let checks = evaluate(&outcomes);
    let mut csv = String::from("case,arm,temporal_subject,background_mse,subject_score,mask_iou,config_hash\n");
    for o in &outcomes {
        for (arm, m) in &o.arms {
            csv.push_str(&format!(
                "{},{arm},{:.6},{:.6},{:.6},{},{}\n",
                o.case.id,
                m.temporal_subject,
                m.background_mse,
                m.subject_score,
                m.mask_iou.map_or(String::new(), |v| format!("{v:.6}")),
                o.config_hash
            ));
        }
    }
    std::fs::write(out.join("report.csv"), csv)?;
    write_json(
        &out.join("report.json"),
        &serde_json::json!({ "cases": outcomes, "checks": checks }),
    )?;
    for c in &checks {
        println!("{}", c.line());
    }
    write_provenance(&out, "ablate", &cfg, BTreeMap::from([("checkpoint".into(), ckpt_hash)]))?;
    Ok((out, checks))
}

#[derive(Debug, Clone, Default)]
pub struct MetricsArgs {
    pub common: Common,
    pub source: PathBuf,
    pub edited: PathBuf,
    /// Defaults to the edited clip's caption.
    pub caption: Option<String>,
    /// Directory of `mask_NNNN.png` subject masks; none means empty masks.
    pub masks: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<MetricReport> {
    let cfg = load_config(&args.common)?;
    let (model, meta, _) = load_model(&cfg, args.checkpoint.as_deref())?;
    let source = Clip::load_dir(&args.source)?;
    let edited = Clip::load_dir(&args.edited)?;
    let masks = match &args.masks {
        Some(dir) => load_masks(dir, edited.len())?,
        None => {
            let (w, h) = edited.resolution();
            vec![Mask::new(w, h); edited.len()]
        }
    };
    let embedder = AttributeEmbedder::from_checkpoint(&model, &meta)?;
    let pixels;
    let encoder;
    let extractor = if cfg.metrics.feature_extractor == "pixels" {
        pixels = FeatureExtractor::Pixels;
        &pixels
    } else {
        encoder = FeatureExtractor::Encoder(&model);
        &encoder
    };
    let caption = args.caption.clone().unwrap_or_else(|| edited.caption.clone());
    let inputs = ReportInputs {
        source: &source.frames,
        edited: &edited.frames,
        caption: &caption,
        subject_masks: &masks,
    };
    let report = MetricReport::compute(&inputs, &embedder, extractor, &cfg.hash())?;
    if let Some(out) = &args.common.out {
        std::fs::create_dir_all(out)?;
        report.write_json(&out.join("metrics.json"))?;
        write_provenance(out, "metrics", &cfg, BTreeMap::new())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct DumpAttnArgs {
    pub result_dir: PathBuf,
    pub t: usize,
    pub layer: usize,
    pub frame: usize,
    /// `edit` or `source`.
    pub branch: String,
    pub out: Option<PathBuf>,
}

/// Renders one heatmap tile per condition column of a saved map.
pub fn cmd_dump_attn(args: &DumpAttnArgs) -> Result<PathBuf> {
    let path = args.result_dir.join(format!("attention_{}.bin", args.branch));
    let container = Container::read(&path)?;
    let records = records_from_container(&container)?;
    let want = capvid::denoiser::AttnKey::new(args.t, args.layer, args.frame, AttnKind::Cross);
    let Some(rec) = records.iter().find(|r| r.key == want) else {
        let available: Vec<String> = records.iter().map(|r| r.key.dump_name()).collect();
        bail!(
            "no map {} in {}; available: {}",
            want.dump_name(),
            path.display(),
            available.join(", ")
        );
    };
    let mean = rec
        .map
        .mapv(|v| v as f64)
        .mean_axis(Axis(0))
        .expect("at least one head");
    let side = (mean.nrows() as f64).sqrt().round() as usize;
    if side * side != mean.nrows() {
        bail!("map with {} queries is not square", mean.nrows());
    }
    let tiles = heatmap_tiles(&mean, side, (64 / side).max(1));
    let img = frame_grid(&[&tiles]);
    let out = args.out.clone().unwrap_or_else(|| {
        args.result_dir.join(format!(
            "heatmap_{}_t{}_l{}_f{}.png",
            args.branch, args.t, args.layer, args.frame
        ))
    });
    img.save_png(&out)?;
    Ok(out)
}

/// SHA-256 over every file below `dir`, keyed by relative path.
pub fn tree_hash(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                let rel = p.strip_prefix(base)?.to_string_lossy().into_owned();
                out.insert(rel, file_hash(&p)?);
            }
        }
        Ok(())
    }
    let mut files = BTreeMap::new();
    walk(dir, dir, &mut files)?;
    Ok(sha256_hex(canonical_json(&files).as_bytes()))
}

/// Process exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use capvid::Error as E;
    fn core_code(e: &E) -> i32 {
        match e {
            E::Stage { source, .. } => core_code(source),
            E::Config(_) => 3,
            E::Path { .. } | E::Io(_) => 4,
            E::Format(_) => 5,
            E::Param(_) | E::Shape(_) | E::Vocabulary(_) | E::Alignment(_) => 6,
            E::Numeric(_) | E::Inversion { .. } => 7,
            E::Ordering(_) | E::Hook { .. } | E::StoreMiss(_) | E::State(_) => 8,
        }
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return core_code(e);
        }
        if cause.is::<OutputExists>() || cause.is::<std::io::Error>() {
            return 4;
        }
    }
    1
}
