//! End-to-end editing: fine-tune, invert, run the source and edit branches
//! in lock-step, blend, decode and report.

use log::{debug, info};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::checkpoint::{checkpoint_container, sha256_hex};
use crate::conditioning::{
    align_prompts, fuse, tokenize, Condition, Provenance, SubjectPlacement, TokenSeq, Vocabulary, BOS, EOS,
};
use crate::control::{
    compute_blend_mask, local_blend, AttentionStore, BlendMask, Branch, ColumnAlignment, ControllerConfig,
    EditController, StoreRecorder,
};
use crate::denoiser::{AttentionHooks, AttentionRecord, AttnKey, AttnKind, Denoiser, FinetuneLog};
use crate::error::{Error, Result};
use crate::frames::{Image, Mask};
use crate::latent::LatentClip;
use crate::metrics::{AttributeEmbedder, FeatureExtractor, MetricReport, ReportInputs};
use crate::scalar::Scalar;
use crate::schedule::{ddim_invert_step, ddim_step, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    /// Classifier-free guidance weight; 1 disables the unconditioned pass.
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            guidance_scale: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.ddim_steps > schedule.total_steps() {
            return Err(Error::Param(format!(
                "{} DDIM steps exceed {} training steps",
                self.ddim_steps,
                schedule.total_steps()
            )));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::Param(format!("guidance_scale = {}", self.guidance_scale)));
        }
        Ok(())
    }

    /// The schedule with this sampler's ladder.
    pub fn schedule(&self, base: &NoiseSchedule) -> Result<NoiseSchedule> {
        self.validate(base)?;
        base.clone().with_ddim_steps(self.ddim_steps)
    }

    fn guided(&self) -> bool {
        self.guidance_scale != 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: i64,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 1e-4 }
    }
}

/// Condition of the empty prompt.
pub fn null_condition<T: Scalar>(model: &Denoiser<T>) -> Condition<T> {
    model.embed_text(&TokenSeq(vec![BOS, EOS])).into()
}

/// Noise estimate with optional guidance. Hooks see the conditioned pass
/// only.
fn guided_eps<T: Scalar>(
    model: &Denoiser<T>,
    z: &LatentClip<T>,
    t: usize,
    cond: &Condition<T>,
    null: Option<&Condition<T>>,
    scale: f64,
    hooks: Option<&mut dyn AttentionHooks<T>>,
) -> Result<LatentClip<T>> {
    let eps = model.predict_with(z, t, cond, hooks)?;
    match null {
        Some(null) if scale != 1.0 => {
            let uncond = model.predict(z, t, null)?;
            Ok(uncond.lin_comb(T::one() - T::lit(scale), &eps, T::lit(scale)))
        }
        _ => Ok(eps),
    }
}

/// Callback seeing every attention map either branch computes.
pub type AuditFn<'a, T> = dyn FnMut(Branch, &AttentionRecord<T>) + 'a;

/// Shows every map to an audit callback and forwards to the inner hooks
/// only the kinds they asked for.
struct Audited<'h, 'a, T> {
    inner: &'h mut dyn AttentionHooks<T>,
    audit: &'h mut AuditFn<'a, T>,
    branch: Branch,
}

impl<T: Scalar> AttentionHooks<T> for Audited<'_, '_, T> {
    fn observe(&mut self, record: &AttentionRecord<T>) {
        (self.audit)(self.branch, record);
        if self.inner.wants(record.key.kind) {
            self.inner.observe(record);
        }
    }

    fn replace(&mut self, key: &AttnKey, computed: &Array3<T>) -> Result<Option<Array3<T>>> {
        if self.inner.wants(key.kind) {
            self.inner.replace(key, computed)
        } else {
            Ok(None)
        }
    }
}

/// Noise estimate routed through an optional audit.
#[allow(clippy::too_many_arguments)]
fn audited_eps<T: Scalar>(
    model: &Denoiser<T>,
    z: &LatentClip<T>,
    t: usize,
    cond: &Condition<T>,
    null: Option<&Condition<T>>,
    scale: f64,
    hooks: &mut dyn AttentionHooks<T>,
    audit: Option<&mut AuditFn<'_, T>>,
    branch: Branch,
) -> Result<LatentClip<T>> {
    match audit {
        Some(audit) => {
            let mut a = Audited {
                inner: hooks,
                audit,
                branch,
            };
            guided_eps(model, z, t, cond, null, scale, Some(&mut a))
        }
        None => guided_eps(model, z, t, cond, null, scale, Some(hooks)),
    }
}

/// Latents after inversion, with every intermediate `(t, z_t)`.
#[derive(Debug, Clone)]
pub struct Inversion<T> {
    pub z_t: LatentClip<T>,
    pub trajectory: Vec<(usize, LatentClip<T>)>,
}

/// Runs the DDIM ladder upwards from the clean latents under `cond`.
/// Each step uses the noise estimate at the current latents and the next
/// timestep. An empty ladder returns the input.
pub fn invert_clip<T: Scalar>(
    model: &Denoiser<T>,
    latents: &LatentClip<T>,
    cond: &Condition<T>,
    schedule: &NoiseSchedule,
) -> Result<Inversion<T>> {
    let mut z = latents.clone();
    let mut t_cur = 0;
    let mut trajectory = vec![(0, z.clone())];
    for (step, &t_next) in schedule.ddim_timesteps().iter().rev().enumerate() {
        let eps = model.predict(&z, t_next, cond).map_err(|e| match e {
            Error::Numeric(reason) => Error::Inversion { step, reason },
            other => other,
        })?;
        z = ddim_invert_step(&z, &eps, t_cur, t_next, schedule)?;
        if !z.is_finite() {
            return Err(Error::Inversion {
                step,
                reason: format!("latents at t={t_next} are not finite"),
            });
        }
        trajectory.push((t_next, z.clone()));
        t_cur = t_next;
    }
    Ok(Inversion { z_t: z, trajectory })
}

/// Plain DDIM sampling from `z_t` down the ladder.
pub fn sample<T: Scalar>(
    model: &Denoiser<T>,
    z_t: &LatentClip<T>,
    cond: &Condition<T>,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<LatentClip<T>> {
    let null = sampler.guided().then(|| null_condition(model));
    let mut z = z_t.clone();
    for (i, &t) in schedule.ddim_timesteps().iter().enumerate() {
        let eps = guided_eps(model, &z, t, cond, null.as_ref(), sampler.guidance_scale, None)?;
        z = ddim_step(&z, &eps, t, schedule.prev_timestep(i), schedule)?;
    }
    Ok(z)
}

/// Condition columns that attend to the subject: the subject word's
/// column and any fused subject tokens.
pub fn subject_columns<T: Scalar>(cond: &Condition<T>, tokens: &TokenSeq, vocab: &Vocabulary) -> Vec<usize> {
    let word = tokens.subject_position(vocab).and_then(|p| cond.column_of_text(p));
    let mut cols: Vec<usize> = word.into_iter().chain(cond.subject_columns()).collect();
    cols.sort_unstable();
    cols
}

/// One edit branch run against the shared source branch.
pub struct EditArm<'a, T> {
    pub name: &'a str,
    pub condition: &'a Condition<T>,
    pub alignment: &'a ColumnAlignment,
    pub controller: &'a ControllerConfig,
    pub subject_columns: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct ArmOutput<T> {
    pub name: String,
    pub z0: LatentClip<T>,
    /// Mask of the last blended step.
    pub blend: Option<BlendMask>,
    /// Edit-branch cross-attention history.
    pub store: AttentionStore<T>,
}

#[derive(Debug, Clone)]
pub struct DualBranchOutput<T> {
    pub z0: LatentClip<T>,
    pub source_store: AttentionStore<T>,
    pub arms: Vec<ArmOutput<T>>,
}

/// Source branch plus any number of edit branches, all from `z_t` and
/// advanced together one timestep at a time. At each timestep the source
/// branch runs first and records its maps; every edit branch then reads
/// the source maps of that same timestep only.
pub fn run_dual_branch<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    z_t: &LatentClip<T>,
    source: &Condition<T>,
    source_subject_columns: &[usize],
    arms: &[EditArm<'_, T>],
    mut audit: Option<&mut AuditFn<'_, T>>,
) -> Result<DualBranchOutput<T>> {
    for arm in arms {
        arm.controller.validate()?;
    }
    let grid = z_t.grid();
    let shape = (grid.frames, grid.height, grid.width);
    let null = sampler.guided().then(|| null_condition(model));
    let mut kinds = vec![AttnKind::Cross];
    if arms.iter().any(|a| a.controller.self_attention_replace_ratio > 0.0) {
        kinds.push(AttnKind::SelfAttn);
    }
    let mut source_store = AttentionStore::new(Branch::Source);
    let mut z = z_t.clone();
    let mut outs: Vec<ArmOutput<T>> = arms
        .iter()
        .map(|a| ArmOutput {
            name: a.name.to_string(),
            z0: z_t.clone(),
            blend: None,
            store: AttentionStore::new(Branch::Edit),
        })
        .collect();
    for (i, &t) in schedule.ddim_timesteps().iter().enumerate() {
        let t_prev = schedule.prev_timestep(i);
        source_store.retain_timestep(t);
        let mut rec = StoreRecorder::new(&mut source_store, kinds.clone());
        let eps = audited_eps(
            model,
            &z,
            t,
            source,
            null.as_ref(),
            sampler.guidance_scale,
            &mut rec,
            audit.as_deref_mut(),
            Branch::Source,
        )?;
        rec.finish()?;
        z = ddim_step(&z, &eps, t, t_prev, schedule)?;

        for (arm, out) in arms.iter().zip(outs.iter_mut()) {
            out.store.retain_timestep(t);
            let cfg = arm.controller;
            let first = if cfg.two_pass {
                let mut first = AttentionStore::new(Branch::Edit);
                let mut r = StoreRecorder::new(&mut first, vec![AttnKind::Cross]);
                model.predict_with(&out.z0, t, arm.condition, Some(&mut r))?;
                r.finish()?;
                for rec in first.records() {
                    out.store.insert(rec.key, rec.map)?;
                }
                Some(first)
            } else {
                None
            };
            let mut ctl = EditController {
                source: &source_store,
                alignment: arm.alignment,
                cfg,
                schedule,
                record: if cfg.two_pass { None } else { Some(&mut out.store) },
                first_pass: first.as_ref(),
                error: None,
            };
            let eps = audited_eps(
                model,
                &out.z0,
                t,
                arm.condition,
                null.as_ref(),
                sampler.guidance_scale,
                &mut ctl,
                audit.as_deref_mut(),
                Branch::Edit,
            )?;
            if let Some(e) = ctl.error {
                return Err(e);
            }
            let mut z_edit = ddim_step(&out.z0, &eps, t, t_prev, schedule)?;
            if cfg.blend_active(i, schedule) {
                let mask = compute_blend_mask(
                    &source_store,
                    &out.store,
                    source_subject_columns,
                    arm.subject_columns,
                    cfg,
                    shape,
                )?;
                z_edit = local_blend(&z_edit, &z, &mask)?;
                out.blend = Some(mask);
            }
            out.z0 = z_edit;
        }
        debug!("dual branch step {i} (t={t}) done");
    }
    Ok(DualBranchOutput {
        z0: z,
        source_store,
        arms: outs,
    })
}

/// Everything that determines an edit apart from the pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSettings {
    pub source_prompt: String,
    pub edit_prompt: String,
    pub controller: ControllerConfig,
    pub sampler: SamplerConfig,
    pub finetune: FinetuneConfig,
    pub placement: SubjectPlacement,
    pub autoencoder: Autoencoder,
    pub seed: u64,
}

impl EditSettings {
    pub fn new(source_prompt: &str, edit_prompt: &str) -> Self {
        Self {
            source_prompt: source_prompt.into(),
            edit_prompt: edit_prompt.into(),
            controller: ControllerConfig::default(),
            sampler: SamplerConfig::default(),
            finetune: FinetuneConfig::default(),
            placement: SubjectPlacement::default(),
            autoencoder: Autoencoder::default(),
            seed: 0,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(crate::config::canonical_json(self).as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub frames: Vec<Image>,
    pub reference: Option<Image>,
    pub settings: EditSettings,
}

/// Identifies where a result came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_id: String,
    pub source_hash: String,
    pub reference_hash: Option<String>,
    pub arm: String,
}

#[derive(Debug, Clone)]
pub struct EditResult<T> {
    pub reconstructed: Vec<Image>,
    pub edited: Vec<Image>,
    /// Blend masks upscaled to pixels; empty masks when blending was off.
    pub masks: Vec<Mask>,
    pub blend: Option<BlendMask>,
    pub metrics: Option<MetricReport>,
    pub provenance: RunProvenance,
    pub z0: LatentClip<T>,
    pub z0_edit: LatentClip<T>,
}

/// Output of an edit with one or more arms sharing the source branch.
#[derive(Debug, Clone)]
pub struct EditOutcome<T> {
    pub results: Vec<EditResult<T>>,
    pub finetune_log: FinetuneLog,
    pub inversion: Inversion<T>,
    pub source_store: AttentionStore<T>,
    pub edit_stores: Vec<AttentionStore<T>>,
}

/// An ablation arm: controller settings and whether the reference image
/// is fused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub controller: ControllerConfig,
    pub use_reference: bool,
}

/// SHA-256 of a model's parameters and config.
pub fn checkpoint_id<T: Scalar>(model: &Denoiser<T>) -> String {
    sha256_hex(&checkpoint_container(model, serde_json::Value::Null).to_bytes())
}

fn frames_hash(frames: &[Image]) -> String {
    let mut bytes = Vec::new();
    for f in frames {
        bytes.extend_from_slice(&(f.width as u32).to_le_bytes());
        bytes.extend_from_slice(&(f.height as u32).to_le_bytes());
        bytes.extend_from_slice(&f.data);
    }
    sha256_hex(&bytes)
}

/// Knobs of a pipeline run that do not affect its outputs.
#[derive(Default)]
pub struct EditOptions<'a, T> {
    pub compute_metrics: bool,
    pub audit: Option<&'a mut AuditFn<'a, T>>,
}

/// Runs one edit with the request's controller.
pub fn edit_video<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule,
    request: &EditRequest,
    vocab: &Vocabulary,
    options: EditOptions<'_, T>,
) -> Result<(EditResult<T>, EditOutcome<T>)> {
    let arm = ArmSpec {
        name: "edit".into(),
        controller: request.settings.controller.clone(),
        use_reference: request.reference.is_some(),
    };
    let mut outcome = edit_video_arms(model, schedule, request, vocab, &[arm], options)?;
    let result = outcome.results.remove(0);
    Ok((result, outcome))
}

/// Encode, fine-tune, build conditions, invert, run every arm against a
/// shared source branch, decode and score. Errors carry the stage name.
pub fn edit_video_arms<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule,
    request: &EditRequest,
    vocab: &Vocabulary,
    arms: &[ArmSpec],
    options: EditOptions<'_, T>,
) -> Result<EditOutcome<T>> {
    let s = &request.settings;
    if request.frames.is_empty() {
        return Err(Error::Param("source clip has no frames".into()));
    }
    if arms.is_empty() {
        return Err(Error::Param("no edit arms given".into()));
    }
    let schedule = s.sampler.schedule(schedule)?;
    let config_hash = s.hash();

    let latents: LatentClip<T> = s
        .autoencoder
        .encode(&request.frames)
        .map_err(|e| e.in_stage("encode"))?;

    let source_tokens = tokenize(&s.source_prompt, vocab).map_err(|e| e.in_stage("condition"))?;
    let edit_tokens = tokenize(&s.edit_prompt, vocab).map_err(|e| e.in_stage("condition"))?;
    let source_cond: Condition<T> = model
        .try_embed_text(&source_tokens)
        .map_err(|e| e.in_stage("condition"))?
        .into();

    info!("fine-tuning projections for {} steps", s.finetune.steps);
    let (tuned, finetune_log) = model
        .finetune_on_source(
            &latents,
            &source_cond,
            &schedule,
            s.finetune.steps,
            s.finetune.lr,
            s.seed,
        )
        .map_err(|e| e.in_stage("finetune"))?;

    let build = |use_ref: bool| -> Result<Condition<T>> {
        let c2 = tuned.try_embed_text(&edit_tokens)?;
        let c1 = match (&request.reference, use_ref) {
            (Some(img), true) => {
                let pos = edit_tokens
                    .subject_position(vocab)
                    .ok_or_else(|| Error::Param("a reference image needs a subject word in the edit prompt".into()))?;
                Some(tuned.encode_subject(img, edit_tokens.ids()[pos])?)
            }
            _ => None,
        };
        fuse(c1.as_ref(), &c2, s.placement)
    };
    let token_alignment = align_prompts(&source_tokens, &edit_tokens);
    let mut conds = Vec::with_capacity(arms.len());
    for spec in arms {
        let cond = build(spec.use_reference).map_err(|e| e.in_stage("condition"))?;
        let align = ColumnAlignment::from_tokens(&token_alignment, &source_cond.labels, &cond.labels)
            .map_err(|e| e.in_stage("condition"))?;
        let cols = subject_columns(&cond, &edit_tokens, vocab);
        conds.push((cond, align, cols));
    }
    let source_cols = subject_columns(&source_cond, &source_tokens, vocab);

    let inversion = invert_clip(&tuned, &latents, &source_cond, &schedule).map_err(|e| e.in_stage("invert"))?;

    let edit_arms: Vec<EditArm<'_, T>> = arms
        .iter()
        .zip(&conds)
        .map(|(spec, (cond, align, cols))| EditArm {
            name: &spec.name,
            condition: cond,
            alignment: align,
            controller: &spec.controller,
            subject_columns: cols,
        })
        .collect();
    let dual = run_dual_branch(
        &tuned,
        &schedule,
        &s.sampler,
        &inversion.z_t,
        &source_cond,
        &source_cols,
        &edit_arms,
        options.audit,
    )
    .map_err(|e| e.in_stage("dual_branch"))?;

    let reconstructed = s.autoencoder.decode(&dual.z0).map_err(|e| e.in_stage("decode"))?;
    let provenance = |arm: &str| RunProvenance {
        config_hash: config_hash.clone(),
        seed: s.seed,
        checkpoint_id: checkpoint_id(model),
        source_hash: frames_hash(&request.frames),
        reference_hash: request.reference.as_ref().map(|r| frames_hash(std::slice::from_ref(r))),
        arm: arm.to_string(),
    };
    let (w, h) = (request.frames[0].width, request.frames[0].height);
    let mut results = Vec::with_capacity(arms.len());
    let mut edit_stores = Vec::with_capacity(arms.len());
    for arm in dual.arms {
        let edited = s.autoencoder.decode(&arm.z0).map_err(|e| e.in_stage("decode"))?;
        let masks: Vec<Mask> = match &arm.blend {
            Some(b) => b.frames.iter().map(|m| m.upscale(s.autoencoder.factor())).collect(),
            None => vec![Mask::new(w, h); edited.len()],
        };
        let metrics = if options.compute_metrics {
            let inputs = ReportInputs {
                source: &request.frames,
                edited: &edited,
                caption: &s.edit_prompt,
                subject_masks: &masks,
            };
            let report = MetricReport::compute(
                &inputs,
                &AttributeEmbedder::assume_trained(model),
                &FeatureExtractor::Encoder(model),
                &config_hash,
            );
            Some(report.map_err(|e| e.in_stage("metrics"))?)
        } else {
            None
        };
        results.push(EditResult {
            reconstructed: reconstructed.clone(),
            edited,
            masks,
            blend: arm.blend,
            metrics,
            provenance: provenance(&arm.name),
            z0: dual.z0.clone(),
            z0_edit: arm.z0,
        });
        edit_stores.push(arm.store);
    }
    Ok(EditOutcome {
        results,
        finetune_log,
        inversion,
        source_store: dual.source_store,
        edit_stores,
    })
}

/// Labels of a condition as `text:i` / `subject:j` strings.
pub fn column_names(labels: &[Provenance]) -> Vec<String> {
    labels
        .iter()
        .map(|l| match l {
            Provenance::Text(i) => format!("text:{i}"),
            Provenance::Subject(j) => format!("subject:{j}"),
        })
        .collect()
}
