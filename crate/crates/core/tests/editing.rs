use capvid::autoencoder::Autoencoder;
use capvid::conditioning::{fuse, tokenize, SubjectPlacement, Vocabulary};
use capvid::control::{Branch, ControllerConfig};
use capvid::denoiser::{AttentionRecord, Denoiser, ModelConfig};
use capvid::pipeline::{edit_video, sample, EditOptions, EditRequest, EditSettings};
use capvid::schedule::{build_schedule, BetaSpacing, NoiseSchedule};
use capvid::synthdata::{generate_clip, render_reference, sample_spec, ClipSpec, Color, Shape, Subject, Texture};

const FRAMES: usize = 3;
const RES: usize = 8;

fn model() -> Denoiser<f64> {
    Denoiser::init(ModelConfig::tiny(), 5).unwrap()
}

fn schedule() -> NoiseSchedule {
    build_schedule(1000, 1e-4, 0.02, BetaSpacing::Linear, 50).unwrap()
}

fn spec() -> ClipSpec {
    sample_spec(21, 0, FRAMES, RES)
}

fn target() -> Subject {
    Subject {
        shape: if spec().shape == Shape::Circle {
            Shape::Square
        } else {
            Shape::Circle
        },
        color: Color::Blue,
        texture: Texture::Solid,
    }
}

fn request(controller: ControllerConfig, edit: &str, reference: bool) -> EditRequest {
    let spec = spec();
    let mut settings = EditSettings::new(&spec.rough_caption(), edit);
    settings.controller = controller;
    settings.sampler.ddim_steps = 6;
    settings.finetune.steps = 2;
    settings.seed = 4;
    EditRequest {
        frames: generate_clip(&spec).frames,
        reference: reference.then(|| render_reference(target(), 0, RES)),
        settings,
    }
}

fn edit_prompt() -> String {
    spec().with_subject(target()).rough_caption()
}

#[test]
fn closed_controller_is_plain_sampling() {
    let (m, s, v) = (model(), schedule(), Vocabulary::default());
    let req = request(ControllerConfig::disabled(), &edit_prompt(), false);
    let (result, outcome) = edit_video(&m, &s, &req, &v, EditOptions::default()).unwrap();

    let latents = Autoencoder::default().encode::<f64>(&req.frames).unwrap();
    let src: capvid::conditioning::Condition<f64> =
        m.embed_text(&tokenize(&req.settings.source_prompt, &v).unwrap()).into();
    let ladder = req.settings.sampler.schedule(&s).unwrap();
    let (tuned, _) = m
        .finetune_on_source(
            &latents,
            &src,
            &ladder,
            req.settings.finetune.steps,
            req.settings.finetune.lr,
            req.settings.seed,
        )
        .unwrap();
    let text = tuned.embed_text(&tokenize(&req.settings.edit_prompt, &v).unwrap());
    let cond = fuse(None, &text, SubjectPlacement::default()).unwrap();
    let plain = sample(&tuned, &outcome.inversion.z_t, &cond, &ladder, &req.settings.sampler).unwrap();
    assert!(plain.bit_eq(&result.z0_edit));
}

#[test]
fn identity_prompt_reproduces_reconstruction() {
    let (m, s, v) = (model(), schedule(), Vocabulary::default());
    let cfg = ControllerConfig {
        cross_replace_ratio: 1.0,
        injection_enabled: false,
        local_blend_enabled: false,
        ..ControllerConfig::default()
    };
    let req = request(cfg, &spec().rough_caption(), false);
    let (result, _) = edit_video(&m, &s, &req, &v, EditOptions::default()).unwrap();
    assert!(result.z0_edit.max_abs_diff(&result.z0) <= 1e-5);
}

#[test]
fn edits_are_deterministic() {
    let (m, s, v) = (model(), schedule(), Vocabulary::default());
    let req = request(ControllerConfig::default(), &edit_prompt(), true);
    let (a, _) = edit_video(&m, &s, &req, &v, EditOptions::default()).unwrap();
    let (b, _) = edit_video(&m, &s, &req, &v, EditOptions::default()).unwrap();
    assert!(a.z0_edit.bit_eq(&b.z0_edit));
    assert_eq!(a.edited, b.edited);
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.provenance, b.provenance);
}

#[test]
fn every_recorded_map_is_row_stochastic() {
    let (m, s, v) = (model(), schedule(), Vocabulary::default());
    let req = request(ControllerConfig::default(), &edit_prompt(), true);
    let mut seen = [0usize; 2];
    let mut bad = 0usize;
    let mut audit = |b: Branch, r: &AttentionRecord<f64>| {
        seen[usize::from(b == Branch::Source)] += 1;
        if !r.is_row_stochastic(1e-5) {
            bad += 1;
        }
    };
    let options = EditOptions {
        compute_metrics: false,
        audit: Some(&mut audit),
    };
    edit_video(&m, &s, &req, &v, options).unwrap();
    assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
    assert_eq!(bad, 0);
}

#[test]
fn pixel_masks_are_upscaled_blend_masks() {
    let (m, s, v) = (model(), schedule(), Vocabulary::default());
    let on = request(ControllerConfig::default(), &edit_prompt(), true);
    let (blended, _) = edit_video(&m, &s, &on, &v, EditOptions::default()).unwrap();
    let mask = blended.blend.as_ref().expect("blend mask");
    assert_eq!(mask.frames.len(), FRAMES);
    assert_eq!(blended.masks.len(), FRAMES);
    for (small, big) in mask.frames.iter().zip(&blended.masks) {
        assert_eq!(&small.upscale(RES / small.width), big);
    }
}
