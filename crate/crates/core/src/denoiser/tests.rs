use super::*;
use crate::conditioning::{tokenize, Provenance, Vocabulary};
use crate::gradcheck::{check_gradients, summarize};
use crate::schedule::{build_schedule, BetaSpacing};
use crate::synthdata::{render_reference, Color, Shape, Subject, Texture};

fn schedule() -> NoiseSchedule {
    build_schedule(1000, 1e-4, 0.02, BetaSpacing::Linear, 10).unwrap()
}

fn tiny<T: Scalar>() -> Denoiser<T> {
    Denoiser::init(ModelConfig::tiny(), 3).unwrap()
}

fn clip<T: Scalar>(frames: usize, seed: u64) -> LatentClip<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentClip::gaussian(Grid::new(frames, 4, 4), 3, &mut rng)
}

fn prompt<T: Scalar>(m: &Denoiser<T>, text: &str) -> Condition<T> {
    let v = Vocabulary::default();
    m.embed_text(&tokenize(text, &v).unwrap()).into()
}

#[test]
fn single_token_condition_gives_unit_cross_rows() {
    let m = tiny::<f64>();
    let c = prompt(&m, "a red square");
    let single = Condition {
        embeddings: c.embeddings.slice(s![0..1, ..]).to_owned(),
        labels: vec![Provenance::Text(0)],
    };
    let (_, records) = m.denoise(&clip(2, 1), 500, &single, None).unwrap();
    let cross: Vec<_> = records.iter().filter(|r| r.key.kind == AttnKind::Cross).collect();
    assert_eq!(cross.len(), 4 * 2);
    for r in cross {
        assert_eq!(r.map.dim().2, 1);
        assert!(r.map.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn records_cover_every_map_and_are_stochastic() {
    let m = tiny::<f32>();
    let c = prompt(&m, "a blue circle moving on the checker");
    let (_, records) = m.denoise(&clip(3, 2), 981, &c, None).unwrap();
    assert_eq!(records.len(), 4 * 3 * 3);
    for r in &records {
        assert!(r.is_row_stochastic(1e-5), "{}", r.key);
        let hw = if r.key.layer == 1 || r.key.layer == 2 { 4 } else { 16 };
        let keys = match r.key.kind {
            AttnKind::SelfAttn => hw,
            AttnKind::Cross => c.len(),
            AttnKind::Frame => 3,
        };
        assert_eq!(r.map.dim(), (2, hw, keys), "{}", r.key);
    }
}

#[test]
fn identity_write_hook_is_transparent() {
    let m = tiny::<f32>();
    let c = prompt(&m, "a red square moving on the plain");
    let z = clip(3, 4);
    let plain = m.predict(&z, 321, &c).unwrap();
    let mut calls = 0;
    let mut hooks = HookSet::write(|_, map: &Array3<f32>| {
        calls += 1;
        Ok(Some(map.clone()))
    });
    let hooked = m.predict_with(&z, 321, &c, Some(&mut hooks)).unwrap();
    drop(hooks);
    assert!(plain.bit_eq(&hooked));
    assert_eq!(calls, 4 * 3 * 3);
    assert!(plain.bit_eq(&m.predict(&z, 321, &c).unwrap()));
}

#[test]
fn replacement_changes_output_and_bad_shape_is_rejected() {
    let m = tiny::<f32>();
    let c = prompt(&m, "a red square moving on the plain");
    let z = clip(2, 5);
    let plain = m.predict(&z, 700, &c).unwrap();
    let mut uniform = HookSet::write(|key: &AttnKey, map: &Array3<f32>| {
        Ok((key.kind == AttnKind::Cross).then(|| map.mapv(|_| 1.0 / map.dim().2 as f32)))
    });
    let changed = m.predict_with(&z, 700, &c, Some(&mut uniform)).unwrap();
    assert!(changed.max_abs_diff(&plain) > 0.0);

    let mut bad = HookSet::write(|_, _: &Array3<f32>| Ok(Some(Array3::zeros((1, 1, 1)))));
    let err = m.predict_with(&z, 700, &c, Some(&mut bad)).unwrap_err();
    assert!(matches!(err, Error::Hook { .. }), "{err}");
}

#[test]
fn frame_replacement_round_trips() {
    let m = tiny::<f64>();
    let c = prompt(&m, "a square");
    let z = clip(3, 6);
    let plain = m.predict(&z, 200, &c).unwrap();
    let mut hooks =
        HookSet::write(|key: &AttnKey, map: &Array3<f64>| Ok((key.kind == AttnKind::Frame).then(|| map.clone())));
    let same = m.predict_with(&z, 200, &c, Some(&mut hooks)).unwrap();
    assert!(plain.bit_eq(&same));
}

#[test]
fn non_finite_latents_rejected() {
    let m = tiny::<f32>();
    let c = prompt(&m, "a square");
    let mut z = clip::<f32>(1, 7);
    z.data_mut()[[0, 0]] = f32::NAN;
    assert!(matches!(m.predict(&z, 10, &c), Err(Error::Numeric(_))));
}

#[test]
fn training_step_is_deterministic() {
    let m = tiny::<f32>();
    let c = prompt(&m, "a red square moving on the plain");
    let z = clip(2, 8);
    let (a, ga) = m.training_step(&z, &CondInput::Fixed(&c), &schedule(), 11).unwrap();
    let (b, gb) = m.training_step(&z, &CondInput::Fixed(&c), &schedule(), 11).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(a >= 0.0);
    assert_eq!(ga.global_norm().to_bits(), gb.global_norm().to_bits());
}

fn red_square() -> Image {
    let s = Subject {
        shape: Shape::Square,
        color: Color::Red,
        texture: Texture::Striped,
    };
    render_reference(s, 1, 8)
}

#[test]
fn gradients_match_finite_differences() {
    let mut m = tiny::<f64>();
    let v = Vocabulary::default();
    let tokens = tokenize("a square moving on the plain", &v).unwrap();
    let square = v.id("square").unwrap();
    let reference = red_square();
    let z = clip::<f64>(2, 9);
    let sched = schedule();
    let samples = check_gradients(&mut m, 20, 1e-4, 1, |m, grad| {
        let input = CondInput::Prompt {
            tokens: &tokens,
            subject: Some((&reference, square)),
            placement: SubjectPlacement::AfterSubjectWord,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = LatentClip::gaussian(z.grid(), 3, &mut rng);
        m.loss_at(&z, &input, &sched, 400, &eps, grad)
    })
    .unwrap();
    let summary = summarize(&samples);
    for kind in [
        ParamKind::Conv,
        ParamKind::Norm,
        ParamKind::Mlp,
        ParamKind::TimeEmbed,
        ParamKind::TokenEmbed,
        ParamKind::SelfProj,
        ParamKind::CrossProj,
        ParamKind::FrameProj,
        ParamKind::SubjectEncoder,
    ] {
        let (n, worst) = summary[kind.as_str()];
        for s in samples.iter().filter(|s| s.kind == kind && s.rel_error > 1e-4) {
            eprintln!("{s:?}");
        }
        assert!(n >= 20, "{kind:?}: {n} samples");
        assert!(worst < 1e-4, "{kind:?}: {worst}");
    }

    let samples = check_gradients(&mut m, 20, 1e-4, 2, |m, grad| {
        let (l, g) = m.attribute_step(&[&reference], &[[0, 0, 1, 0]])?;
        Ok((l, if grad { g } else { Gradients::default() }))
    })
    .unwrap();
    let (n, worst) = summarize(&samples)["attribute_head"];
    assert!(n >= 20 && worst < 1e-4, "{n} {worst}");
}

#[test]
fn finetune_touches_projections_only() {
    let m = tiny::<f32>();
    let c = prompt(&m, "a red square moving on the plain");
    let z = clip(2, 10);
    let (tuned, log) = m.finetune_on_source(&z, &c, &schedule(), 5, 1e-3, 0).unwrap();
    let projections: Vec<String> = m
        .params()
        .iter()
        .filter(|(_, p)| p.projection)
        .map(|(_, p)| p.name.clone())
        .collect();
    assert_eq!(log.changed, projections);
    assert_eq!(tuned.params().changed_since(m.params()), projections);
    assert!(log.probe_losses.len() >= 2);

    let (same, log) = m.finetune_on_source(&z, &c, &schedule(), 0, 1e-3, 0).unwrap();
    assert!(same.params().changed_since(m.params()).is_empty());
    assert!(log.probe_losses.is_empty());
    assert!(matches!(
        m.finetune_on_source(&z, &c, &schedule(), -1, 1e-3, 0),
        Err(Error::Param(_))
    ));
}

#[test]
fn finetune_lowers_probe_loss() {
    let m = tiny::<f32>();
    let c = prompt(&m, "a red square moving on the plain");
    let z = clip(2, 12);
    let (_, log) = m.finetune_on_source(&z, &c, &schedule(), 200, 3e-3, 0).unwrap();
    assert!(
        log.final_loss().unwrap() < log.initial_loss().unwrap(),
        "{:?}",
        log.probe_losses
    );
}

#[test]
fn subject_encoding_shape_and_determinism() {
    let m = tiny::<f32>();
    let v = Vocabulary::default();
    let word = v.id("square").unwrap();
    let a = m.encode_subject(&red_square(), word).unwrap();
    let b = m.encode_subject(&red_square(), word).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.tokens.dim(), (2, 8));
    let wrong = Image::new(16, 16);
    assert!(matches!(m.encode_subject(&wrong, word), Err(Error::Shape(_))));
}

#[test]
fn fused_condition_in_graph_matches_standalone_fuse() {
    let m = tiny::<f64>();
    let v = Vocabulary::default();
    let tokens = tokenize("a square moving on the plain", &v).unwrap();
    let square = v.id("square").unwrap();
    let r = red_square();
    let c2 = m.embed_text(&tokens);
    let c1 = m.encode_subject(&r, square).unwrap();
    let fused = crate::conditioning::fuse(Some(&c1), &c2, SubjectPlacement::AfterSubjectWord).unwrap();
    let mut g = Graph::new(m.params(), false);
    let input = CondInput::Prompt {
        tokens: &tokens,
        subject: Some((&r, square)),
        placement: SubjectPlacement::AfterSubjectWord,
    };
    let built = m.condition_graph(&mut g, &input).unwrap();
    assert_eq!(g.value(built), &fused.embeddings);
}

#[test]
fn store_round_trip_rebinds_layout() {
    let m = tiny::<f32>();
    let again = Denoiser::from_store(m.config().clone(), m.params().clone()).unwrap();
    let c = prompt(&m, "a square");
    let z = clip(1, 13);
    assert!(m.predict(&z, 5, &c).unwrap().bit_eq(&again.predict(&z, 5, &c).unwrap()));
    let bigger = ModelConfig {
        width: 16,
        ..ModelConfig::tiny()
    };
    assert!(matches!(
        Denoiser::from_store(bigger, m.params().clone()),
        Err(Error::Format(_))
    ));
}

fn corner_masks(frames: usize) -> Vec<Mask> {
    (0..frames)
        .map(|n| {
            let mut m = Mask::new(8, 8);
            for y in 0..4 {
                for x in n..n + 4 {
                    m.set(x, y, true);
                }
            }
            m
        })
        .collect()
}

#[test]
fn localization_loss_gradients_match_finite_differences() {
    let mut m = tiny::<f64>();
    let v = Vocabulary::default();
    let tokens = tokenize("a red square moving on the plain", &v).unwrap();
    let z = clip::<f64>(2, 12);
    let sched = schedule();
    let sup = AttnSupervision {
        columns: vec![1, 2],
        masks: corner_masks(2),
    };
    let samples = check_gradients(&mut m, 20, 1e-4, 6, |m, grad| {
        let input = CondInput::Prompt {
            tokens: &tokens,
            subject: None,
            placement: SubjectPlacement::AfterSubjectWord,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let eps = LatentClip::gaussian(z.grid(), 3, &mut rng);
        let (l, a, g) = m.supervised_loss_at(&z, &input, &sched, 300, &eps, Some((&sup, 0.7)), grad)?;
        Ok((l + 0.7 * a, g))
    })
    .unwrap();
    let summary = summarize(&samples);
    for kind in [
        ParamKind::CrossProj,
        ParamKind::TokenEmbed,
        ParamKind::Conv,
        ParamKind::SelfProj,
    ] {
        let (n, worst) = summary[kind.as_str()];
        assert!(n >= 20 && worst < 1e-4, "{kind:?}: {n} {worst}");
    }
}

#[test]
fn localization_loss_reported_and_optional() {
    let m = tiny::<f64>();
    let c = prompt(&m, "a red square moving on the plain");
    let z = clip::<f64>(2, 13);
    let sup = AttnSupervision {
        columns: vec![2],
        masks: corner_masks(2),
    };
    let input = CondInput::Fixed(&c);
    let (l0, a0, _) = m.supervised_training_step(&z, &input, &schedule(), 4, None).unwrap();
    let (l1, a1, _) = m
        .supervised_training_step(&z, &input, &schedule(), 4, Some((&sup, 1.0)))
        .unwrap();
    assert_eq!(l0, l1);
    assert_eq!(a0, 0.0);
    // roughly uniform attention: mass fraction near the covered area
    assert!(a1 > 0.3 && a1 < 3.0, "{a1}");
    let bad = AttnSupervision {
        columns: vec![99],
        masks: corner_masks(2),
    };
    assert!(matches!(
        m.supervised_training_step(&z, &input, &schedule(), 4, Some((&bad, 1.0))),
        Err(Error::Shape(_))
    ));
    let short = AttnSupervision {
        columns: vec![2],
        masks: corner_masks(1),
    };
    assert!(m
        .supervised_training_step(&z, &input, &schedule(), 4, Some((&short, 1.0)))
        .is_err());
}
