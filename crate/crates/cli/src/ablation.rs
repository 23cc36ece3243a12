//! Fixed suite of toy edits run under four arms, with the ordering checks
//! comparing them.

use std::collections::BTreeMap;

use capvid::conditioning::Vocabulary;
use capvid::control::{Branch, ControllerConfig};
use capvid::denoiser::{AttentionRecord, Denoiser};
use capvid::frames::{Image, Mask};
use capvid::metrics::{background_mse, temporal_inconsistency, AttributeEmbedder, CaptionAttributes, FeatureExtractor};
use capvid::pipeline::{edit_video_arms, ArmSpec, EditOptions, EditRequest, EditSettings};
use capvid::schedule::NoiseSchedule;
use capvid::synthdata::{derive_seed, generate_clip, render_reference, sample_spec, ClipSpec, Color, Shape, Subject};
use capvid::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const FULL: &str = "full";
pub const NO_REFERENCE: &str = "no_reference";
pub const NO_INJECTION: &str = "no_injection";
pub const CONTROLLER_OFF: &str = "controller_off";

/// One source clip and the subject it is edited into. Both clips share
/// background, motion and poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCase {
    pub id: usize,
    pub source: ClipSpec,
    pub target: ClipSpec,
    pub reference_seed: u64,
}

impl AblationCase {
    pub fn source_prompt(&self) -> String {
        self.source.caption()
    }

    /// The edit prompt names the new shape only; colour and texture come
    /// from the reference image.
    pub fn edit_prompt(&self) -> String {
        self.target.rough_caption()
    }

    pub fn reference(&self) -> Image {
        render_reference(self.target.subject(), self.reference_seed, self.target.resolution)
    }

    /// Per-frame union of the source and target subject masks.
    pub fn subject_masks(&self) -> Vec<Mask> {
        let a = generate_clip(&self.source).masks;
        let b = generate_clip(&self.target).masks;
        a.iter().zip(&b).map(|(x, y)| x.union(y)).collect()
    }
}

/// Cases with a different shape and colour than the source subject.
pub fn ablation_cases(n: usize, seed: u64, n_frames: usize, resolution: usize) -> Vec<AblationCase> {
    (0..n)
        .map(|id| {
            let source = sample_spec(seed, id, n_frames, resolution);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0xab1a_7e, id as u64));
            let shape = Shape::ALL[(source.shape.index() + rng.random_range(1..Shape::ALL.len())) % Shape::ALL.len()];
            let color = Color::ALL[(source.color.index() + rng.random_range(1..Color::ALL.len())) % Color::ALL.len()];
            let texture = capvid::synthdata::Texture::ALL[rng.random_range(0..2)];
            let target = source.with_subject(Subject { shape, color, texture });
            AblationCase {
                id,
                source,
                target,
                reference_seed: rng.random(),
            }
        })
        .collect()
}

/// The four arms sharing one source branch.
pub fn arm_specs(base: &ControllerConfig) -> Vec<ArmSpec> {
    vec![
        ArmSpec {
            name: FULL.into(),
            controller: base.clone(),
            use_reference: true,
        },
        ArmSpec {
            name: NO_REFERENCE.into(),
            controller: base.clone(),
            use_reference: false,
        },
        ArmSpec {
            name: NO_INJECTION.into(),
            controller: ControllerConfig {
                injection_enabled: false,
                ..base.clone()
            },
            use_reference: true,
        },
        ArmSpec {
            name: CONTROLLER_OFF.into(),
            controller: ControllerConfig::disabled(),
            use_reference: true,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    /// Frame-to-frame feature change inside the subject region.
    pub temporal_subject: f64,
    /// Pixel error against the source outside the subject region.
    pub background_mse: f64,
    /// Attribute probability of the reference subject on edited frames.
    pub subject_score: f64,
    /// IoU of the pixel blend mask with the subject region, per frame mean.
    pub mask_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case: AblationCase,
    pub arms: BTreeMap<String, ArmMetrics>,
    pub config_hash: String,
}

/// The settings a case runs with, derived from a template.
pub fn case_settings(case: &AblationCase, template: &EditSettings) -> EditSettings {
    EditSettings {
        source_prompt: case.source_prompt(),
        edit_prompt: case.edit_prompt(),
        ..template.clone()
    }
}

/// Runs all four arms of one case.
pub fn run_case<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule,
    case: &AblationCase,
    template: &EditSettings,
    vocab: &Vocabulary,
    audit: Option<&mut dyn FnMut(Branch, &AttentionRecord<T>)>,
) -> capvid::Result<CaseOutcome> {
    let settings = case_settings(case, template);
    let frames = generate_clip(&case.source).frames;
    let request = EditRequest {
        frames: frames.clone(),
        reference: Some(case.reference()),
        settings: settings.clone(),
    };
    let arms = arm_specs(&settings.controller);
    let options = EditOptions {
        compute_metrics: false,
        audit,
    };
    let outcome = edit_video_arms(model, schedule, &request, vocab, &arms, options)?;
    let masks = case.subject_masks();
    let extractor = FeatureExtractor::Encoder(model);
    let embedder = AttributeEmbedder::assume_trained(model);
    let target = CaptionAttributes::of_subject(case.target.subject());
    let mut out = BTreeMap::new();
    for r in &outcome.results {
        let temporal_subject = temporal_inconsistency(&r.edited, Some(&masks), &extractor)?;
        let background = background_mse(&frames, &r.edited, &masks)?;
        let scores = embedder.score_frames(&r.edited, &target)?;
        let subject_score = scores.iter().sum::<f64>() / scores.len() as f64;
        let mask_iou = r.blend.as_ref().map(|_| {
            let ious: Vec<f64> = r.masks.iter().zip(&masks).map(|(a, b)| a.iou(b)).collect();
            ious.iter().sum::<f64>() / ious.len() as f64
        });
        out.insert(
            r.provenance.arm.clone(),
            ArmMetrics {
                temporal_subject,
                background_mse: background,
                subject_score,
                mask_iou,
            },
        );
    }
    Ok(CaseOutcome {
        case: case.clone(),
        arms: out,
        config_hash: settings.hash(),
    })
}

/// Result of one ordering comparison across the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub description: String,
    /// Fraction of cases where the ordering holds.
    pub fraction: f64,
    pub required_fraction: f64,
    /// Mean of (worse arm - better arm); positive means the expected arm
    /// wins on average.
    pub mean_improvement: f64,
    pub passed: bool,
}

impl OrderingCheck {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} ({:.0}% of cases, required {:.0}%; mean improvement {:.6})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.description,
            100.0 * self.fraction,
            100.0 * self.required_fraction,
            self.mean_improvement
        )
    }
}

fn paired(
    outcomes: &[CaseOutcome],
    better: &str,
    worse: &str,
    metric: impl Fn(&ArmMetrics) -> f64,
    strict: bool,
) -> (f64, f64) {
    let diffs: Vec<f64> = outcomes
        .iter()
        .map(|o| metric(&o.arms[worse]) - metric(&o.arms[better]))
        .collect();
    let wins = diffs
        .iter()
        .filter(|&&d| if strict { d > 0.0 } else { d >= 0.0 })
        .count();
    let n = diffs.len().max(1) as f64;
    (wins as f64 / n, diffs.iter().sum::<f64>() / n)
}

/// Temporal consistency, background preservation, subject fidelity and
/// mask localization over the suite.
pub fn evaluate(outcomes: &[CaseOutcome]) -> Vec<OrderingCheck> {
    let (f8, m8) = paired(outcomes, FULL, NO_INJECTION, |a| a.temporal_subject, false);
    let (f9, m9) = paired(outcomes, FULL, CONTROLLER_OFF, |a| a.background_mse, true);
    let (f10, m10) = paired(outcomes, FULL, NO_REFERENCE, |a| -a.subject_score, true);
    let ious: Vec<f64> = outcomes.iter().filter_map(|o| o.arms[FULL].mask_iou).collect();
    let mean_iou = if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    vec![
        OrderingCheck {
            name: "injection".into(),
            description: "subject-region temporal inconsistency with injection <= without".into(),
            fraction: f8,
            required_fraction: 0.8,
            mean_improvement: m8,
            passed: f8 >= 0.8 && m8 > 0.0,
        },
        OrderingCheck {
            name: "background".into(),
            description: "background MSE with full controller < controller off".into(),
            fraction: f9,
            required_fraction: 0.8,
            mean_improvement: m9,
            passed: f9 >= 0.8,
        },
        OrderingCheck {
            name: "subject_fidelity".into(),
            description: "reference-subject score with fused reference > without".into(),
            fraction: f10,
            required_fraction: 0.8,
            mean_improvement: m10,
            passed: f10 >= 0.8,
        },
        OrderingCheck {
            name: "mask_localization".into(),
            description: format!("mean blend-mask IoU {mean_iou:.4} > 0.5"),
            fraction: ious.iter().filter(|&&v| v > 0.5).count() as f64 / ious.len().max(1) as f64,
            required_fraction: 0.0,
            mean_improvement: mean_iou - 0.5,
            passed: mean_iou > 0.5,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_change_shape_and_colour() {
        let cases = ablation_cases(30, 4, 8, 32);
        assert_eq!(cases, ablation_cases(30, 4, 8, 32));
        for c in &cases {
            assert_ne!(c.source.shape, c.target.shape);
            assert_ne!(c.source.color, c.target.color);
            assert_eq!(
                (c.source.motion, c.source.background, c.source.seed),
                (c.target.motion, c.target.background, c.target.seed)
            );
            assert_eq!(c.subject_masks().len(), 8);
        }
    }

    #[test]
    fn four_arms() {
        let arms = arm_specs(&ControllerConfig::default());
        let names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, [FULL, NO_REFERENCE, NO_INJECTION, CONTROLLER_OFF]);
        assert!(!arms[2].controller.injection_enabled);
        assert!(!arms[1].use_reference);
    }
}
