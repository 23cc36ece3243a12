//! Training the denoiser, text table, subject encoder and attribute head
//! on a synthetic corpus.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::conditioning::{fused_layout, tokenize, Provenance, SubjectPlacement, TokenSeq, Vocabulary, WordClass};
use crate::denoiser::{AttnSupervision, CondInput, Denoiser};
use crate::error::{Error, Result};
use crate::frames::{Clip, Image, Mask};
use crate::latent::LatentClip;
use crate::params::Adam;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::synthdata::{derive_seed, generate_clip, render_reference, ClipSpec, CorpusManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Linear learning-rate warmup length.
    pub warmup: usize,
    /// Consecutive frames drawn from a clip per step.
    pub window_frames: usize,
    /// Probability of the empty prompt.
    pub null_prob: f64,
    /// Probability of the shape-only caption fused with a reference render.
    pub reference_prob: f64,
    /// Images per attribute-head batch; 0 disables that loss.
    pub attribute_batch: usize,
    pub attribute_weight: f64,
    /// Weight of the loss pulling subject-column cross-attention inside
    /// the subject masks; 0 disables it.
    pub attention_weight: f64,
    /// Probability of drawing the timestep from the upper half of the
    /// schedule instead of the whole range.
    pub high_noise_prob: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            lr: 1e-3,
            warmup: 100,
            window_frames: 4,
            null_prob: 0.1,
            reference_prob: 0.45,
            attribute_batch: 8,
            attribute_weight: 0.5,
            attention_weight: 0.1,
            high_noise_prob: 0.5,
            log_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_frames == 0 {
            return Err(Error::Param("window_frames must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Param(format!("learning rate {}", self.lr)));
        }
        if !(self.attention_weight.is_finite() && self.attention_weight >= 0.0) {
            return Err(Error::Param(format!("attention weight {}", self.attention_weight)));
        }
        if !(0.0..=1.0).contains(&self.high_noise_prob) {
            return Err(Error::Param(format!("high-noise probability {}", self.high_noise_prob)));
        }
        let p = self.null_prob + self.reference_prob;
        if self.null_prob < 0.0 || self.reference_prob < 0.0 || p > 1.0 {
            return Err(Error::Param(format!(
                "condition probabilities {} + {} outside [0, 1]",
                self.null_prob, self.reference_prob
            )));
        }
        Ok(())
    }
}

/// A training clip already in latent space, with its subject masks.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub spec: ClipSpec,
    pub frames: Vec<Image>,
    pub masks: Vec<Mask>,
    pub latents: LatentClip<T>,
}

impl<T: Scalar> TrainSample<T> {
    /// Masks are re-rendered from the `ClipSpec`.
    pub fn new(spec: ClipSpec, frames: Vec<Image>, autoencoder: Autoencoder) -> Result<Self> {
        let latents = autoencoder.encode(&frames)?;
        let masks = generate_clip(&spec).masks;
        if masks.len() != frames.len() {
            return Err(Error::Shape(format!(
                "{} masks for {} frames",
                masks.len(),
                frames.len()
            )));
        }
        Ok(Self {
            spec,
            frames,
            masks,
            latents,
        })
    }
}

/// Condition columns describing the subject: colour, texture and noun
/// words plus any fused subject tokens.
pub fn subject_describing_columns(
    tokens: &TokenSeq,
    subject_word: Option<crate::conditioning::TokenId>,
    subject_tokens: usize,
    placement: SubjectPlacement,
    vocab: &Vocabulary,
) -> Result<Vec<usize>> {
    let (_, labels) = fused_layout(tokens, subject_word, subject_tokens, placement)?;
    Ok(labels
        .iter()
        .enumerate()
        .filter(|(_, l)| match l {
            Provenance::Subject(_) => true,
            Provenance::Text(i) => matches!(
                vocab.class(tokens.ids()[*i]),
                WordClass::Shape | WordClass::Noun | WordClass::Color | WordClass::Texture
            ),
        })
        .map(|(c, _)| c)
        .collect())
}

/// Loads the training split of a corpus written by
/// [`CorpusManifest::write`].
pub fn load_training_set<T: Scalar>(root: &Path, autoencoder: Autoencoder) -> Result<Vec<TrainSample<T>>> {
    let manifest = CorpusManifest::load(root)?;
    manifest
        .train()
        .map(|e| {
            let clip = Clip::load_dir(&root.join(&e.path))?;
            TrainSample::new(e.spec, clip.frames, autoencoder)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `(step, mean denoising loss over the preceding window)`.
    pub losses: Vec<(usize, f64)>,
    pub attribute_losses: Vec<(usize, f64)>,
    /// `(step, mean localization loss)` over steps that had one.
    pub attention_losses: Vec<(usize, f64)>,
    pub steps: usize,
    pub attribute_steps: usize,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.losses.first().map(|l| l.1)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.losses.last().map(|l| l.1)
    }

    /// Header metadata for a checkpoint written after this run.
    pub fn meta(&self, config_hash: &str) -> serde_json::Value {
        serde_json::json!({
            "train_steps": self.steps,
            "attribute_steps": self.attribute_steps,
            "first_loss": self.first_loss(),
            "last_loss": self.last_loss(),
            "config_hash": config_hash,
        })
    }
}

/// Attribute labels `[shape, color, texture, background]` of a spec.
pub fn attribute_labels(spec: &ClipSpec) -> [usize; 4] {
    [
        spec.shape.index(),
        spec.color.index(),
        spec.texture.index(),
        spec.background.index(),
    ]
}

/// Condition used for one training example.
enum Mode {
    Null,
    Full,
    Reference(Image),
}

/// Timestep in `1..=total`, drawn from the upper half with probability
/// `high_prob` and uniformly otherwise.
pub fn sample_timestep(rng: &mut impl Rng, total: usize, high_prob: f64) -> usize {
    let low = if rng.random::<f64>() < high_prob {
        total / 2 + 1
    } else {
        1
    };
    rng.random_range(low.min(total)..=total)
}

/// Trains every parameter with Adam. The denoising loss on a random clip
/// window and, when enabled, the attribute cross-entropy on a mixed batch
/// of clip frames and reference renders are summed into one update.
pub fn train<T: Scalar>(
    model: &mut Denoiser<T>,
    data: &[TrainSample<T>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    mut on_log: impl FnMut(usize, f64),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Param("empty training set".into()));
    }
    let res = model.config().image_size;
    if let Some(bad) = data.iter().find(|d| d.frames.first().is_some_and(|f| f.width != res)) {
        return Err(Error::Shape(format!(
            "clip resolution {} vs model image_size {res}",
            bad.spec.resolution
        )));
    }
    let null_tokens = tokenize("", vocab)?;
    let mut captions = Vec::with_capacity(data.len());
    for d in data {
        captions.push((
            tokenize(&d.spec.caption(), vocab)?,
            tokenize(&d.spec.rough_caption(), vocab)?,
        ));
    }
    let mut opt = Adam::<T>::new(cfg.lr);
    let mut log = TrainLog::default();
    let (mut window, mut window_n) = (0.0, 0usize);
    let (mut attr_window, mut attr_n) = (0.0, 0usize);
    let (mut attn_window, mut attn_n) = (0.0, 0usize);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step as u64));
        let idx = rng.random_range(0..data.len());
        let sample = &data[idx];
        let n = sample.latents.frames();
        let len = cfg.window_frames.min(n);
        let start = rng.random_range(0..=n - len);
        let clip = sample.latents.frames_range(start, len);
        let u: f64 = rng.random();
        let mode = if u < cfg.null_prob {
            Mode::Null
        } else if u < cfg.null_prob + cfg.reference_prob {
            Mode::Reference(render_reference(sample.spec.subject(), rng.random(), res))
        } else {
            Mode::Full
        };
        let (full, rough) = &captions[idx];
        let word = vocab
            .id(sample.spec.shape.word())
            .ok_or_else(|| Error::Vocabulary(sample.spec.shape.word().into()))?;
        let (tokens, subject): (&TokenSeq, _) = match &mode {
            Mode::Null => (&null_tokens, None),
            Mode::Full => (full, None),
            Mode::Reference(img) => (rough, Some((img, word))),
        };
        let cond = CondInput::Prompt {
            tokens,
            subject,
            placement: SubjectPlacement::AfterSubjectWord,
        };
        let supervision = match &mode {
            Mode::Null => None,
            _ if cfg.attention_weight == 0.0 => None,
            _ => {
                let k = model.config().subject_tokens;
                let word = subject.map(|(_, w)| w);
                let columns = subject_describing_columns(tokens, word, k, SubjectPlacement::AfterSubjectWord, vocab)?;
                Some(AttnSupervision {
                    columns,
                    masks: sample.masks[start..start + len].to_vec(),
                })
            }
        };
        let attention = supervision.as_ref().map(|s| (s, cfg.attention_weight));
        let t = sample_timestep(&mut rng, schedule.total_steps(), cfg.high_noise_prob);
        let eps = LatentClip::gaussian(clip.grid(), clip.channels(), &mut rng);
        let (loss, attn, mut grads) = model.supervised_loss_at(&clip, &cond, schedule, t, &eps, attention, true)?;
        window += loss.as_f64();
        window_n += 1;
        if supervision.is_some() {
            attn_window += attn.as_f64();
            attn_n += 1;
        }

        if cfg.attribute_batch > 0 {
            let mut images = Vec::with_capacity(cfg.attribute_batch);
            let mut labels = Vec::with_capacity(cfg.attribute_batch);
            for b in 0..cfg.attribute_batch {
                let d = &data[rng.random_range(0..data.len())];
                let mut l = attribute_labels(&d.spec);
                if b % 2 == 0 {
                    images.push(d.frames[rng.random_range(0..d.frames.len())].clone());
                } else {
                    images.push(render_reference(d.spec.subject(), rng.random(), res));
                    l[3] = crate::synthdata::Background::Plain.index();
                }
                labels.push(l);
            }
            let refs: Vec<&Image> = images.iter().collect();
            let (al, ag) = model.attribute_step(&refs, &labels)?;
            grads.accumulate(&ag, T::lit(cfg.attribute_weight));
            attr_window += al.as_f64();
            attr_n += 1;
            log.attribute_steps += 1;
        }

        let warm = if cfg.warmup == 0 {
            1.0
        } else {
            ((step + 1) as f64 / cfg.warmup as f64).min(1.0)
        };
        opt.lr = T::lit(cfg.lr * warm);
        opt.step(model.params_mut(), &grads, |_| true);
        log.steps += 1;

        let last = step + 1 == cfg.steps;
        if cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || last) && window_n > 0 {
            let mean = window / window_n as f64;
            info!("step {} loss {mean:.5}", step + 1);
            on_log(step + 1, mean);
            log.losses.push((step + 1, mean));
            if attr_n > 0 {
                log.attribute_losses.push((step + 1, attr_window / attr_n as f64));
            }
            if attn_n > 0 {
                log.attention_losses.push((step + 1, attn_window / attn_n as f64));
            }
            (window, window_n, attr_window, attr_n) = (0.0, 0, 0.0, 0);
            (attn_window, attn_n) = (0.0, 0);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;
    use crate::schedule::{build_schedule, BetaSpacing};
    use crate::synthdata::{generate_clip, sample_spec};

    fn data(n: usize) -> Vec<TrainSample<f32>> {
        (0..n)
            .map(|i| {
                let spec = sample_spec(5, i, 2, 8);
                TrainSample::new(spec, generate_clip(&spec).frames, Autoencoder::AvgPool2).unwrap()
            })
            .collect()
    }

    #[test]
    fn timestep_sampling_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let high: Vec<usize> = (0..500).map(|_| sample_timestep(&mut rng, 1000, 1.0)).collect();
        assert!(high.iter().all(|&t| (501..=1000).contains(&t)));
        let any: Vec<usize> = (0..2000).map(|_| sample_timestep(&mut rng, 1000, 0.0)).collect();
        assert!(any.iter().all(|&t| (1..=1000).contains(&t)));
        let below = any.iter().filter(|&&t| t <= 500).count() as f64 / any.len() as f64;
        assert!((below - 0.5).abs() < 0.05, "{below}");
        let mixed = (0..4000)
            .filter(|_| sample_timestep(&mut rng, 1000, 0.5) <= 500)
            .count() as f64
            / 4000.0;
        assert!((mixed - 0.25).abs() < 0.03, "{mixed}");
        assert_eq!(sample_timestep(&mut rng, 1, 1.0), 1);
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let s = build_schedule(1000, 1e-4, 0.02, BetaSpacing::Linear, 10).unwrap();
        let cfg = TrainConfig {
            steps: 6,
            log_every: 3,
            attribute_batch: 2,
            window_frames: 2,
            ..Default::default()
        };
        let d = data(3);
        let v = Vocabulary::default();
        let run = || {
            let mut m = Denoiser::<f32>::init(ModelConfig::tiny(), 0).unwrap();
            let log = train(&mut m, &d, &s, &cfg, &v, |_, _| {}).unwrap();
            (m, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert!(a.params().changed_since(b.params()).is_empty());
        assert_eq!(la.losses.len(), 2);
        assert_eq!(la.attribute_steps, 6);
        assert_eq!(la.meta("h")["attribute_steps"], 6);
    }

    #[test]
    fn bad_configs_rejected() {
        let s = build_schedule(1000, 1e-4, 0.02, BetaSpacing::Linear, 10).unwrap();
        let v = Vocabulary::default();
        let mut m = Denoiser::<f32>::init(ModelConfig::tiny(), 0).unwrap();
        let cfg = TrainConfig {
            null_prob: 0.8,
            reference_prob: 0.5,
            ..Default::default()
        };
        assert!(train(&mut m, &data(1), &s, &cfg, &v, |_, _| {}).is_err());
        assert!(train(&mut m, &[], &s, &TrainConfig::default(), &v, |_, _| {}).is_err());
    }
}
