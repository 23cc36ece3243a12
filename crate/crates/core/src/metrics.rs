//! Clip-level evaluation: attribute alignment with a caption, perceptual
//! deviation between clips, temporal inconsistency and background error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, ATTRIBUTE_GROUPS};
use crate::error::{Error, Result};
use crate::frames::{Image, Mask};
use crate::scalar::Scalar;
use crate::synthdata::{Background, Color, Shape, Subject, Texture};

/// Attribute classes named by a caption, one optional index per group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionAttributes {
    pub shape: Option<usize>,
    pub color: Option<usize>,
    pub texture: Option<usize>,
    pub background: Option<usize>,
}

impl CaptionAttributes {
    /// Words outside the attribute vocabulary are ignored. A named shape
    /// without a texture word implies the solid texture.
    pub fn parse(caption: &str) -> Self {
        let mut out = Self::default();
        for w in caption.split_whitespace().map(str::to_lowercase) {
            if let Some(s) = Shape::from_word(&w) {
                out.shape = Some(s.index());
            } else if let Some(c) = Color::from_word(&w) {
                out.color = Some(c.index());
            } else if let Some(t) = Texture::from_word(&w) {
                out.texture = Some(t.index());
            } else if let Some(b) = Background::from_word(&w) {
                out.background = Some(b.index());
            }
        }
        if out.shape.is_some() && out.texture.is_none() {
            out.texture = Some(Texture::Solid.index());
        }
        out
    }

    pub fn of_subject(s: Subject) -> Self {
        Self {
            shape: Some(s.shape.index()),
            color: Some(s.color.index()),
            texture: Some(s.texture.index()),
            background: None,
        }
    }

    fn groups(&self) -> [Option<usize>; 4] {
        [self.shape, self.color, self.texture, self.background]
    }

    pub fn is_empty(&self) -> bool {
        self.groups().iter().all(Option::is_none)
    }
}

/// Attribute classifier used as the caption embedder.
pub struct AttributeEmbedder<'a, T> {
    model: &'a Denoiser<T>,
}

impl<'a, T: Scalar> AttributeEmbedder<'a, T> {
    /// Requires the checkpoint metadata to record attribute-head training.
    pub fn from_checkpoint(model: &'a Denoiser<T>, meta: &serde_json::Value) -> Result<Self> {
        let steps = meta.get("attribute_steps").and_then(|v| v.as_u64()).unwrap_or(0);
        if steps == 0 {
            return Err(Error::State("attribute classifier has not been trained".into()));
        }
        Ok(Self { model })
    }

    /// Trusts the caller that the head is trained.
    pub fn assume_trained(model: &'a Denoiser<T>) -> Self {
        Self { model }
    }

    /// Per-group softmax probabilities, `(frames, 12)`.
    pub fn probabilities(&self, frames: &[Image]) -> Result<Array2<f64>> {
        let refs: Vec<&Image> = frames.iter().collect();
        let logits = self.model.attribute_logits(&refs)?.mapv(|v| v.as_f64());
        let mut probs = logits.clone();
        let mut offset = 0;
        for &(_, size) in &ATTRIBUTE_GROUPS {
            for mut row in probs.axis_iter_mut(Axis(0)) {
                let mut part = row.slice_mut(ndarray::s![offset..offset + size]);
                let max = part.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                part.mapv_inplace(|v| (v - max).exp());
                let sum = part.sum();
                part.mapv_inplace(|v| v / sum);
            }
            offset += size;
        }
        Ok(probs)
    }

    /// Mean probability of the named classes, per frame.
    pub fn score_frames(&self, frames: &[Image], attrs: &CaptionAttributes) -> Result<Vec<f64>> {
        if attrs.is_empty() {
            return Err(Error::Param("caption names no attributes".into()));
        }
        let probs = self.probabilities(frames)?;
        let mut offsets = [0usize; 4];
        for g in 1..4 {
            offsets[g] = offsets[g - 1] + ATTRIBUTE_GROUPS[g - 1].1;
        }
        Ok(probs
            .axis_iter(Axis(0))
            .map(|row| {
                let picks: Vec<f64> = attrs
                    .groups()
                    .iter()
                    .zip(offsets)
                    .filter_map(|(c, off)| c.map(|c| row[off + c]))
                    .collect();
                picks.iter().sum::<f64>() / picks.len() as f64
            })
            .collect())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean per-frame probability of the caption's attributes, in `[0, 1]`.
pub fn alignment_score<T: Scalar>(frames: &[Image], caption: &str, embedder: &AttributeEmbedder<'_, T>) -> Result<f64> {
    Ok(mean(
        &embedder.score_frames(frames, &CaptionAttributes::parse(caption))?,
    ))
}

/// Per-frame feature maps used by the distance metrics.
pub enum FeatureExtractor<'a, T> {
    /// Mid-depth subject-encoder activations, unit-normalized per location.
    Encoder(&'a Denoiser<T>),
    /// Raw RGB in `[0, 1]`.
    Pixels,
}

impl<T: Scalar> FeatureExtractor<'_, T> {
    /// `(locations, channels)` per frame, and the pixel stride between
    /// locations.
    fn extract(&self, frames: &[Image]) -> Result<(Vec<Array2<f64>>, usize)> {
        match self {
            FeatureExtractor::Pixels => Ok((
                frames
                    .iter()
                    .map(|f| Array2::from_shape_fn((f.width * f.height, 3), |(p, c)| f.data[p * 3 + c] as f64 / 255.0))
                    .collect(),
                1,
            )),
            FeatureExtractor::Encoder(model) => {
                let refs: Vec<&Image> = frames.iter().collect();
                let all = model.features(&refs)?.mapv(|v| v.as_f64());
                let per = all.nrows() / frames.len().max(1);
                let side = (per as f64).sqrt().round() as usize;
                let stride = frames.first().map_or(1, |f| f.width / side.max(1));
                let out = (0..frames.len())
                    .map(|n| {
                        let mut block = all.slice(ndarray::s![n * per..(n + 1) * per, ..]).to_owned();
                        for mut row in block.axis_iter_mut(Axis(0)) {
                            let norm = row.dot(&row).sqrt() + 1e-10;
                            row.mapv_inplace(|v| v / norm);
                        }
                        block
                    })
                    .collect();
                Ok((out, stride))
            }
        }
    }
}

fn check_clips(a: &[Image], b: &[Image]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} frames", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if (x.width, x.height) != (y.width, y.height) {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{} frames",
                x.width, x.height, y.width, y.height
            )));
        }
    }
    Ok(())
}

/// Locations of a feature map (stride `s`) touched by the mask.
fn region(mask: &Mask, stride: usize) -> Vec<bool> {
    let (w, h) = (mask.width / stride, mask.height / stride);
    let mut out = vec![false; w * h];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                out[(y / stride) * w + x / stride] = true;
            }
        }
    }
    out
}

fn feature_distance(a: &Array2<f64>, b: &Array2<f64>, keep: Option<&[bool]>) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (i, (ra, rb)) in a.axis_iter(Axis(0)).zip(b.axis_iter(Axis(0))).enumerate() {
        if keep.is_some_and(|k| !k[i]) {
            continue;
        }
        acc += ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        n += 1;
    }
    (n > 0).then(|| acc / n as f64)
}

/// Per-frame feature distance between two clips.
pub fn perceptual_deviation_frames<T: Scalar>(
    a: &[Image],
    b: &[Image],
    extractor: &FeatureExtractor<'_, T>,
) -> Result<Vec<f64>> {
    check_clips(a, b)?;
    let (fa, _) = extractor.extract(a)?;
    let (fb, _) = extractor.extract(b)?;
    Ok(fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| feature_distance(x, y, None).unwrap_or(0.0))
        .collect())
}

/// Mean per-frame feature distance; symmetric and zero on identical clips.
pub fn perceptual_deviation<T: Scalar>(a: &[Image], b: &[Image], extractor: &FeatureExtractor<'_, T>) -> Result<f64> {
    Ok(mean(&perceptual_deviation_frames(a, b, extractor)?))
}

/// Feature distance between consecutive frames, optionally restricted to
/// the union of the two frames' mask regions. Pairs with an empty region
/// are `None`.
pub fn temporal_inconsistency_pairs<T: Scalar>(
    frames: &[Image],
    region_masks: Option<&[Mask]>,
    extractor: &FeatureExtractor<'_, T>,
) -> Result<Vec<Option<f64>>> {
    if frames.len() < 2 {
        return Err(Error::Param(format!(
            "temporal inconsistency needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    check_clips(&frames[..1], &frames[1..2])?;
    if let Some(m) = region_masks {
        if m.len() != frames.len() {
            return Err(Error::Shape(format!("{} masks for {} frames", m.len(), frames.len())));
        }
        if m.iter()
            .any(|m| (m.width, m.height) != (frames[0].width, frames[0].height))
        {
            return Err(Error::Shape("mask resolution differs from frames".into()));
        }
    }
    let (feats, stride) = extractor.extract(frames)?;
    Ok((0..frames.len() - 1)
        .map(|n| {
            let keep = region_masks.map(|m| region(&m[n].union(&m[n + 1]), stride));
            feature_distance(&feats[n], &feats[n + 1], keep.as_deref())
        })
        .collect())
}

pub fn temporal_inconsistency<T: Scalar>(
    frames: &[Image],
    region_masks: Option<&[Mask]>,
    extractor: &FeatureExtractor<'_, T>,
) -> Result<f64> {
    let pairs: Vec<f64> = temporal_inconsistency_pairs(frames, region_masks, extractor)?
        .into_iter()
        .flatten()
        .collect();
    Ok(mean(&pairs))
}

/// Background error: `(mean over frames with background, per-frame
/// values, all-foreground flag)`. Pixels in `[0, 1]` units.
pub fn background_mse_frames(
    source: &[Image],
    edited: &[Image],
    masks: &[Mask],
) -> Result<(f64, Vec<Option<f64>>, bool)> {
    check_clips(source, edited)?;
    if masks.len() != source.len() {
        return Err(Error::Shape(format!(
            "{} masks for {} frames",
            masks.len(),
            source.len()
        )));
    }
    let mut per = Vec::with_capacity(source.len());
    for ((a, b), m) in source.iter().zip(edited).zip(masks) {
        if (m.width, m.height) != (a.width, a.height) {
            return Err(Error::Shape("mask resolution differs from frames".into()));
        }
        let mut acc = 0.0;
        let mut n = 0usize;
        for (p, &fg) in m.data.iter().enumerate() {
            if fg {
                continue;
            }
            for c in 0..3 {
                let d = (a.data[p * 3 + c] as f64 - b.data[p * 3 + c] as f64) / 255.0;
                acc += d * d;
            }
            n += 3;
        }
        per.push((n > 0).then(|| acc / n as f64));
    }
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let empty = present.is_empty();
    if empty {
        log::warn!("background_mse: every mask covers its whole frame");
    }
    Ok((mean(&present), per, empty))
}

pub fn background_mse(source: &[Image], edited: &[Image], masks: &[Mask]) -> Result<f64> {
    Ok(background_mse_frames(source, edited, masks)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub alignment_score: f64,
    pub perceptual_deviation: f64,
    pub temporal_inconsistency: f64,
    pub background_mse: f64,
    pub background_empty: bool,
    pub alignment_per_frame: Vec<f64>,
    pub deviation_per_frame: Vec<f64>,
    pub temporal_per_pair: Vec<Option<f64>>,
    pub background_per_frame: Vec<Option<f64>>,
    #[serde(default)]
    pub config_hash: String,
}

/// Inputs of a full report on one edited clip.
pub struct ReportInputs<'a> {
    pub source: &'a [Image],
    pub edited: &'a [Image],
    pub caption: &'a str,
    /// Subject masks selecting the temporal region and excluding pixels
    /// from the background error.
    pub subject_masks: &'a [Mask],
}

impl MetricReport {
    pub fn compute<T: Scalar>(
        inputs: &ReportInputs<'_>,
        embedder: &AttributeEmbedder<'_, T>,
        extractor: &FeatureExtractor<'_, T>,
        config_hash: &str,
    ) -> Result<Self> {
        let alignment_per_frame = embedder.score_frames(inputs.edited, &CaptionAttributes::parse(inputs.caption))?;
        let deviation_per_frame = perceptual_deviation_frames(inputs.source, inputs.edited, extractor)?;
        let temporal_per_pair = if inputs.edited.len() >= 2 {
            temporal_inconsistency_pairs(inputs.edited, Some(inputs.subject_masks), extractor)?
        } else {
            Vec::new()
        };
        let (background_mse, background_per_frame, background_empty) =
            background_mse_frames(inputs.source, inputs.edited, inputs.subject_masks)?;
        let temporal: Vec<f64> = temporal_per_pair.iter().flatten().copied().collect();
        let report = Self {
            alignment_score: mean(&alignment_per_frame),
            perceptual_deviation: mean(&deviation_per_frame),
            temporal_inconsistency: mean(&temporal),
            background_mse,
            background_empty,
            alignment_per_frame,
            deviation_per_frame,
            temporal_per_pair,
            background_per_frame,
            config_hash: config_hash.to_string(),
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.perceptual_deviation,
            self.temporal_inconsistency,
            self.background_mse,
        ];
        if !(0.0..=1.0).contains(&self.alignment_score) || scalars.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric(format!("metric report out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::path(path, e))
    }
}

/// Comparison table, one row per `(case, arm)`.
pub fn report_table_csv(rows: &BTreeMap<(String, String), MetricReport>) -> String {
    let mut out = String::from(
        "case,arm,alignment_score,perceptual_deviation,temporal_inconsistency,background_mse,config_hash\n",
    );
    for ((case, arm), r) in rows {
        let _ = writeln!(
            out,
            "{case},{arm},{:.6},{:.6},{:.6},{:.6},{}",
            r.alignment_score, r.perceptual_deviation, r.temporal_inconsistency, r.background_mse, r.config_hash
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;

    fn clip(n: usize, seed: u8) -> Vec<Image> {
        (0..n)
            .map(|i| {
                let mut im = Image::new(8, 8);
                for (p, v) in im.data.iter_mut().enumerate() {
                    *v = (p as u8).wrapping_mul(7).wrapping_add(seed).wrapping_add(i as u8 * 3);
                }
                im
            })
            .collect()
    }

    #[test]
    fn caption_attributes() {
        let a = CaptionAttributes::parse("a red square moving on the plain");
        assert_eq!(a.shape, Some(Shape::Square.index()));
        assert_eq!(a.color, Some(Color::Red.index()));
        assert_eq!(a.texture, Some(Texture::Solid.index()));
        assert_eq!(a.background, Some(Background::Plain.index()));
        let b = CaptionAttributes::parse("a striped circle");
        assert_eq!((b.color, b.texture), (None, Some(Texture::Striped.index())));
        assert!(CaptionAttributes::parse("moving on the").is_empty());
    }

    #[test]
    fn alignment_bounded_and_deterministic() {
        let m = Denoiser::<f64>::init(ModelConfig::tiny(), 1).unwrap();
        let e = AttributeEmbedder::assume_trained(&m);
        let c = clip(3, 0);
        let s = alignment_score(&c, "a blue circle moving on the checker", &e).unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert_eq!(
            s,
            alignment_score(&c, "a blue circle moving on the checker", &e).unwrap()
        );
        let probs = e.probabilities(&c).unwrap();
        assert!((probs.row(0).sum() - 4.0).abs() < 1e-12);
        assert!(matches!(
            AttributeEmbedder::from_checkpoint(&m, &serde_json::json!({})),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn deviation_identity_and_symmetry() {
        let m = Denoiser::<f64>::init(ModelConfig::tiny(), 1).unwrap();
        let (a, b) = (clip(2, 0), clip(2, 90));
        for ex in [FeatureExtractor::Encoder(&m), FeatureExtractor::Pixels] {
            assert_eq!(perceptual_deviation(&a, &a, &ex).unwrap(), 0.0);
            let ab = perceptual_deviation(&a, &b, &ex).unwrap();
            assert!(ab > 0.0);
            assert_eq!(ab, perceptual_deviation(&b, &a, &ex).unwrap());
        }
        let short = clip(1, 0);
        assert!(matches!(
            perceptual_deviation(&a, &short, &FeatureExtractor::<f64>::Pixels),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn temporal_static_zero_and_noise_increases() {
        let m = Denoiser::<f64>::init(ModelConfig::tiny(), 1).unwrap();
        let ex = FeatureExtractor::Encoder(&m);
        let still = vec![clip(1, 5)[0].clone(); 4];
        assert_eq!(temporal_inconsistency(&still, None, &ex).unwrap(), 0.0);
        let base = clip(4, 5);
        let mut noisy = base.clone();
        noisy[2] = clip(1, 200)[0].clone();
        for v in noisy[2].data.iter_mut().step_by(2) {
            *v = 255 - *v;
        }
        let t0 = temporal_inconsistency(&base, None, &ex).unwrap();
        let t1 = temporal_inconsistency(&noisy, None, &ex).unwrap();
        assert!(t1 > t0, "{t1} <= {t0}");
        assert!(matches!(
            temporal_inconsistency(&base[..1], None, &ex),
            Err(Error::Param(_))
        ));
        let empty = vec![Mask::new(8, 8); 4];
        assert_eq!(temporal_inconsistency(&noisy, Some(&empty), &ex).unwrap(), 0.0);
    }

    #[test]
    fn background_contract() {
        let a = clip(2, 0);
        let mut b = a.clone();
        let none = vec![Mask::new(8, 8); 2];
        assert_eq!(background_mse(&a, &a, &none).unwrap(), 0.0);
        b[0].data[0] = b[0].data[0].wrapping_add(51);
        let mut fg = Mask::new(8, 8);
        fg.set(0, 0, true);
        let masks = vec![fg.clone(), fg];
        assert_eq!(background_mse(&a, &b, &masks).unwrap(), 0.0);
        assert!(background_mse(&a, &b, &none).unwrap() > 0.0);
        let mut full = Mask::new(8, 8);
        full.data.iter_mut().for_each(|v| *v = true);
        let (v, _, flag) = background_mse_frames(&a, &b, &[full.clone(), full]).unwrap();
        assert_eq!((v, flag), (0.0, true));
    }

    #[test]
    fn csv_has_one_row_per_arm() {
        let r = MetricReport {
            alignment_score: 0.5,
            perceptual_deviation: 0.1,
            temporal_inconsistency: 0.2,
            background_mse: 0.3,
            background_empty: false,
            alignment_per_frame: vec![],
            deviation_per_frame: vec![],
            temporal_per_pair: vec![],
            background_per_frame: vec![],
            config_hash: "abc".into(),
        };
        let mut rows = BTreeMap::new();
        rows.insert(("c0".to_string(), "full".to_string()), r.clone());
        rows.insert(("c0".to_string(), "off".to_string()), r);
        let csv = report_table_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("c0,off,0.500000"));
    }
}
