//! Attention control for the edit branch: adjacent-frame injection of the
//! source branch's cross-attention, word-swap replacement, and a blend
//! mask derived from accumulated subject-token attention.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::conditioning::{Provenance, TokenAlignment};
use crate::denoiser::{AttentionHooks, AttentionRecord, AttnKey, AttnKind, HookSet};
use crate::error::{Error, Result};
use crate::frames::Mask;
use crate::latent::LatentClip;
use crate::scalar::Scalar;
use crate::schedule::{leading_steps, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Fraction of denoising steps, from the start, with word swap active.
    pub cross_replace_ratio: f64,
    pub injection_enabled: bool,
    /// Fraction of denoising steps, from the start, with injection active.
    pub injection_ratio: f64,
    /// Weight of the previous frame's map in the injected blend.
    pub injection_weight: f64,
    pub attention_threshold: f64,
    pub local_blend_enabled: bool,
    /// Fraction of steps before local blending starts.
    pub blend_start_ratio: f64,
    /// Fraction of steps, from the start, with source self-attention
    /// copied into the edit branch.
    pub self_attention_replace_ratio: f64,
    /// Run the edit branch once unhooked to obtain its maps, then again
    /// with the edited maps.
    pub two_pass: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            cross_replace_ratio: 0.8,
            injection_enabled: true,
            injection_ratio: 0.8,
            injection_weight: 0.5,
            attention_threshold: 0.3,
            local_blend_enabled: true,
            blend_start_ratio: 0.2,
            self_attention_replace_ratio: 0.0,
            two_pass: false,
        }
    }
}

impl ControllerConfig {
    /// Every gate closed: the edit branch is plain sampling.
    pub fn disabled() -> Self {
        Self {
            cross_replace_ratio: 0.0,
            injection_enabled: false,
            local_blend_enabled: false,
            self_attention_replace_ratio: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("cross_replace_ratio", self.cross_replace_ratio),
            ("injection_ratio", self.injection_ratio),
            ("injection_weight", self.injection_weight),
            ("blend_start_ratio", self.blend_start_ratio),
            ("self_attention_replace_ratio", self.self_attention_replace_ratio),
        ];
        if let Some((name, v)) = unit.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(Error::Param(format!("{name} = {v} outside [0, 1]")));
        }
        let th = self.attention_threshold;
        if !(th > 0.0 && th < 1.0) {
            return Err(Error::Param(format!("attention_threshold = {th} outside (0, 1)")));
        }
        Ok(())
    }

    pub fn replace_active(&self, t: usize, schedule: &NoiseSchedule) -> bool {
        schedule.in_leading_window(t, self.cross_replace_ratio)
    }

    pub fn injection_active(&self, t: usize, schedule: &NoiseSchedule) -> bool {
        self.injection_enabled && schedule.in_leading_window(t, self.injection_ratio)
    }

    pub fn self_replace_active(&self, t: usize, schedule: &NoiseSchedule) -> bool {
        schedule.in_leading_window(t, self.self_attention_replace_ratio)
    }

    /// Whether local blending applies after the denoising step at ladder
    /// position `step`.
    pub fn blend_active(&self, step: usize, schedule: &NoiseSchedule) -> bool {
        self.local_blend_enabled && step >= leading_steps(self.blend_start_ratio, schedule.num_ddim_steps())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Source,
    Edit,
}

/// Attention maps of one branch. Full maps are kept per key; cross maps
/// are additionally kept head-averaged for every timestep seen, which is
/// what the blend mask consumes.
#[derive(Debug, Clone)]
pub struct AttentionStore<T> {
    pub branch: Branch,
    maps: BTreeMap<AttnKey, Array3<T>>,
    cross_history: BTreeMap<AttnKey, Array2<T>>,
}

impl<T: Scalar> AttentionStore<T> {
    pub fn new(branch: Branch) -> Self {
        Self {
            branch,
            maps: BTreeMap::new(),
            cross_history: BTreeMap::new(),
        }
    }

    /// Adds a map; a key may be written only once.
    pub fn insert(&mut self, key: AttnKey, map: Array3<T>) -> Result<()> {
        if self.maps.contains_key(&key) || self.cross_history.contains_key(&key) {
            return Err(Error::State(format!("{:?} store already holds {key}", self.branch)));
        }
        if key.kind == AttnKind::Cross {
            let mean = map.mean_axis(Axis(0)).expect("at least one head");
            self.cross_history.insert(key, mean);
        }
        self.maps.insert(key, map);
        Ok(())
    }

    pub fn get(&self, key: &AttnKey) -> Option<&Array3<T>> {
        self.maps.get(key)
    }

    pub fn require(&self, key: &AttnKey) -> Result<&Array3<T>> {
        self.maps.get(key).ok_or(Error::StoreMiss(*key))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty() && self.cross_history.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &AttnKey> {
        self.maps.keys()
    }

    pub fn records(&self) -> impl Iterator<Item = AttentionRecord<T>> + '_ {
        self.maps.iter().map(|(k, m)| AttentionRecord {
            key: *k,
            map: m.clone(),
        })
    }

    /// Drops full maps of every other timestep; history is kept.
    pub fn retain_timestep(&mut self, t: usize) {
        self.maps.retain(|k, _| k.t == t);
    }

    /// Head-averaged cross maps, shaped `(1, queries, keys)`, of the
    /// timesteps `keep` accepts.
    pub fn history_records(&self, mut keep: impl FnMut(usize) -> bool) -> Vec<AttentionRecord<T>> {
        self.cross_history
            .iter()
            .filter(|(k, _)| keep(k.t))
            .map(|(k, m)| AttentionRecord {
                key: *k,
                map: m.clone().insert_axis(Axis(0)),
            })
            .collect()
    }

    /// Timesteps present in the cross-attention history.
    pub fn history_timesteps(&self) -> BTreeSet<usize> {
        self.cross_history.keys().map(|k| k.t).collect()
    }
}

/// Records every observed map of the requested kinds into a store.
pub struct StoreRecorder<'s, T> {
    pub store: &'s mut AttentionStore<T>,
    pub kinds: Vec<AttnKind>,
    pub error: Option<Error>,
}

impl<'s, T: Scalar> StoreRecorder<'s, T> {
    pub fn new(store: &'s mut AttentionStore<T>, kinds: Vec<AttnKind>) -> Self {
        Self {
            store,
            kinds,
            error: None,
        }
    }

    pub fn finish(self) -> Result<()> {
        self.error.map_or(Ok(()), Err)
    }
}

impl<T: Scalar> AttentionHooks<T> for StoreRecorder<'_, T> {
    fn wants(&self, kind: AttnKind) -> bool {
        self.kinds.contains(&kind)
    }

    fn observe(&mut self, record: &AttentionRecord<T>) {
        if self.error.is_none() && self.kinds.contains(&record.key.kind) {
            if let Err(e) = self.store.insert(record.key, record.map.clone()) {
                self.error = Some(e);
            }
        }
    }
}

/// `λ M_prev + (1 - λ) M_cur` inside the injection window, `M_cur`
/// otherwise.
pub fn inject<T: Scalar>(
    m_prev: &Array3<T>,
    m_cur: &Array3<T>,
    t: usize,
    cfg: &ControllerConfig,
    schedule: &NoiseSchedule,
) -> Result<Array3<T>> {
    if m_prev.dim() != m_cur.dim() {
        return Err(Error::Shape(format!(
            "inject: previous frame {:?} vs current {:?}",
            m_prev.dim(),
            m_cur.dim()
        )));
    }
    if !cfg.injection_active(t, schedule) {
        return Ok(m_cur.clone());
    }
    let lam = T::lit(cfg.injection_weight);
    let keep = T::one() - lam;
    let mut out = m_cur.clone();
    Zip::from(&mut out)
        .and(m_prev)
        .for_each(|c, &p| *c = lam * p + keep * *c);
    Ok(out)
}

/// Correspondence between condition columns of the edit and source
/// branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnAlignment {
    /// Edit column -> source column.
    pub mapper: Vec<Option<usize>>,
    /// Edit columns whose attention always comes from the edit branch.
    pub edited: BTreeSet<usize>,
    pub source_len: usize,
}

impl ColumnAlignment {
    pub fn identity(len: usize) -> Self {
        Self {
            mapper: (0..len).map(Some).collect(),
            edited: BTreeSet::new(),
            source_len: len,
        }
    }

    /// Lifts a token alignment to condition columns. Subject columns are
    /// always edited.
    pub fn from_tokens(
        alignment: &TokenAlignment,
        source_labels: &[Provenance],
        edit_labels: &[Provenance],
    ) -> Result<Self> {
        let source_col = |pos: usize| {
            source_labels
                .iter()
                .position(|l| *l == Provenance::Text(pos))
                .ok_or_else(|| Error::Alignment(format!("source position {pos} has no column")))
        };
        let mut mapper = Vec::with_capacity(edit_labels.len());
        let mut edited = BTreeSet::new();
        for (col, label) in edit_labels.iter().enumerate() {
            match *label {
                Provenance::Subject(_) => {
                    edited.insert(col);
                    mapper.push(None);
                }
                Provenance::Text(p) => {
                    let mapped = *alignment
                        .mapper
                        .get(p)
                        .ok_or_else(|| Error::Alignment(format!("edit position {p} outside alignment")))?;
                    match mapped {
                        Some(q) if !alignment.edited_positions.contains(&p) => mapper.push(Some(source_col(q)?)),
                        _ => {
                            edited.insert(col);
                            mapper.push(None);
                        }
                    }
                }
            }
        }
        Ok(Self {
            mapper,
            edited,
            source_len: source_labels.len(),
        })
    }
}

/// Column-wise replacement: mapped columns from `m_plus`, edited columns
/// from `m_star`, inside the replacement window. No renormalization.
pub fn edit_word_swap<T: Scalar>(
    m_plus: &Array3<T>,
    m_star: &Array3<T>,
    t: usize,
    alignment: &ColumnAlignment,
    cfg: &ControllerConfig,
    schedule: &NoiseSchedule,
) -> Result<Array3<T>> {
    let (h, q, k) = m_star.dim();
    let (hp, qp, kp) = m_plus.dim();
    if (h, q) != (hp, qp) {
        return Err(Error::Shape(format!(
            "word swap: edit map {:?} vs source map {:?}",
            m_star.dim(),
            m_plus.dim()
        )));
    }
    if alignment.mapper.len() != k || alignment.source_len != kp {
        return Err(Error::Alignment(format!(
            "alignment covers {} -> {} columns, maps have {k} -> {kp}",
            alignment.mapper.len(),
            alignment.source_len
        )));
    }
    if !cfg.replace_active(t, schedule) {
        return Ok(m_star.clone());
    }
    let mut out = m_star.clone();
    for (p, src) in alignment.mapper.iter().enumerate() {
        if let Some(sq) = *src {
            out.index_axis_mut(Axis(2), p).assign(&m_plus.index_axis(Axis(2), sq));
        }
    }
    Ok(out)
}

/// The edited map for one edit-branch key, or `None` when every gate is
/// closed at this timestep.
pub fn controlled_map<T: Scalar>(
    source: &AttentionStore<T>,
    key: &AttnKey,
    m_star: &Array3<T>,
    alignment: &ColumnAlignment,
    cfg: &ControllerConfig,
    schedule: &NoiseSchedule,
) -> Result<Option<Array3<T>>> {
    match key.kind {
        AttnKind::Cross => {
            if !cfg.replace_active(key.t, schedule) {
                return Ok(None);
            }
            let m_cur = source.require(key)?;
            let m_plus = if key.frame > 0 && cfg.injection_active(key.t, schedule) {
                let prev = AttnKey {
                    frame: key.frame - 1,
                    ..*key
                };
                inject(source.require(&prev)?, m_cur, key.t, cfg, schedule)?
            } else {
                m_cur.clone()
            };
            edit_word_swap(&m_plus, m_star, key.t, alignment, cfg, schedule).map(Some)
        }
        AttnKind::SelfAttn if cfg.self_replace_active(key.t, schedule) => {
            let m = source.require(key)?;
            if m.dim() != m_star.dim() {
                return Err(Error::Shape(format!(
                    "self-attention {key}: {:?} vs {:?}",
                    m.dim(),
                    m_star.dim()
                )));
            }
            Ok(Some(m.clone()))
        }
        _ => Ok(None),
    }
}

/// Write hook applying injection and word swap from a populated source
/// store.
pub fn make_write_hook<'a, T: Scalar>(
    source: &'a AttentionStore<T>,
    alignment: &'a ColumnAlignment,
    cfg: &'a ControllerConfig,
    schedule: &'a NoiseSchedule,
) -> HookSet<'a, T> {
    HookSet::write(move |key, m_star| controlled_map(source, key, m_star, alignment, cfg, schedule))
}

/// Edit-branch hook: records the branch's own cross maps and applies the
/// controller. In two-pass mode `first_pass` supplies the edit maps.
pub struct EditController<'a, T> {
    pub source: &'a AttentionStore<T>,
    pub alignment: &'a ColumnAlignment,
    pub cfg: &'a ControllerConfig,
    pub schedule: &'a NoiseSchedule,
    pub record: Option<&'a mut AttentionStore<T>>,
    pub first_pass: Option<&'a AttentionStore<T>>,
    pub error: Option<Error>,
}

impl<T: Scalar> AttentionHooks<T> for EditController<'_, T> {
    fn wants(&self, kind: AttnKind) -> bool {
        match kind {
            AttnKind::Cross => true,
            AttnKind::SelfAttn => self.cfg.self_attention_replace_ratio > 0.0,
            AttnKind::Frame => false,
        }
    }

    fn observe(&mut self, record: &AttentionRecord<T>) {
        if record.key.kind != AttnKind::Cross || self.error.is_some() {
            return;
        }
        if let Some(store) = self.record.as_mut() {
            if let Err(e) = store.insert(record.key, record.map.clone()) {
                self.error = Some(e);
            }
        }
    }

    fn replace(&mut self, key: &AttnKey, computed: &Array3<T>) -> Result<Option<Array3<T>>> {
        let m_star = match (self.first_pass, key.kind) {
            (Some(first), AttnKind::Cross) => first.require(key)?,
            _ => computed,
        };
        controlled_map(self.source, key, m_star, self.alignment, self.cfg, self.schedule)
    }
}

/// Per-frame binary mask at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMask {
    pub frames: Vec<Mask>,
    pub source_columns: Vec<usize>,
    pub edit_columns: Vec<usize>,
    pub threshold: f64,
    pub timesteps: Vec<usize>,
}

impl BlendMask {
    pub fn all(frames: usize, height: usize, width: usize, value: bool) -> Self {
        let mut m = Mask::new(width, height);
        m.data.iter_mut().for_each(|v| *v = value);
        Self {
            frames: vec![m; frames],
            source_columns: Vec::new(),
            edit_columns: Vec::new(),
            threshold: f64::NAN,
            timesteps: Vec::new(),
        }
    }
}

/// Mean over heads, layers (upsampled to `height x width`) and timesteps
/// of the given columns, per frame.
pub fn averaged_column_maps<T: Scalar>(
    store: &AttentionStore<T>,
    columns: &[usize],
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Vec<Array2<f64>>> {
    if store.cross_history.is_empty() {
        return Err(Error::State(format!(
            "{:?} store holds no cross-attention",
            store.branch
        )));
    }
    if columns.is_empty() {
        return Err(Error::Param("no subject columns given".into()));
    }
    let mut sums = vec![Array2::<f64>::zeros((height, width)); frames];
    let mut counts = vec![0usize; frames];
    for (key, map) in &store.cross_history {
        if key.frame >= frames {
            return Err(Error::Shape(format!("{key} beyond {frames} frames")));
        }
        let (q, k) = map.dim();
        if let Some(&c) = columns.iter().find(|&&c| c >= k) {
            return Err(Error::Alignment(format!("column {c} outside {k} keys at {key}")));
        }
        let side = (q as f64).sqrt().round() as usize;
        if side * side != q || !height.is_multiple_of(side) || !width.is_multiple_of(side) {
            return Err(Error::Shape(format!("{q} queries do not tile {height}x{width}")));
        }
        let f = height / side;
        let sum = &mut sums[key.frame];
        for y in 0..height {
            for x in 0..width {
                let row = (y / f) * side + x / f;
                let v: f64 = columns.iter().map(|&c| map[[row, c]].as_f64()).sum();
                sum[[y, x]] += v / columns.len() as f64;
            }
        }
        counts[key.frame] += 1;
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.mapv_inplace(|v| v / n as f64);
        }
    }
    Ok(sums)
}

/// Min-max rescaling to `[0, 1]`, then `value >= threshold`. A constant
/// map has no peak and yields an empty mask.
pub fn threshold_map(map: &Array2<f64>, threshold: f64) -> Mask {
    let (h, w) = map.dim();
    let lo = map.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = map.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut mask = Mask::new(w, h);
    if hi > lo {
        for y in 0..h {
            for x in 0..w {
                mask.set(x, y, (map[[y, x]] - lo) / (hi - lo) >= threshold);
            }
        }
    }
    mask
}

/// Union of the thresholded source-subject and edit-subject attention.
pub fn compute_blend_mask<T: Scalar>(
    source: &AttentionStore<T>,
    edit: &AttentionStore<T>,
    source_subject_columns: &[usize],
    edit_subject_columns: &[usize],
    cfg: &ControllerConfig,
    latent_shape: (usize, usize, usize),
) -> Result<BlendMask> {
    let (f, h, w) = latent_shape;
    let src = averaged_column_maps(source, source_subject_columns, f, h, w)?;
    let dst = averaged_column_maps(edit, edit_subject_columns, f, h, w)?;
    let th = cfg.attention_threshold;
    let frames = src
        .iter()
        .zip(&dst)
        .map(|(a, b)| threshold_map(a, th).union(&threshold_map(b, th)))
        .collect();
    let mut timesteps: Vec<usize> = source.history_timesteps().into_iter().collect();
    timesteps.reverse();
    Ok(BlendMask {
        frames,
        source_columns: source_subject_columns.to_vec(),
        edit_columns: edit_subject_columns.to_vec(),
        threshold: th,
        timesteps,
    })
}

/// `mask ⊙ z_edit + (1 - mask) ⊙ z_source`, per frame.
pub fn local_blend<T: Scalar>(
    z_edit: &LatentClip<T>,
    z_source: &LatentClip<T>,
    mask: &BlendMask,
) -> Result<LatentClip<T>> {
    z_edit.ensure_same_shape(z_source, "local blend")?;
    let grid = z_edit.grid();
    if mask.frames.len() != grid.frames
        || mask
            .frames
            .iter()
            .any(|m| m.width != grid.width || m.height != grid.height)
    {
        return Err(Error::Shape(format!(
            "blend mask with {} frames does not match latent grid {grid:?}",
            mask.frames.len()
        )));
    }
    let mut out = z_source.clone();
    let hw = grid.positions();
    for (r, mut row) in out.data_mut().axis_iter_mut(Axis(0)).enumerate() {
        let m = &mask.frames[r / hw];
        if m.data[r % hw] {
            row.assign(&z_edit.data().row(r));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Grid;
    use crate::conditioning::{align_prompts, tokenize, Vocabulary};
    use crate::schedule::{build_schedule, BetaSpacing};
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        build_schedule(1000, 1e-4, 0.02, BetaSpacing::Linear, 50).unwrap()
    }

    fn row_map(rows: &[&[f64]]) -> Array3<f64> {
        let k = rows[0].len();
        Array3::from_shape_fn((1, rows.len(), k), |(_, q, c)| rows[q][c])
    }

    #[test]
    fn injection_endpoints_and_midpoint() {
        let s = sched();
        let prev = row_map(&[&[1.0, 0.0]]);
        let cur = row_map(&[&[0.0, 1.0]]);
        let t_in = s.ddim_timesteps()[0];
        let mut cfg = ControllerConfig {
            injection_weight: 0.0,
            ..Default::default()
        };
        assert_eq!(inject(&prev, &cur, t_in, &cfg, &s).unwrap(), cur);
        cfg.injection_weight = 1.0;
        assert_eq!(inject(&prev, &cur, t_in, &cfg, &s).unwrap(), prev);
        cfg.injection_weight = 0.5;
        assert_eq!(inject(&prev, &cur, t_in, &cfg, &s).unwrap(), row_map(&[&[0.5, 0.5]]));
        let bad = row_map(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(inject(&bad, &cur, t_in, &cfg, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn injection_window_covers_first_forty_of_fifty() {
        let s = sched();
        let cfg = ControllerConfig::default();
        let active: Vec<bool> = s
            .ddim_timesteps()
            .iter()
            .map(|&t| cfg.injection_active(t, &s))
            .collect();
        assert_eq!(active.iter().filter(|&&a| a).count(), 40);
        assert!(active[..40].iter().all(|&a| a));
        assert!(active[40..].iter().all(|&a| !a));
        let prev = row_map(&[&[1.0, 0.0]]);
        let cur = row_map(&[&[0.0, 1.0]]);
        let late = s.ddim_timesteps()[45];
        assert_eq!(inject(&prev, &cur, late, &cfg, &s).unwrap(), cur);
    }

    #[test]
    fn word_swap_columns() {
        let v = Vocabulary::default();
        let src = tokenize("a jeep car moving on the road", &v).unwrap();
        let dst = tokenize("a vintage car moving on the road", &v).unwrap();
        let ta = align_prompts(&src, &dst);
        let labels: Vec<Provenance> = (0..9).map(Provenance::Text).collect();
        let ca = ColumnAlignment::from_tokens(&ta, &labels, &labels).unwrap();
        assert_eq!(ca.edited, BTreeSet::from([2]));
        let s = sched();
        let cfg = ControllerConfig::default();
        let plus = Array3::from_shape_fn((2, 3, 9), |(h, q, k)| (h * 100 + q * 10 + k) as f64);
        let star = plus.mapv(|v| -v);
        let t = s.ddim_timesteps()[0];
        let out = edit_word_swap(&plus, &star, t, &ca, &cfg, &s).unwrap();
        for k in 0..9 {
            let from = if k == 2 { &star } else { &plus };
            assert_eq!(out.index_axis(Axis(2), k), from.index_axis(Axis(2), k));
        }
        let late = s.ddim_timesteps()[49];
        assert_eq!(edit_word_swap(&plus, &star, late, &ca, &cfg, &s).unwrap(), star);
        let short = ColumnAlignment::identity(8);
        assert!(matches!(
            edit_word_swap(&plus, &star, t, &short, &cfg, &s),
            Err(Error::Alignment(_))
        ));
        let same = ColumnAlignment::identity(9);
        assert_eq!(edit_word_swap(&plus, &star, t, &same, &cfg, &s).unwrap(), plus);
    }

    #[test]
    fn subject_columns_are_edited() {
        let ta = TokenAlignment::identity(3);
        let src: Vec<Provenance> = (0..3).map(Provenance::Text).collect();
        let dst = vec![
            Provenance::Text(0),
            Provenance::Text(1),
            Provenance::Subject(0),
            Provenance::Subject(1),
            Provenance::Text(2),
        ];
        let ca = ColumnAlignment::from_tokens(&ta, &src, &dst).unwrap();
        assert_eq!(ca.mapper, vec![Some(0), Some(1), None, None, Some(2)]);
        assert_eq!(ca.edited, BTreeSet::from([2, 3]));
    }

    fn store_with(maps: &[(AttnKey, Array3<f64>)]) -> AttentionStore<f64> {
        let mut s = AttentionStore::new(Branch::Source);
        for (k, m) in maps {
            s.insert(*k, m.clone()).unwrap();
        }
        s
    }

    #[test]
    fn write_hook_frame_zero_skips_injection() {
        let s = sched();
        let t = s.ddim_timesteps()[0];
        let k0 = AttnKey::new(t, 0, 0, AttnKind::Cross);
        let k1 = AttnKey::new(t, 0, 1, AttnKind::Cross);
        let m0 = row_map(&[&[1.0, 0.0]]);
        let m1 = row_map(&[&[0.0, 1.0]]);
        let source = store_with(&[(k0, m0.clone()), (k1, m1.clone())]);
        let align = ColumnAlignment::identity(2);
        let cfg = ControllerConfig::default();
        let mut hook = make_write_hook(&source, &align, &cfg, &s);
        let star = row_map(&[&[0.3, 0.7]]);
        assert_eq!(hook.replace(&k0, &star).unwrap(), Some(m0));
        assert_eq!(hook.replace(&k1, &star).unwrap(), Some(row_map(&[&[0.5, 0.5]])));
        let missing = AttnKey::new(t, 1, 0, AttnKind::Cross);
        assert!(matches!(hook.replace(&missing, &star), Err(Error::StoreMiss(k)) if k == missing));
    }

    #[test]
    fn closed_gates_make_hook_identity() {
        let s = sched();
        let source = AttentionStore::<f64>::new(Branch::Source);
        let align = ColumnAlignment::identity(2);
        let cfg = ControllerConfig::disabled();
        let mut hook = make_write_hook(&source, &align, &cfg, &s);
        for &t in s.ddim_timesteps() {
            let k = AttnKey::new(t, 0, 1, AttnKind::Cross);
            assert_eq!(hook.replace(&k, &row_map(&[&[0.5, 0.5]])).unwrap(), None);
        }
    }

    #[test]
    fn duplicate_keys_rejected() {
        let k = AttnKey::new(1, 0, 0, AttnKind::Cross);
        let mut s = store_with(&[(k, row_map(&[&[1.0]]))]);
        assert!(matches!(s.insert(k, row_map(&[&[1.0]])), Err(Error::State(_))));
    }

    #[test]
    fn threshold_examples() {
        let m = Array2::from_shape_vec((1, 2), vec![0.2, 0.4]).unwrap();
        assert_eq!(threshold_map(&m, 0.3).data, vec![false, true]);
        let m = Array2::from_shape_vec((1, 4), vec![0.1, 0.5, 0.9, 0.7]).unwrap();
        assert_eq!(threshold_map(&m, 1.0 - 1e-12).data, vec![false, false, true, false]);
        let flat = Array2::from_elem((2, 2), 0.25);
        assert_eq!(threshold_map(&flat, 0.3).count(), 0);
    }

    #[test]
    fn blend_mask_unions_branches_and_upsamples() {
        // 2x2 layer maps over 2 keys on a 4x4 latent, one frame
        let layer = |hot: usize| {
            Array3::from_shape_fn((1, 4, 2), |(_, q, k)| {
                let on = if q == hot { 0.9 } else { 0.1 };
                if k == 0 {
                    on
                } else {
                    1.0 - on
                }
            })
        };
        let key = AttnKey::new(981, 1, 0, AttnKind::Cross);
        let source = store_with(&[(key, layer(0))]);
        let mut edit = AttentionStore::new(Branch::Edit);
        edit.insert(key, layer(3)).unwrap();
        let cfg = ControllerConfig::default();
        let bm = compute_blend_mask(&source, &edit, &[0], &[0], &cfg, (1, 4, 4)).unwrap();
        let m = &bm.frames[0];
        assert_eq!(m.count(), 8);
        assert!(m.get(0, 0) && m.get(1, 1) && m.get(3, 3) && m.get(2, 2));
        assert!(!m.get(3, 0) && !m.get(0, 3));
        let empty = AttentionStore::<f64>::new(Branch::Edit);
        assert!(matches!(
            compute_blend_mask(&source, &empty, &[0], &[0], &cfg, (1, 4, 4)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn local_blend_pointwise() {
        let grid = Grid::new(2, 2, 2);
        let edit = LatentClip::<f64>::from_fn(grid, 3, |(r, c)| (r * 3 + c) as f64);
        let src = LatentClip::<f64>::from_fn(grid, 3, |(r, c)| -((r * 3 + c) as f64) - 1.0);
        let ones = BlendMask::all(2, 2, 2, true);
        assert!(local_blend(&edit, &src, &ones).unwrap().bit_eq(&edit));
        let zeros = BlendMask::all(2, 2, 2, false);
        assert!(local_blend(&edit, &src, &zeros).unwrap().bit_eq(&src));
        let mut checker = zeros.clone();
        for (n, m) in checker.frames.iter_mut().enumerate() {
            for y in 0..2 {
                for x in 0..2 {
                    m.set(x, y, (x + y + n) % 2 == 0);
                }
            }
        }
        let out = local_blend(&edit, &src, &checker).unwrap();
        for r in 0..8 {
            let (n, p) = (r / 4, r % 4);
            let from = if checker.frames[n].data[p] { &edit } else { &src };
            assert_eq!(out.data().row(r), from.data().row(r));
        }
        let wrong = BlendMask::all(1, 2, 2, true);
        assert!(matches!(local_blend(&edit, &src, &wrong), Err(Error::Shape(_))));
    }

    fn stochastic(rows: usize, cols: usize) -> impl Strategy<Value = Array3<f64>> {
        proptest::collection::vec(0.01f64..1.0, rows * cols).prop_map(move |v| {
            let mut m = Array3::from_shape_vec((1, rows, cols), v).unwrap();
            for mut row in m.lanes_mut(Axis(2)) {
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            m
        })
    }

    proptest! {
        #[test]
        fn inject_preserves_row_stochasticity(
            prev in stochastic(3, 5),
            cur in stochastic(3, 5),
            lam in 0.0f64..=1.0,
        ) {
            let s = sched();
            let cfg = ControllerConfig { injection_weight: lam, ..Default::default() };
            let out = inject(&prev, &cur, s.ddim_timesteps()[0], &cfg, &s).unwrap();
            let (dev, nonneg) = crate::denoiser::AttentionRecord {
                key: AttnKey::new(1, 0, 1, AttnKind::Cross),
                map: out,
            }
            .stochasticity();
            prop_assert!(nonneg && dev < 1e-12);
        }

        #[test]
        fn word_swap_touches_columns_only(
            plus in stochastic(4, 6),
            star in stochastic(4, 6),
            edited in proptest::collection::btree_set(0usize..6, 0..6),
        ) {
            let s = sched();
            let cfg = ControllerConfig::default();
            let align = ColumnAlignment {
                mapper: (0..6).map(|c| (!edited.contains(&c)).then_some(c)).collect(),
                edited: edited.clone(),
                source_len: 6,
            };
            let out = edit_word_swap(&plus, &star, s.ddim_timesteps()[0], &align, &cfg, &s).unwrap();
            prop_assert_eq!(out.dim(), star.dim());
            for c in 0..6 {
                let from = if edited.contains(&c) { &star } else { &plus };
                prop_assert_eq!(out.index_axis(Axis(2), c), from.index_axis(Axis(2), c));
            }
        }
    }
}
