use std::fmt;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which attention a map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    /// Spatial self-attention within a frame.
    SelfAttn,
    /// Pixels over condition tokens.
    Cross,
    /// Each pixel over the same location in every frame.
    Frame,
}

impl AttnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnKind::SelfAttn => "self",
            AttnKind::Cross => "cross",
            AttnKind::Frame => "frame",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "self" => Some(AttnKind::SelfAttn),
            "cross" => Some(AttnKind::Cross),
            "frame" => Some(AttnKind::Frame),
            _ => None,
        }
    }
}

/// Identifies one attention map within a sampling run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttnKey {
    pub t: usize,
    pub layer: usize,
    pub frame: usize,
    pub kind: AttnKind,
}

impl AttnKey {
    pub fn new(t: usize, layer: usize, frame: usize, kind: AttnKind) -> Self {
        Self { t, layer, frame, kind }
    }

    /// Name used for this map inside an attention dump container.
    pub fn dump_name(&self) -> String {
        format!(
            "t{}/layer{}/frame{}/{}",
            self.t,
            self.layer,
            self.frame,
            self.kind.as_str()
        )
    }

    pub fn parse_dump_name(name: &str) -> Option<Self> {
        let mut it = name.split('/');
        let t = it.next()?.strip_prefix('t')?.parse().ok()?;
        let layer = it.next()?.strip_prefix("layer")?.parse().ok()?;
        let frame = it.next()?.strip_prefix("frame")?.parse().ok()?;
        let kind = AttnKind::parse(it.next()?)?;
        if it.next().is_some() {
            return None;
        }
        Some(Self::new(t, layer, frame, kind))
    }
}

impl fmt::Display for AttnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(t={}, layer={}, frame={}, {})",
            self.t,
            self.layer,
            self.frame,
            self.kind.as_str()
        )
    }
}

/// One softmax attention map, shaped `(heads, queries, keys)`.
///
/// For [`AttnKind::Frame`] the queries are the pixel locations of frame
/// `key.frame` and the keys are the frames of the clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<T> {
    pub key: AttnKey,
    pub map: Array3<T>,
}

impl<T: Scalar> AttentionRecord<T> {
    /// Largest deviation of a row sum from 1, and whether every entry is
    /// non-negative.
    pub fn stochasticity(&self) -> (f64, bool) {
        row_stochasticity(&self.map)
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        let (dev, nonneg) = self.stochasticity();
        nonneg && dev <= tol
    }
}

pub(crate) fn row_stochasticity<T: Scalar>(map: &Array3<T>) -> (f64, bool) {
    let mut dev = 0.0f64;
    let mut nonneg = true;
    for row in map.lanes(Axis(2)) {
        let mut s = 0.0;
        for &v in row {
            let v = v.as_f64();
            nonneg &= v >= 0.0;
            s += v;
        }
        dev = dev.max((s - 1.0).abs());
    }
    (dev, nonneg)
}

/// Read and write access to attention maps during a denoiser call.
///
/// `observe` sees every computed map. `replace` may return a map that is
/// used instead of the computed one in the value product; the value
/// vectors always come from the call's own condition.
pub trait AttentionHooks<T: Scalar> {
    /// Whether this hook wants to see maps of `kind` at all. Returning
    /// `false` lets the denoiser skip building records for that kind.
    fn wants(&self, _kind: AttnKind) -> bool {
        true
    }

    fn observe(&mut self, _record: &AttentionRecord<T>) {}

    fn replace(&mut self, _key: &AttnKey, _computed: &Array3<T>) -> Result<Option<Array3<T>>> {
        Ok(None)
    }
}

type ReadHook<'a, T> = Box<dyn FnMut(&AttentionRecord<T>) + 'a>;
type WriteHook<'a, T> = Box<dyn FnMut(&AttnKey, &Array3<T>) -> Result<Option<Array3<T>>> + 'a>;

/// Closure-based hooks: an optional reader and an optional writer.
#[derive(Default)]
pub struct HookSet<'a, T> {
    pub read: Option<ReadHook<'a, T>>,
    pub write: Option<WriteHook<'a, T>>,
}

impl<'a, T: Scalar> HookSet<'a, T> {
    pub fn read(f: impl FnMut(&AttentionRecord<T>) + 'a) -> Self {
        Self {
            read: Some(Box::new(f)),
            write: None,
        }
    }

    pub fn write(f: impl FnMut(&AttnKey, &Array3<T>) -> Result<Option<Array3<T>>> + 'a) -> Self {
        Self {
            read: None,
            write: Some(Box::new(f)),
        }
    }
}

impl<T: Scalar> AttentionHooks<T> for HookSet<'_, T> {
    fn observe(&mut self, record: &AttentionRecord<T>) {
        if let Some(f) = self.read.as_mut() {
            f(record)
        }
    }

    fn replace(&mut self, key: &AttnKey, computed: &Array3<T>) -> Result<Option<Array3<T>>> {
        match self.write.as_mut() {
            Some(f) => f(key, computed),
            None => Ok(None),
        }
    }
}

/// Collects every record it observes.
#[derive(Debug, Default)]
pub struct Recorder<T> {
    pub records: Vec<AttentionRecord<T>>,
    pub kinds: Option<Vec<AttnKind>>,
}

impl<T: Scalar> AttentionHooks<T> for Recorder<T> {
    fn wants(&self, kind: AttnKind) -> bool {
        self.kinds.as_ref().is_none_or(|k| k.contains(&kind))
    }

    fn observe(&mut self, record: &AttentionRecord<T>) {
        self.records.push(record.clone());
    }
}

/// Checks a replacement before it enters the value product: same shape as
/// the computed map, finite, and non-negative.
pub(crate) fn validate_replacement<T: Scalar>(
    key: &AttnKey,
    computed: &Array3<T>,
    replacement: &Array3<T>,
) -> Result<()> {
    if computed.dim() != replacement.dim() {
        return Err(Error::Hook {
            key: *key,
            reason: format!("shape {:?}, expected {:?}", replacement.dim(), computed.dim()),
        });
    }
    if let Some(v) = replacement.iter().find(|v| !v.is_finite() || **v < T::zero()) {
        return Err(Error::Hook {
            key: *key,
            reason: format!("entry {v} is negative or non-finite"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_names_round_trip() {
        let k = AttnKey::new(981, 2, 7, AttnKind::Cross);
        assert_eq!(AttnKey::parse_dump_name(&k.dump_name()), Some(k));
        assert_eq!(AttnKey::parse_dump_name("t1/layer2/frame3/bogus"), None);
    }

    #[test]
    fn replacement_validation() {
        let key = AttnKey::new(1, 0, 0, AttnKind::Cross);
        let good = Array3::<f32>::from_elem((1, 2, 2), 0.5);
        assert!(validate_replacement(&key, &good, &good).is_ok());
        let wrong = Array3::<f32>::from_elem((1, 2, 3), 0.5);
        assert!(matches!(
            validate_replacement(&key, &good, &wrong),
            Err(Error::Hook { .. })
        ));
        let neg = Array3::<f32>::from_elem((1, 2, 2), -0.1);
        assert!(validate_replacement(&key, &good, &neg).is_err());
    }
}
