use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Coarse role of a parameter, used to pick gradient-check samples and to
/// report which parts of the network changed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Conv,
    Norm,
    Mlp,
    TimeEmbed,
    TokenEmbed,
    SelfProj,
    CrossProj,
    FrameProj,
    SubjectEncoder,
    AttributeHead,
}

impl ParamKind {
    pub const ALL: [ParamKind; 10] = [
        ParamKind::Conv,
        ParamKind::Norm,
        ParamKind::Mlp,
        ParamKind::TimeEmbed,
        ParamKind::TokenEmbed,
        ParamKind::SelfProj,
        ParamKind::CrossProj,
        ParamKind::FrameProj,
        ParamKind::SubjectEncoder,
        ParamKind::AttributeHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Conv => "conv",
            ParamKind::Norm => "norm",
            ParamKind::Mlp => "mlp",
            ParamKind::TimeEmbed => "time_embed",
            ParamKind::TokenEmbed => "token_embed",
            ParamKind::SelfProj => "self_proj",
            ParamKind::CrossProj => "cross_proj",
            ParamKind::FrameProj => "frame_proj",
            ParamKind::SubjectEncoder => "subject_encoder",
            ParamKind::AttributeHead => "attribute_head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Array2<T>,
    pub kind: ParamKind,
    /// Member of the attention-block projection subset (`W_Q`, `W_K`,
    /// `W_V`, `W_out`) that source fine-tuning is allowed to touch.
    pub projection: bool,
}

/// Named, ordered parameter collection with one projection tag per entry.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>, kind: ParamKind, projection: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            kind,
            projection,
        });
        id
    }

    /// Adds a `rows x cols` matrix drawn from `N(0, std^2)`.
    pub fn add_normal<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        kind: ParamKind,
        projection: bool,
    ) -> ParamId {
        let value = Array2::from_shape_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z * std)
        });
        self.add(name, value, kind, projection)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: (usize, usize), v: f64, kind: ParamKind) -> ParamId {
        self.add(name, Array2::from_elem(shape, T::lit(v)), kind, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Names of parameters whose values differ bitwise from `other`.
    pub fn changed_since(&self, other: &ParamStore<T>) -> Vec<String> {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, b)| {
                a.value.len() != b.value.len()
                    || a.value
                        .iter()
                        .zip(b.value.iter())
                        .any(|(x, y)| x.to_bits_u64() != y.to_bits_u64())
            })
            .map(|(a, _)| a.name.clone())
            .collect()
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(
                p.name.clone(),
                p.value.mapv(|x| U::lit(x.as_f64())),
                p.kind,
                p.projection,
            );
        }
        out
    }
}

trait BitsU64 {
    fn to_bits_u64(self) -> u64;
}

impl<T: Scalar> BitsU64 for T {
    fn to_bits_u64(self) -> u64 {
        // f64 represents every f32 exactly, so comparing widened bits is a
        // bitwise comparison for both instantiations.
        self.as_f64().to_bits()
    }
}

/// Adam with optional per-parameter freezing and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub clip_norm: Option<T>,
    step: i32,
    m: HashMap<ParamId, Array2<T>>,
    v: HashMap<ParamId, Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            clip_norm: Some(T::one()),
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update to every parameter for which `trainable` holds.
    /// Parameters without a gradient or outside the mask are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, trainable: impl Fn(&Param<T>) -> bool) {
        self.step += 1;
        let mut scale = T::one();
        if let Some(c) = self.clip_norm {
            let n = grads.global_norm();
            if n > c {
                scale = c / n;
            }
        }
        let b1t = T::one() - self.beta1.powi(self.step);
        let b2t = T::one() - self.beta2.powi(self.step);
        let mut ids: Vec<_> = grads.by_param.keys().copied().collect();
        ids.sort();
        for id in ids {
            if !trainable(store.get(id)) {
                continue;
            }
            let g = &grads.by_param[&id];
            let shape = g.dim();
            let m = self.m.entry(id).or_insert_with(|| Array2::zeros(shape));
            let v = self.v.entry(id).or_insert_with(|| Array2::zeros(shape));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / b1t;
                let vh = *v / b2t;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn adam_respects_mask() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Array2::from_elem((1, 2), 1.0), ParamKind::Mlp, false);
        let b = store.add("b", Array2::from_elem((1, 2), 1.0), ParamKind::CrossProj, true);
        let before = store.clone();
        let grads = {
            let mut g = Graph::new(&store, true);
            let (va, vb) = (g.param(a), g.param(b));
            let s = g.add(va, vb);
            let l = g.mse(s, Array2::zeros((1, 2)));
            g.backward(l)
        };
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &grads, |p| p.projection);
        assert_eq!(store.changed_since(&before), vec!["b".to_string()]);
        assert!(store.value(b)[[0, 0]] < 1.0);
    }

    #[test]
    fn cast_preserves_tags() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Array2::from_elem((2, 2), 0.5), ParamKind::SelfProj, true);
        let wide: ParamStore<f64> = store.cast();
        assert!(wide.get(ParamId(0)).projection);
        assert_eq!(wide.value(ParamId(0))[[1, 1]], 0.5);
    }
}
