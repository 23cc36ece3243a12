//! Toy noise-prediction network: a two-level encoder-decoder whose blocks
//! run spatial self-attention, cross-attention over the condition and
//! attention along the frame axis, each exposed to [`AttentionHooks`].

mod hooks;

use std::rc::Rc;

use log::{debug, info};
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use hooks::validate_replacement;
pub use hooks::{AttentionHooks, AttentionRecord, AttnKey, AttnKind, HookSet, Recorder};

use crate::autodiff::{AttnGroup, AttnPlan, Gradients, Graph, Grid, RowMap, Rows, Var};
use crate::autoencoder::image_rows;
use crate::conditioning::{
    fused_layout, Condition, SubjectEmbedding, SubjectPlacement, TextEmbedding, TokenId, TokenSeq,
};
use crate::error::{Error, Result};
use crate::frames::{Image, Mask};
use crate::latent::LatentClip;
use crate::params::{Adam, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::schedule::{add_noise, NoiseSchedule};

/// Attribute logits emitted by the subject encoder head, in this order.
pub const ATTRIBUTE_GROUPS: [(&str, usize); 4] = [("shape", 3), ("color", 4), ("texture", 2), ("background", 3)];

pub const NUM_ATTRIBUTE_LOGITS: usize = 12;

/// Hyperparameters of the toy network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub heads: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub mlp_mult: usize,
    pub subject_tokens: usize,
    pub encoder_width: usize,
    /// Pixel resolution of reference images and clip frames.
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Learned residual mixing of the fused condition; identity when off.
    pub text_mixer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            width: 64,
            heads: 4,
            cond_dim: 64,
            time_dim: 64,
            mlp_mult: 2,
            subject_tokens: 4,
            encoder_width: 32,
            image_size: 64,
            vocab_size: crate::conditioning::Vocabulary::default().len(),
            max_positions: 32,
            text_mixer: false,
        }
    }
}

impl ModelConfig {
    /// A tiny network for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        Self {
            width: 8,
            heads: 2,
            cond_dim: 8,
            time_dim: 8,
            subject_tokens: 2,
            encoder_width: 4,
            image_size: 8,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let checks = [
            (self.width.is_multiple_of(self.heads), "width divisible by heads"),
            (self.time_dim.is_multiple_of(2), "even time_dim"),
            (self.cond_dim.is_multiple_of(2), "even cond_dim"),
            (self.image_size.is_multiple_of(4), "image_size divisible by 4"),
            (self.latent_channels > 0 && self.subject_tokens > 0, "positive sizes"),
            (self.vocab_size > 0 && self.max_positions > 0, "positive vocabulary"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, what)) => Err(Error::Param(format!("model config needs {what}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Proj {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln_self: Norm,
    self_attn: Proj,
    ln_cross: Norm,
    cross: Proj,
    ln_frame: Norm,
    frame: Proj,
    ln_mlp: Norm,
    mlp_in: Lin,
    mlp_out: Lin,
}

#[derive(Debug, Clone)]
struct Layout {
    token_embed: ParamId,
    mixer: Option<Lin>,
    time1: Lin,
    time2: Lin,
    time_l0: Lin,
    time_l1: Lin,
    conv_in: Lin,
    blocks: [Block; 4],
    res_ln: Norm,
    res_conv: Lin,
    out_ln: Norm,
    conv_out: Lin,
    enc1: Lin,
    enc2: Lin,
    enc3: Lin,
    enc_proj: Lin,
    slot_embed: ParamId,
    attr_head: Lin,
}

enum Init {
    Normal(f64),
    Const(f64),
}

/// Creates parameters on a fresh store, or looks them up (and checks
/// their shape and tags) on an existing one.
struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Builder<'_, T> {
    fn param(
        &mut self,
        name: &str,
        shape: (usize, usize),
        init: Init,
        kind: ParamKind,
        projection: bool,
    ) -> Result<ParamId> {
        match self.rng.as_mut() {
            Some(rng) => Ok(match init {
                Init::Normal(std) => self.store.add_normal(rng, name, shape, std, kind, projection),
                Init::Const(v) => self
                    .store
                    .add(name, Array2::from_elem(shape, T::lit(v)), kind, projection),
            }),
            None => {
                let id = self
                    .store
                    .id(name)
                    .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
                let p = self.store.get(id);
                if p.value.dim() != shape || p.kind != kind || p.projection != projection {
                    return Err(Error::Format(format!(
                        "parameter {name}: {:?}/{:?}/{} expected {shape:?}/{kind:?}/{projection}",
                        p.value.dim(),
                        p.kind,
                        p.projection
                    )));
                }
                Ok(id)
            }
        }
    }

    fn lin(&mut self, name: &str, fan_in: usize, out: usize, gain: f64, kind: ParamKind) -> Result<Lin> {
        let w = self.param(
            &format!("{name}.w"),
            (fan_in, out),
            Init::Normal(gain / (fan_in as f64).sqrt()),
            kind,
            false,
        )?;
        let b = self.param(&format!("{name}.b"), (1, out), Init::Const(0.0), kind, false)?;
        Ok(Lin { w, b: Some(b) })
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.param(&format!("{name}.g"), (1, dim), Init::Const(1.0), ParamKind::Norm, false)?,
            b: self.param(&format!("{name}.b"), (1, dim), Init::Const(0.0), ParamKind::Norm, false)?,
        })
    }

    fn proj(&mut self, name: &str, dim: usize, ctx: usize, kind: ParamKind) -> Result<Proj> {
        let mut p = |suffix: &str, fan_in: usize, gain: f64| {
            self.param(
                &format!("{name}.{suffix}"),
                (fan_in, dim),
                Init::Normal(gain / (fan_in as f64).sqrt()),
                kind,
                true,
            )
        };
        Ok(Proj {
            q: p("q", dim, 1.0)?,
            k: p("k", ctx, 1.0)?,
            v: p("v", ctx, 1.0)?,
            o: p("o", dim, 0.5)?,
        })
    }

    fn layout(&mut self, c: &ModelConfig) -> Result<Layout> {
        let (w, d, e) = (c.width, c.cond_dim, c.encoder_width);
        let token_embed = self.param(
            "text.token_embed",
            (c.vocab_size, d),
            Init::Normal(0.5),
            ParamKind::TokenEmbed,
            false,
        )?;
        let mixer = if c.text_mixer {
            Some(self.lin("text.mixer", d, d, 0.1, ParamKind::TokenEmbed)?)
        } else {
            None
        };
        let time1 = self.lin("time.fc1", c.time_dim, w, 1.0, ParamKind::TimeEmbed)?;
        let time2 = self.lin("time.fc2", w, w, 1.0, ParamKind::TimeEmbed)?;
        let time_l0 = self.lin("time.level0", w, w, 1.0, ParamKind::TimeEmbed)?;
        let time_l1 = self.lin("time.level1", w, w, 1.0, ParamKind::TimeEmbed)?;
        let conv_in = self.lin("conv_in", 9 * c.latent_channels, w, 1.0, ParamKind::Conv)?;
        let mut block = |i: usize| -> Result<Block> {
            let n = format!("block{i}");
            Ok(Block {
                ln_self: self.norm(&format!("{n}.ln_self"), w)?,
                self_attn: self.proj(&format!("{n}.self"), w, w, ParamKind::SelfProj)?,
                ln_cross: self.norm(&format!("{n}.ln_cross"), w)?,
                cross: self.proj(&format!("{n}.cross"), w, d, ParamKind::CrossProj)?,
                ln_frame: self.norm(&format!("{n}.ln_frame"), w)?,
                frame: self.proj(&format!("{n}.frame"), w, w, ParamKind::FrameProj)?,
                ln_mlp: self.norm(&format!("{n}.ln_mlp"), w)?,
                mlp_in: self.lin(&format!("{n}.mlp_in"), w, c.mlp_mult * w, 1.0, ParamKind::Mlp)?,
                mlp_out: self.lin(&format!("{n}.mlp_out"), c.mlp_mult * w, w, 0.5, ParamKind::Mlp)?,
            })
        };
        let blocks = [block(0)?, block(1)?, block(2)?, block(3)?];
        let res_ln = self.norm("res.ln", w)?;
        let res_conv = self.lin("res.conv", 9 * w, w, 0.5, ParamKind::Conv)?;
        let out_ln = self.norm("out.ln", w)?;
        let conv_out = self.lin("conv_out", 9 * w, c.latent_channels, 0.3, ParamKind::Conv)?;
        let enc1 = self.lin("subject.conv1", 27, e, 1.0, ParamKind::SubjectEncoder)?;
        let enc2 = self.lin("subject.conv2", 9 * e, e, 1.0, ParamKind::SubjectEncoder)?;
        let enc3 = self.lin("subject.conv3", 9 * e, 2 * e, 1.0, ParamKind::SubjectEncoder)?;
        let enc_proj = self.lin(
            "subject.proj",
            2 * e,
            c.subject_tokens * d,
            0.5,
            ParamKind::SubjectEncoder,
        )?;
        let slot_embed = self.param(
            "subject.slot_embed",
            (c.subject_tokens, d),
            Init::Normal(0.5),
            ParamKind::SubjectEncoder,
            false,
        )?;
        let attr_head = self.lin(
            "attribute_head",
            2 * e,
            NUM_ATTRIBUTE_LOGITS,
            1.0,
            ParamKind::AttributeHead,
        )?;
        Ok(Layout {
            token_embed,
            mixer,
            time1,
            time2,
            time_l0,
            time_l1,
            conv_in,
            blocks,
            res_ln,
            res_conv,
            out_ln,
            conv_out,
            enc1,
            enc2,
            enc3,
            enc_proj,
            slot_embed,
            attr_head,
        })
    }
}

/// `[sin(x f_0), .., cos(x f_0), ..]` with geometric frequencies.
fn sinusoid(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (x * f).sin();
        out[half + i] = (x * f).cos();
    }
    out
}

/// Where an attention op sits, for building record keys.
#[derive(Debug, Clone, Copy)]
struct Site {
    t: usize,
    layer: usize,
    kind: AttnKind,
    frames: usize,
    positions: usize,
}

/// Subject masks and the condition columns that should receive their
/// cross-attention from inside them.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSupervision {
    pub columns: Vec<usize>,
    /// One pixel mask per latent frame.
    pub masks: Vec<Mask>,
}

impl AttnSupervision {
    /// Per-frame flags of the `grid` cells at least half covered by the
    /// mask.
    fn inside(&self, grid: Grid) -> Result<Vec<Vec<bool>>> {
        if self.masks.len() != grid.frames {
            return Err(Error::Shape(format!(
                "{} supervision masks for {} frames",
                self.masks.len(),
                grid.frames
            )));
        }
        self.masks
            .iter()
            .map(|m| {
                if m.width % grid.width != 0 || m.height % grid.height != 0 {
                    return Err(Error::Shape(format!(
                        "mask {}x{} does not tile grid {}x{}",
                        m.width, m.height, grid.width, grid.height
                    )));
                }
                let (fx, fy) = (m.width / grid.width, m.height / grid.height);
                Ok((0..grid.height * grid.width)
                    .map(|r| {
                        let (y, x) = (r / grid.width, r % grid.width);
                        let hits = (0..fy)
                            .flat_map(|dy| (0..fx).map(move |dx| (x * fx + dx, y * fy + dy)))
                            .filter(|&(px, py)| m.get(px, py))
                            .count();
                        2 * hits >= fx * fy
                    })
                    .collect())
            })
            .collect()
    }
}

/// Localization losses collected while building one graph.
struct MassLosses<'s> {
    sup: &'s AttnSupervision,
    losses: Vec<Var>,
}

/// Reports every map of one attention op to `hooks` and applies any
/// replacement it returns.
fn apply_hooks<T: Scalar>(hooks: &mut dyn AttentionHooks<T>, site: Site, probs: &mut [Array3<T>]) -> Result<Vec<bool>> {
    let mut frozen = vec![false; probs.len()];
    match site.kind {
        AttnKind::SelfAttn | AttnKind::Cross => {
            for (n, p) in probs.iter_mut().enumerate() {
                let key = AttnKey::new(site.t, site.layer, n, site.kind);
                let record = AttentionRecord {
                    key,
                    map: std::mem::take(p),
                };
                hooks.observe(&record);
                *p = match hooks.replace(&key, &record.map)? {
                    Some(m) => {
                        validate_replacement(&key, &record.map, &m)?;
                        frozen[n] = true;
                        m
                    }
                    None => record.map,
                };
            }
        }
        AttnKind::Frame => {
            let heads = probs.first().map_or(0, |p| p.dim().0);
            for n in 0..site.frames {
                let key = AttnKey::new(site.t, site.layer, n, site.kind);
                let mut map = Array3::zeros((heads, site.positions, site.frames));
                for (loc, p) in probs.iter().enumerate() {
                    map.slice_mut(s![.., loc, ..]).assign(&p.slice(s![.., n, ..]));
                }
                let record = AttentionRecord { key, map };
                hooks.observe(&record);
                if let Some(m) = hooks.replace(&key, &record.map)? {
                    validate_replacement(&key, &record.map, &m)?;
                    for (loc, p) in probs.iter_mut().enumerate() {
                        p.slice_mut(s![.., n, ..]).assign(&m.slice(s![.., loc, ..]));
                        frozen[loc] = true;
                    }
                }
            }
        }
    }
    Ok(frozen)
}

/// Forwards observations to an inner hook set and keeps a copy of each.
struct Tee<'h, 'a, T> {
    inner: Option<&'h mut (dyn AttentionHooks<T> + 'a)>,
    records: Vec<AttentionRecord<T>>,
}

impl<T: Scalar> AttentionHooks<T> for Tee<'_, '_, T> {
    fn observe(&mut self, record: &AttentionRecord<T>) {
        if let Some(h) = self.inner.as_mut() {
            h.observe(record);
        }
        self.records.push(record.clone());
    }

    fn replace(&mut self, key: &AttnKey, computed: &Array3<T>) -> Result<Option<Array3<T>>> {
        match self.inner.as_mut() {
            Some(h) => h.replace(key, computed),
            None => Ok(None),
        }
    }
}

/// How a training step obtains its condition.
pub enum CondInput<'a, T> {
    /// A precomputed condition, held constant.
    Fixed(&'a Condition<T>),
    /// Built inside the step so the text table and subject encoder train.
    Prompt {
        tokens: &'a TokenSeq,
        /// Reference image with the subject word its tokens follow.
        subject: Option<(&'a Image, TokenId)>,
        placement: SubjectPlacement,
    },
}

/// Probe losses recorded while fine-tuning on a source clip.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    /// `(step, mean probe loss)`; the first entry is before any update.
    pub probe_losses: Vec<(usize, f64)>,
    pub changed: Vec<String>,
}

impl FinetuneLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.probe_losses.first().map(|p| p.1)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.probe_losses.last().map(|p| p.1)
    }

    /// Number of probe evaluations whose loss rose above the previous one.
    pub fn increases(&self) -> usize {
        self.probe_losses.windows(2).filter(|w| w[1].1 > w[0].1).count()
    }
}

/// Noise-prediction network plus text table and subject encoder.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> Denoiser<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = Builder {
            store: &mut store,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
        .layout(&config)?;
        Ok(Self { config, store, layout })
    }

    /// Rebinds a parameter store (for example one read from a checkpoint).
    pub fn from_store(config: ModelConfig, mut store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = Builder {
            store: &mut store,
            rng: None,
        }
        .layout(&config)?;
        if store.len() != count_params(&config)? {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, architecture needs {}",
                store.len(),
                count_params(&config)?
            )));
        }
        Ok(Self { config, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser::from_store(self.config.clone(), self.store.cast()).expect("same layout")
    }

    // ---- graph builders -------------------------------------------------

    fn text_graph(&self, g: &mut Graph<T>, tokens: &TokenSeq) -> Result<Var> {
        let c = &self.config;
        if tokens.len() > c.max_positions {
            return Err(Error::Param(format!(
                "{} tokens exceed {} positions",
                tokens.len(),
                c.max_positions
            )));
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::Vocabulary(format!("token id {bad}")));
        }
        let gather = RowMap::from_rows(
            c.vocab_size,
            tokens.ids().iter().map(|&id| vec![(id as usize, T::one())]).collect(),
        );
        let table = g.param(self.layout.token_embed);
        let looked_up = g.row_map(table, Rc::new(gather));
        let pos = Array2::from_shape_fn((tokens.len(), c.cond_dim), |(i, j)| {
            T::lit(sinusoid(i as f64, c.cond_dim)[j])
        });
        let pos = g.constant(pos);
        Ok(g.add(looked_up, pos))
    }

    /// Mid-level feature map and pooled feature of each image.
    fn encoder_graph(&self, g: &mut Graph<T>, images: &[&Image]) -> Result<(Var, Var)> {
        let res = self.config.image_size;
        if let Some(bad) = images.iter().find(|i| i.width != res || i.height != res) {
            return Err(Error::Shape(format!(
                "image {}x{} but the encoder expects {res}x{res}",
                bad.width, bad.height
            )));
        }
        let n = images.len();
        let l = &self.layout;
        let x = g.constant(image_rows(images)?);
        let g0 = Grid::new(n, res, res);
        let g1 = g0.halved();
        let g2 = g1.halved();
        let p = g.row_map(x, Rc::new(RowMap::avg_pool2(n, res, res)));
        let h = conv(g, p, g1, l.enc1);
        let h = g.silu(h);
        let h = conv(g, h, g1, l.enc2);
        let mid = g.silu(h);
        let p2 = g.row_map(mid, Rc::new(RowMap::avg_pool2(n, g1.height, g1.width)));
        let h = conv(g, p2, g2, l.enc3);
        let h = g.silu(h);
        let pooled = g.row_map(h, Rc::new(RowMap::block_mean(n, g2.positions())));
        Ok((mid, pooled))
    }

    fn subject_graph(&self, g: &mut Graph<T>, image: &Image, word: TokenId) -> Result<Var> {
        let c = &self.config;
        if word as usize >= c.vocab_size {
            return Err(Error::Vocabulary(format!("token id {word}")));
        }
        let (_, pooled) = self.encoder_graph(g, &[image])?;
        let flat = linear(g, pooled, self.layout.enc_proj);
        let tokens = g.reshape(flat, c.subject_tokens, c.cond_dim);
        let slots = g.param(self.layout.slot_embed);
        let tokens = g.add(tokens, slots);
        let table = g.param(self.layout.token_embed);
        let word_rows = RowMap::from_rows(
            c.vocab_size,
            (0..c.subject_tokens).map(|_| vec![(word as usize, T::one())]).collect(),
        );
        let word_emb = g.row_map(table, Rc::new(word_rows));
        Ok(g.add(tokens, word_emb))
    }

    fn mix(&self, g: &mut Graph<T>, cond: Var) -> Var {
        match self.layout.mixer {
            Some(m) => {
                let delta = linear(g, cond, m);
                g.add(cond, delta)
            }
            None => cond,
        }
    }

    fn condition_graph(&self, g: &mut Graph<T>, input: &CondInput<'_, T>) -> Result<Var> {
        match input {
            CondInput::Fixed(c) => {
                if c.is_empty() {
                    return Err(Error::Param("empty condition".into()));
                }
                if c.width() != self.config.cond_dim {
                    return Err(Error::Shape(format!(
                        "condition width {} vs model {}",
                        c.width(),
                        self.config.cond_dim
                    )));
                }
                Ok(g.constant(c.embeddings.clone()))
            }
            CondInput::Prompt {
                tokens,
                subject,
                placement,
            } => {
                let text = self.text_graph(g, tokens)?;
                let fused = match subject {
                    None => text,
                    Some((image, word)) => {
                        let subj = self.subject_graph(g, image, *word)?;
                        let k = self.config.subject_tokens;
                        let (at, _) = fused_layout(tokens, Some(*word), k, *placement)?;
                        let mut parts = Vec::with_capacity(3);
                        if at > 0 {
                            parts.push(g.slice_rows(text, 0, at));
                        }
                        parts.push(subj);
                        if at < tokens.len() {
                            parts.push(g.slice_rows(text, at, tokens.len() - at));
                        }
                        g.concat_rows(&parts)
                    }
                };
                Ok(self.mix(g, fused))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: Option<Var>,
        proj: Proj,
        plan: Rc<AttnPlan>,
        site: Site,
        hooks: &mut Option<&mut dyn AttentionHooks<T>>,
        mass: Option<(&mut MassLosses<'_>, Grid)>,
    ) -> Result<Var> {
        let q = g.linear(x, proj.q, None);
        let src = ctx.unwrap_or(x);
        let k = g.linear(src, proj.k, None);
        let v = g.linear(src, proj.v, None);
        if let Some((m, grid)) = mass {
            let inside = m.sup.inside(grid)?;
            let loss = g.attention_mass_loss(q, k, plan.clone(), &m.sup.columns, inside)?;
            m.losses.push(loss);
        }
        let out = match hooks {
            Some(h) if h.wants(site.kind) => {
                let mut edit = |p: &mut [Array3<T>]| apply_hooks(&mut **h, site, p);
                g.attention(q, k, v, plan, Some(&mut edit))?
            }
            _ => g.attention(q, k, v, plan, None)?,
        };
        Ok(g.linear(out, proj.o, None))
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        cond: Var,
        grid: Grid,
        t: usize,
        layer: usize,
        hooks: &mut Option<&mut dyn AttentionHooks<T>>,
        mass: &mut Option<&mut MassLosses<'_>>,
    ) -> Result<Var> {
        let b = self.layout.blocks[layer];
        let heads = self.config.heads;
        let (f, hw) = (grid.frames, grid.positions());
        let cond_len = g.shape(cond).0;
        let site = |kind| Site {
            t,
            layer,
            kind,
            frames: f,
            positions: hw,
        };
        let per_frame = |keys: &dyn Fn(usize) -> Rows| AttnPlan {
            heads,
            groups: (0..f)
                .map(|n| AttnGroup {
                    queries: Rows::contiguous(n * hw, hw),
                    keys: keys(n),
                })
                .collect(),
        };
        let self_plan = Rc::new(per_frame(&|n| Rows::contiguous(n * hw, hw)));
        let cross_plan = Rc::new(per_frame(&|_| Rows::contiguous(0, cond_len)));
        let frame_plan = Rc::new(AttnPlan {
            heads,
            groups: (0..hw)
                .map(|p| AttnGroup {
                    queries: Rows::strided(p, hw, f),
                    keys: Rows::strided(p, hw, f),
                })
                .collect(),
        });

        let h = g.layer_norm(x, b.ln_self.g, b.ln_self.b);
        let h = self.attend(
            g,
            h,
            None,
            b.self_attn,
            self_plan,
            site(AttnKind::SelfAttn),
            hooks,
            None,
        )?;
        let x = g.add(x, h);
        let h = g.layer_norm(x, b.ln_cross.g, b.ln_cross.b);
        let h = self.attend(
            g,
            h,
            Some(cond),
            b.cross,
            cross_plan,
            site(AttnKind::Cross),
            hooks,
            mass.as_deref_mut().map(|m| (m, grid)),
        )?;
        let x = g.add(x, h);
        let h = g.layer_norm(x, b.ln_frame.g, b.ln_frame.b);
        let h = self.attend(g, h, None, b.frame, frame_plan, site(AttnKind::Frame), hooks, None)?;
        let x = g.add(x, h);
        let h = g.layer_norm(x, b.ln_mlp.g, b.ln_mlp.b);
        let h = linear(g, h, b.mlp_in);
        let h = g.silu(h);
        let h = linear(g, h, b.mlp_out);
        Ok(g.add(x, h))
    }

    fn eps_graph(
        &self,
        g: &mut Graph<T>,
        z: Var,
        grid: Grid,
        t: usize,
        cond: Var,
        mut hooks: Option<&mut dyn AttentionHooks<T>>,
        mut mass: Option<&mut MassLosses<'_>>,
    ) -> Result<Var> {
        let l = &self.layout;
        if !grid.height.is_multiple_of(2) || !grid.width.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "latent grid {}x{} must have even sides",
                grid.height, grid.width
            )));
        }
        let temb = g.constant(
            Array2::from_shape_vec(
                (1, self.config.time_dim),
                sinusoid(t as f64, self.config.time_dim)
                    .into_iter()
                    .map(T::lit)
                    .collect(),
            )
            .expect("time embedding shape"),
        );
        let temb = linear(g, temb, l.time1);
        let temb = g.silu(temb);
        let temb = linear(g, temb, l.time2);
        let temb = g.silu(temb);
        let t0 = linear(g, temb, l.time_l0);
        let t1 = linear(g, temb, l.time_l1);

        let x = conv(g, z, grid, l.conv_in);
        let x = g.add_row(x, t0);
        let x0 = self.block(g, x, cond, grid, t, 0, &mut hooks, &mut mass)?;

        let low = grid.halved();
        let x = g.row_map(x0, Rc::new(RowMap::avg_pool2(grid.frames, grid.height, grid.width)));
        let x = g.add_row(x, t1);
        let h = g.layer_norm(x, l.res_ln.g, l.res_ln.b);
        let h = g.silu(h);
        let h = conv(g, h, low, l.res_conv);
        let x = g.add(x, h);
        let x = self.block(g, x, cond, low, t, 1, &mut hooks, &mut mass)?;
        let x = self.block(g, x, cond, low, t, 2, &mut hooks, &mut mass)?;

        let up = g.row_map(x, Rc::new(RowMap::upsample2(low.frames, low.height, low.width)));
        let x = g.add(up, x0);
        let x = self.block(g, x, cond, grid, t, 3, &mut hooks, &mut mass)?;
        let h = g.layer_norm(x, l.out_ln.g, l.out_ln.b);
        let h = g.silu(h);
        Ok(conv(g, h, grid, l.conv_out))
    }

    fn check_latents(&self, z: &LatentClip<T>) -> Result<()> {
        if z.channels() != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latents have {} channels, model expects {}",
                z.channels(),
                self.config.latent_channels
            )));
        }
        if !z.is_finite() {
            return Err(Error::Numeric("denoiser input latents".into()));
        }
        Ok(())
    }

    // ---- public API ------------------------------------------------------

    /// Text embeddings `c2`: learned lookup plus sinusoidal positions.
    pub fn embed_text(&self, tokens: &TokenSeq) -> TextEmbedding<T> {
        self.try_embed_text(tokens).expect("token sequence fits the model")
    }

    pub fn try_embed_text(&self, tokens: &TokenSeq) -> Result<TextEmbedding<T>> {
        let mut g = Graph::new(&self.store, false);
        let v = self.text_graph(&mut g, tokens)?;
        Ok(TextEmbedding {
            tokens: tokens.clone(),
            embeddings: g.value(v).clone(),
        })
    }

    /// Subject representation `c1` of a reference image.
    pub fn encode_subject(&self, reference: &Image, word: TokenId) -> Result<SubjectEmbedding<T>> {
        let mut g = Graph::new(&self.store, false);
        let v = self.subject_graph(&mut g, reference, word)?;
        Ok(SubjectEmbedding {
            tokens: g.value(v).clone(),
            source_subject_word: word,
        })
    }

    /// Applies the condition mixer (identity unless enabled).
    pub fn mix_condition(&self, cond: Condition<T>) -> Condition<T> {
        if self.layout.mixer.is_none() {
            return cond;
        }
        let mut g = Graph::new(&self.store, false);
        let c = g.constant(cond.embeddings);
        let m = self.mix(&mut g, c);
        Condition {
            embeddings: g.value(m).clone(),
            labels: cond.labels,
        }
    }

    /// Encoder feature maps of each image, `(n * (s/2)^2, encoder_width)`.
    pub fn features(&self, images: &[&Image]) -> Result<Array2<T>> {
        let mut g = Graph::new(&self.store, false);
        let (mid, _) = self.encoder_graph(&mut g, images)?;
        Ok(g.value(mid).clone())
    }

    /// Attribute logits of each image, `(n, 12)`.
    pub fn attribute_logits(&self, images: &[&Image]) -> Result<Array2<T>> {
        let mut g = Graph::new(&self.store, false);
        let (_, pooled) = self.encoder_graph(&mut g, images)?;
        let logits = linear(&mut g, pooled, self.layout.attr_head);
        Ok(g.value(logits).clone())
    }

    /// Noise estimate without hooks.
    pub fn predict(&self, z: &LatentClip<T>, t: usize, cond: &Condition<T>) -> Result<LatentClip<T>> {
        self.predict_with(z, t, cond, None)
    }

    /// Noise estimate with optional hooks that observe and may replace
    /// attention maps. No records are retained.
    pub fn predict_with(
        &self,
        z: &LatentClip<T>,
        t: usize,
        cond: &Condition<T>,
        hooks: Option<&mut dyn AttentionHooks<T>>,
    ) -> Result<LatentClip<T>> {
        self.check_latents(z)?;
        let mut g = Graph::new(&self.store, false);
        let c = self.condition_graph(&mut g, &CondInput::Fixed(cond))?;
        let zv = g.constant(z.data().clone());
        let out = self.eps_graph(&mut g, zv, z.grid(), t, c, hooks, None)?;
        let eps = LatentClip::new(z.grid(), g.value(out).clone())?;
        if !eps.is_finite() {
            return Err(Error::Numeric(format!("noise estimate at t={t}")));
        }
        Ok(eps)
    }

    /// Noise estimate plus every attention map computed on the way.
    pub fn denoise(
        &self,
        z: &LatentClip<T>,
        t: usize,
        cond: &Condition<T>,
        hooks: Option<&mut dyn AttentionHooks<T>>,
    ) -> Result<(LatentClip<T>, Vec<AttentionRecord<T>>)> {
        let mut tee = Tee {
            inner: hooks,
            records: Vec::new(),
        };
        let eps = self.predict_with(z, t, cond, Some(&mut tee))?;
        Ok((eps, tee.records))
    }

    /// Denoising loss at a timestep and noise drawn from `seed`, with
    /// gradients over every parameter the loss touches.
    pub fn training_step(
        &self,
        clip: &LatentClip<T>,
        cond: &CondInput<'_, T>,
        schedule: &NoiseSchedule,
        seed: u64,
    ) -> Result<(T, Gradients<T>)> {
        let (loss, _, grads) = self.supervised_training_step(clip, cond, schedule, seed, None)?;
        Ok((loss, grads))
    }

    /// [`Self::training_step`] with the optional localization term of
    /// [`Self::supervised_loss_at`].
    pub fn supervised_training_step(
        &self,
        clip: &LatentClip<T>,
        cond: &CondInput<'_, T>,
        schedule: &NoiseSchedule,
        seed: u64,
        attention: Option<(&AttnSupervision, f64)>,
    ) -> Result<(T, T, Gradients<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(1..=schedule.total_steps());
        let eps = LatentClip::gaussian(clip.grid(), clip.channels(), &mut rng);
        self.supervised_loss_at(clip, cond, schedule, t, &eps, attention, true)
    }

    /// Denoising loss for an explicit `(t, eps)`.
    pub fn loss_at(
        &self,
        clip: &LatentClip<T>,
        cond: &CondInput<'_, T>,
        schedule: &NoiseSchedule,
        t: usize,
        eps: &LatentClip<T>,
        grad: bool,
    ) -> Result<(T, Gradients<T>)> {
        let (loss, _, grads) = self.supervised_loss_at(clip, cond, schedule, t, eps, None, grad)?;
        Ok((loss, grads))
    }

    /// Denoising loss plus, when `attention` is given, `weight` times the
    /// cross-attention localization loss averaged over layers. Returns
    /// both parts and the gradient of their weighted sum.
    #[allow(clippy::too_many_arguments)]
    pub fn supervised_loss_at(
        &self,
        clip: &LatentClip<T>,
        cond: &CondInput<'_, T>,
        schedule: &NoiseSchedule,
        t: usize,
        eps: &LatentClip<T>,
        attention: Option<(&AttnSupervision, f64)>,
        grad: bool,
    ) -> Result<(T, T, Gradients<T>)> {
        self.check_latents(clip)?;
        let zt = add_noise(clip, eps, t, schedule)?;
        let mut g = Graph::new(&self.store, grad);
        let c = self.condition_graph(&mut g, cond)?;
        let zv = g.constant(zt.data().clone());
        let mut mass = attention.map(|(sup, _)| MassLosses {
            sup,
            losses: Vec::new(),
        });
        let pred = self.eps_graph(&mut g, zv, clip.grid(), t, c, None, mass.as_mut())?;
        let denoise = g.mse(pred, eps.data().clone());
        let value = g.scalar(denoise);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss at t={t}")));
        }
        let (total, attn) = match (mass, attention) {
            (Some(m), Some((_, weight))) if !m.losses.is_empty() => {
                let n = m.losses.len();
                let mut acc = m.losses[0];
                for &l in &m.losses[1..] {
                    acc = g.add(acc, l);
                }
                let mean = g.scale(acc, T::lit(1.0 / n as f64));
                let weighted = g.scale(mean, T::lit(weight));
                (g.add(denoise, weighted), g.scalar(mean))
            }
            _ => (denoise, T::zero()),
        };
        let grads = if grad { g.backward(total) } else { Gradients::default() };
        Ok((value, attn, grads))
    }

    /// Cross-entropy of the attribute head, summed over the four groups and
    /// averaged over images. `labels[i]` holds one class index per group.
    pub fn attribute_step(&self, images: &[&Image], labels: &[[usize; 4]]) -> Result<(T, Gradients<T>)> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Param("one label set per image required".into()));
        }
        let mut g = Graph::new(&self.store, true);
        let (_, pooled) = self.encoder_graph(&mut g, images)?;
        let logits = linear(&mut g, pooled, self.layout.attr_head);
        let mut total: Option<Var> = None;
        let mut offset = 0;
        for (gi, &(_, size)) in ATTRIBUTE_GROUPS.iter().enumerate() {
            let part = g.slice_cols(logits, offset, size);
            let ys: Vec<usize> = labels.iter().map(|l| l[gi]).collect();
            if let Some(bad) = ys.iter().find(|&&y| y >= size) {
                return Err(Error::Param(format!("label {bad} out of range for group {gi}")));
            }
            let ce = g.cross_entropy(part, &ys);
            total = Some(match total {
                Some(acc) => g.add(acc, ce),
                None => ce,
            });
            offset += size;
        }
        let loss = total.expect("four groups");
        Ok((g.scalar(loss), g.backward(loss)))
    }

    /// Adapts only the attention projections to one clip under its source
    /// condition. `steps == 0` returns an unchanged copy; negative step
    /// counts and non-positive learning rates are rejected.
    pub fn finetune_on_source(
        &self,
        clip: &LatentClip<T>,
        source: &Condition<T>,
        schedule: &NoiseSchedule,
        steps: i64,
        lr: f64,
        seed: u64,
    ) -> Result<(Denoiser<T>, FinetuneLog)> {
        if steps < 0 {
            return Err(Error::Param(format!("fine-tune steps {steps} < 0")));
        }
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Param(format!("fine-tune learning rate {lr}")));
        }
        self.check_latents(clip)?;
        let mut tuned = self.clone();
        let mut log = FinetuneLog::default();
        if steps == 0 {
            return Ok((tuned, log));
        }
        let cond = CondInput::Fixed(source);
        let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let total = schedule.total_steps();
        let probes: Vec<(usize, LatentClip<T>)> = (0..4)
            .map(|i| {
                let t = 1 + (i * 2 + 1) * total / 8;
                (
                    t.min(total),
                    LatentClip::gaussian(clip.grid(), clip.channels(), &mut probe_rng),
                )
            })
            .collect();
        let probe_loss = |m: &Denoiser<T>| -> Result<f64> {
            let mut acc = 0.0;
            for (t, eps) in &probes {
                acc += m.loss_at(clip, &cond, schedule, *t, eps, false)?.0.as_f64();
            }
            Ok(acc / probes.len() as f64)
        };
        log.probe_losses.push((0, probe_loss(&tuned)?));
        let every = (steps as usize / 4).max(1);
        let mut opt = Adam::new(lr);
        for step in 0..steps as usize {
            let (_, grads) = tuned.training_step(clip, &cond, schedule, seed.wrapping_add(step as u64))?;
            opt.step(&mut tuned.store, &grads, |p| p.projection);
            if (step + 1) % every == 0 || step + 1 == steps as usize {
                let l = probe_loss(&tuned)?;
                debug!("fine-tune step {} probe loss {l:.5}", step + 1);
                log.probe_losses.push((step + 1, l));
            }
        }
        log.probe_losses.dedup_by_key(|p| p.0);
        log.changed = tuned.store.changed_since(&self.store);
        if log.increases() > 0 {
            info!(
                "fine-tune probe loss rose {} time(s): {:?}",
                log.increases(),
                log.probe_losses
            );
        }
        Ok((tuned, log))
    }
}

impl crate::gradcheck::HasParams for Denoiser<f64> {
    fn store(&self) -> &ParamStore<f64> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, l: Lin) -> Var {
    g.linear(x, l.w, l.b)
}

fn conv<T: Scalar>(g: &mut Graph<T>, x: Var, grid: Grid, l: Lin) -> Var {
    let cols = g.im2col3(x, grid);
    g.linear(cols, l.w, l.b)
}

fn count_params(config: &ModelConfig) -> Result<usize> {
    let mut store = ParamStore::<f32>::new();
    Builder {
        store: &mut store,
        rng: Some(ChaCha8Rng::seed_from_u64(0)),
    }
    .layout(config)?;
    Ok(store.len())
}

#[cfg(test)]
mod tests;
