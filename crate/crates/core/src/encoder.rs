//! Layered vision-transformer encoder.
//!
//! Layer 0 is the stem (patch embedding plus position embedding); layers
//! `1..=L` are pre-norm residual blocks. Every layer owns a projection head
//! used by the contrastive objective while that layer is active. A forward
//! pass runs over any [`KeptSet`]; blocks missing from the set act as the
//! identity map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f32 = 1e-5;
/// Pixels in `[0, 1]` are shifted and scaled by these before the patch
/// projection.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;
const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
    pub num_blocks: usize,
    pub head_dim_out: usize,
}

impl EncoderConfig {
    /// ViT-Ti/16 on 32×32 inputs.
    pub fn vit_ti16() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 16,
            width: 192,
            heads: 3,
            mlp_ratio: 4.0,
            num_blocks: 12,
            head_dim_out: 128,
        }
    }

    /// Small profile for minutes-scale runs.
    pub fn desk() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            width: 64,
            heads: 2,
            mlp_ratio: 4.0,
            num_blocks: 6,
            head_dim_out: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(
                "patch_size",
                format!("image_size {} is not divisible by patch_size {}", self.image_size, self.patch_size),
            );
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return fail("heads", format!("width {} is not divisible by heads {}", self.width, self.heads));
        }
        if self.num_blocks == 0 {
            return fail("num_blocks", "at least one block is required".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail("mlp_ratio", format!("{} gives an empty MLP", self.mlp_ratio));
        }
        if self.head_dim_out == 0 {
            return fail("head_dim_out", "must be positive".into());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.width as f32).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn stem_params(&self) -> usize {
        self.patch_dim() * self.width + self.width + self.tokens() * self.width
    }

    pub fn block_params(&self) -> usize {
        let (d, h) = (self.width, self.mlp_hidden());
        4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    }

    pub fn head_params(&self) -> usize {
        let (d, k) = (self.width, self.head_dim_out);
        d * d + d + d * k + k
    }

    pub fn layer_params(&self, layer: usize) -> usize {
        if layer == 0 {
            self.stem_params()
        } else {
            self.block_params()
        }
    }
}

const STEM_PARAMS: [&str; 3] = ["patch.w", "patch.b", "pos"];
const BLOCK_PARAMS: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g",
    "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];
const HEAD_PARAMS: [&str; 4] = ["head.w1", "head.b1", "head.w2", "head.b2"];

pub fn layer_param_names(layer: usize) -> &'static [&'static str] {
    if layer == 0 {
        &STEM_PARAMS
    } else {
        &BLOCK_PARAMS
    }
}

pub fn head_param_names() -> &'static [&'static str] {
    &HEAD_PARAMS
}

/// Maps a serialized parameter name back onto its static identifier.
pub fn param_name(layer: usize, name: &str) -> Option<&'static str> {
    let table: &[&'static str] = if layer == 0 { &STEM_PARAMS } else { &BLOCK_PARAMS };
    table.iter().chain(HEAD_PARAMS.iter()).copied().find(|n| *n == name)
}

#[derive(Clone, Debug)]
pub struct Param {
    pub id: ParamId,
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameters of one layer or one projection head.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.id.name == name)
    }

    fn var(&self, tape: &mut Tape, name: &str) -> Var {
        let p = self.get(name).unwrap_or_else(|| panic!("parameter {name} missing from layer set"));
        if p.trainable {
            tape.param(p.id, p.value.clone())
        } else {
            tape.constant(p.value.clone())
        }
    }
}

/// Ascending set of layer indices taking part in a forward pass. Always
/// contains the stem.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeptSet(Vec<usize>);

impl KeptSet {
    pub fn new(mut layers: Vec<usize>) -> Result<Self> {
        layers.sort_unstable();
        layers.dedup();
        if layers.first() != Some(&0) {
            return Err(Error::Validation(format!("kept set {layers:?} must contain the stem (layer 0)")));
        }
        Ok(KeptSet(layers))
    }

    /// Layers `0..=up_to`.
    pub fn prefix(up_to: usize) -> Self {
        KeptSet((0..=up_to).collect())
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("kept set is never empty")
    }
}

impl std::fmt::Display for KeptSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(";"))
    }
}

#[derive(Clone, Debug)]
pub struct LayeredEncoder {
    config: EncoderConfig,
    layers: Vec<Option<ParamSet>>,
    heads: Vec<Option<ParamSet>>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let z: f32 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

fn build_set(layer: usize, specs: &[(&'static str, Vec<usize>, Init)], rng: &mut ChaCha8Rng) -> ParamSet {
    let params = specs
        .iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => trunc_normal(rng, n, INIT_STD),
                Init::FanIn(fan_in) => trunc_normal(rng, n, (*fan_in as f32).sqrt().recip()),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            Param { id: ParamId::new(layer, name), value: Tensor::from_parts(shape.clone(), data), trainable: false }
        })
        .collect();
    ParamSet { params }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    /// Projection heads: the embedding is L2-normalized, so a tiny
    /// pre-normalization output would make the bias gradient explode.
    FanIn(usize),
    Zeros,
    Ones,
}

impl LayeredEncoder {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, k, pd, t) =
            (config.width, config.mlp_hidden(), config.head_dim_out, config.patch_dim(), config.tokens());
        let mut layers = Vec::with_capacity(config.num_blocks + 1);
        layers.push(Some(build_set(
            0,
            &[
                ("patch.w", vec![pd, d], Init::Normal),
                ("patch.b", vec![d], Init::Zeros),
                ("pos", vec![t, d], Init::Zeros),
            ],
            &mut rng,
        )));
        for layer in 1..=config.num_blocks {
            let spec = [
                ("ln1.g", vec![d], Init::Ones),
                ("ln1.b", vec![d], Init::Zeros),
                ("attn.wq", vec![d, d], Init::Normal),
                ("attn.bq", vec![d], Init::Zeros),
                ("attn.wk", vec![d, d], Init::Normal),
                ("attn.bk", vec![d], Init::Zeros),
                ("attn.wv", vec![d, d], Init::Normal),
                ("attn.bv", vec![d], Init::Zeros),
                ("attn.wo", vec![d, d], Init::Normal),
                ("attn.bo", vec![d], Init::Zeros),
                ("ln2.g", vec![d], Init::Ones),
                ("ln2.b", vec![d], Init::Zeros),
                ("mlp.w1", vec![d, h], Init::Normal),
                ("mlp.b1", vec![h], Init::Zeros),
                ("mlp.w2", vec![h, d], Init::Normal),
                ("mlp.b2", vec![d], Init::Zeros),
            ];
            layers.push(Some(build_set(layer, &spec, &mut rng)));
        }
        let heads = (0..=config.num_blocks)
            .map(|layer| {
                let spec = [
                    ("head.w1", vec![d, d], Init::FanIn(d)),
                    ("head.b1", vec![d], Init::Zeros),
                    ("head.w2", vec![d, k], Init::FanIn(d)),
                    ("head.b2", vec![k], Init::Zeros),
                ];
                Some(build_set(layer, &spec, &mut rng))
            })
            .collect();
        Ok(LayeredEncoder { config, layers, heads })
    }

    /// Rebuilds an encoder from named tensors, e.g. a checkpoint. Every
    /// parameter of every layer and head must be present with the expected
    /// shape.
    pub fn from_tensors(config: EncoderConfig, tensors: impl IntoIterator<Item = (ParamId, Tensor)>) -> Result<Self> {
        let mut enc = Self::init(config, 0)?;
        let mut seen = std::collections::BTreeSet::new();
        for (id, value) in tensors {
            let slot = enc.param_mut(id).ok_or_else(|| Error::Validation(format!("unknown parameter {id}")))?;
            if slot.value.shape() != value.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {id} expects shape {:?}, got {:?}",
                    slot.value.shape(),
                    value.shape()
                )));
            }
            slot.value = value;
            seen.insert(id);
        }
        let expected = enc.params().count();
        if seen.len() != expected {
            return Err(Error::Validation(format!("expected {expected} parameters, got {}", seen.len())));
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.config.num_blocks
    }

    pub fn layer(&self, layer: usize) -> Option<&ParamSet> {
        self.layers.get(layer).and_then(Option::as_ref)
    }

    pub fn head(&self, layer: usize) -> Option<&ParamSet> {
        self.heads.get(layer).and_then(Option::as_ref)
    }

    /// All materialized parameters: layers in index order, then heads.
    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().chain(self.heads.iter()).flatten().flat_map(ParamSet::iter)
    }

    pub fn param(&self, id: ParamId) -> Option<&Param> {
        let set = if id.is_head() { self.head(id.layer) } else { self.layer(id.layer) };
        set.and_then(|s| s.iter().find(|p| p.id == id))
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Param> {
        let sets = if id.is_head() { &mut self.heads } else { &mut self.layers };
        sets.get_mut(id.layer).and_then(Option::as_mut).and_then(|s| s.params.iter_mut().find(|p| p.id == id))
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|p| p.value.numel()).sum()
    }

    /// Copy holding only the `kept` layers and the listed heads; what a
    /// client materializes after download.
    pub fn restrict(&self, kept: &KeptSet, heads: &[usize]) -> Result<Self> {
        let pick = |sets: &[Option<ParamSet>], wanted: &dyn Fn(usize) -> bool| -> Result<Vec<Option<ParamSet>>> {
            sets.iter()
                .enumerate()
                .map(|(i, s)| match (wanted(i), s) {
                    (false, _) => Ok(None),
                    (true, Some(s)) => Ok(Some(deep_clone(s))),
                    (true, None) => Err(Error::Usage(format!("layer {i} is not materialized"))),
                })
                .collect()
        };
        if kept.last() > self.config.num_blocks || heads.iter().any(|&h| h > self.config.num_blocks) {
            return Err(Error::Validation(format!("kept set {kept} or heads {heads:?} exceed the encoder depth")));
        }
        Ok(LayeredEncoder {
            config: self.config.clone(),
            layers: pick(&self.layers, &|i| kept.contains(i))?,
            heads: pick(&self.heads, &|i| heads.contains(&i))?,
        })
    }

    /// Marks exactly the parameters of `active_layer` (and its head when
    /// `include_head`) as trainable.
    pub fn set_trainable(&mut self, active_layer: usize, include_head: bool) -> Result<()> {
        let head = include_head.then_some(active_layer);
        self.set_trainable_layers(&[active_layer], head)
    }

    /// Marks the listed layers (and optionally one head) trainable, freezing
    /// everything else.
    pub fn set_trainable_layers(&mut self, layers: &[usize], head: Option<usize>) -> Result<()> {
        if let Some(bad) = layers.iter().chain(head.iter()).find(|&&l| l > self.config.num_blocks) {
            return Err(Error::Validation(format!("layer {bad} outside [0, {}]", self.config.num_blocks)));
        }
        for (i, set) in self.layers.iter_mut().enumerate() {
            for p in set.iter_mut().flat_map(|s| s.params.iter_mut()) {
                p.trainable = layers.contains(&i);
            }
        }
        for (i, set) in self.heads.iter_mut().enumerate() {
            for p in set.iter_mut().flat_map(|s| s.params.iter_mut()) {
                p.trainable = head == Some(i);
            }
        }
        Ok(())
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params().filter(|p| p.trainable).map(|p| p.id).collect();
        ids.sort();
        ids
    }

    /// Records the forward pass on `tape` and returns the mean-pooled
    /// `[b, d]` representation after layer `tap`.
    pub fn forward_on(&self, tape: &mut Tape, images: &Tensor, kept: &KeptSet, tap: usize) -> Result<Var> {
        if !kept.contains(tap) {
            return Err(Error::Usage(format!("tap layer {tap} is not in the kept set {kept}")));
        }
        if kept.last() > self.config.num_blocks {
            return Err(Error::Validation(format!("kept set {kept} exceeds {} blocks", self.config.num_blocks)));
        }
        let mut x = self.stem(tape, images)?;
        for &layer in kept.layers().iter().skip(1).take_while(|&&l| l <= tap) {
            x = self.block(tape, layer, &x)?;
        }
        tape.mean_tokens(&x)
    }

    pub fn forward(&self, images: &Tensor, kept: &KeptSet, tap: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        Ok(self.forward_on(&mut tape, images, kept, tap)?.into_value())
    }

    /// Projection head of `layer` followed by row-wise L2 normalization.
    pub fn project_on(&self, tape: &mut Tape, layer: usize, rep: &Var) -> Result<Var> {
        let head =
            self.head(layer).ok_or_else(|| Error::Usage(format!("projection head {layer} is not initialized")))?;
        let (w1, b1) = (head.var(tape, "head.w1"), head.var(tape, "head.b1"));
        let (w2, b2) = (head.var(tape, "head.w2"), head.var(tape, "head.b2"));
        let h = tape.matmul(rep, &w1)?;
        let h = tape.add(&h, &b1)?;
        let h = tape.gelu(&h)?;
        let z = tape.matmul(&h, &w2)?;
        let z = tape.add(&z, &b2)?;
        tape.l2_normalize(&z)
    }

    pub fn project(&self, layer: usize, rep: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rep = tape.constant(rep.clone());
        Ok(self.project_on(&mut tape, layer, &rep)?.into_value())
    }

    fn set(&self, layer: usize) -> Result<&ParamSet> {
        self.layer(layer).ok_or_else(|| Error::Usage(format!("layer {layer} is not materialized")))
    }

    fn stem(&self, tape: &mut Tape, images: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        let stem = self.set(0)?;
        let (w, bias, pos) = (stem.var(tape, "patch.w"), stem.var(tape, "patch.b"), stem.var(tape, "pos"));
        let mut patches = patchify(images, cfg.image_size, cfg.patch_size)?;
        for v in patches.data_mut() {
            *v = (*v - PIXEL_MEAN) / PIXEL_STD;
        }
        let patches = tape.constant(patches);
        let mut tokens = tape.matmul(&patches, &w)?;
        drop(patches);
        tokens = tape.add(&tokens, &bias)?;
        tape.add(&tokens, &pos)
    }

    // Intermediates are rebound rather than shadowed so that values the
    // tape does not retain are released as soon as they are consumed.
    fn block(&self, tape: &mut Tape, layer: usize, x: &Var) -> Result<Var> {
        let cfg = &self.config;
        let p = self.set(layer)?;
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (heads, dh) = (cfg.heads, cfg.head_dim());

        let h = {
            let (g, beta) = (p.var(tape, "ln1.g"), p.var(tape, "ln1.b"));
            tape.layernorm(x, &g, &beta, LAYERNORM_EPS)?
        };
        let project = |tape: &mut Tape, w: &str, bias: &str, axes: &[usize], shape: [usize; 3]| -> Result<Var> {
            let (w, bias) = (p.var(tape, w), p.var(tape, bias));
            let mut y = tape.matmul(&h, &w)?;
            y = tape.add(&y, &bias)?;
            y = tape.reshape(&y, &[b, t, heads, dh])?;
            y = tape.permute(&y, axes)?;
            tape.reshape(&y, &shape)
        };
        let q = project(tape, "attn.wq", "attn.bq", &[0, 2, 1, 3], [b * heads, t, dh])?;
        let kt = project(tape, "attn.wk", "attn.bk", &[0, 2, 3, 1], [b * heads, dh, t])?;
        let v = project(tape, "attn.wv", "attn.bv", &[0, 2, 1, 3], [b * heads, t, dh])?;
        drop(h);

        let mut attn = tape.matmul(&q, &kt)?;
        drop((q, kt));
        attn = tape.scale(&attn, 1.0 / (dh as f32).sqrt())?;
        attn = tape.softmax(&attn)?;
        let mut ctx = tape.matmul(&attn, &v)?;
        drop((attn, v));
        ctx = tape.reshape(&ctx, &[b, heads, t, dh])?;
        ctx = tape.permute(&ctx, &[0, 2, 1, 3])?;
        ctx = tape.reshape(&ctx, &[b, t, d])?;
        let mut out = {
            let (w, bias) = (p.var(tape, "attn.wo"), p.var(tape, "attn.bo"));
            let y = tape.matmul(&ctx, &w)?;
            tape.add(&y, &bias)?
        };
        drop(ctx);
        out = tape.add(x, &out)?;

        let mut h = {
            let (g, beta) = (p.var(tape, "ln2.g"), p.var(tape, "ln2.b"));
            tape.layernorm(&out, &g, &beta, LAYERNORM_EPS)?
        };
        for (i, (w, bias)) in [("mlp.w1", "mlp.b1"), ("mlp.w2", "mlp.b2")].into_iter().enumerate() {
            let (w, bias) = (p.var(tape, w), p.var(tape, bias));
            let y = tape.matmul(&h, &w)?;
            h = tape.add(&y, &bias)?;
            drop(y);
            if i == 0 {
                h = tape.gelu(&h)?;
            }
        }
        tape.add(&out, &h)
    }

    /// Adds `delta` to the named parameters.
    pub fn apply_delta(&mut self, delta: &crate::autodiff::Gradients) -> Result<()> {
        for (id, d) in delta {
            let p = self.param_mut(*id).ok_or_else(|| Error::Protocol(format!("delta for unknown parameter {id}")))?;
            if p.value.shape() != d.shape() {
                return Err(Error::Dimension(format!("delta for {id} has shape {:?}", d.shape())));
            }
            p.value.add_assign(d);
        }
        Ok(())
    }
}

fn deep_clone(set: &ParamSet) -> ParamSet {
    let params = set
        .params
        .iter()
        .map(|p| Param {
            id: p.id,
            value: Tensor::from_parts(p.value.shape().to_vec(), p.value.data().to_vec()),
            trainable: p.trainable,
        })
        .collect();
    ParamSet { params }
}

/// `[b, 3, H, W]` images to `[b, T, 3·P·P]` patch rows. Patches are taken
/// row-major over the grid; each row is ordered channel, then y, then x.
pub fn patchify(images: &Tensor, image_size: usize, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != image_size || s[3] != image_size {
        return Err(Error::Dimension(format!("expected [b, 3, {image_size}, {image_size}] images, got {s:?}")));
    }
    let (b, g) = (s[0], image_size / patch);
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for n in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..3 {
                    for py in 0..patch {
                        let row = ((n * 3 + c) * image_size + gy * patch + py) * image_size + gx * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, g * g, 3 * patch * patch], out))
}
