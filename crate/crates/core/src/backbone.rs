//! Frozen toy dual encoder.
//!
//! Both branches are post-LN transformer stacks: each block computes
//! `h = LN1(x + MSA(x) + s*A_msa(x))` then `LN2(h + MLP(h) + s*A_mlp(h))`,
//! where `A_*` are the parallel adapters (absent for the frozen model). The
//! image branch patchifies a `[B, 1, H, W]` image, prepends a CLS token and
//! reads the CLS row out; visual adapters only see the patch tokens and
//! contribute zero to CLS. The text branch embeds token ids and reads the
//! last token out. Both features are projected and L2-normalized.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{
    adapted_residual, identity_kernels, text_adapter_forward, visual_adapter_forward,
    AdapterConfig, BoundText, BoundVisual, Parameters, TextAdapter, Variant, VisualAdapter,
};
use crate::error::{HebaError, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    pub logit_temperature: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            embed_dim: 32,
            depth: 2,
            heads: 4,
            image_size: 28,
            patch_size: 4,
            text_len: 8,
            vocab_size: 64,
            mlp_ratio: 4,
            logit_temperature: 10.0,
        }
    }
}

impl BackboneConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Patches plus CLS.
    pub fn image_seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HebaError::InvalidConfig(m));
        if [
            self.embed_dim,
            self.depth,
            self.heads,
            self.image_size,
            self.patch_size,
            self.text_len,
            self.vocab_size,
            self.mlp_ratio,
        ]
        .contains(&0)
        {
            return bad("backbone sizes must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !self.logit_temperature.is_finite() || self.logit_temperature < 0.0 {
            return bad("logit_temperature must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

fn dense<T: Scalar>(out: usize, inp: usize, rng: &mut Rng) -> Tensor<T> {
    Tensor::randn(&[out, inp], (1.0 / inp as f64).sqrt(), rng)
}

impl<T: Scalar> Block<T> {
    fn new(d: usize, mlp: usize, rng: &mut Rng) -> Self {
        Block {
            ln1_g: Tensor::ones(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: dense(d, d, rng),
            bq: Tensor::zeros(&[d]),
            wk: dense(d, d, rng),
            bk: Tensor::zeros(&[d]),
            wv: dense(d, d, rng),
            bv: Tensor::zeros(&[d]),
            wo: dense(d, d, rng),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::ones(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: dense(mlp, d, rng),
            b1: Tensor::zeros(&[mlp]),
            w2: dense(d, mlp, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("ln1.gamma", &self.ln1_g),
            ("ln1.beta", &self.ln1_b),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gamma", &self.ln2_g),
            ("ln2.beta", &self.ln2_b),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 16] {
        [
            ("ln1.gamma", &mut self.ln1_g),
            ("ln1.beta", &mut self.ln1_b),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.gamma", &mut self.ln2_g),
            ("ln2.beta", &mut self.ln2_b),
            ("mlp.w1", &mut self.w1),
            ("mlp.b1", &mut self.b1),
            ("mlp.w2", &mut self.w2),
            ("mlp.b2", &mut self.b2),
        ]
    }

    fn bind(&self, g: &mut Graph<T>) -> BoundBlock {
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] =
            self.named().map(|(_, t)| g.constant(t.clone()));
        BoundBlock {
            ln1: (ln1_g, ln1_b),
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2: (ln2_g, ln2_b),
            w1,
            b1,
            w2,
            b2,
        }
    }
}

/// Frozen weights of both encoders. Never trained; bound as graph constants.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone<T> {
    pub cfg: BackboneConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub cls: Tensor<T>,
    pub img_pos: Tensor<T>,
    pub img_blocks: Vec<Block<T>>,
    pub img_proj: Tensor<T>,
    pub tok_embed: Tensor<T>,
    pub txt_pos: Tensor<T>,
    pub txt_blocks: Vec<Block<T>>,
    pub txt_proj: Tensor<T>,
}

impl<T: Scalar> ToyBackbone<T> {
    pub fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let pp = cfg.patch_size * cfg.patch_size;
        let mlp = cfg.mlp_ratio * d;
        let patch_w = dense(d, pp, rng);
        let cls = Tensor::randn(&[1, 1, d], 0.02, rng);
        let img_pos = Tensor::randn(&[cfg.image_seq_len(), d], 0.02, rng);
        let img_blocks = (0..cfg.depth).map(|_| Block::new(d, mlp, rng)).collect();
        let img_proj = dense(d, d, rng);
        let tok_embed = Tensor::randn(&[cfg.vocab_size, d], 1.0, rng);
        let txt_pos = Tensor::randn(&[cfg.text_len, d], 0.1, rng);
        let txt_blocks = (0..cfg.depth).map(|_| Block::new(d, mlp, rng)).collect();
        let txt_proj = dense(d, d, rng);
        Ok(ToyBackbone {
            cfg: cfg.clone(),
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            cls,
            img_pos,
            img_blocks,
            img_proj,
            tok_embed,
            txt_pos,
            txt_blocks,
            txt_proj,
        })
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("backbone.img.patch_w".into(), &self.patch_w),
            ("backbone.img.patch_b".into(), &self.patch_b),
            ("backbone.img.cls".into(), &self.cls),
            ("backbone.img.pos".into(), &self.img_pos),
        ];
        for (i, b) in self.img_blocks.iter().enumerate() {
            out.extend(
                b.named()
                    .map(|(n, t)| (format!("backbone.img.block.{i}.{n}"), t)),
            );
        }
        out.push(("backbone.img.proj".into(), &self.img_proj));
        out.push(("backbone.txt.tok_embed".into(), &self.tok_embed));
        out.push(("backbone.txt.pos".into(), &self.txt_pos));
        for (i, b) in self.txt_blocks.iter().enumerate() {
            out.extend(
                b.named()
                    .map(|(n, t)| (format!("backbone.txt.block.{i}.{n}"), t)),
            );
        }
        out.push(("backbone.txt.proj".into(), &self.txt_proj));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("backbone.img.patch_w".into(), &mut self.patch_w),
            ("backbone.img.patch_b".into(), &mut self.patch_b),
            ("backbone.img.cls".into(), &mut self.cls),
            ("backbone.img.pos".into(), &mut self.img_pos),
        ];
        for (i, b) in self.img_blocks.iter_mut().enumerate() {
            out.extend(
                b.named_mut()
                    .map(|(n, t)| (format!("backbone.img.block.{i}.{n}"), t)),
            );
        }
        out.push(("backbone.img.proj".into(), &mut self.img_proj));
        out.push(("backbone.txt.tok_embed".into(), &mut self.tok_embed));
        out.push(("backbone.txt.pos".into(), &mut self.txt_pos));
        for (i, b) in self.txt_blocks.iter_mut().enumerate() {
            out.extend(
                b.named_mut()
                    .map(|(n, t)| (format!("backbone.txt.block.{i}.{n}"), t)),
            );
        }
        out.push(("backbone.txt.proj".into(), &mut self.txt_proj));
        out
    }

    /// SHA-256 over names, shapes and little-endian f64 values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundBackbone {
        BoundBackbone {
            patch_w: g.constant(self.patch_w.clone()),
            patch_b: g.constant(self.patch_b.clone()),
            cls: g.constant(self.cls.clone()),
            img_pos: g.constant(self.img_pos.clone()),
            img_blocks: self.img_blocks.iter().map(|b| b.bind(g)).collect(),
            img_proj: g.constant(self.img_proj.clone()),
            tok_embed: g.constant(self.tok_embed.clone()),
            txt_pos: g.constant(self.txt_pos.clone()),
            txt_blocks: self.txt_blocks.iter().map(|b| b.bind(g)).collect(),
            txt_proj: g.constant(self.txt_proj.clone()),
            cfg: self.cfg.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    ln1: (Var, Var),
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

#[derive(Clone, Debug)]
pub struct BoundBackbone {
    cfg: BackboneConfig,
    patch_w: Var,
    patch_b: Var,
    cls: Var,
    img_pos: Var,
    img_blocks: Vec<BoundBlock>,
    img_proj: Var,
    tok_embed: Var,
    txt_pos: Var,
    txt_blocks: Vec<BoundBlock>,
    txt_proj: Var,
}

// ---- adapters attached to the backbone ----

/// Adapter used on the visual stream at one site.
#[derive(Clone, Debug, PartialEq)]
pub enum VisualStream<T> {
    /// Grid-reshaped conv bottleneck.
    Conv(VisualAdapter<T>),
    /// Per-token linear bottleneck (no spatial structure).
    Flat(TextAdapter<T>),
}

/// Sites per block: 0 = parallel to MSA, 1 = parallel to MLP.
pub const SITES_PER_BLOCK: usize = 2;

/// All adapters of a model, indexed by layer `2 * block + site`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelAdapters<T> {
    pub cfg: AdapterConfig,
    pub variant: Variant,
    pub visual: Vec<Option<VisualStream<T>>>,
    pub text: Vec<Option<TextAdapter<T>>>,
}

/// Name and optimizer treatment of one adapter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub trainable: bool,
    /// Weight decay applies (weights and kernels, not biases).
    pub decay: bool,
}

impl<T: Scalar> ModelAdapters<T> {
    pub fn new(
        cfg: &AdapterConfig,
        bb: &BackboneConfig,
        variant: Variant,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.embed_dim != bb.embed_dim {
            return Err(HebaError::InvalidConfig(format!(
                "adapter embed_dim {} != backbone embed_dim {}",
                cfg.embed_dim, bb.embed_dim
            )));
        }
        if cfg.grid_side * cfg.grid_side != bb.num_patches() {
            return Err(HebaError::InvalidConfig(format!(
                "grid_side {} does not match {} patch tokens",
                cfg.grid_side,
                bb.num_patches()
            )));
        }
        let blocks: Vec<usize> = match &cfg.adapter_blocks {
            None => (0..bb.depth).collect(),
            Some(list) => {
                if let Some(&b) = list.iter().find(|&&b| b >= bb.depth) {
                    return Err(HebaError::InvalidConfig(format!(
                        "adapter block {b} >= depth {}",
                        bb.depth
                    )));
                }
                list.clone()
            }
        };
        let mode = variant.init_mode(cfg.init_mode);
        let layers = bb.depth * SITES_PER_BLOCK;
        let mut visual = vec![None; layers];
        let mut text = vec![None; layers];
        for layer in 0..layers {
            if !blocks.contains(&(layer / SITES_PER_BLOCK)) {
                continue;
            }
            visual[layer] = Some(match variant {
                Variant::NoSpatial1d => VisualStream::Flat(TextAdapter::new(cfg, mode, rng)),
                Variant::NoDwconv => {
                    let mut a = VisualAdapter::new(cfg, mode, rng);
                    a.k_dw = identity_kernels(cfg.hidden_dim());
                    VisualStream::Conv(a)
                }
                Variant::Full | Variant::ZeroInit => {
                    VisualStream::Conv(VisualAdapter::new(cfg, mode, rng))
                }
            });
            text[layer] = Some(TextAdapter::new(cfg, mode, rng));
        }
        Ok(ModelAdapters {
            cfg: cfg.clone(),
            variant,
            visual,
            text,
        })
    }

    fn kernel_trainable(&self) -> bool {
        self.variant != Variant::NoDwconv
    }

    /// Every adapter tensor (trainable or not) with its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(ParamInfo, &Tensor<T>)> {
        let mut out = Vec::new();
        let info = |prefix: &str, layer: usize, p: &str, trainable: bool| ParamInfo {
            name: format!("{prefix}.{layer}.{p}"),
            trainable,
            decay: !p.starts_with("b_"),
        };
        for (layer, v) in self.visual.iter().enumerate() {
            match v {
                Some(VisualStream::Conv(a)) => {
                    for (p, t) in a.params() {
                        let tr = p != "k_dw" || self.kernel_trainable();
                        out.push((info("vis_adapter", layer, p, tr), t));
                    }
                }
                Some(VisualStream::Flat(a)) => {
                    for (p, t) in a.params() {
                        out.push((info("vis_adapter", layer, p, true), t));
                    }
                }
                None => {}
            }
        }
        for (layer, a) in self.text.iter().enumerate() {
            if let Some(a) = a {
                for (p, t) in a.params() {
                    out.push((info("txt_adapter", layer, p, true), t));
                }
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (layer, v) in self.visual.iter_mut().enumerate() {
            match v {
                Some(VisualStream::Conv(a)) => out.extend(
                    a.params_mut()
                        .into_iter()
                        .map(|(p, t)| (format!("vis_adapter.{layer}.{p}"), t)),
                ),
                Some(VisualStream::Flat(a)) => out.extend(
                    a.params_mut()
                        .into_iter()
                        .map(|(p, t)| (format!("vis_adapter.{layer}.{p}"), t)),
                ),
                None => {}
            }
        }
        for (layer, a) in self.text.iter_mut().enumerate() {
            if let Some(a) = a {
                out.extend(
                    a.params_mut()
                        .into_iter()
                        .map(|(p, t)| (format!("txt_adapter.{layer}.{p}"), t)),
                );
            }
        }
        out
    }

    /// Trainable tensors, in the order of [`Self::trainable_params`].
    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let flags: Vec<bool> = self
            .named_tensors()
            .iter()
            .map(|(i, _)| i.trainable)
            .collect();
        self.named_tensors_mut()
            .into_iter()
            .zip(flags)
            .filter(|(_, f)| *f)
            .map(|((_, t), _)| t)
            .collect()
    }

    /// Trainable parameter descriptors, in binding order.
    pub fn trainable_params(&self) -> Vec<ParamInfo> {
        self.named_tensors()
            .into_iter()
            .filter(|(i, _)| i.trainable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundAdapters {
        let train_kernel = self.kernel_trainable();
        let visual = self
            .visual
            .iter()
            .map(|v| {
                v.as_ref().map(|v| match v {
                    VisualStream::Conv(a) => BoundVisualStream::Conv(a.bind(g, train_kernel)),
                    VisualStream::Flat(a) => BoundVisualStream::Flat(a.bind(g)),
                })
            })
            .collect::<Vec<_>>();
        let text = self
            .text
            .iter()
            .map(|a| a.as_ref().map(|a| a.bind(g)))
            .collect::<Vec<_>>();
        let mut params = Vec::new();
        for v in visual.iter().flatten() {
            match v {
                BoundVisualStream::Conv(b) => {
                    params.push(b.w_down);
                    if train_kernel {
                        params.push(b.k_dw);
                    }
                    params.extend([b.w_up, b.b_up]);
                }
                BoundVisualStream::Flat(b) => params.extend([b.w_down, b.b_down, b.w_up, b.b_up]),
            }
        }
        for b in text.iter().flatten() {
            params.extend([b.w_down, b.b_down, b.w_up, b.b_up]);
        }
        BoundAdapters {
            cfg: self.cfg.clone(),
            visual,
            text,
            params,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BoundVisualStream {
    Conv(BoundVisual),
    Flat(BoundText),
}

/// Graph handles for every adapter; `params` lists trainable leaves in the
/// same order as [`ModelAdapters::trainable_params`].
#[derive(Clone, Debug)]
pub struct BoundAdapters {
    cfg: AdapterConfig,
    visual: Vec<Option<BoundVisualStream>>,
    text: Vec<Option<BoundText>>,
    pub params: Vec<Var>,
}

/// Adapters plus the residual scale for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Adapted<'a, T> {
    pub adapters: &'a BoundAdapters,
    pub scale: T,
}

#[derive(Clone, Copy)]
enum Branch {
    Image,
    Text,
}

fn msa<T: Scalar>(g: &mut Graph<T>, b: &BoundBlock, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (bt, n, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let split = |g: &mut Graph<T>, w: Var, bias: Var| -> Result<Var> {
        let p = g.linear(x, w, Some(bias))?;
        let p = g.reshape(p, &[bt, n, heads, dh])?;
        let p = g.permute(p, &[0, 2, 1, 3])?;
        g.reshape(p, &[bt * heads, n, dh])
    };
    let q = split(g, b.wq, b.bq)?;
    let k = split(g, b.wk, b.bk)?;
    let v = split(g, b.wv, b.bv)?;
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, T::one() / T::of(dh as f64).sqrt());
    let attn = g.softmax(scores);
    let ctx = g.bmm(attn, v)?;
    let ctx = g.reshape(ctx, &[bt, heads, n, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[bt, n, d])?;
    g.linear(ctx, b.wo, Some(b.bo))
}

fn mlp<T: Scalar>(g: &mut Graph<T>, b: &BoundBlock, x: Var) -> Result<Var> {
    let h = g.linear(x, b.w1, Some(b.b1))?;
    let h = g.gelu(h);
    g.linear(h, b.w2, Some(b.b2))
}

fn adapter_output<T: Scalar>(
    g: &mut Graph<T>,
    ad: &Adapted<'_, T>,
    branch: Branch,
    layer: usize,
    x: Var,
) -> Result<Option<Var>> {
    match branch {
        Branch::Text => match ad.adapters.text.get(layer).copied().flatten() {
            None => Ok(None),
            Some(a) => text_adapter_forward(g, &a, x).map(Some),
        },
        Branch::Image => {
            let Some(a) = ad.adapters.visual.get(layer).copied().flatten() else {
                return Ok(None);
            };
            let s = g.shape(x).to_vec();
            let patches = g.narrow(x, 1, 1, s[1] - 1)?;
            let out = match a {
                BoundVisualStream::Conv(v) => {
                    visual_adapter_forward(g, &v, patches, &ad.adapters.cfg)?
                }
                BoundVisualStream::Flat(t) => text_adapter_forward(g, &t, patches)?,
            };
            let cls_zero = g.constant(Tensor::zeros(&[s[0], 1, s[2]]));
            g.concat(&[cls_zero, out], 1).map(Some)
        }
    }
}

fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &BoundBlock,
    x: Var,
    heads: usize,
    index: usize,
    branch: Branch,
    adapted: Option<&Adapted<'_, T>>,
) -> Result<Var> {
    let scale = adapted.map_or(T::zero(), |a| a.scale);
    let attn = msa(g, b, x, heads)?;
    let a1 = match adapted {
        Some(ad) => adapter_output(g, ad, branch, index * SITES_PER_BLOCK, x)?,
        None => None,
    };
    let h = adapted_residual(g, x, attn, a1, scale, b.ln1, LN_EPS)?;
    let m = mlp(g, b, h)?;
    let a2 = match adapted {
        Some(ad) => adapter_output(g, ad, branch, index * SITES_PER_BLOCK + 1, h)?,
        None => None,
    };
    adapted_residual(g, h, m, a2, scale, b.ln2, LN_EPS)
}

/// `[B, 1, H, W]` images to unit-norm `[B, D]` features.
pub fn encode_image<T: Scalar>(
    g: &mut Graph<T>,
    bb: &BoundBackbone,
    images: Var,
    adapted: Option<&Adapted<'_, T>>,
) -> Result<Var> {
    let cfg = &bb.cfg;
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 1 || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(HebaError::ShapeMismatch {
            op: "encode_image",
            lhs: s,
            rhs: vec![0, 1, cfg.image_size, cfg.image_size],
        });
    }
    let (b, p, side, d) = (s[0], cfg.patch_size, cfg.grid_side(), cfg.embed_dim);
    let x = g.reshape(images, &[b, side, p, side, p])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4])?;
    let x = g.reshape(x, &[b, side * side, p * p])?;
    let patches = g.linear(x, bb.patch_w, Some(bb.patch_b))?;
    let cls_rows = vec![bb.cls; b];
    let cls = g.concat(&cls_rows, 0)?;
    let x = g.concat(&[cls, patches], 1)?;
    let mut x = g.add_broadcast(x, bb.img_pos)?;
    for (i, blk) in bb.img_blocks.iter().enumerate() {
        x = block_forward(g, blk, x, cfg.heads, i, Branch::Image, adapted)?;
    }
    let cls_out = g.narrow(x, 1, 0, 1)?;
    let cls_out = g.reshape(cls_out, &[b, d])?;
    let feat = g.linear(cls_out, bb.img_proj, None)?;
    Ok(g.l2_normalize_rows(feat))
}

/// Class prompts (one token sequence per class) to unit-norm `[K, D]` features.
pub fn encode_text<T: Scalar>(
    g: &mut Graph<T>,
    bb: &BoundBackbone,
    prompts: &[Vec<usize>],
    adapted: Option<&Adapted<'_, T>>,
) -> Result<Var> {
    let cfg = &bb.cfg;
    let (k, l, d) = (prompts.len(), cfg.text_len, cfg.embed_dim);
    if k == 0 {
        return Err(HebaError::InvalidShape {
            op: "encode_text",
            detail: "no prompts".into(),
        });
    }
    let mut ids = Vec::with_capacity(k * l);
    for p in prompts {
        if p.len() != l {
            return Err(HebaError::ShapeMismatch {
                op: "encode_text",
                lhs: vec![p.len()],
                rhs: vec![l],
            });
        }
        ids.extend_from_slice(p);
    }
    let x = g.gather_rows(bb.tok_embed, &ids)?;
    let x = g.reshape(x, &[k, l, d])?;
    let mut x = g.add_broadcast(x, bb.txt_pos)?;
    for (i, blk) in bb.txt_blocks.iter().enumerate() {
        x = block_forward(g, blk, x, cfg.heads, i, Branch::Text, adapted)?;
    }
    let last = g.narrow(x, 1, l - 1, 1)?;
    let last = g.reshape(last, &[k, d])?;
    let feat = g.linear(last, bb.txt_proj, None)?;
    Ok(g.l2_normalize_rows(feat))
}

/// `temperature * img · txtᵀ`.
pub fn class_logits<T: Scalar>(
    g: &mut Graph<T>,
    img: Var,
    txt: Var,
    temperature: f64,
) -> Result<Var> {
    let (si, st) = (g.shape(img).to_vec(), g.shape(txt).to_vec());
    if si.len() != 2 || st.len() != 2 || si[1] != st[1] {
        return Err(HebaError::ShapeMismatch {
            op: "class_logits",
            lhs: si,
            rhs: st,
        });
    }
    let tt = g.transpose(txt)?;
    let sim = g.matmul(img, tt)?;
    Ok(g.scale(sim, T::of(temperature)))
}

/// Backbone plus adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct HebaModel<T> {
    pub backbone: ToyBackbone<T>,
    pub adapters: ModelAdapters<T>,
}

impl<T: Scalar> HebaModel<T> {
    pub fn new(
        bb_cfg: &BackboneConfig,
        ad_cfg: &AdapterConfig,
        variant: Variant,
        backbone_rng: &mut Rng,
        adapter_rng: &mut Rng,
    ) -> Result<Self> {
        let backbone = ToyBackbone::init(bb_cfg, backbone_rng)?;
        let adapters = ModelAdapters::new(ad_cfg, bb_cfg, variant, adapter_rng)?;
        Ok(HebaModel { backbone, adapters })
    }

    /// Eval-mode logits. `scale = None` runs the frozen model without adapters.
    pub fn logits(
        &self,
        images: &Tensor<T>,
        prompts: &[Vec<usize>],
        scale: Option<f64>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bb = self.backbone.bind(&mut g);
        let bound;
        let adapted = match scale {
            None => None,
            Some(s) => {
                bound = self.adapters.bind(&mut g);
                Some(Adapted {
                    adapters: &bound,
                    scale: T::of(s),
                })
            }
        };
        let imgs = g.constant(images.clone());
        let fi = encode_image(&mut g, &bb, imgs, adapted.as_ref())?;
        let ft = encode_text(&mut g, &bb, prompts, adapted.as_ref())?;
        let lg = class_logits(&mut g, fi, ft, self.backbone.cfg.logit_temperature)?;
        Ok(g.value(lg).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig::default()
    }

    #[test]
    fn default_sequence_length() {
        assert_eq!(small().image_seq_len(), 50);
        assert_eq!(small().grid_side(), 7);
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = small();
        c.heads = 5;
        assert!(c.validate().is_err());
        assert!(ToyBackbone::<f64>::init(&c, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn same_seed_same_backbone() {
        let a = ToyBackbone::<f64>::init(&small(), &mut Rng::new(3)).unwrap();
        let b = ToyBackbone::<f64>::init(&small(), &mut Rng::new(3)).unwrap();
        assert_eq!(a.hash(), b.hash());
        for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(na, &nb);
            assert!(ta.bitwise_eq(tb));
        }
        let c = ToyBackbone::<f64>::init(&small(), &mut Rng::new(4)).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn logits_temperature_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = class_logits(&mut g, a, a, 10.0).unwrap();
        assert_eq!(g.value(l).data(), &[10.0, 0.0, 0.0, 10.0]);
        let l = class_logits(&mut g, a, a, 0.0).unwrap();
        assert!(g.value(l).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[2, 3]));
        assert!(class_logits(&mut g, a, bad, 1.0).is_err());
    }

    #[test]
    fn text_id_out_of_range() {
        let bb = ToyBackbone::<f64>::init(&small(), &mut Rng::new(0)).unwrap();
        let mut g = Graph::new();
        let b = bb.bind(&mut g);
        let prompts = vec![vec![64; 8]];
        assert!(matches!(
            encode_text(&mut g, &b, &prompts, None),
            Err(HebaError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn wrong_image_shape() {
        let bb = ToyBackbone::<f64>::init(&small(), &mut Rng::new(0)).unwrap();
        let mut g = Graph::new();
        let b = bb.bind(&mut g);
        let imgs = g.constant(Tensor::zeros(&[2, 1, 27, 27]));
        assert!(encode_image(&mut g, &b, imgs, None).is_err());
    }

    #[test]
    fn adapter_blocks_subset() {
        let ac = AdapterConfig {
            adapter_blocks: Some(vec![1]),
            ..AdapterConfig::default()
        };
        let m = ModelAdapters::<f64>::new(&ac, &small(), Variant::Full, &mut Rng::new(0)).unwrap();
        assert!(m.visual[0].is_none() && m.visual[1].is_none());
        assert!(m.visual[2].is_some() && m.text[3].is_some());
        let bad = AdapterConfig {
            adapter_blocks: Some(vec![2]),
            ..AdapterConfig::default()
        };
        assert!(
            ModelAdapters::<f64>::new(&bad, &small(), Variant::Full, &mut Rng::new(0)).is_err()
        );
    }

    #[test]
    fn no_dwconv_kernel_frozen_at_identity() {
        let m = ModelAdapters::<f64>::new(
            &AdapterConfig::default(),
            &small(),
            Variant::NoDwconv,
            &mut Rng::new(0),
        )
        .unwrap();
        let names: Vec<String> = m.trainable_params().into_iter().map(|p| p.name).collect();
        assert!(names.iter().all(|n| !n.ends_with("k_dw")));
        match &m.visual[0] {
            Some(VisualStream::Conv(a)) => assert!(a.k_dw.bitwise_eq(&identity_kernels(8))),
            _ => panic!("expected conv adapter"),
        }
    }

    #[test]
    fn bias_params_are_not_decayed() {
        let m = ModelAdapters::<f64>::new(
            &AdapterConfig::default(),
            &small(),
            Variant::Full,
            &mut Rng::new(0),
        )
        .unwrap();
        for p in m.trainable_params() {
            assert_eq!(
                p.decay,
                !p.name.rsplit('.').next().unwrap().starts_with("b_"),
                "{}",
                p.name
            );
        }
    }
}
