//! Small patch-token denoiser with identity cross-attention.
//!
//! The latent is cut into `p×p` patches (a stride-`p` convolution), mixed
//! across tokens and channels by residual blocks, and projected back. Every
//! block carries one cross-attention over identity context tokens; for dual
//! conditioning the two identities go through the same projections and the
//! outputs are combined by an [`AttentionMixer`] before the output projection.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    cross_attention_backward, cross_attention_traced, AttentionMixer,
    AttentionTrace, Conditioning, CrossAttentionParams, IdentityEmbedding, LinearMixer,
};
use crate::diffusion::NoisePredictor;
use crate::error::{param_err, Error, Result};
use crate::nn::{silu, silu_backward, Grads, LayerNorm, LayerNormCache, Linear, ParamId, ParamStore};
use crate::tensor::Shape3;
use crate::toy::codec::{patchify, unpatchify};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent: Shape3,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub context_tokens: usize,
    pub id_dim: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent: Shape3::new(1, 32, 32),
            patch: 4,
            width: 64,
            depth: 3,
            heads: 4,
            key_dim: 16,
            context_tokens: 4,
            id_dim: 64,
            mlp_ratio: 2,
            seed: 1,
        }
    }
}

impl DenoiserConfig {
    pub fn tokens(&self) -> usize {
        (self.latent.height / self.patch) * (self.latent.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.latent.channels * self.patch * self.patch
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0
            || self.latent.height % self.patch != 0
            || self.latent.width % self.patch != 0
        {
            return param_err("latent size must be divisible by the patch size");
        }
        if self.width == 0 || self.depth == 0 || self.context_tokens == 0 || self.id_dim == 0 {
            return param_err("denoiser dimensions must be positive");
        }
        if self.heads == 0 || self.width % self.heads != 0 || self.key_dim == 0 {
            return param_err("width must be divisible by a positive head count");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    time: Linear,
    ln_mix: LayerNorm,
    mix_w: ParamId,
    mix_b: ParamId,
    ln_attn: LayerNorm,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    attn_out: Linear,
    ln_mlp: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    patch_in: Linear,
    pos: ParamId,
    time1: Linear,
    time2: Linear,
    ctx_proj: Linear,
    ctx_norm: LayerNorm,
    null: ParamId,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    out: Linear,
}

/// Sinusoidal timestep features of width `dim`.
pub fn timestep_features(t: usize, dim: usize) -> Array1<f32> {
    let half = dim / 2;
    let mut out = Array1::<f32>::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

/// Context-path inputs needed for the backward pass.
struct ContextCache {
    raw_inputs: Array2<f32>,
    norm: LayerNormCache,
    tokens: Array2<f32>,
}

struct BlockCache {
    n1: Array2<f32>,
    ln1: LayerNormCache,
    n2: Array2<f32>,
    ln2: LayerNormCache,
    traces: Vec<AttentionTrace>,
    attn: Array2<f32>,
    n3: Array2<f32>,
    ln3: LayerNormCache,
    u: Array2<f32>,
    g: Array2<f32>,
}

struct TrainCache {
    patches: Array2<f32>,
    temb_feats: Array2<f32>,
    temb_pre: Array2<f32>,
    temb_hidden: Array2<f32>,
    temb: Array2<f32>,
    temb_act: Array2<f32>,
    ctx: ContextCache,
    null_mask: Vec<bool>,
    blocks: Vec<BlockCache>,
    out_in: Array2<f32>,
    out_ln: LayerNormCache,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let w = config.width;
        let n = config.tokens();
        let qk = config.heads * config.key_dim;
        let patch_in = Linear::new(&mut store, "patch_in", config.patch_dim(), w, 1.0, &mut rng);
        let pos = store.normal("pos", n, w, 50, 1.0, &mut rng);
        let time1 = Linear::new(&mut store, "time1", w, w, 1.0, &mut rng);
        let time2 = Linear::new(&mut store, "time2", w, w, 1.0, &mut rng);
        let ctx_proj = Linear::new(
            &mut store,
            "ctx_proj",
            config.id_dim,
            config.context_tokens * w,
            1.0,
            &mut rng,
        );
        let ctx_norm = LayerNorm::new(&mut store, "ctx_norm", w);
        let null = store.normal("null", 1, config.id_dim, config.id_dim, 1.0, &mut rng);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let name = |s: &str| format!("block{i}.{s}");
            blocks.push(Block {
                time: Linear::new(&mut store, &name("time"), w, w, 0.5, &mut rng),
                ln_mix: LayerNorm::new(&mut store, &name("ln_mix"), w),
                mix_w: store.normal(name("mix_w"), n, n, n, 0.5, &mut rng),
                mix_b: store.zeros(name("mix_b"), n, 1),
                ln_attn: LayerNorm::new(&mut store, &name("ln_attn"), w),
                w_q: store.normal(name("w_q"), w, qk, w, 1.0, &mut rng),
                w_k: store.normal(name("w_k"), w, qk, w, 1.0, &mut rng),
                w_v: store.normal(name("w_v"), w, w, w, 1.0, &mut rng),
                attn_out: Linear::new(&mut store, &name("attn_out"), w, w, 0.5, &mut rng),
                ln_mlp: LayerNorm::new(&mut store, &name("ln_mlp"), w),
                mlp1: Linear::new(&mut store, &name("mlp1"), w, config.mlp_ratio * w, 1.0, &mut rng),
                mlp2: Linear::new(&mut store, &name("mlp2"), config.mlp_ratio * w, w, 0.5, &mut rng),
            });
        }
        let out_norm = LayerNorm::new(&mut store, "out_norm", w);
        let out = Linear::new(&mut store, "out", w, config.patch_dim(), 0.1, &mut rng);
        Ok(Self {
            config,
            store,
            patch_in,
            pos,
            time1,
            time2,
            ctx_proj,
            ctx_norm,
            null,
            blocks,
            out_norm,
            out,
        })
    }

    /// Cross-attention projections of block `layer`; both identity branches
    /// of a dual conditioning read exactly this view.
    pub fn attention_params(&self, layer: usize) -> Result<CrossAttentionParams<'_>> {
        let b = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Param(format!("no attention layer {layer}")))?;
        CrossAttentionParams::new(
            self.store.get(b.w_q).view(),
            self.store.get(b.w_k).view(),
            self.store.get(b.w_v).view(),
            self.config.heads,
            self.config.key_dim,
        )
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn null_embedding(&self) -> IdentityEmbedding {
        IdentityEmbedding {
            values: self.store.get(self.null).row(0).to_owned(),
            source_id: None,
        }
    }

    fn check_embedding(&self, e: &IdentityEmbedding) -> Result<()> {
        if e.dim() != self.config.id_dim {
            return param_err(format!(
                "embedding has dimension {}, model expects {}",
                e.dim(),
                self.config.id_dim
            ));
        }
        Ok(())
    }

    /// Identity embedding → `context_tokens × width` context matrix.
    pub fn context_tokens(&self, e: &IdentityEmbedding) -> Result<Array2<f32>> {
        self.check_embedding(e)?;
        let proj = self.ctx_proj.forward(&self.store, e.as_context());
        let rows = proj
            .into_shape_with_order((self.config.context_tokens, self.config.width))
            .map_err(|e| Error::Model(e.to_string()))?;
        Ok(self.ctx_norm.forward(&self.store, rows.view()).0)
    }

    fn time_embedding(&self, ts: &[usize]) -> (Array2<f32>, Array2<f32>, Array2<f32>, Array2<f32>) {
        let w = self.config.width;
        let mut feats = Array2::<f32>::zeros((ts.len(), w));
        for (i, &t) in ts.iter().enumerate() {
            feats.row_mut(i).assign(&timestep_features(t, w));
        }
        let pre = self.time1.forward(&self.store, feats.view());
        let hidden = silu(pre.view());
        let temb = self.time2.forward(&self.store, hidden.view());
        (feats, pre, hidden, temb)
    }

    fn embed_patches(&self, latents: &[&Array3<f32>]) -> Result<(Array2<f32>, Array2<f32>)> {
        let n = self.config.tokens();
        let pd = self.config.patch_dim();
        let mut patches = Array2::<f32>::zeros((latents.len() * n, pd));
        for (b, z) in latents.iter().enumerate() {
            if Shape3::of(z) != self.config.latent {
                return param_err(format!(
                    "latent {} does not match model latent {}",
                    Shape3::of(z),
                    self.config.latent
                ));
            }
            patches
                .slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&patchify(z, self.config.patch));
        }
        let mut h = self.patch_in.forward(&self.store, patches.view());
        let pos = self.store.get(self.pos);
        for b in 0..latents.len() {
            let mut rows = h.slice_mut(s![b * n..(b + 1) * n, ..]);
            rows += pos;
        }
        Ok((patches, h))
    }

    fn add_time(&self, block: &Block, h: &mut Array2<f32>, temb_act: &Array2<f32>) {
        let n = self.config.tokens();
        let shift = block.time.forward(&self.store, temb_act.view());
        for (b, row) in shift.rows().into_iter().enumerate() {
            let mut rows = h.slice_mut(s![b * n..(b + 1) * n, ..]);
            rows += &row;
        }
    }

    fn token_mix(&self, block: &Block, normed: &Array2<f32>, batch: usize) -> Array2<f32> {
        let n = self.config.tokens();
        let mix_w = self.store.get(block.mix_w);
        let mix_b = self.store.get(block.mix_b);
        let mut out = Array2::<f32>::zeros(normed.raw_dim());
        for b in 0..batch {
            let mut y = mix_w.dot(&normed.slice(s![b * n..(b + 1) * n, ..]));
            y += mix_b;
            out.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&y);
        }
        out
    }

    fn finish(&self, h: &Array2<f32>, batch: usize) -> Vec<Array3<f32>> {
        let n = self.config.tokens();
        let (normed, _) = self.out_norm.forward(&self.store, h.view());
        let y = self.out.forward(&self.store, normed.view());
        (0..batch)
            .map(|b| {
                unpatchify(
                    &y.slice(s![b * n..(b + 1) * n, ..]).to_owned(),
                    self.config.latent,
                    self.config.patch,
                )
            })
            .collect()
    }

    /// Inference forward pass. When `trace` is given, the residual stream
    /// after each block is appended to it.
    pub fn forward_with(
        &self,
        latents: &[&Array3<f32>],
        t: usize,
        conds: &[Conditioning],
        mixer: &dyn AttentionMixer,
        mut trace: Option<&mut Vec<Array2<f32>>>,
    ) -> Result<Vec<Array3<f32>>> {
        if latents.len() != conds.len() {
            return param_err("one conditioning per latent is required");
        }
        let batch = latents.len();
        let n = self.config.tokens();
        let null = self.null_embedding();
        // (context A, optional context B and weight) per sample
        let mut contexts: Vec<(Array2<f32>, Option<(Array2<f32>, f32)>)> = Vec::with_capacity(batch);
        for cond in conds {
            contexts.push(match cond {
                Conditioning::Null => (self.context_tokens(&null)?, None),
                Conditioning::Identity(e) => (self.context_tokens(e)?, None),
                Conditioning::Dual { a, b, lambda } => {
                    crate::conditioning::check_lambda(*lambda)?;
                    (self.context_tokens(a)?, Some((self.context_tokens(b)?, *lambda)))
                }
            });
        }
        let ts = vec![t; batch];
        let (_, _, _, temb) = self.time_embedding(&ts);
        let temb_act = silu(temb.view());
        let (_, mut h) = self.embed_patches(latents)?;
        for (layer, block) in self.blocks.iter().enumerate() {
            self.add_time(block, &mut h, &temb_act);
            let (n1, _) = block.ln_mix.forward(&self.store, h.view());
            h += &self.token_mix(block, &n1, batch);
            let (n2, _) = block.ln_attn.forward(&self.store, h.view());
            let params = self.attention_params(layer)?;
            let mut attn = Array2::<f32>::zeros(h.raw_dim());
            for (b, (ctx_a, second)) in contexts.iter().enumerate() {
                let feats = n2.slice(s![b * n..(b + 1) * n, ..]);
                let out_a = cross_attention_traced(feats, ctx_a.view(), &params)?.output;
                let mixed = match second {
                    None => out_a,
                    Some((ctx_b, lambda)) => {
                        let out_b = cross_attention_traced(feats, ctx_b.view(), &params)?.output;
                        mixer.mix(layer, &out_a, &out_b, *lambda)?
                    }
                };
                attn.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&mixed.values);
            }
            h += &block.attn_out.forward(&self.store, attn.view());
            let (n3, _) = block.ln_mlp.forward(&self.store, h.view());
            let u = block.mlp1.forward(&self.store, n3.view());
            let g = silu(u.view());
            h += &block.mlp2.forward(&self.store, g.view());
            if let Some(trace) = trace.as_deref_mut() {
                trace.push(h.clone());
            }
        }
        let out = self.finish(&h, batch);
        if out.iter().any(|o| !crate::tensor::all_finite(o)) {
            return Err(Error::Numeric("denoiser produced non-finite output".into()));
        }
        Ok(out)
    }

    /// Training forward over per-sample timesteps and single-identity (or
    /// null) conditions. Returns the predictions and the activation cache.
    fn forward_train(
        &self,
        latents: &[&Array3<f32>],
        ts: &[usize],
        embeddings: &[Option<&IdentityEmbedding>],
    ) -> Result<(Array2<f32>, TrainCache)> {
        let batch = latents.len();
        let n = self.config.tokens();
        let w = self.config.width;
        let null = self.null_embedding();
        let mut raw_inputs = Array2::<f32>::zeros((batch, self.config.id_dim));
        let mut null_mask = Vec::with_capacity(batch);
        for (b, e) in embeddings.iter().enumerate() {
            let e = match e {
                Some(e) => {
                    self.check_embedding(e)?;
                    null_mask.push(false);
                    *e
                }
                None => {
                    null_mask.push(true);
                    &null
                }
            };
            raw_inputs.row_mut(b).assign(&e.values);
        }
        let proj = self.ctx_proj.forward(&self.store, raw_inputs.view());
        let proj_rows = proj
            .into_shape_with_order((batch * self.config.context_tokens, w))
            .map_err(|e| Error::Model(e.to_string()))?;
        let (ctx_tokens, ctx_ln) = self.ctx_norm.forward(&self.store, proj_rows.view());
        let m = self.config.context_tokens;

        let (temb_feats, temb_pre, temb_hidden, temb) = self.time_embedding(ts);
        let temb_act = silu(temb.view());
        let (patches, mut h) = self.embed_patches(latents)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            self.add_time(block, &mut h, &temb_act);
            let (n1, ln1) = block.ln_mix.forward(&self.store, h.view());
            h += &self.token_mix(block, &n1, batch);
            let (n2, ln2) = block.ln_attn.forward(&self.store, h.view());
            let params = self.attention_params(layer)?;
            let mut attn = Array2::<f32>::zeros(h.raw_dim());
            let mut traces = Vec::with_capacity(batch);
            for b in 0..batch {
                let feats = n2.slice(s![b * n..(b + 1) * n, ..]);
                let ctx = ctx_tokens.slice(s![b * m..(b + 1) * m, ..]);
                let tr = cross_attention_traced(feats, ctx, &params)?;
                attn.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&tr.output.values);
                traces.push(tr);
            }
            h += &block.attn_out.forward(&self.store, attn.view());
            let (n3, ln3) = block.ln_mlp.forward(&self.store, h.view());
            let u = block.mlp1.forward(&self.store, n3.view());
            let g = silu(u.view());
            h += &block.mlp2.forward(&self.store, g.view());
            caches.push(BlockCache {
                n1,
                ln1,
                n2,
                ln2,
                traces,
                attn,
                n3,
                ln3,
                u,
                g,
            });
        }
        let (out_in, out_ln) = self.out_norm.forward(&self.store, h.view());
        let y = self.out.forward(&self.store, out_in.view());
        Ok((
            y,
            TrainCache {
                patches,
                temb_feats,
                temb_pre,
                temb_hidden,
                temb,
                temb_act,
                ctx: ContextCache {
                    raw_inputs,
                    norm: ctx_ln,
                    tokens: ctx_tokens,
                },
                null_mask,
                blocks: caches,
                out_in,
                out_ln,
            },
        ))
    }

    fn backward(&self, cache: &TrainCache, dy: ArrayView2<f32>, grads: &mut Grads) -> Result<()> {
        let batch = cache.null_mask.len();
        let n = self.config.tokens();
        let m = self.config.context_tokens;
        let w = self.config.width;
        let d_out_in = self.out.backward(&self.store, grads, cache.out_in.view(), dy);
        let mut dh = self
            .out_norm
            .backward(&self.store, grads, &cache.out_ln, d_out_in.view());
        let mut d_ctx = Array2::<f32>::zeros(cache.ctx.tokens.raw_dim());
        let mut d_temb_act = Array2::<f32>::zeros(cache.temb_act.raw_dim());
        for (layer, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            // mlp
            let dg = block.mlp2.backward(&self.store, grads, bc.g.view(), dh.view());
            let du = silu_backward(bc.u.view(), dg.view());
            let dn3 = block.mlp1.backward(&self.store, grads, bc.n3.view(), du.view());
            dh += &block.ln_mlp.backward(&self.store, grads, &bc.ln3, dn3.view());
            // attention
            let d_attn = block.attn_out.backward(&self.store, grads, bc.attn.view(), dh.view());
            let params = self.attention_params(layer)?;
            let mut dn2 = Array2::<f32>::zeros(bc.n2.raw_dim());
            let (mut gq, mut gk, mut gv) = (
                Array2::<f32>::zeros(params.w_q.raw_dim()),
                Array2::<f32>::zeros(params.w_k.raw_dim()),
                Array2::<f32>::zeros(params.w_v.raw_dim()),
            );
            for b in 0..batch {
                let feats = bc.n2.slice(s![b * n..(b + 1) * n, ..]);
                let ctx = cache.ctx.tokens.slice(s![b * m..(b + 1) * m, ..]);
                let g = cross_attention_backward(
                    &bc.traces[b],
                    feats,
                    ctx,
                    &params,
                    d_attn.slice(s![b * n..(b + 1) * n, ..]),
                );
                dn2.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&g.features);
                let mut dc = d_ctx.slice_mut(s![b * m..(b + 1) * m, ..]);
                dc += &g.context;
                gq += &g.w_q;
                gk += &g.w_k;
                gv += &g.w_v;
            }
            *grads.get_mut(block.w_q) += &gq;
            *grads.get_mut(block.w_k) += &gk;
            *grads.get_mut(block.w_v) += &gv;
            dh += &block.ln_attn.backward(&self.store, grads, &bc.ln2, dn2.view());
            // token mixing
            let mix_w = self.store.get(block.mix_w);
            let mut dn1 = Array2::<f32>::zeros(bc.n1.raw_dim());
            let mut g_mix = Array2::<f32>::zeros(mix_w.raw_dim());
            let mut g_mix_b = Array2::<f32>::zeros((n, 1));
            for b in 0..batch {
                let dm = dh.slice(s![b * n..(b + 1) * n, ..]);
                g_mix += &dm.dot(&bc.n1.slice(s![b * n..(b + 1) * n, ..]).t());
                g_mix_b += &dm.sum_axis(Axis(1)).insert_axis(Axis(1));
                dn1.slice_mut(s![b * n..(b + 1) * n, ..])
                    .assign(&mix_w.t().dot(&dm));
            }
            *grads.get_mut(block.mix_w) += &g_mix;
            *grads.get_mut(block.mix_b) += &g_mix_b;
            dh += &block.ln_mix.backward(&self.store, grads, &bc.ln1, dn1.view());
            // timestep shift
            let mut d_shift = Array2::<f32>::zeros((batch, w));
            for b in 0..batch {
                d_shift
                    .row_mut(b)
                    .assign(&dh.slice(s![b * n..(b + 1) * n, ..]).sum_axis(Axis(0)));
            }
            d_temb_act += &block
                .time
                .backward(&self.store, grads, cache.temb_act.view(), d_shift.view());
        }
        // patch embedding and positions
        let mut g_pos = Array2::<f32>::zeros((n, w));
        for b in 0..batch {
            g_pos += &dh.slice(s![b * n..(b + 1) * n, ..]);
        }
        *grads.get_mut(self.pos) += &g_pos;
        self.patch_in
            .backward(&self.store, grads, cache.patches.view(), dh.view());
        // time embedding MLP
        let d_temb = silu_backward(cache.temb.view(), d_temb_act.view());
        let d_hidden = self
            .time2
            .backward(&self.store, grads, cache.temb_hidden.view(), d_temb.view());
        let d_pre = silu_backward(cache.temb_pre.view(), d_hidden.view());
        self.time1
            .backward(&self.store, grads, cache.temb_feats.view(), d_pre.view());
        // context path
        let d_proj = self
            .ctx_norm
            .backward(&self.store, grads, &cache.ctx.norm, d_ctx.view());
        let d_proj = d_proj
            .into_shape_with_order((batch, m * w))
            .map_err(|e| Error::Model(e.to_string()))?;
        let d_inputs = self
            .ctx_proj
            .backward(&self.store, grads, cache.ctx.raw_inputs.view(), d_proj.view());
        let mut g_null = Array2::<f32>::zeros((1, self.config.id_dim));
        for (b, &is_null) in cache.null_mask.iter().enumerate() {
            if is_null {
                let mut row = g_null.row_mut(0);
                row += &d_inputs.row(b);
            }
        }
        *grads.get_mut(self.null) += &g_null;
        Ok(())
    }
}

impl NoisePredictor for DenoiserModel {
    fn latent_shape(&self) -> Shape3 {
        self.config.latent
    }

    fn predict(
        &self,
        latents: &[&Array3<f32>],
        t: usize,
        conds: &[Conditioning],
    ) -> Result<Vec<Array3<f32>>> {
        self.forward_with(latents, t, conds, &LinearMixer, None)
    }
}

/// The denoiser with a custom combination rule for dual conditioning.
pub struct MixedDenoiser<'a> {
    pub model: &'a DenoiserModel,
    pub mixer: &'a dyn AttentionMixer,
}

impl NoisePredictor for MixedDenoiser<'_> {
    fn latent_shape(&self) -> Shape3 {
        self.model.config.latent
    }

    fn predict(
        &self,
        latents: &[&Array3<f32>],
        t: usize,
        conds: &[Conditioning],
    ) -> Result<Vec<Array3<f32>>> {
        self.model.forward_with(latents, t, conds, self.mixer, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    /// Probability of replacing the identity with the learned null embedding.
    pub cond_dropout: f32,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 32,
            lr: 2e-3,
            warmup_steps: 100,
            cond_dropout: 0.1,
            eval_batch: 64,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainReport {
    pub steps: usize,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub final_train_loss: f64,
}

/// Warmup followed by cosine decay to a tenth of the peak rate.
pub(crate) fn lr_at(step: usize, total: usize, warmup: usize, peak: f32) -> f32 {
    if step < warmup {
        return peak * (step + 1) as f32 / warmup as f32;
    }
    let span = (total - warmup).max(1) as f32;
    let progress = ((step - warmup) as f32 / span).min(1.0);
    peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos()))
}

/// One noised training example.
struct NoisyBatch {
    noisy: Vec<Array3<f32>>,
    noise: Vec<Array3<f32>>,
    ts: Vec<usize>,
}

fn noisy_batch<R: rand::Rng>(
    latents: &[&Array3<f32>],
    schedule: &crate::diffusion::VarianceSchedule,
    rng: &mut R,
) -> Result<NoisyBatch> {
    let mut out = NoisyBatch {
        noisy: Vec::with_capacity(latents.len()),
        noise: Vec::with_capacity(latents.len()),
        ts: Vec::with_capacity(latents.len()),
    };
    for z in latents {
        let t = rng.random_range(1..=schedule.num_steps());
        let eps = crate::tensor::gaussian(Shape3::of(z), rng);
        let z0 = crate::diffusion::LatentState::clean((*z).clone())?;
        let zt = crate::diffusion::forward_noise(&z0, t, &eps, schedule)?;
        out.noisy.push(zt.values);
        out.noise.push(eps);
        out.ts.push(t);
    }
    Ok(out)
}

impl DenoiserModel {
    fn batch_loss(&self, batch: &NoisyBatch, embeddings: &[Option<&IdentityEmbedding>]) -> Result<(f64, Array2<f32>, TrainCache)> {
        let refs: Vec<&Array3<f32>> = batch.noisy.iter().collect();
        let (y, cache) = self.forward_train(&refs, &batch.ts, embeddings)?;
        let n = self.config.tokens();
        let mut target = Array2::<f32>::zeros(y.raw_dim());
        for (b, eps) in batch.noise.iter().enumerate() {
            target
                .slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&patchify(eps, self.config.patch));
        }
        let diff = &y - &target;
        let count = diff.len() as f32;
        let loss = diff.iter().map(|&d| (d as f64).powi(2)).sum::<f64>() / count as f64;
        Ok((loss, diff.mapv(|d| 2.0 * d / count), cache))
    }

    /// Noise-prediction MSE over a fixed, seeded held-out batch.
    pub fn held_out_loss(
        &self,
        latents: &[&Array3<f32>],
        embeddings: &[&IdentityEmbedding],
        schedule: &crate::diffusion::VarianceSchedule,
        seed: u64,
    ) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = noisy_batch(latents, schedule, &mut rng)?;
        let embs: Vec<Option<&IdentityEmbedding>> = embeddings.iter().map(|e| Some(*e)).collect();
        Ok(self.batch_loss(&batch, &embs)?.0)
    }

    /// Minimizes the noise-prediction error with identity conditioning and
    /// condition dropout.
    pub fn fit(
        &mut self,
        latents: &[&Array3<f32>],
        embeddings: &[&IdentityEmbedding],
        held_out: (&[&Array3<f32>], &[&IdentityEmbedding]),
        schedule: &crate::diffusion::VarianceSchedule,
        config: &DenoiserTrainConfig,
    ) -> Result<DenoiserTrainReport> {
        use rand::Rng;
        if latents.is_empty() || latents.len() != embeddings.len() {
            return param_err("denoiser training needs one embedding per latent");
        }
        let eval_seed = config.seed ^ 0x5eed;
        let eval_n = held_out.0.len().min(config.eval_batch);
        let eval_latents = &held_out.0[..eval_n];
        let eval_embs = &held_out.1[..eval_n];
        let initial_eval_loss = if eval_n > 0 {
            self.held_out_loss(eval_latents, eval_embs, schedule, eval_seed)?
        } else {
            f64::NAN
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut adam = crate::nn::Adam::new(&self.store, crate::nn::AdamConfig::default());
        let mut grads = self.store.grads();
        let mut last = f64::NAN;
        for step in 0..config.steps {
            let idx: Vec<usize> = (0..config.batch_size)
                .map(|_| rng.random_range(0..latents.len()))
                .collect();
            let batch_latents: Vec<&Array3<f32>> = idx.iter().map(|&i| latents[i]).collect();
            let embs: Vec<Option<&IdentityEmbedding>> = idx
                .iter()
                .map(|&i| {
                    if rng.random::<f32>() < config.cond_dropout {
                        None
                    } else {
                        Some(embeddings[i])
                    }
                })
                .collect();
            let batch = noisy_batch(&batch_latents, schedule, &mut rng)?;
            let (loss, dy, cache) = self.batch_loss(&batch, &embs)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("denoiser loss non-finite at step {step}")));
            }
            last = loss;
            grads.zero();
            self.backward(&cache, dy.view(), &mut grads)?;
            let lr = lr_at(step, config.steps, config.warmup_steps, config.lr);
            adam.step(&mut self.store, &mut grads, lr);
            if step % 500 == 0 {
                log::debug!("denoiser step {step}: loss {loss:.4}");
            }
        }
        if !self.store.all_finite() {
            return Err(Error::Training("denoiser weights became non-finite".into()));
        }
        let final_eval_loss = if eval_n > 0 {
            self.held_out_loss(eval_latents, eval_embs, schedule, eval_seed)?
        } else {
            f64::NAN
        };
        Ok(DenoiserTrainReport {
            steps: config.steps,
            initial_eval_loss,
            final_eval_loss,
            final_train_loss: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::AttentionOutput;
    use crate::diffusion::build_schedule;
    use crate::tensor::gaussian;
    use ndarray::Array1;
    use rand::Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            latent: Shape3::new(1, 8, 8),
            patch: 2,
            width: 16,
            depth: 2,
            heads: 2,
            key_dim: 4,
            context_tokens: 3,
            id_dim: 6,
            mlp_ratio: 2,
            seed: 3,
        }
    }

    fn emb(rng: &mut ChaCha8Rng, d: usize) -> IdentityEmbedding {
        IdentityEmbedding::new(Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn output_shape_matches_latent() {
        let model = DenoiserModel::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = gaussian(tiny().latent, &mut rng);
        let e = emb(&mut rng, 6);
        let out = model.predict(&[&z], 10, &[Conditioning::Identity(e)]).unwrap();
        assert_eq!(out[0].dim(), z.dim());
        let bad = Array3::zeros((1, 6, 6));
        assert!(model.predict(&[&bad], 10, &[Conditioning::Null]).is_err());
    }

    #[test]
    fn batching_does_not_change_results() {
        let model = DenoiserModel::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zs: Vec<_> = (0..3).map(|_| gaussian(tiny().latent, &mut rng)).collect();
        let conds = vec![
            Conditioning::Identity(emb(&mut rng, 6)),
            Conditioning::Null,
            Conditioning::Dual {
                a: emb(&mut rng, 6),
                b: emb(&mut rng, 6),
                lambda: 0.5,
            },
        ];
        let refs: Vec<_> = zs.iter().collect();
        let batched = model.predict(&refs, 37, &conds).unwrap();
        for i in 0..3 {
            let single = model.predict(&[&zs[i]], 37, &conds[i..i + 1]).unwrap();
            assert_eq!(single[0], batched[i]);
        }
    }

    #[test]
    fn dual_at_lambda_one_equals_single_identity_at_every_layer() {
        let model = DenoiserModel::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = gaussian(tiny().latent, &mut rng);
        let (a, b) = (emb(&mut rng, 6), emb(&mut rng, 6));
        let mut single = Vec::new();
        let mut dual = Vec::new();
        let o1 = model
            .forward_with(&[&z], 5, &[Conditioning::Identity(a.clone())], &LinearMixer, Some(&mut single))
            .unwrap();
        let o2 = model
            .forward_with(&[&z], 5, &[Conditioning::Dual { a, b, lambda: 1.0 }], &LinearMixer, Some(&mut dual))
            .unwrap();
        assert_eq!(single.len(), 2);
        assert_eq!(single, dual);
        assert_eq!(o1, o2);
    }

    struct Recorder(std::sync::Mutex<Vec<usize>>);
    impl AttentionMixer for Recorder {
        fn mix(&self, layer: usize, a: &AttentionOutput, b: &AttentionOutput, lambda: f32) -> Result<AttentionOutput> {
            self.0.lock().unwrap().push(layer);
            crate::conditioning::interpolate_attention(a, b, lambda)
        }
    }

    #[test]
    fn mixer_is_called_once_per_layer() {
        let model = DenoiserModel::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = gaussian(tiny().latent, &mut rng);
        let rec = Recorder(Default::default());
        let cond = Conditioning::Dual {
            a: emb(&mut rng, 6),
            b: emb(&mut rng, 6),
            lambda: 0.5,
        };
        model.forward_with(&[&z], 5, &[cond], &rec, None).unwrap();
        assert_eq!(*rec.0.lock().unwrap(), vec![0, 1]);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut model = DenoiserModel::new(tiny()).unwrap();
        let schedule = build_schedule(50, 1e-3, 0.05, crate::diffusion::ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zs: Vec<_> = (0..2).map(|_| gaussian(tiny().latent, &mut rng)).collect();
        let es = [emb(&mut rng, 6), emb(&mut rng, 6)];
        let refs: Vec<_> = zs.iter().collect();
        let batch = noisy_batch(&refs, &schedule, &mut rng).unwrap();
        let embs = [Some(&es[0]), None];
        let (_, dy, cache) = model.batch_loss(&batch, &embs).unwrap();
        let mut grads = model.store.grads();
        model.backward(&cache, dy.view(), &mut grads).unwrap();
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        let h = 1e-3f32;
        let mut checked = 0;
        for (pi, name) in names.iter().enumerate() {
            let id = ParamId(pi);
            let probe = (0, model.store.get(id).ncols() / 2);
            let analytic = grads.get(id)[probe] as f64;
            let orig = model.store.get(id)[probe];
            model.store.get_mut(id)[probe] = orig + h;
            let lp = model.batch_loss(&batch, &embs).unwrap().0;
            model.store.get_mut(id)[probe] = orig - h;
            let lm = model.batch_loss(&batch, &embs).unwrap().0;
            model.store.get_mut(id)[probe] = orig;
            let numeric = (lp - lm) / (2.0 * h as f64);
            let tol = 2e-3 + 5e-2 * numeric.abs().max(analytic.abs());
            assert!((numeric - analytic).abs() < tol, "{name}: numeric {numeric} vs analytic {analytic}");
            checked += 1;
        }
        assert_eq!(checked, model.store.len());
    }

    #[test]
    fn one_training_step_changes_parameters() {
        let mut model = DenoiserModel::new(tiny()).unwrap();
        let before = model.store.clone();
        let schedule = build_schedule(50, 1e-3, 0.05, crate::diffusion::ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zs: Vec<_> = (0..4).map(|_| gaussian(tiny().latent, &mut rng)).collect();
        let es: Vec<_> = (0..4).map(|_| emb(&mut rng, 6)).collect();
        let zr: Vec<_> = zs.iter().collect();
        let er: Vec<_> = es.iter().collect();
        let cfg = DenoiserTrainConfig {
            steps: 1,
            batch_size: 4,
            ..DenoiserTrainConfig::default()
        };
        let report = model.fit(&zr, &er, (&zr, &er), &schedule, &cfg).unwrap();
        assert!(report.final_train_loss.is_finite());
        assert_ne!(before, model.store);
    }

    #[test]
    fn lr_schedule_shape() {
        assert!((lr_at(0, 100, 10, 1.0) - 0.1).abs() < 1e-6);
        assert!((lr_at(10, 100, 10, 1.0) - 1.0).abs() < 1e-6);
        assert!((lr_at(100, 100, 10, 1.0) - 0.1).abs() < 1e-6);
    }
}
