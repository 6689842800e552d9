//! Identity embeddings and the decoupled dual-identity cross-attention.
//!
//! Both identity branches are evaluated with one borrowed
//! [`CrossAttentionParams`], so the projections are shared by construction.
//! Throughout the crate `lambda` is the weight of identity A.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{param_err, Error, Result};
use crate::tensor::{all_finite, Shape3};

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding {
    pub values: Array1<f32>,
    pub source_id: Option<String>,
}

impl IdentityEmbedding {
    pub fn new(values: Array1<f32>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("embedding contains non-finite entries".into()));
        }
        Ok(Self {
            values,
            source_id: None,
        })
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = Some(id.into());
        self
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// The embedding as a single context token (`1 × d`).
    pub fn as_context(&self) -> ArrayView2<'_, f32> {
        self.values.view().insert_axis(Axis(0))
    }

    pub fn cosine(&self, other: &IdentityEmbedding) -> f64 {
        crate::tensor::cosine(&self.values, &other.values)
    }

    pub fn normalized(&self) -> IdentityEmbedding {
        let n = crate::tensor::norm(&self.values) as f32;
        let values = if n > 0.0 {
            self.values.mapv(|v| v / n)
        } else {
            self.values.clone()
        };
        IdentityEmbedding {
            values,
            source_id: self.source_id.clone(),
        }
    }
}

/// Conditioning handle passed to a noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    /// Unconditional branch (learned null embedding).
    Null,
    Identity(IdentityEmbedding),
    /// Decoupled cross-attention over two identities, mixed with weight
    /// `lambda` on `a` at every attention layer.
    Dual {
        a: IdentityEmbedding,
        b: IdentityEmbedding,
        lambda: f32,
    },
}

/// Borrowed projection weights: `W_q: c_feat × h·d`, `W_k: c_ctx × h·d`,
/// `W_v: c_ctx × c_out` with `c_out` divisible by the head count.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionParams<'a> {
    pub w_q: ArrayView2<'a, f32>,
    pub w_k: ArrayView2<'a, f32>,
    pub w_v: ArrayView2<'a, f32>,
    pub heads: usize,
    pub key_dim: usize,
}

impl<'a> CrossAttentionParams<'a> {
    pub fn new(
        w_q: ArrayView2<'a, f32>,
        w_k: ArrayView2<'a, f32>,
        w_v: ArrayView2<'a, f32>,
        heads: usize,
        key_dim: usize,
    ) -> Result<Self> {
        if heads == 0 || key_dim == 0 {
            return param_err("head count and key dimension must be positive");
        }
        let qk = heads * key_dim;
        if w_q.ncols() != qk || w_k.ncols() != qk {
            return param_err(format!(
                "query/key projections must have {qk} columns, got {} and {}",
                w_q.ncols(),
                w_k.ncols()
            ));
        }
        if w_k.nrows() != w_v.nrows() {
            return param_err("key and value projections must read the same context width");
        }
        if w_v.ncols() % heads != 0 {
            return param_err("value width must be divisible by the head count");
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            heads,
            key_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn context_dim(&self) -> usize {
        self.w_k.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w_v.ncols()
    }
}

/// Owned weights, mostly for tests and tools; attention itself always runs on
/// the borrowed view.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionWeights {
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_v: Array2<f32>,
    pub heads: usize,
    pub key_dim: usize,
}

impl CrossAttentionWeights {
    pub fn params(&self) -> Result<CrossAttentionParams<'_>> {
        CrossAttentionParams::new(
            self.w_q.view(),
            self.w_k.view(),
            self.w_v.view(),
            self.heads,
            self.key_dim,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub values: Array2<f32>,
}

/// Intermediates of one attention evaluation; `weights[h]` is the
/// `queries × keys` softmax matrix of head `h`.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    pub weights: Vec<Array2<f32>>,
    pub output: AttentionOutput,
}

fn softmax_rows(scores: &mut Array2<f32>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `softmax(Q·Kᵀ/√d)·V` with `Q = F·W_q`, `K = ctx·W_k`, `V = ctx·W_v`, per head.
pub fn cross_attention_traced(
    features: ArrayView2<f32>,
    context: ArrayView2<f32>,
    params: &CrossAttentionParams,
) -> Result<AttentionTrace> {
    if features.ncols() != params.feature_dim() {
        return param_err(format!(
            "feature width {} does not match W_q rows {}",
            features.ncols(),
            params.feature_dim()
        ));
    }
    if context.ncols() != params.context_dim() {
        return param_err(format!(
            "context width {} does not match W_k rows {}",
            context.ncols(),
            params.context_dim()
        ));
    }
    if context.nrows() == 0 {
        return param_err("context must hold at least one token");
    }
    let q = features.dot(&params.w_q);
    let k = context.dot(&params.w_k);
    let v = context.dot(&params.w_v);
    let d = params.key_dim;
    let dv = params.output_dim() / params.heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Array2::<f32>::zeros((features.nrows(), params.output_dim()));
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = q.slice(s![.., h * d..(h + 1) * d]);
        let kh = k.slice(s![.., h * d..(h + 1) * d]);
        let vh = v.slice(s![.., h * dv..(h + 1) * dv]);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|x| x * scale);
        softmax_rows(&mut scores);
        out.slice_mut(s![.., h * dv..(h + 1) * dv]).assign(&scores.dot(&vh));
        weights.push(scores);
    }
    if !all_finite(&out) || weights.iter().any(|w| !all_finite(w)) {
        return Err(Error::Numeric("non-finite value inside cross-attention".into()));
    }
    Ok(AttentionTrace {
        q,
        k,
        v,
        weights,
        output: AttentionOutput { values: out },
    })
}

pub fn cross_attention(
    features: ArrayView2<f32>,
    context: ArrayView2<f32>,
    params: &CrossAttentionParams,
) -> Result<AttentionOutput> {
    cross_attention_traced(features, context, params).map(|t| t.output)
}

/// Evaluates the same attention twice, once per identity context.
pub fn dual_cross_attention(
    features: ArrayView2<f32>,
    context_a: ArrayView2<f32>,
    context_b: ArrayView2<f32>,
    params: &CrossAttentionParams,
) -> Result<(AttentionOutput, AttentionOutput)> {
    let a = cross_attention(features, context_a, params)?;
    let b = cross_attention(features, context_b, params)?;
    Ok((a, b))
}

/// Gradients of one attention evaluation with respect to its inputs and
/// projection weights.
pub(crate) struct AttentionGrads {
    pub features: Array2<f32>,
    pub context: Array2<f32>,
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_v: Array2<f32>,
}

pub(crate) fn cross_attention_backward(
    trace: &AttentionTrace,
    features: ArrayView2<f32>,
    context: ArrayView2<f32>,
    params: &CrossAttentionParams,
    d_out: ArrayView2<f32>,
) -> AttentionGrads {
    let d = params.key_dim;
    let dv = params.output_dim() / params.heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut dq = Array2::<f32>::zeros(trace.q.raw_dim());
    let mut dk = Array2::<f32>::zeros(trace.k.raw_dim());
    let mut dvv = Array2::<f32>::zeros(trace.v.raw_dim());
    for (h, p) in trace.weights.iter().enumerate() {
        let d_oh = d_out.slice(s![.., h * dv..(h + 1) * dv]);
        let vh = trace.v.slice(s![.., h * dv..(h + 1) * dv]);
        let qh = trace.q.slice(s![.., h * d..(h + 1) * d]);
        let kh = trace.k.slice(s![.., h * d..(h + 1) * d]);
        let dp = d_oh.dot(&vh.t());
        dvv.slice_mut(s![.., h * dv..(h + 1) * dv]).assign(&p.t().dot(&d_oh));
        let mut ds = &dp * p;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let inner: f32 = row.sum();
            for (x, &pv) in row.iter_mut().zip(prow.iter()) {
                *x = (*x - pv * inner) * scale;
            }
        }
        dq.slice_mut(s![.., h * d..(h + 1) * d]).assign(&ds.dot(&kh));
        dk.slice_mut(s![.., h * d..(h + 1) * d]).assign(&ds.t().dot(&qh));
    }
    AttentionGrads {
        features: dq.dot(&params.w_q.t()),
        context: dk.dot(&params.w_k.t()) + dvv.dot(&params.w_v.t()),
        w_q: features.t().dot(&dq),
        w_k: context.t().dot(&dk),
        w_v: context.t().dot(&dvv),
    }
}

pub fn check_lambda(lambda: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return param_err(format!("interpolation weight must lie in [0, 1], got {lambda}"));
    }
    Ok(())
}

/// `λ·C_A + (1−λ)·C_B`.
pub fn interpolate_attention(
    c_a: &AttentionOutput,
    c_b: &AttentionOutput,
    lambda: f32,
) -> Result<AttentionOutput> {
    check_lambda(lambda)?;
    if c_a.values.dim() != c_b.values.dim() {
        return param_err("attention outputs differ in shape");
    }
    let mut values = c_a.values.clone();
    let mu = 1.0 - lambda;
    Zip::from(&mut values)
        .and(&c_b.values)
        .for_each(|a, &b| *a = lambda * *a + mu * b);
    Ok(AttentionOutput { values })
}

/// Combines the two per-identity attention outputs of one layer.
pub trait AttentionMixer: Sync {
    fn mix(
        &self,
        layer: usize,
        c_a: &AttentionOutput,
        c_b: &AttentionOutput,
        lambda: f32,
    ) -> Result<AttentionOutput>;
}

/// The default mixer: [`interpolate_attention`] at every layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearMixer;

impl AttentionMixer for LinearMixer {
    fn mix(
        &self,
        _layer: usize,
        c_a: &AttentionOutput,
        c_b: &AttentionOutput,
        lambda: f32,
    ) -> Result<AttentionOutput> {
        interpolate_attention(c_a, c_b, lambda)
    }
}

/// A face-recognition stand-in mapping images to identity embeddings.
pub trait IdentityModel: Sync {
    fn id(&self) -> &str;
    fn input_shape(&self) -> Shape3;
    fn embedding_dim(&self) -> usize;
    fn embed_batch(&self, images: &[&ndarray::Array3<f32>]) -> Result<Vec<IdentityEmbedding>>;
}

pub fn embed_identity(
    image: &ndarray::Array3<f32>,
    embedder: &dyn IdentityModel,
) -> Result<IdentityEmbedding> {
    if Shape3::of(image) != embedder.input_shape() {
        return param_err(format!(
            "image {} does not match embedder input {}",
            Shape3::of(image),
            embedder.input_shape()
        ));
    }
    let mut out = embedder.embed_batch(&[image])?;
    Ok(out.remove(0))
}
