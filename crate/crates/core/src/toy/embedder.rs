//! Toy face-recognition embedders.
//!
//! [`ConvEmbedder`] is a three-stage convolutional network trained as a
//! cosine-margin classifier over identity labels; its penultimate layer,
//! L2-normalized, is the embedding. [`OracleEmbedder`] returns the generator's
//! own genotype and serves as ground truth.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{IdentityEmbedding, IdentityModel};
use crate::error::{param_err, Error, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, relu, relu_backward, Adam, AdamConfig, Conv3x3, Grads, Linear,
    ParamStore, SpatialDims,
};
use crate::tensor::Shape3;
use crate::toy::dataset::{Split, SyntheticIdentity, ToyDataset};

/// conv → relu → pool, three times, then a linear layer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvTrunk {
    convs: [Conv3x3; 3],
    fc: Linear,
    size: usize,
}

pub(crate) struct TrunkCache {
    dims: [SpatialDims; 3],
    cols: Vec<Array2<f32>>,
    pre: Vec<Array2<f32>>,
    flat: Array2<f32>,
}

impl ConvTrunk {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        image: Shape3,
        channels: [usize; 3],
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if image.height != image.width || image.height % 8 != 0 {
            return param_err("conv trunk needs square images with side divisible by 8");
        }
        let convs = [
            Conv3x3::new(store, "conv1", image.channels, channels[0], rng),
            Conv3x3::new(store, "conv2", channels[0], channels[1], rng),
            Conv3x3::new(store, "conv3", channels[1], channels[2], rng),
        ];
        let side = image.height / 8;
        let fc = Linear::new(store, "fc", side * side * channels[2], out_dim, 1.0, rng);
        Ok(Self {
            convs,
            fc,
            size: image.height,
        })
    }

    fn to_rows(images: &[&Array3<f32>]) -> Array2<f32> {
        let (c, h, w) = images[0].dim();
        let mut rows = Array2::<f32>::zeros((images.len() * h * w, c));
        for (b, img) in images.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        rows[[(b * h + y) * w + x, ci]] = img[[ci, y, x]];
                    }
                }
            }
        }
        rows
    }

    pub(crate) fn forward(
        &self,
        store: &ParamStore,
        images: &[&Array3<f32>],
    ) -> (Array2<f32>, TrunkCache) {
        let mut dims = SpatialDims {
            batch: images.len(),
            height: self.size,
            width: self.size,
        };
        let mut x = Self::to_rows(images);
        let mut all_dims = [dims; 3];
        let mut cols = Vec::with_capacity(3);
        let mut pre = Vec::with_capacity(3);
        for (i, conv) in self.convs.iter().enumerate() {
            all_dims[i] = dims;
            let (y, c) = conv.forward(store, x.view(), dims);
            x = avg_pool2(relu(y.view()).view(), dims);
            cols.push(c);
            pre.push(y);
            dims = dims.halved();
        }
        let per_sample = x.len() / images.len();
        let flat = x
            .into_shape_with_order((images.len(), per_sample))
            .expect("contiguous trunk activations");
        let out = self.fc.forward(store, flat.view());
        (
            out,
            TrunkCache {
                dims: all_dims,
                cols,
                pre,
                flat,
            },
        )
    }

    pub(crate) fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &TrunkCache,
        d_out: ArrayView2<f32>,
    ) {
        let d_flat = self.fc.backward(store, grads, cache.flat.view(), d_out);
        let last = cache.dims[2].halved();
        let mut dx = d_flat
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((last.rows(), self.convs[2].out_ch))
            .expect("contiguous gradient");
        for i in (0..3).rev() {
            let dims = cache.dims[i];
            let d_relu = avg_pool2_backward(dx.view(), dims);
            let d_pre = relu_backward(cache.pre[i].view(), d_relu.view());
            dx = self.convs[i].backward(store, grads, &cache.cols[i], d_pre.view(), dims);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub id: String,
    pub channels: [usize; 3],
    pub embed_dim: usize,
    /// Cosine-logit scale.
    pub scale: f32,
    /// Additive cosine margin on the target class.
    pub margin: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            id: "fr-a".into(),
            channels: [16, 32, 32],
            embed_dim: 64,
            scale: 16.0,
            margin: 0.2,
            steps: 1500,
            batch_size: 64,
            lr: 2e-3,
            seed: 21,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvEmbedder {
    pub config: EmbedderConfig,
    pub image_shape: Shape3,
    pub n_classes: usize,
    pub store: ParamStore,
    trunk: ConvTrunk,
    class_w: crate::nn::ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedderTrainReport {
    pub final_loss: f64,
    /// Top-1 accuracy on the held-out samples of the training identities.
    pub held_out_accuracy: f64,
    pub n_classes: usize,
}

fn l2_normalize_rows(x: &Array2<f32>) -> (Array2<f32>, Vec<f32>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (out, norms)
}

fn l2_normalize_rows_backward(normed: &Array2<f32>, norms: &[f32], d: &Array2<f32>) -> Array2<f32> {
    let mut out = d.clone();
    for ((mut row, nrow), &n) in out.rows_mut().into_iter().zip(normed.rows()).zip(norms) {
        let inner: f32 = row.iter().zip(nrow.iter()).map(|(a, b)| a * b).sum();
        for (g, &v) in row.iter_mut().zip(nrow.iter()) {
            *g = (*g - v * inner) / n;
        }
    }
    out
}

impl ConvEmbedder {
    pub fn new(config: EmbedderConfig, image_shape: Shape3, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return param_err("embedder needs at least two classes");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let trunk = ConvTrunk::new(&mut store, image_shape, config.channels, config.embed_dim, &mut rng)?;
        let class_w = store.normal("classes", config.embed_dim, n_classes, 1, 1.0, &mut rng);
        Ok(Self {
            config,
            image_shape,
            n_classes,
            store,
            trunk,
            class_w,
        })
    }

    fn raw_embeddings(&self, images: &[&Array3<f32>]) -> Array2<f32> {
        self.trunk.forward(&self.store, images).0
    }

    /// Cosine logits against every class centre.
    fn class_cosines(&self, images: &[&Array3<f32>]) -> Array2<f32> {
        let (e, _) = l2_normalize_rows(&self.raw_embeddings(images));
        let (w, _) = l2_normalize_rows(&self.store.get(self.class_w).t().to_owned());
        e.dot(&w.t())
    }

    pub fn classify(&self, images: &[&Array3<f32>]) -> Vec<usize> {
        self.class_cosines(images)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }

    /// Trains on `(image, class)` pairs; returns the last batch loss.
    pub fn fit(&mut self, examples: &[(&Array3<f32>, usize)]) -> Result<f64> {
        if examples.is_empty() {
            return param_err("embedder training needs examples");
        }
        let c = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0xe3b);
        let mut adam = Adam::new(&self.store, AdamConfig::default());
        let mut grads = self.store.grads();
        let mut last = f64::NAN;
        for step in 0..c.steps {
            let batch: Vec<(&Array3<f32>, usize)> = (0..c.batch_size)
                .map(|_| examples[rng.random_range(0..examples.len())])
                .collect();
            let images: Vec<&Array3<f32>> = batch.iter().map(|(x, _)| *x).collect();
            let (raw, cache) = self.trunk.forward(&self.store, &images);
            let (e, e_norms) = l2_normalize_rows(&raw);
            let w_t = self.store.get(self.class_w).t().to_owned();
            let (w, w_norms) = l2_normalize_rows(&w_t);
            let cos = e.dot(&w.t());
            let bsz = batch.len() as f32;
            let mut d_logits = Array2::<f32>::zeros(cos.raw_dim());
            let mut loss = 0.0f64;
            for (i, (_, label)) in batch.iter().enumerate() {
                let logits: Vec<f32> = cos
                    .row(i)
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| c.scale * (v - if k == *label { c.margin } else { 0.0 }))
                    .collect();
                let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = logits.iter().map(|l| (l - max).exp()).collect();
                let sum: f32 = exps.iter().sum();
                loss += -(((exps[*label] / sum) as f64).ln());
                for (k, ex) in exps.iter().enumerate() {
                    let target = if k == *label { 1.0 } else { 0.0 };
                    d_logits[[i, k]] = (ex / sum - target) / bsz;
                }
            }
            loss /= bsz as f64;
            if !loss.is_finite() {
                return Err(Error::Training(format!("embedder loss non-finite at step {step}")));
            }
            last = loss;
            let d_cos = d_logits.mapv(|v| v * c.scale);
            let d_e = d_cos.dot(&w);
            let d_w = d_cos.t().dot(&e);
            grads.zero();
            let d_raw = l2_normalize_rows_backward(&e, &e_norms, &d_e);
            let d_wt = l2_normalize_rows_backward(&w, &w_norms, &d_w);
            *grads.get_mut(self.class_w) += &d_wt.t();
            self.trunk.backward(&self.store, &mut grads, &cache, d_raw.view());
            adam.step(&mut self.store, &mut grads, crate::toy::denoiser::lr_at(step, c.steps, 50, c.lr));
        }
        if !self.store.all_finite() {
            return Err(Error::Training("embedder weights became non-finite".into()));
        }
        Ok(last)
    }
}

impl IdentityModel for ConvEmbedder {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn input_shape(&self) -> Shape3 {
        self.image_shape
    }

    fn embedding_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed_batch(&self, images: &[&Array3<f32>]) -> Result<Vec<IdentityEmbedding>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(bad) = images.iter().find(|x| Shape3::of(x) != self.image_shape) {
            return param_err(format!(
                "image {} does not match embedder input {}",
                Shape3::of(bad),
                self.image_shape
            ));
        }
        let (e, _) = l2_normalize_rows(&self.raw_embeddings(images));
        e.axis_iter(Axis(0))
            .map(|row| IdentityEmbedding::new(row.to_owned()))
            .collect()
    }
}

/// Trains a conv embedder on the training identities. The last sample of
/// every training identity is held out to measure classification accuracy.
pub fn train_embedder(dataset: &ToyDataset, config: &EmbedderConfig) -> Result<(ConvEmbedder, EmbedderTrainReport)> {
    let labels = dataset.labels(Split::Train);
    if labels.len() < 2 {
        return param_err("embedder training needs at least two training identities");
    }
    let class_of = |label: u32| labels.iter().position(|&l| l == label);
    let held_out_sample = dataset.config.samples_per_identity as u32 - 1;
    let mut fit = Vec::new();
    let mut held = Vec::new();
    for img in dataset.images_in(Split::Train) {
        let class = class_of(img.label).expect("train label");
        if img.sample == held_out_sample && dataset.config.samples_per_identity > 1 {
            held.push((&img.image, class));
        } else {
            fit.push((&img.image, class));
        }
    }
    let mut model = ConvEmbedder::new(config.clone(), dataset.image_shape(), labels.len())?;
    let final_loss = model.fit(&fit)?;
    let held_out_accuracy = if held.is_empty() {
        f64::NAN
    } else {
        let images: Vec<&Array3<f32>> = held.iter().map(|(x, _)| *x).collect();
        let predicted = model.classify(&images);
        predicted
            .iter()
            .zip(&held)
            .filter(|(p, (_, c))| *p == c)
            .count() as f64
            / held.len() as f64
    };
    Ok((
        model,
        EmbedderTrainReport {
            final_loss,
            held_out_accuracy,
            n_classes: labels.len(),
        },
    ))
}

/// Ground-truth identity features straight from the generator.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleEmbedder;

impl OracleEmbedder {
    pub fn embed(&self, identity: &SyntheticIdentity) -> IdentityEmbedding {
        let mut values: Vec<f32> = identity.id_params.clone();
        values.push(if identity.group == 1 { 1.0 } else { -1.0 });
        IdentityEmbedding {
            values: values.into(),
            source_id: Some(format!("id{:04}", identity.label)),
        }
    }
}
