//! Image ↔ latent maps. The default toy configuration works directly in
//! pixel space; the patch autoencoder exercises a compressed latent.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::LatentState;
use crate::error::{param_err, Error, Result};
use crate::nn::{silu, silu_backward, Adam, AdamConfig, Linear, ParamStore};
use crate::tensor::Shape3;

pub trait LatentCodec: Sync {
    fn image_shape(&self) -> Shape3;
    fn latent_shape(&self) -> Shape3;
    fn encode(&self, image: &Array3<f32>) -> Result<LatentState>;
    fn decode(&self, latent: &LatentState) -> Result<Array3<f32>>;
}

fn check(shape: Shape3, x: &Array3<f32>, what: &str) -> Result<()> {
    if Shape3::of(x) != shape {
        return param_err(format!("{what}: expected {shape}, got {}", Shape3::of(x)));
    }
    Ok(())
}

/// `E = D = identity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityCodec {
    pub shape: Shape3,
}

impl LatentCodec for IdentityCodec {
    fn image_shape(&self) -> Shape3 {
        self.shape
    }

    fn latent_shape(&self) -> Shape3 {
        self.shape
    }

    fn encode(&self, image: &Array3<f32>) -> Result<LatentState> {
        check(self.shape, image, "encode")?;
        LatentState::clean(image.clone())
    }

    fn decode(&self, latent: &LatentState) -> Result<Array3<f32>> {
        check(self.shape, &latent.values, "decode")?;
        Ok(latent.values.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub patch: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            latent_channels: 8,
            hidden: 64,
            steps: 1500,
            batch_size: 256,
            lr: 3e-3,
            seed: 11,
        }
    }
}

/// Per-patch MLP autoencoder: each `p×p` patch maps to `latent_channels`
/// values, giving a `latent_channels × h/p × w/p` latent.
#[derive(Debug, Clone)]
pub struct PatchAutoencoder {
    pub config: AutoencoderConfig,
    pub image_shape: Shape3,
    pub store: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
}

impl PatchAutoencoder {
    pub fn new(config: AutoencoderConfig, image_shape: Shape3) -> Result<Self> {
        if config.patch == 0
            || image_shape.height % config.patch != 0
            || image_shape.width % config.patch != 0
        {
            return param_err("image size must be divisible by the autoencoder patch");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let pd = image_shape.channels * config.patch * config.patch;
        let enc1 = Linear::new(&mut store, "enc1", pd, config.hidden, 1.0, &mut rng);
        let enc2 = Linear::new(&mut store, "enc2", config.hidden, config.latent_channels, 1.0, &mut rng);
        let dec1 = Linear::new(&mut store, "dec1", config.latent_channels, config.hidden, 1.0, &mut rng);
        let dec2 = Linear::new(&mut store, "dec2", config.hidden, pd, 1.0, &mut rng);
        Ok(Self {
            config,
            image_shape,
            store,
            enc1,
            enc2,
            dec1,
            dec2,
        })
    }

    fn patch_dim(&self) -> usize {
        self.image_shape.channels * self.config.patch * self.config.patch
    }

    fn encode_rows(&self, patches: &Array2<f32>) -> Array2<f32> {
        let h = silu(self.enc1.forward(&self.store, patches.view()).view());
        self.enc2.forward(&self.store, h.view())
    }

    fn decode_rows(&self, codes: &Array2<f32>) -> Array2<f32> {
        let h = silu(self.dec1.forward(&self.store, codes.view()).view());
        self.dec2.forward(&self.store, h.view())
    }

    /// Trains on every patch of `images` and returns the final batch loss.
    pub fn train(&mut self, images: &[&Array3<f32>]) -> Result<f64> {
        if images.is_empty() {
            return param_err("autoencoder needs training images");
        }
        let mut rows = Vec::new();
        for img in images {
            check(self.image_shape, img, "autoencoder training")?;
            let p = patchify(img, self.config.patch);
            rows.extend(p.rows().into_iter().map(|r| r.to_owned()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xae);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut adam = Adam::new(&self.store, AdamConfig::default());
        let pd = self.patch_dim();
        let bs = self.config.batch_size.min(rows.len());
        let mut cursor = rows.len();
        let mut last = f64::NAN;
        for _ in 0..self.config.steps {
            if cursor + bs > rows.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let mut x = Array2::<f32>::zeros((bs, pd));
            for (i, &idx) in order[cursor..cursor + bs].iter().enumerate() {
                x.row_mut(i).assign(&rows[idx]);
            }
            cursor += bs;
            let a1 = self.enc1.forward(&self.store, x.view());
            let h1 = silu(a1.view());
            let z = self.enc2.forward(&self.store, h1.view());
            let a2 = self.dec1.forward(&self.store, z.view());
            let h2 = silu(a2.view());
            let y = self.dec2.forward(&self.store, h2.view());
            let diff = &y - &x;
            let n = diff.len() as f32;
            last = diff.iter().map(|d| (*d as f64).powi(2)).sum::<f64>() / n as f64;
            if !last.is_finite() {
                return Err(Error::Training("autoencoder loss is not finite".into()));
            }
            let dy = diff.mapv(|d| 2.0 * d / n);
            let mut grads = self.store.grads();
            let dh2 = self.dec2.backward(&self.store, &mut grads, h2.view(), dy.view());
            let da2 = silu_backward(a2.view(), dh2.view());
            let dz = self.dec1.backward(&self.store, &mut grads, z.view(), da2.view());
            let dh1 = self.enc2.backward(&self.store, &mut grads, h1.view(), dz.view());
            let da1 = silu_backward(a1.view(), dh1.view());
            self.enc1.backward(&self.store, &mut grads, x.view(), da1.view());
            adam.step(&mut self.store, &mut grads, self.config.lr);
        }
        Ok(last)
    }
}

impl LatentCodec for PatchAutoencoder {
    fn image_shape(&self) -> Shape3 {
        self.image_shape
    }

    fn latent_shape(&self) -> Shape3 {
        Shape3::new(
            self.config.latent_channels,
            self.image_shape.height / self.config.patch,
            self.image_shape.width / self.config.patch,
        )
    }

    fn encode(&self, image: &Array3<f32>) -> Result<LatentState> {
        check(self.image_shape, image, "encode")?;
        let codes = self.encode_rows(&patchify(image, self.config.patch));
        let ls = self.latent_shape();
        let mut z = Array3::<f32>::zeros(ls.dims());
        for (tok, row) in codes.rows().into_iter().enumerate() {
            let (py, px) = (tok / ls.width, tok % ls.width);
            for (c, &v) in row.iter().enumerate() {
                z[[c, py, px]] = v;
            }
        }
        LatentState::clean(z)
    }

    fn decode(&self, latent: &LatentState) -> Result<Array3<f32>> {
        let ls = self.latent_shape();
        check(ls, &latent.values, "decode")?;
        let codes = Array2::from_shape_fn((ls.height * ls.width, ls.channels), |(tok, c)| {
            latent.values[[c, tok / ls.width, tok % ls.width]]
        });
        let patches = self.decode_rows(&codes);
        Ok(unpatchify(&patches, self.image_shape, self.config.patch))
    }
}

/// `(c, h, w)` → `(h/p · w/p) × (c·p·p)`, tokens in row-major patch order.
pub fn patchify(x: &Array3<f32>, p: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let (gh, gw) = (h / p, w / p);
    Array2::from_shape_fn((gh * gw, c * p * p), |(tok, col)| {
        let (py, px) = (tok / gw, tok % gw);
        let (ci, rem) = (col / (p * p), col % (p * p));
        x[[ci, py * p + rem / p, px * p + rem % p]]
    })
}

pub fn unpatchify(rows: &Array2<f32>, shape: Shape3, p: usize) -> Array3<f32> {
    let gw = shape.width / p;
    Array3::from_shape_fn(shape.dims(), |(ci, y, x)| {
        let tok = (y / p) * gw + x / p;
        rows[[tok, ci * p * p + (y % p) * p + x % p]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian;

    #[test]
    fn identity_codec_is_exact() {
        let shape = Shape3::new(1, 8, 8);
        let codec = IdentityCodec { shape };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = gaussian(shape, &mut rng);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape(), codec.latent_shape());
        assert_eq!(codec.decode(&z).unwrap(), x);
        assert!(codec.encode(&Array3::zeros((1, 4, 4))).is_err());
    }

    #[test]
    fn patchify_round_trips() {
        let shape = Shape3::new(2, 8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(shape, &mut rng);
        let rows = patchify(&x, 4);
        assert_eq!(rows.dim(), (6, 32));
        assert_eq!(unpatchify(&rows, shape, 4), x);
    }

    #[test]
    fn autoencoder_shape_contract() {
        let ae = PatchAutoencoder::new(AutoencoderConfig::default(), Shape3::new(1, 32, 32)).unwrap();
        let z = ae.encode(&Array3::zeros((1, 32, 32))).unwrap();
        assert_eq!(z.shape(), Shape3::new(8, 8, 8));
        assert_eq!(ae.decode(&z).unwrap().dim(), (1, 32, 32));
        assert!(PatchAutoencoder::new(AutoencoderConfig::default(), Shape3::new(1, 30, 30)).is_err());
    }
}
