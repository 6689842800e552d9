//! Stand-in morphing-attack detector: the conv trunk with a single logit,
//! trained with binary cross-entropy. Scores are attack probabilities.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::Shape3;
use crate::toy::embedder::ConvTrunk;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadConfig {
    pub id: String,
    pub channels: [usize; 3],
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for MadConfig {
    fn default() -> Self {
        Self {
            id: "mad-a".into(),
            channels: [8, 16, 16],
            steps: 600,
            batch_size: 32,
            lr: 2e-3,
            seed: 31,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MadDetector {
    pub config: MadConfig,
    pub image_shape: Shape3,
    pub store: ParamStore,
    trunk: ConvTrunk,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl MadDetector {
    pub fn new(config: MadConfig, image_shape: Shape3) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let trunk = ConvTrunk::new(&mut store, image_shape, config.channels, 1, &mut rng)?;
        Ok(Self {
            config,
            image_shape,
            store,
            trunk,
        })
    }

    /// Attack scores in `[0, 1]`; higher is more attack-like.
    pub fn score(&self, images: &[&Array3<f32>]) -> Result<Vec<f64>> {
        if let Some(bad) = images.iter().find(|x| Shape3::of(x) != self.image_shape) {
            return param_err(format!("image {} does not match detector input", Shape3::of(bad)));
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let (logits, _) = self.trunk.forward(&self.store, chunk);
            out.extend(logits.column(0).iter().map(|&l| sigmoid(l) as f64));
        }
        Ok(out)
    }

    /// Balanced mini-batches of bona fide (label 0) and attack (label 1) images.
    pub fn fit(&mut self, bona: &[&Array3<f32>], attacks: &[&Array3<f32>]) -> Result<f64> {
        if bona.is_empty() || attacks.is_empty() {
            return param_err("detector training needs both bona fide and attack images");
        }
        let c = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x3ad);
        let mut adam = Adam::new(&self.store, AdamConfig::default());
        let mut grads = self.store.grads();
        let mut last = f64::NAN;
        for step in 0..c.steps {
            let half = (c.batch_size / 2).max(1);
            let mut images = Vec::with_capacity(2 * half);
            let mut labels = Vec::with_capacity(2 * half);
            for _ in 0..half {
                images.push(bona[rng.random_range(0..bona.len())]);
                labels.push(0.0f32);
                images.push(attacks[rng.random_range(0..attacks.len())]);
                labels.push(1.0f32);
            }
            let (logits, cache) = self.trunk.forward(&self.store, &images);
            let n = images.len() as f32;
            let mut d = Array2::<f32>::zeros(logits.raw_dim());
            let mut loss = 0.0f64;
            for (i, &y) in labels.iter().enumerate() {
                let l = logits[[i, 0]];
                // log(1 + e^{-|l|}) + max(l, 0) − y·l
                loss += ((1.0 + (-l.abs()).exp()).ln() + l.max(0.0) - y * l) as f64;
                d[[i, 0]] = (sigmoid(l) - y) / n;
            }
            loss /= n as f64;
            if !loss.is_finite() {
                return Err(Error::Training(format!("detector loss non-finite at step {step}")));
            }
            last = loss;
            grads.zero();
            self.trunk.backward(&self.store, &mut grads, &cache, d.view());
            adam.step(&mut self.store, &mut grads, crate::toy::denoiser::lr_at(step, c.steps, 30, c.lr));
        }
        Ok(last)
    }
}

pub fn train_mad_detector(
    bona: &[&Array3<f32>],
    attacks: &[&Array3<f32>],
    config: &MadConfig,
) -> Result<(MadDetector, f64)> {
    let shape = bona
        .first()
        .map(|x| Shape3::of(x))
        .ok_or_else(|| Error::Param("no bona fide images".into()))?;
    let mut det = MadDetector::new(config.clone(), shape)?;
    let loss = det.fit(bona, attacks)?;
    Ok((det, loss))
}
