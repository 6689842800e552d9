//! Procedural synthetic identities rendered as small grayscale faces.
//!
//! Every identity is a vector of ten genotype parameters drawn uniformly from
//! `[-1, 1]` plus a binary attribute group (hair style). Images are smooth
//! functions of the genotype, so nearby genotypes render alike; each sample
//! adds seeded pose, expression, lighting and pixel-noise jitter. Pixels lie
//! in `[-1, 1]`.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::tensor::Shape3;

pub const GENOTYPE_DIM: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub label: u32,
    pub id_params: Vec<f32>,
    pub group: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleImage {
    pub label: u32,
    pub sample: u32,
    pub split: Split,
    pub jitter: Jitter,
    pub image: Array3<f32>,
}

impl SampleImage {
    pub fn id(&self) -> String {
        format!("id{:04}_s{:02}", self.label, self.sample)
    }
}

/// Per-image nuisance variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub dx: f32,
    pub dy: f32,
    pub smile: f32,
    pub light_angle: f32,
    pub light_strength: f32,
}

impl Jitter {
    pub const NEUTRAL: Jitter = Jitter {
        dx: 0.0,
        dy: 0.0,
        smile: 0.0,
        light_angle: 0.0,
        light_strength: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    /// Fraction of identities (rounded down, at least one) held out for evaluation.
    pub eval_fraction: f64,
    pub image_size: usize,
    pub pixel_noise: f32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_identities: 300,
            samples_per_identity: 6,
            eval_fraction: 1.0 / 3.0,
            image_size: 32,
            pixel_noise: 0.02,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub config: DatasetConfig,
    pub identities: Vec<SyntheticIdentity>,
    pub images: Vec<SampleImage>,
}

impl ToyDataset {
    pub fn image_shape(&self) -> Shape3 {
        Shape3::new(1, self.config.image_size, self.config.image_size)
    }

    pub fn identity(&self, label: u32) -> Option<&SyntheticIdentity> {
        self.identities.iter().find(|i| i.label == label)
    }

    pub fn split_of(&self, label: u32) -> Split {
        let n_eval = eval_count(&self.config);
        if (label as usize) < self.config.n_identities - n_eval {
            Split::Train
        } else {
            Split::Eval
        }
    }

    pub fn labels(&self, split: Split) -> Vec<u32> {
        self.identities
            .iter()
            .map(|i| i.label)
            .filter(|&l| self.split_of(l) == split)
            .collect()
    }

    pub fn images_in(&self, split: Split) -> impl Iterator<Item = &SampleImage> {
        self.images.iter().filter(move |s| s.split == split)
    }

    pub fn image(&self, label: u32, sample: u32) -> Option<&SampleImage> {
        self.images
            .iter()
            .find(|s| s.label == label && s.sample == sample)
    }
}

fn eval_count(config: &DatasetConfig) -> usize {
    ((config.n_identities as f64 * config.eval_fraction).floor() as usize)
        .clamp(1, config.n_identities - 1)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Renders one face. Coordinates are expressed on a 32-pixel canvas and
/// rescaled for other sizes.
pub fn render(identity: &SyntheticIdentity, jitter: &Jitter, size: usize) -> Array3<f32> {
    let p = &identity.id_params;
    let half_w = 9.0 + 2.0 * p[0];
    let half_h = 11.0 + 2.0 * p[1];
    let eye_sep = 4.5 + 1.2 * p[2];
    let eye_r = 1.6 + 0.5 * p[3];
    let eye_y = -3.0 - 1.0 * p[4];
    let mouth_w = 4.0 + 1.5 * p[5];
    let skin = 0.35 + 0.25 * p[6];
    let nose_len = 2.5 + 1.0 * p[7];
    let hair = -0.6 + 0.3 * p[8];
    let shade_angle = p[9] * std::f32::consts::PI;
    let long_hair = identity.group == 1;
    let mouth_y = 5.5 + 0.2 * p[1];
    let scale = 32.0 / size as f32;

    let mut img = Array3::<f32>::zeros((1, size, size));
    for yi in 0..size {
        for xi in 0..size {
            let x = (xi as f32 + 0.5) * scale - 16.0 - jitter.dx;
            let y = (yi as f32 + 0.5) * scale - 16.0 - jitter.dy;
            let r = ((x / half_w).powi(2) + (y / half_h).powi(2)).sqrt();
            let face = sigmoid((1.0 - r) * 10.0);
            let shade = 0.12 * (x * shade_angle.cos() + y * shade_angle.sin()) / half_w;
            let mut v = -0.8 * (1.0 - face) + (skin + shade) * face;

            // hair cap above the forehead, extended down the sides for group 1
            let r_hair = ((x / (half_w + 1.5)).powi(2) + (y / (half_h + 1.5)).powi(2)).sqrt();
            let crown = sigmoid((-(y + 0.45 * half_h)) * 1.5);
            let sides = if long_hair {
                sigmoid((x.abs() - 0.72 * half_w) * 1.5) * sigmoid((0.6 * half_h - y) * 1.0)
            } else {
                0.0
            };
            let hair_mask = sigmoid((1.0 - r_hair) * 10.0) * crown.max(sides);
            v = v * (1.0 - hair_mask) + hair * hair_mask;

            for sx in [-1.0f32, 1.0] {
                let d2 = (x - sx * eye_sep).powi(2) + (y - eye_y).powi(2);
                v -= 1.1 * (-d2 / (2.0 * eye_r * eye_r)).exp() * face;
            }

            let nose = (-(x * x) / 0.8).exp() * sigmoid((y - eye_y - 1.0) * 2.0)
                * sigmoid((eye_y + 1.0 + nose_len - y) * 2.0);
            v -= 0.25 * nose * face;

            let curve = mouth_y - jitter.smile * 1.5 * (1.0 - (x / mouth_w).powi(2));
            let along = sigmoid((mouth_w - x.abs()) * 2.0);
            v -= 0.8 * (-(y - curve).powi(2) / 0.9).exp() * along * face;

            let light = jitter.light_strength
                * ((xi as f32 * scale - 16.0) * jitter.light_angle.cos()
                    + (yi as f32 * scale - 16.0) * jitter.light_angle.sin())
                / 16.0;
            img[[0, yi, xi]] = v + light;
        }
    }
    img
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<ToyDataset> {
    if config.n_identities < 2 {
        return param_err("need at least two identities");
    }
    if config.samples_per_identity == 0 {
        return param_err("need at least one sample per identity");
    }
    if config.image_size < 8 {
        return param_err("image size must be at least 8");
    }
    if !(0.0..1.0).contains(&config.eval_fraction) {
        return param_err("eval fraction must lie in [0, 1)");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let identities: Vec<SyntheticIdentity> = (0..config.n_identities)
        .map(|label| SyntheticIdentity {
            label: label as u32,
            id_params: (0..GENOTYPE_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            group: rng.random_range(0..2u8),
        })
        .collect();
    let mut dataset = ToyDataset {
        config: *config,
        identities,
        images: Vec::new(),
    };
    let mut images = Vec::with_capacity(config.n_identities * config.samples_per_identity);
    for identity in &dataset.identities {
        let split = dataset.split_of(identity.label);
        for sample in 0..config.samples_per_identity {
            let jitter = Jitter {
                dx: rng.random_range(-1.5..=1.5),
                dy: rng.random_range(-1.5..=1.5),
                smile: if rng.random_bool(0.5) {
                    rng.random_range(0.6..=1.0)
                } else {
                    rng.random_range(0.0..=0.15)
                },
                light_angle: rng.random_range(0.0..std::f32::consts::TAU),
                light_strength: rng.random_range(0.0..=0.12),
            };
            let mut image = render(identity, &jitter, config.image_size);
            for v in image.iter_mut() {
                let n: f32 = rng.sample(StandardNormal);
                *v = (*v + config.pixel_noise * n).clamp(-1.0, 1.0);
            }
            images.push(SampleImage {
                label: identity.label,
                sample: sample as u32,
                split,
                jitter,
                image,
            });
        }
    }
    dataset.images = images;
    Ok(dataset)
}
