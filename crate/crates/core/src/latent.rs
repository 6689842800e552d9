//! The latent stream: DDIM inversion of both sources and interpolation of
//! the inverted latents and of identity embeddings.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::conditioning::{check_lambda, Conditioning, IdentityEmbedding};
use crate::diffusion::{invert_batch, LatentState, NoisePredictor, VarianceSchedule};
use crate::error::{param_err, Error, Result};
use crate::tensor::{dot, norm};
use crate::toy::LatentCodec;

/// Below this angle slerp degenerates to linear interpolation.
pub const SLERP_LINEAR_THRESHOLD: f64 = 1e-6;
/// Angles this close to π have no unique great circle.
pub const SLERP_ANTIPODAL_MARGIN: f64 = 1e-6;
const COS_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationMode {
    Spherical,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationSpec {
    /// Weight of the first (A) input.
    pub lambda: f32,
    pub mode: InterpolationMode,
}

impl InterpolationSpec {
    pub fn new(lambda: f32, mode: InterpolationMode) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self { lambda, mode })
    }

    pub fn apply(&self, z_a: &LatentState, z_b: &LatentState) -> Result<LatentState> {
        match self.mode {
            InterpolationMode::Spherical => slerp(z_a, z_b, self.lambda),
            InterpolationMode::Linear => lerp_latent(z_a, z_b, self.lambda),
        }
    }
}

impl Default for InterpolationSpec {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            mode: InterpolationMode::Spherical,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedPair {
    pub z_a: LatentState,
    pub z_b: LatentState,
    pub inversion_steps: usize,
    pub source_a: String,
    pub source_b: String,
}

fn check_pair(z_a: &LatentState, z_b: &LatentState) -> Result<()> {
    if z_a.values.dim() != z_b.values.dim() {
        return param_err(format!(
            "latent shapes differ: {} vs {}",
            z_a.shape(),
            z_b.shape()
        ));
    }
    if z_a.timestep != z_b.timestep {
        return param_err("latents sit at different timesteps");
    }
    Ok(())
}

fn combine(z_a: &LatentState, z_b: &LatentState, wa: f64, wb: f64) -> Result<LatentState> {
    let mut out = Array3::<f32>::zeros(z_a.values.raw_dim());
    Zip::from(&mut out)
        .and(&z_a.values)
        .and(&z_b.values)
        .for_each(|o, &a, &b| *o = (wa * a as f64 + wb * b as f64) as f32);
    LatentState::new(z_a.timestep, out)
}

/// `λ·zA + (1−λ)·zB`.
pub fn lerp_latent(z_a: &LatentState, z_b: &LatentState, lambda: f32) -> Result<LatentState> {
    check_lambda(lambda)?;
    check_pair(z_a, z_b)?;
    let l = lambda as f64;
    combine(z_a, z_b, l, 1.0 - l)
}

/// Angle between two flattened latents, with the raw (unclamped) cosine.
pub fn latent_angle(z_a: &LatentState, z_b: &LatentState) -> Result<f64> {
    check_pair(z_a, z_b)?;
    let (na, nb) = (norm(&z_a.values), norm(&z_b.values));
    if na == 0.0 || nb == 0.0 {
        return param_err("slerp is undefined for a zero latent");
    }
    let cos = dot(&z_a.values, &z_b.values) / (na * nb);
    Ok(cos.clamp(-1.0, 1.0).acos())
}

/// Spherical interpolation over the whole flattened latent with λ as the
/// weight of `z_a`: `sin(λθ)/sinθ·zA + sin((1−λ)θ)/sinθ·zB`.
pub fn slerp(z_a: &LatentState, z_b: &LatentState, lambda: f32) -> Result<LatentState> {
    check_lambda(lambda)?;
    let theta = latent_angle(z_a, z_b)?;
    if theta < SLERP_LINEAR_THRESHOLD {
        return lerp_latent(z_a, z_b, lambda);
    }
    if theta > std::f64::consts::PI - SLERP_ANTIPODAL_MARGIN {
        return Err(Error::DegenerateGeometry(format!(
            "latents are antipodal (θ = {theta:.9})"
        )));
    }
    let cos = dot(&z_a.values, &z_b.values) / (norm(&z_a.values) * norm(&z_b.values));
    let theta = cos.clamp(-COS_CLAMP, COS_CLAMP).acos();
    let l = lambda as f64;
    let s = theta.sin();
    combine(z_a, z_b, (l * theta).sin() / s, ((1.0 - l) * theta).sin() / s)
}

/// `λ·cA + (1−λ)·cB`.
pub fn lerp_embedding(
    c_a: &IdentityEmbedding,
    c_b: &IdentityEmbedding,
    lambda: f32,
) -> Result<IdentityEmbedding> {
    check_lambda(lambda)?;
    if c_a.dim() != c_b.dim() {
        return param_err(format!(
            "embedding dimensions differ: {} vs {}",
            c_a.dim(),
            c_b.dim()
        ));
    }
    let mu = 1.0 - lambda;
    let mut values = c_a.values.clone();
    Zip::from(&mut values)
        .and(&c_b.values)
        .for_each(|a, &b| *a = lambda * *a + mu * b);
    IdentityEmbedding::new(values)
}

/// Encodes each image and inverts it to `z_T` under its own identity
/// condition with guidance disabled.
pub fn ddim_invert_batch(
    images: &[&Array3<f32>],
    conds: &[&IdentityEmbedding],
    codec: &dyn LatentCodec,
    model: &dyn NoisePredictor,
    schedule: &VarianceSchedule,
    num_steps: usize,
) -> Result<Vec<LatentState>> {
    if images.len() != conds.len() {
        return param_err("one embedding per image is required");
    }
    let z0 = images
        .iter()
        .map(|x| codec.encode(x))
        .collect::<Result<Vec<_>>>()?;
    let conds: Vec<Conditioning> = conds
        .iter()
        .map(|c| Conditioning::Identity((*c).clone()))
        .collect();
    invert_batch(&z0, model, &conds, schedule, num_steps)
}

pub fn ddim_invert(
    image: &Array3<f32>,
    cond: &IdentityEmbedding,
    codec: &dyn LatentCodec,
    model: &dyn NoisePredictor,
    schedule: &VarianceSchedule,
    num_steps: usize,
) -> Result<LatentState> {
    let mut out = ddim_invert_batch(&[image], &[cond], codec, model, schedule, num_steps)?;
    Ok(out.remove(0))
}

#[allow(clippy::too_many_arguments)]
pub fn invert_pair(
    sources: (&Array3<f32>, &Array3<f32>),
    conds: (&IdentityEmbedding, &IdentityEmbedding),
    ids: (&str, &str),
    codec: &dyn LatentCodec,
    model: &dyn NoisePredictor,
    schedule: &VarianceSchedule,
    num_steps: usize,
) -> Result<InvertedPair> {
    let mut z = ddim_invert_batch(
        &[sources.0, sources.1],
        &[conds.0, conds.1],
        codec,
        model,
        schedule,
        num_steps,
    )?;
    let z_b = z.pop().expect("two latents");
    let z_a = z.pop().expect("two latents");
    Ok(InvertedPair {
        z_a,
        z_b,
        inversion_steps: num_steps,
        source_a: ids.0.to_owned(),
        source_b: ids.1.to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ScheduleConfig, ZeroPredictor};
    use crate::tensor::{gaussian, Shape3};
    use crate::toy::IdentityCodec;
    use ndarray::{arr1, Array1};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(values: Vec<f32>) -> LatentState {
        let n = values.len();
        LatentState::new(1000, Array3::from_shape_vec((1, 1, n), values).unwrap()).unwrap()
    }

    fn flat(z: &LatentState) -> Vec<f32> {
        z.values.iter().copied().collect()
    }

    /// Scalar evaluation of the slerp formula without ndarray.
    fn slerp_oracle(a: &[f32], b: &[f32], lambda: f64) -> Vec<f64> {
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let d: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let theta = (d / (na * nb)).acos();
        let (wa, wb) = ((lambda * theta).sin() / theta.sin(), ((1.0 - lambda) * theta).sin() / theta.sin());
        a.iter().zip(b).map(|(&x, &y)| wa * x as f64 + wb * y as f64).collect()
    }

    #[test]
    fn slerp_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = Shape3::new(1, 4, 4);
        let a = LatentState::new(7, gaussian(shape, &mut rng)).unwrap();
        let b = LatentState::new(7, gaussian(shape, &mut rng)).unwrap();
        let at1 = slerp(&a, &b, 1.0).unwrap();
        let at0 = slerp(&a, &b, 0.0).unwrap();
        assert!(crate::tensor::relative_error(&at1.values, &a.values) < 1e-6);
        assert!(crate::tensor::relative_error(&at0.values, &b.values) < 1e-6);
    }

    #[test]
    fn slerp_orthogonal_midpoint() {
        let out = slerp(&state(vec![1.0, 0.0]), &state(vec![0.0, 1.0]), 0.5).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        for v in flat(&out) {
            assert!((v - h).abs() < 1e-6);
        }
        let theta = latent_angle(&state(vec![1.0, 0.0]), &state(vec![0.0, 1.0])).unwrap();
        assert!((theta - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn slerp_guards() {
        let a = state(vec![1.0, 2.0, 3.0]);
        assert!(matches!(slerp(&a, &state(vec![0.0; 3]), 0.5), Err(Error::Param(_))));
        assert!(matches!(
            slerp(&a, &state(vec![-1.0, -2.0, -3.0]), 0.5),
            Err(Error::DegenerateGeometry(_))
        ));
        assert_eq!(slerp(&a, &a, 0.3).unwrap(), lerp_latent(&a, &a, 0.3).unwrap());
        assert!(slerp(&a, &a, 1.5).is_err());
        let other = LatentState::new(0, Array3::zeros((1, 1, 3))).unwrap();
        assert!(slerp(&a, &other, 0.5).is_err());
    }

    #[test]
    fn slerp_matches_scalar_oracle_at_equal_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape3::new(1, 8, 8);
        for _ in 0..20 {
            let a = gaussian(shape, &mut rng);
            let mut b = gaussian(shape, &mut rng);
            b *= (norm(&a) / norm(&b)) as f32;
            let (za, zb) = (LatentState::clean(a).unwrap(), LatentState::clean(b).unwrap());
            let out = slerp(&za, &zb, 0.3).unwrap();
            assert!((norm(&out.values) - norm(&za.values)).abs() / norm(&za.values) < 1e-5);
            let oracle = slerp_oracle(&flat(&za), &flat(&zb), 0.3);
            for (o, r) in flat(&out).iter().zip(&oracle) {
                assert!((*o as f64 - r).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn lerp_embedding_cases() {
        let a = IdentityEmbedding::new(arr1(&[1.0, 2.0])).unwrap();
        let b = IdentityEmbedding::new(arr1(&[-3.0, 0.5])).unwrap();
        assert_eq!(lerp_embedding(&a, &b, 1.0).unwrap().values, a.values);
        assert_eq!(lerp_embedding(&a, &b, 0.0).unwrap().values, b.values);
        let neg = IdentityEmbedding::new(-&a.values).unwrap();
        assert_eq!(lerp_embedding(&a, &neg, 0.5).unwrap().values, Array1::<f32>::zeros(2));
        let c = IdentityEmbedding::new(arr1(&[1.0, 2.0, 3.0])).unwrap();
        assert!(lerp_embedding(&a, &c, 0.5).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let u = IdentityEmbedding::new(gaussian(Shape3::new(1, 1, 16), &mut rng).into_shape_with_order(16).unwrap())
                .unwrap()
                .normalized();
            let v = IdentityEmbedding::new(gaussian(Shape3::new(1, 1, 16), &mut rng).into_shape_with_order(16).unwrap())
                .unwrap()
                .normalized();
            let m = lerp_embedding(&u, &v, 0.5).unwrap();
            assert!((m.cosine(&u) - m.cosine(&v)).abs() < 1e-6);
        }
    }

    #[test]
    fn inversion_under_zero_predictor_is_scaled_source() {
        let schedule = ScheduleConfig::default().build().unwrap();
        let shape = Shape3::new(1, 4, 4);
        let codec = IdentityCodec { shape };
        let model = ZeroPredictor { shape };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(shape, &mut rng);
        let c = IdentityEmbedding::new(arr1(&[1.0, 0.0])).unwrap();
        let z = ddim_invert(&x, &c, &codec, &model, &schedule, 50).unwrap();
        assert_eq!(z.timestep, 1000);
        let expected = x.mapv(|v| (v as f64 * schedule.alpha_bar(1000).unwrap().sqrt()) as f32);
        assert!(crate::tensor::relative_error(&z.values, &expected) < 1e-6);
        let again = ddim_invert(&x, &c, &codec, &model, &schedule, 50).unwrap();
        assert_eq!(z, again);
    }

    #[test]
    fn invert_pair_symmetries() {
        let schedule = ScheduleConfig::default().build().unwrap();
        let shape = Shape3::new(1, 4, 4);
        let codec = IdentityCodec { shape };
        let model = ZeroPredictor { shape };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y) = (gaussian(shape, &mut rng), gaussian(shape, &mut rng));
        let c = IdentityEmbedding::new(arr1(&[1.0, 0.0])).unwrap();
        let d = IdentityEmbedding::new(arr1(&[0.0, 1.0])).unwrap();
        let same = invert_pair((&x, &x), (&c, &c), ("a", "a"), &codec, &model, &schedule, 10).unwrap();
        assert_eq!(same.z_a, same.z_b);
        let ab = invert_pair((&x, &y), (&c, &d), ("a", "b"), &codec, &model, &schedule, 10).unwrap();
        let ba = invert_pair((&y, &x), (&d, &c), ("b", "a"), &codec, &model, &schedule, 10).unwrap();
        assert_eq!(ab.z_a, ba.z_b);
        assert_eq!(ab.z_b, ba.z_a);
        assert!(crate::tensor::cosine(&ab.z_a.values, &ab.z_b.values) < 1.0);
    }

    #[test]
    fn slerp_norm_can_escape_for_obtuse_unequal_inputs() {
        let theta = 0.9 * std::f64::consts::PI;
        let a = state(vec![1.0, 0.0]);
        let b = state(vec![(10.0 * theta.cos()) as f32, (10.0 * theta.sin()) as f32]);
        let r = norm(&slerp(&a, &b, 0.5).unwrap().values);
        assert!(r > 10.0, "{r}");
    }

    fn latent_pair(dim: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        (
            prop::collection::vec(-3.0f32..3.0, dim),
            prop::collection::vec(-3.0f32..3.0, dim),
        )
            .prop_filter("non-degenerate", |(a, b)| {
                let za = state(a.clone());
                let zb = state(b.clone());
                match latent_angle(&za, &zb) {
                    Ok(t) => t > 1e-3 && t < std::f64::consts::PI - 1e-3,
                    Err(_) => false,
                }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        // Between the input norms only holds for θ ≤ π/2 unless the norms agree;
        // see `slerp_norm_can_escape_for_obtuse_unequal_inputs`.
        #[test]
        fn slerp_norm_lies_between_input_norms((a, b) in latent_pair(12), lambda in 0.0f32..=1.0) {
            // Reflect b into the closed half-space around a.
            let d: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let b = if d < 0.0 { b.into_iter().map(|x| -x).collect() } else { b };
            let (za, zb) = (state(a), state(b));
            let out = slerp(&za, &zb, lambda).unwrap();
            let (ra, rb) = (norm(&za.values), norm(&zb.values));
            let r = norm(&out.values);
            prop_assert!(r >= ra.min(rb) * (1.0 - 1e-5) && r <= ra.max(rb) * (1.0 + 1e-5));
        }

        #[test]
        fn slerp_preserves_common_norm((a, b) in latent_pair(12), lambda in 0.0f32..=1.0) {
            let ra = a.iter().map(|x| x * x).sum::<f32>().sqrt();
            let rb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
            let (za, zb) = (state(a), state(b.into_iter().map(|x| x * ra / rb).collect()));
            let out = slerp(&za, &zb, lambda).unwrap();
            prop_assert!((norm(&out.values) - norm(&za.values)).abs() <= 1e-5 * norm(&za.values));
        }

        #[test]
        fn slerp_stays_on_the_great_circle((a, b) in latent_pair(12), lambda in 0.0f32..=1.0) {
            let unit = |v: Vec<f32>| {
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                state(v.into_iter().map(|x| x / n).collect())
            };
            let (za, zb) = (unit(a), unit(b));
            let out = slerp(&za, &zb, lambda).unwrap();
            let theta = latent_angle(&za, &zb).unwrap();
            let sum = latent_angle(&out, &za).unwrap() + latent_angle(&out, &zb).unwrap();
            prop_assert!((sum - theta).abs() < 1e-4, "{sum} vs {theta}");
        }

        #[test]
        fn slerp_endpoints_select_inputs((a, b) in latent_pair(12)) {
            let (za, zb) = (state(a), state(b));
            prop_assert!(crate::tensor::relative_error(&slerp(&za, &zb, 1.0).unwrap().values, &za.values) < 1e-6);
            prop_assert!(crate::tensor::relative_error(&slerp(&za, &zb, 0.0).unwrap().values, &zb.values) < 1e-6);
        }

        #[test]
        fn slerp_is_swap_symmetric((a, b) in latent_pair(12)) {
            let (za, zb) = (state(a), state(b));
            prop_assert_eq!(slerp(&za, &zb, 0.5).unwrap(), slerp(&zb, &za, 0.5).unwrap());
        }
    }
}
