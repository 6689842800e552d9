//! The four morph variants and the ablation driver.
//!
//! Every variant is a combination of two independent streams. The latent
//! stream decides where sampling starts: seeded Gaussian noise, or the slerp
//! of both DDIM-inverted sources. The conditioning stream decides how the
//! identities enter: one interpolated embedding, or decoupled cross-attention
//! whose outputs are interpolated at every layer.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{check_lambda, Conditioning, IdentityEmbedding, IdentityModel};
use crate::diffusion::{sample, GuidanceConfig, LatentState, NoisePredictor, VarianceSchedule};
use crate::error::{param_err, Error, Result};
use crate::eval::{build_vulnerability_report, EmbedderScores, FmrTargets, MorphProbe, VulnerabilityReport};
use crate::latent::{ddim_invert_batch, lerp_embedding, slerp, InvertedPair};
use crate::tensor::{digest, gaussian};
use crate::toy::LatentCodec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphVariant {
    EmbeddingInterp,
    CrossAttentionInterp,
    EmbeddingPlusDdim,
    Dcmorph,
}

impl MorphVariant {
    pub const ALL: [MorphVariant; 4] = [
        MorphVariant::EmbeddingInterp,
        MorphVariant::CrossAttentionInterp,
        MorphVariant::EmbeddingPlusDdim,
        MorphVariant::Dcmorph,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MorphVariant::EmbeddingInterp => "embedding_interp",
            MorphVariant::CrossAttentionInterp => "cross_attention_interp",
            MorphVariant::EmbeddingPlusDdim => "embedding_plus_ddim",
            MorphVariant::Dcmorph => "dcmorph",
        }
    }

    pub fn streams(self) -> (LatentStream, ConditioningStream) {
        match self {
            MorphVariant::EmbeddingInterp => (LatentStream::SeededNoise, ConditioningStream::EmbeddingLerp),
            MorphVariant::CrossAttentionInterp => (LatentStream::SeededNoise, ConditioningStream::AttentionMix),
            MorphVariant::EmbeddingPlusDdim => (LatentStream::InvertedSlerp, ConditioningStream::EmbeddingLerp),
            MorphVariant::Dcmorph => (LatentStream::InvertedSlerp, ConditioningStream::AttentionMix),
        }
    }
}

impl fmt::Display for MorphVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MorphVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MorphVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown morph variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentStream {
    SeededNoise,
    InvertedSlerp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningStream {
    EmbeddingLerp,
    AttentionMix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorphConfig {
    /// Weight of source A in both streams.
    pub lambda: f32,
    pub omega: f32,
    /// Used for both sampling and inversion.
    pub num_inference_steps: usize,
    pub variant: MorphVariant,
    pub seed: u64,
}

impl Default for MorphConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            omega: 1.0,
            num_inference_steps: 50,
            variant: MorphVariant::Dcmorph,
            seed: 0,
        }
    }
}

impl MorphConfig {
    pub fn validate(&self, schedule: &VarianceSchedule) -> Result<()> {
        check_lambda(self.lambda)?;
        GuidanceConfig::new(self.omega)?;
        if self.num_inference_steps == 0 || self.num_inference_steps > schedule.num_steps() {
            return param_err(format!(
                "inference steps must lie in 1..={}, got {}",
                schedule.num_steps(),
                self.num_inference_steps
            ));
        }
        Ok(())
    }

    pub fn guidance(&self) -> Result<GuidanceConfig> {
        if self.omega == 0.0 {
            Ok(GuidanceConfig::disabled())
        } else {
            GuidanceConfig::new(self.omega)
        }
    }

    pub fn with_variant(mut self, variant: MorphVariant) -> Self {
        self.variant = variant;
        self
    }
}

/// A source face: its image and its conditioning embedding `c = f(x)`.
#[derive(Debug, Clone, Copy)]
pub struct MorphSource<'a> {
    pub id: &'a str,
    pub image: &'a Array3<f32>,
    pub embedding: &'a IdentityEmbedding,
    /// Precomputed `z_T` of this source, if available.
    pub inverted: Option<&'a LatentState>,
}

impl<'a> MorphSource<'a> {
    pub fn new(id: &'a str, image: &'a Array3<f32>, embedding: &'a IdentityEmbedding) -> Self {
        Self {
            id,
            image,
            embedding,
            inverted: None,
        }
    }
}

/// Image alignment hook; a no-op for the synthetic faces.
pub type Preprocess = fn(&Array3<f32>) -> Array3<f32>;

/// Read-only handles shared by every morph generation.
#[derive(Clone, Copy)]
pub struct MorphEngine<'a> {
    pub model: &'a dyn NoisePredictor,
    pub codec: &'a dyn LatentCodec,
    pub schedule: &'a VarianceSchedule,
    pub preprocess: Option<Preprocess>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub initial_latent_sha256: String,
    pub inverted_a_sha256: Option<String>,
    pub inverted_b_sha256: Option<String>,
    pub output_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphResult {
    pub morph_id: String,
    pub image: Array3<f32>,
    pub config: MorphConfig,
    pub source_a: String,
    pub source_b: String,
    pub provenance: Provenance,
}

pub fn morph_id(variant: MorphVariant, id_a: &str, id_b: &str, seed: u64) -> String {
    format!("{variant}__{id_a}__{id_b}__s{seed}")
}

/// Seed derived from the unordered pair and the run seed, so swapping the
/// sources reuses the same noise.
pub fn pair_seed(id_a: &str, id_b: &str, run_seed: u64) -> u64 {
    let (lo, hi) = if id_a <= id_b { (id_a, id_b) } else { (id_b, id_a) };
    let mut h = Sha256::new();
    h.update(lo.as_bytes());
    h.update([0u8]);
    h.update(hi.as_bytes());
    h.update([0u8]);
    h.update(run_seed.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn seeded_noise(engine: &MorphEngine<'_>, id_a: &str, id_b: &str, run_seed: u64) -> Result<LatentState> {
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(id_a, id_b, run_seed));
    LatentState::new(
        engine.schedule.num_steps(),
        gaussian(engine.model.latent_shape(), &mut rng),
    )
}

impl MorphEngine<'_> {
    fn prepared<'x>(&self, x: &'x Array3<f32>) -> std::borrow::Cow<'x, Array3<f32>> {
        match self.preprocess {
            Some(f) => std::borrow::Cow::Owned(f(x)),
            None => std::borrow::Cow::Borrowed(x),
        }
    }

    /// `z_T` of every source, inverted under its own embedding.
    pub fn invert_sources(&self, sources: &[MorphSource<'_>], num_steps: usize) -> Result<Vec<LatentState>> {
        let images: Vec<_> = sources.iter().map(|s| self.prepared(s.image)).collect();
        let refs: Vec<&Array3<f32>> = images.iter().map(|x| x.as_ref()).collect();
        let conds: Vec<&IdentityEmbedding> = sources.iter().map(|s| s.embedding).collect();
        ddim_invert_batch(&refs, &conds, self.codec, self.model, self.schedule, num_steps)
    }

    pub fn invert_pair(&self, a: &MorphSource<'_>, b: &MorphSource<'_>, num_steps: usize) -> Result<InvertedPair> {
        let get = |s: &MorphSource<'_>| -> Result<LatentState> {
            match s.inverted {
                Some(z) if z.timestep == self.schedule.num_steps() => Ok(z.clone()),
                Some(_) => param_err(format!("precomputed latent of {} is not at T", s.id)),
                None => Ok(self.invert_sources(std::slice::from_ref(s), num_steps)?.remove(0)),
            }
        };
        Ok(InvertedPair {
            z_a: get(a)?,
            z_b: get(b)?,
            inversion_steps: num_steps,
            source_a: a.id.to_owned(),
            source_b: b.id.to_owned(),
        })
    }

    fn decode(&self, z0: &LatentState) -> Result<Array3<f32>> {
        self.codec.decode(z0)
    }

    /// Generates one morph from an explicit combination of streams.
    pub fn generate_streams(
        &self,
        a: &MorphSource<'_>,
        b: &MorphSource<'_>,
        latent: LatentStream,
        conditioning: ConditioningStream,
        config: &MorphConfig,
    ) -> Result<MorphResult> {
        config.validate(self.schedule)?;
        let (z_t, inv) = match latent {
            LatentStream::SeededNoise => (seeded_noise(self, a.id, b.id, config.seed)?, None),
            LatentStream::InvertedSlerp => {
                let pair = self.invert_pair(a, b, config.num_inference_steps)?;
                let z = slerp(&pair.z_a, &pair.z_b, config.lambda)?;
                (z, Some((digest(&pair.z_a.values), digest(&pair.z_b.values))))
            }
        };
        let cond = match conditioning {
            ConditioningStream::EmbeddingLerp => {
                Conditioning::Identity(lerp_embedding(a.embedding, b.embedding, config.lambda)?)
            }
            ConditioningStream::AttentionMix => Conditioning::Dual {
                a: a.embedding.clone(),
                b: b.embedding.clone(),
                lambda: config.lambda,
            },
        };
        self.finish(a.id, b.id, z_t, inv, &cond, config)
    }

    fn finish(
        &self,
        id_a: &str,
        id_b: &str,
        z_t: LatentState,
        inv: Option<(String, String)>,
        cond: &Conditioning,
        config: &MorphConfig,
    ) -> Result<MorphResult> {
        let z0 = sample(
            &z_t,
            self.model,
            cond,
            config.guidance()?,
            self.schedule,
            config.num_inference_steps,
        )?;
        let image = self.decode(&z0)?;
        let (inverted_a_sha256, inverted_b_sha256) = match inv {
            Some((x, y)) => (Some(x), Some(y)),
            None => (None, None),
        };
        Ok(MorphResult {
            morph_id: morph_id(config.variant, id_a, id_b, config.seed),
            provenance: Provenance {
                initial_latent_sha256: digest(&z_t.values),
                inverted_a_sha256,
                inverted_b_sha256,
                output_sha256: digest(&image),
            },
            image,
            config: *config,
            source_a: id_a.to_owned(),
            source_b: id_b.to_owned(),
        })
    }

    pub fn morph(&self, a: &MorphSource<'_>, b: &MorphSource<'_>, config: &MorphConfig) -> Result<MorphResult> {
        let (latent, conditioning) = config.variant.streams();
        self.generate_streams(a, b, latent, conditioning, config)
    }

    /// Single-identity generation from an explicit starting latent.
    pub fn generate_single(
        &self,
        z_t: &LatentState,
        embedding: &IdentityEmbedding,
        config: &MorphConfig,
    ) -> Result<Array3<f32>> {
        config.validate(self.schedule)?;
        let z0 = sample(
            z_t,
            self.model,
            &Conditioning::Identity(embedding.clone()),
            config.guidance()?,
            self.schedule,
            config.num_inference_steps,
        )?;
        self.decode(&z0)
    }

    /// Inversion followed by sampling under the source's own embedding.
    pub fn reconstruct(&self, source: &MorphSource<'_>, config: &MorphConfig) -> Result<Array3<f32>> {
        config.validate(self.schedule)?;
        let z_t = match source.inverted {
            Some(z) => z.clone(),
            None => self.invert_sources(std::slice::from_ref(source), config.num_inference_steps)?.remove(0),
        };
        self.generate_single(&z_t, source.embedding, config)
    }
}

fn expect_variant(config: &MorphConfig, variant: MorphVariant) -> Result<()> {
    if config.variant != variant {
        return param_err(format!("config selects {}, not {variant}", config.variant));
    }
    Ok(())
}

pub fn morph_embedding_interp(
    a: &MorphSource<'_>,
    b: &MorphSource<'_>,
    engine: &MorphEngine<'_>,
    config: &MorphConfig,
) -> Result<MorphResult> {
    expect_variant(config, MorphVariant::EmbeddingInterp)?;
    engine.morph(a, b, config)
}

pub fn morph_cross_attention(
    a: &MorphSource<'_>,
    b: &MorphSource<'_>,
    engine: &MorphEngine<'_>,
    config: &MorphConfig,
) -> Result<MorphResult> {
    expect_variant(config, MorphVariant::CrossAttentionInterp)?;
    engine.morph(a, b, config)
}

pub fn morph_embedding_ddim(
    a: &MorphSource<'_>,
    b: &MorphSource<'_>,
    engine: &MorphEngine<'_>,
    config: &MorphConfig,
) -> Result<MorphResult> {
    expect_variant(config, MorphVariant::EmbeddingPlusDdim)?;
    engine.morph(a, b, config)
}

pub fn morph_dcmorph(
    a: &MorphSource<'_>,
    b: &MorphSource<'_>,
    engine: &MorphEngine<'_>,
    config: &MorphConfig,
) -> Result<MorphResult> {
    expect_variant(config, MorphVariant::Dcmorph)?;
    engine.morph(a, b, config)
}

/// One source pair with the reference probes used for scoring.
#[derive(Debug, Clone)]
pub struct AblationPair<'a> {
    pub a: MorphSource<'a>,
    pub b: MorphSource<'a>,
    pub refs_a: Vec<&'a Array3<f32>>,
    pub refs_b: Vec<&'a Array3<f32>>,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub morphs: Vec<MorphResult>,
    pub report: VulnerabilityReport,
    pub scores: Vec<EmbedderScores>,
}

/// Generates every (pair, config) morph in parallel. Each source is inverted
/// once and shared by the inversion-seeded variants. Output order follows
/// the input order.
pub fn generate_all(
    pairs: &[(MorphSource<'_>, MorphSource<'_>)],
    engine: &MorphEngine<'_>,
    configs: &[MorphConfig],
) -> Result<Vec<MorphResult>> {
    let mut inverted: HashMap<&str, LatentState> = HashMap::new();
    let steps: Vec<usize> = configs
        .iter()
        .filter(|c| c.variant.streams().0 == LatentStream::InvertedSlerp)
        .map(|c| c.num_inference_steps)
        .collect();
    if let Some(&n) = steps.first() {
        if steps.iter().any(|&s| s != n) {
            return param_err("inversion-seeded configs must share one step count");
        }
        let mut unique: Vec<MorphSource<'_>> = Vec::new();
        for (a, b) in pairs {
            for s in [a, b] {
                if s.inverted.is_none() && !unique.iter().any(|u| u.id == s.id) {
                    unique.push(*s);
                }
            }
        }
        let z: Vec<Result<Vec<LatentState>>> = unique
            .par_chunks(8)
            .map(|chunk| engine.invert_sources(chunk, n))
            .collect();
        let z: Vec<LatentState> = z.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
        inverted = unique.iter().map(|s| s.id).zip(z).collect();
    }
    let jobs: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|p| (0..configs.len()).map(move |c| (p, c)))
        .collect();
    jobs.par_iter()
        .map(|&(p, c)| {
            let (a, b) = &pairs[p];
            let attach = |s: &MorphSource<'_>| -> Result<LatentState> {
                s.inverted
                    .cloned()
                    .or_else(|| inverted.get(s.id).cloned())
                    .ok_or_else(|| Error::Param(format!("no inversion for {}", s.id)))
            };
            let needs = configs[c].variant.streams().0 == LatentStream::InvertedSlerp;
            if needs {
                let (za, zb) = (attach(a)?, attach(b)?);
                let a = MorphSource { inverted: Some(&za), ..*a };
                let b = MorphSource { inverted: Some(&zb), ..*b };
                engine.morph(&a, &b, &configs[c])
            } else {
                engine.morph(a, b, &configs[c])
            }
        })
        .collect()
}

/// Four-variant ablation over one pair list and seed, scored by every
/// evaluation embedder.
pub fn run_ablation(
    pairs: &[AblationPair<'_>],
    engine: &MorphEngine<'_>,
    base: &MorphConfig,
    embedders: &[&dyn IdentityModel],
    conditioning_embedder_id: &str,
    eval_images: &[(u32, &Array3<f32>)],
    fmr: FmrTargets,
) -> Result<AblationResult> {
    if !embedders.iter().any(|e| e.id() != conditioning_embedder_id) {
        return param_err("the ablation needs an evaluation embedder distinct from the conditioning one");
    }
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to morph".into()));
    }
    let configs: Vec<MorphConfig> = MorphVariant::ALL.iter().map(|&v| base.with_variant(v)).collect();
    let sources: Vec<(MorphSource<'_>, MorphSource<'_>)> = pairs.iter().map(|p| (p.a, p.b)).collect();
    let morphs = generate_all(&sources, engine, &configs)?;
    let probes: Vec<MorphProbe<'_>> = morphs
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let pair = &pairs[i / configs.len()];
            MorphProbe {
                morph_id: &m.morph_id,
                variant: m.config.variant.as_str(),
                image: &m.image,
                refs_a: &pair.refs_a,
                refs_b: &pair.refs_b,
            }
        })
        .collect();
    let (report, scores) = build_vulnerability_report(&probes, embedders, eval_images, fmr)?;
    Ok(AblationResult { morphs, report, scores })
}
