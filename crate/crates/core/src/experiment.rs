//! Experiment configuration and the in-memory lab: dataset, codec, trained
//! embedders and denoiser, plus source/pair planning for morph runs.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{IdentityEmbedding, IdentityModel};
use crate::diffusion::{ScheduleConfig, VarianceSchedule};
use crate::error::{param_err, Error, Result};
use crate::eval::{embed_all, select_pairs, FmrTargets, LabeledEmbedding, MorphPair, DEFAULT_BPCER_POINTS};
use crate::morph::{MorphConfig, MorphEngine, MorphSource, MorphVariant};
use crate::tensor::{hex, Shape3};
use crate::toy::{
    generate_dataset, train_embedder, AutoencoderConfig, ConvEmbedder, DatasetConfig, DenoiserConfig,
    DenoiserModel, DenoiserTrainConfig, DenoiserTrainReport, EmbedderConfig, EmbedderTrainReport,
    IdentityCodec, LatentCodec, MadConfig, PatchAutoencoder, SampleImage, Split, ToyDataset,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Identity,
    Autoencoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecSection {
    pub kind: CodecKind,
    pub autoencoder: AutoencoderConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSection {
    pub model: DenoiserConfig,
    pub train: DenoiserTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSection {
    /// Supplies `c = f(x)` to the generator.
    pub conditioning: EmbedderConfig,
    /// Held out from generation; used only for scoring.
    pub evaluation: Vec<EmbedderConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadSection {
    pub detector: MadConfig,
    /// Attack type the detector is trained on; the others are cross-attack.
    pub train_variant: MorphVariant,
    /// Pairs reserved for detector training (taken after the evaluation pairs).
    pub train_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphSection {
    pub defaults: MorphConfig,
    /// Top-k most similar pairs per attribute group.
    pub pairs_per_group: usize,
    /// Reference probes per source for min-max scoring.
    pub probes_per_subject: usize,
    pub variants: Vec<MorphVariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub fmr: FmrTargets,
    /// Percentages.
    pub bpcer_points: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub codec: CodecSection,
    pub denoiser: DenoiserSection,
    pub embedders: EmbedderSection,
    pub mad: MadSection,
    pub morph: MorphSection,
    pub evaluation: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            schedule: ScheduleConfig::default(),
            codec: CodecSection {
                kind: CodecKind::Identity,
                autoencoder: AutoencoderConfig::default(),
            },
            denoiser: DenoiserSection {
                model: DenoiserConfig::default(),
                train: DenoiserTrainConfig::default(),
            },
            embedders: EmbedderSection {
                conditioning: EmbedderConfig::default(),
                evaluation: vec![
                    EmbedderConfig {
                        id: "fr-b".into(),
                        channels: [12, 24, 48],
                        embed_dim: 48,
                        seed: 22,
                        ..EmbedderConfig::default()
                    },
                    EmbedderConfig {
                        id: "fr-c".into(),
                        channels: [16, 16, 32],
                        embed_dim: 64,
                        margin: 0.3,
                        seed: 23,
                        ..EmbedderConfig::default()
                    },
                ],
            },
            mad: MadSection {
                detector: MadConfig::default(),
                train_variant: MorphVariant::EmbeddingInterp,
                train_pairs: 40,
            },
            morph: MorphSection {
                defaults: MorphConfig::default(),
                pairs_per_group: 25,
                probes_per_subject: 1,
                variants: MorphVariant::ALL.to_vec(),
            },
            evaluation: EvalSection {
                fmr: FmrTargets::default(),
                bpcer_points: DEFAULT_BPCER_POINTS.to_vec(),
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Applies a `dotted.key=value` override. The value is parsed as a TOML
    /// value and falls back to a bare string, so `morph.defaults.variant=dcmorph`
    /// works without quotes.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Param(format!("override {assignment:?} is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Format(format!("config: {e}")))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let last = i + 1 == parts.len();
            node = match node {
                toml::Value::Table(t) => {
                    let slot = t
                        .get_mut(*part)
                        .ok_or_else(|| Error::Param(format!("unknown config key {key:?}")))?;
                    if last {
                        *slot = value.clone();
                        break;
                    }
                    slot
                }
                toml::Value::Array(a) => {
                    let idx: usize = part
                        .parse()
                        .map_err(|_| Error::Param(format!("{part:?} in {key:?} is not an index")))?;
                    let slot = a
                        .get_mut(idx)
                        .ok_or_else(|| Error::Param(format!("index {idx} out of range in {key:?}")))?;
                    if last {
                        *slot = value.clone();
                        break;
                    }
                    slot
                }
                _ => return Err(Error::Param(format!("{key:?} descends into a scalar"))),
            };
        }
        let updated: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Param(format!("override {assignment:?}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding. The output directory is not
    /// part of the experiment's identity and is excluded.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&canon).expect("config serializes");
        hex(&Sha256::digest(&json))
    }

    /// Hash of the settings that determine data and trained weights. Morph
    /// and evaluation knobs may change between commands on one run directory.
    pub fn model_hash(&self) -> String {
        let mut canon = self.clone();
        let d = Self::default();
        canon.morph = d.morph;
        canon.evaluation = d.evaluation;
        canon.hash()
    }

    pub fn latent_shape(&self) -> Shape3 {
        let s = self.dataset.image_size;
        match self.codec.kind {
            CodecKind::Identity => Shape3::new(1, s, s),
            CodecKind::Autoencoder => {
                let p = self.codec.autoencoder.patch;
                Shape3::new(self.codec.autoencoder.latent_channels, s / p.max(1), s / p.max(1))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.n_identities < 2 {
            return param_err("at least two identities are required");
        }
        if self.denoiser.model.latent != self.latent_shape() {
            return param_err(format!(
                "denoiser latent {} does not match codec latent {}",
                self.denoiser.model.latent,
                self.latent_shape()
            ));
        }
        if self.denoiser.model.id_dim != self.embedders.conditioning.embed_dim {
            return param_err("denoiser id_dim must equal the conditioning embedding size");
        }
        let mut ids = vec![self.embedders.conditioning.id.as_str()];
        for e in &self.embedders.evaluation {
            if ids.contains(&e.id.as_str()) {
                return param_err(format!("duplicate embedder id {:?}", e.id));
            }
            ids.push(&e.id);
        }
        if self.embedders.evaluation.is_empty() {
            return param_err("at least one held-out evaluation embedder is required");
        }
        if self.morph.probes_per_subject == 0
            || self.morph.probes_per_subject >= self.dataset.samples_per_identity
        {
            return param_err("probes per subject must lie in 1..samples_per_identity");
        }
        if self.morph.variants.is_empty() {
            return param_err("no morph variants selected");
        }
        self.morph.defaults.validate(&self.schedule.build()?)?;
        Ok(())
    }
}

/// Anything that maps images to latents and back, owned.
pub enum Codec {
    Identity(IdentityCodec),
    Autoencoder(Box<PatchAutoencoder>),
}

impl Codec {
    pub fn as_dyn(&self) -> &dyn LatentCodec {
        match self {
            Codec::Identity(c) => c,
            Codec::Autoencoder(c) => c.as_ref(),
        }
    }
}

pub fn build_codec(config: &ExperimentConfig, dataset: &ToyDataset) -> Result<(Codec, Option<f64>)> {
    match config.codec.kind {
        CodecKind::Identity => Ok((
            Codec::Identity(IdentityCodec {
                shape: dataset.image_shape(),
            }),
            None,
        )),
        CodecKind::Autoencoder => {
            let mut ae = PatchAutoencoder::new(config.codec.autoencoder, dataset.image_shape())?;
            let train: Vec<&Array3<f32>> = dataset.images_in(Split::Train).map(|s| &s.image).collect();
            let loss = ae.train(&train)?;
            Ok((Codec::Autoencoder(Box::new(ae)), Some(loss)))
        }
    }
}

/// Trains the denoiser on the training split, conditioned on each image's
/// own conditioning embedding. The first evaluation images form the
/// held-out loss batch.
pub fn train_denoiser(
    dataset: &ToyDataset,
    codec: &dyn LatentCodec,
    conditioning: &dyn IdentityModel,
    schedule: &VarianceSchedule,
    section: &DenoiserSection,
) -> Result<(DenoiserModel, DenoiserTrainReport)> {
    let encode = |split: Split| -> Result<(Vec<Array3<f32>>, Vec<IdentityEmbedding>)> {
        let images: Vec<&Array3<f32>> = dataset.images_in(split).map(|s| &s.image).collect();
        let latents = images
            .iter()
            .map(|x| codec.encode(x).map(|z| z.values))
            .collect::<Result<Vec<_>>>()?;
        Ok((latents, embed_all(conditioning, &images)?))
    };
    let (train_z, train_e) = encode(Split::Train)?;
    if train_z.is_empty() {
        return Err(Error::Data("the training split is empty".into()));
    }
    let (eval_z, eval_e) = encode(Split::Eval)?;
    let mut model = DenoiserModel::new(section.model)?;
    let report = model.fit(
        &train_z.iter().collect::<Vec<_>>(),
        &train_e.iter().collect::<Vec<_>>(),
        (&eval_z.iter().collect::<Vec<_>>(), &eval_e.iter().collect::<Vec<_>>()),
        schedule,
        &section.train,
    )?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub autoencoder_loss: Option<f64>,
    pub conditioning: EmbedderTrainReport,
    pub evaluation: Vec<EmbedderTrainReport>,
    pub denoiser: DenoiserTrainReport,
    pub seconds: f64,
}

/// Everything trained, held in memory.
pub struct Lab {
    pub config: ExperimentConfig,
    pub dataset: ToyDataset,
    pub schedule: VarianceSchedule,
    pub codec: Codec,
    pub conditioning: ConvEmbedder,
    pub evaluators: Vec<ConvEmbedder>,
    pub denoiser: DenoiserModel,
    pub summary: TrainingSummary,
}

impl Lab {
    pub fn train(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let start = Instant::now();
        let dataset = generate_dataset(&config.dataset)?;
        let schedule = config.schedule.build()?;
        let (codec, autoencoder_loss) = build_codec(&config, &dataset)?;
        let (conditioning, cond_report) = train_embedder(&dataset, &config.embedders.conditioning)?;
        log::info!(
            "conditioning embedder: held-out accuracy {:.3} ({:.1}s)",
            cond_report.held_out_accuracy,
            start.elapsed().as_secs_f64()
        );
        let mut evaluators = Vec::new();
        let mut eval_reports = Vec::new();
        for cfg in &config.embedders.evaluation {
            let (m, r) = train_embedder(&dataset, cfg)?;
            log::info!("evaluation embedder {}: held-out accuracy {:.3}", cfg.id, r.held_out_accuracy);
            evaluators.push(m);
            eval_reports.push(r);
        }
        let (denoiser, den_report) =
            train_denoiser(&dataset, codec.as_dyn(), &conditioning, &schedule, &config.denoiser)?;
        log::info!(
            "denoiser: held-out loss {:.4} -> {:.4} ({:.1}s)",
            den_report.initial_eval_loss,
            den_report.final_eval_loss,
            start.elapsed().as_secs_f64()
        );
        Ok(Self {
            summary: TrainingSummary {
                autoencoder_loss,
                conditioning: cond_report,
                evaluation: eval_reports,
                denoiser: den_report,
                seconds: start.elapsed().as_secs_f64(),
            },
            config,
            dataset,
            schedule,
            codec,
            conditioning,
            evaluators,
            denoiser,
        })
    }

    pub fn engine(&self) -> MorphEngine<'_> {
        MorphEngine {
            model: &self.denoiser,
            codec: self.codec.as_dyn(),
            schedule: &self.schedule,
            preprocess: None,
        }
    }

    pub fn evaluator_refs(&self) -> Vec<&dyn IdentityModel> {
        self.evaluators.iter().map(|e| e as &dyn IdentityModel).collect()
    }

    pub fn eval_images(&self) -> Vec<(u32, &Array3<f32>)> {
        self.dataset
            .images_in(Split::Eval)
            .map(|s| (s.label, &s.image))
            .collect()
    }
}

pub fn subject_id(label: u32) -> String {
    format!("id{label:04}")
}

pub fn parse_subject_id(id: &str) -> Result<u32> {
    id.strip_prefix("id")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Param(format!("bad subject id {id:?}")))
}

/// The source image of a subject for a given run seed, plus reference probes
/// taken from the subject's other samples.
#[derive(Debug, Clone, Copy)]
pub struct SubjectImages<'a> {
    pub label: u32,
    pub source: &'a SampleImage,
    pub probes: [Option<&'a SampleImage>; 8],
}

impl<'a> SubjectImages<'a> {
    pub fn plan(dataset: &'a ToyDataset, label: u32, run_seed: u64, probes: usize) -> Result<Self> {
        let n = dataset.config.samples_per_identity as u32;
        if probes == 0 || probes as u32 >= n || probes > 8 {
            return param_err("probes per subject must lie in 1..samples_per_identity and be at most 8");
        }
        let mut h = Sha256::new();
        h.update(label.to_le_bytes());
        h.update(run_seed.to_le_bytes());
        let d = h.finalize();
        let first = u32::from_le_bytes(d[..4].try_into().expect("4 bytes")) % n;
        let get = |s: u32| {
            dataset
                .image(label, s % n)
                .ok_or_else(|| Error::Data(format!("missing image for {}", subject_id(label))))
        };
        let mut out = [None; 8];
        for (i, slot) in out.iter_mut().take(probes).enumerate() {
            *slot = Some(get(first + 1 + i as u32)?);
        }
        Ok(Self {
            label,
            source: get(first)?,
            probes: out,
        })
    }

    pub fn probe_images(&self) -> Vec<&'a Array3<f32>> {
        self.probes.iter().flatten().map(|s| &s.image).collect()
    }

    pub fn source_id(&self) -> String {
        self.source.id()
    }
}

/// Per-subject conditioning embeddings of the evaluation split (mean of the
/// normalized per-image embeddings), labeled with the attribute group.
/// Mean normalized embedding of each subject in `split`.
pub fn subject_embeddings(
    dataset: &ToyDataset,
    embedder: &dyn IdentityModel,
    split: Split,
) -> Result<Vec<LabeledEmbedding>> {
    let mut out = Vec::new();
    for label in dataset.labels(split) {
        let images: Vec<&Array3<f32>> = dataset
            .images_in(split)
            .filter(|s| s.label == label)
            .map(|s| &s.image)
            .collect();
        let embs = embed_all(embedder, &images)?;
        let mut mean = ndarray::Array1::<f32>::zeros(embedder.embedding_dim());
        for e in &embs {
            mean += &e.normalized().values;
        }
        let group = dataset
            .identity(label)
            .ok_or_else(|| Error::Data(format!("unknown identity {label}")))?
            .group;
        out.push(LabeledEmbedding {
            id: subject_id(label),
            group: group.to_string(),
            embedding: IdentityEmbedding::new(mean)?.normalized(),
        });
    }
    Ok(out)
}

/// Auto-selected morph pairs: the `k` most similar subject pairs per
/// attribute group within `split`.
pub fn auto_pairs(
    dataset: &ToyDataset,
    embedder: &dyn IdentityModel,
    split: Split,
    k: usize,
) -> Result<(Vec<MorphPair>, bool)> {
    let subjects = subject_embeddings(dataset, embedder, split)?;
    let sel = select_pairs(&subjects, k)?;
    Ok((sel.pairs, sel.saturated))
}

/// Conditioning embeddings and images for one planned pair.
pub struct PlannedPair<'a> {
    pub a: SubjectImages<'a>,
    pub b: SubjectImages<'a>,
    pub emb_a: IdentityEmbedding,
    pub emb_b: IdentityEmbedding,
    pub id_a: String,
    pub id_b: String,
}

impl<'a> PlannedPair<'a> {
    pub fn sources(&self) -> (MorphSource<'_>, MorphSource<'_>) {
        (
            MorphSource::new(&self.id_a, &self.a.source.image, &self.emb_a),
            MorphSource::new(&self.id_b, &self.b.source.image, &self.emb_b),
        )
    }
}

pub fn plan_pairs<'a>(
    dataset: &'a ToyDataset,
    conditioning: &dyn IdentityModel,
    pairs: &[MorphPair],
    run_seed: u64,
    probes: usize,
) -> Result<Vec<PlannedPair<'a>>> {
    pairs
        .iter()
        .map(|p| {
            let a = SubjectImages::plan(dataset, parse_subject_id(&p.id_a)?, run_seed, probes)?;
            let b = SubjectImages::plan(dataset, parse_subject_id(&p.id_b)?, run_seed, probes)?;
            let emb = conditioning.embed_batch(&[&a.source.image, &b.source.image])?;
            let mut it = emb.into_iter();
            Ok(PlannedPair {
                id_a: a.source_id(),
                id_b: b.source_id(),
                emb_a: it.next().expect("two embeddings"),
                emb_b: it.next().expect("two embeddings"),
                a,
                b,
            })
        })
        .collect()
}
