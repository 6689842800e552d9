//! The experiment commands. Each reads and writes one run directory:
//!
//! ```text
//! <out_dir>/config.toml           experiment config
//! <out_dir>/run_manifest.jsonl    one appended entry per command
//! <out_dir>/dataset/              images/*.png, manifest.jsonl, identities.jsonl
//! <out_dir>/checkpoints/          *.bin, training.json
//! <out_dir>/morphs/               images/*.png, manifest.jsonl, pairs.jsonl, latents.bin
//! <out_dir>/reports/              *.json, *.txt, score files
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::conditioning::IdentityModel;
use crate::error::{Error, Result};
use crate::eval::{
    compute_detection_metrics_at, detection_table, embed_all, score_set, vulnerability_from_scores, DetectionReport,
    EmbedderScores, MorphComparisonRecord, MorphPair, ScoreSet, VulnerabilityReport,
};
use crate::experiment::{
    auto_pairs, build_codec, parse_subject_id, plan_pairs, subject_id, train_denoiser, Codec, CodecKind,
    ExperimentConfig, PlannedPair,
};
use crate::io::{
    append_jsonl, file_sha256, load_autoencoder, load_denoiser, load_embedder, load_mad, read_json, read_jsonl,
    read_png16, save_autoencoder, save_denoiser, save_embedder, save_mad, write_json, write_jsonl, write_latents,
    write_png16,
};
use crate::morph::{generate_all, MorphConfig, MorphEngine, MorphResult, MorphSource, MorphVariant};
use crate::toy::{
    generate_dataset, train_embedder, train_mad_detector, ConvEmbedder, DenoiserModel, IdentityCodec, Jitter,
    MadDetector, SampleImage, Split, SyntheticIdentity, ToyDataset,
};

pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.jsonl")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn dataset_manifest(&self) -> PathBuf {
        self.dataset().join("manifest.jsonl")
    }
    pub fn identities(&self) -> PathBuf {
        self.dataset().join("identities.jsonl")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn embedder_checkpoint(&self, id: &str) -> PathBuf {
        self.checkpoints().join(format!("embedder-{id}.bin"))
    }
    pub fn denoiser_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("denoiser.bin")
    }
    pub fn autoencoder_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("autoencoder.bin")
    }
    pub fn mad_checkpoint(&self, id: &str) -> PathBuf {
        self.checkpoints().join(format!("mad-{id}.bin"))
    }
    pub fn training_summary(&self) -> PathBuf {
        self.checkpoints().join("training.json")
    }
    pub fn morphs(&self) -> PathBuf {
        self.root.join("morphs")
    }
    pub fn morph_manifest(&self) -> PathBuf {
        self.morphs().join("manifest.jsonl")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// One appended entry in `run_manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub command: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<Artifact>,
    pub metrics: serde_json::Value,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn relative(layout: &RunLayout, path: &Path) -> String {
    path.strip_prefix(&layout.root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn artifact(layout: &RunLayout, path: &Path) -> Result<Artifact> {
    Ok(Artifact {
        path: relative(layout, path),
        sha256: file_sha256(path)?,
    })
}

fn record_run(
    config: &ExperimentConfig,
    command: &str,
    started: u64,
    paths: &[PathBuf],
    metrics: serde_json::Value,
) -> Result<()> {
    let layout = RunLayout::new(&config.out_dir);
    let artifacts = paths.iter().map(|p| artifact(&layout, p)).collect::<Result<Vec<_>>>()?;
    append_jsonl(
        &layout.run_manifest(),
        &RunManifest {
            config_hash: config.hash(),
            command: command.to_owned(),
            started_unix: started,
            finished_unix: now(),
            artifacts,
            metrics,
        },
    )
}

/// Refuses to mix artifacts produced under different data or model settings.
fn check_config(config: &ExperimentConfig) -> Result<()> {
    let layout = RunLayout::new(&config.out_dir);
    let path = layout.config();
    if path.exists() {
        let stored = ExperimentConfig::from_toml(&std::fs::read_to_string(&path)?)?;
        if stored.model_hash() != config.model_hash() {
            return Err(Error::Data(format!(
                "{} was produced with model config {} but the current config hashes to {}",
                layout.root.display(),
                stored.model_hash(),
                config.model_hash()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub path: String,
    pub label: u32,
    pub sample: u32,
    pub split: Split,
    pub group: u8,
    pub jitter: Jitter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub n_identities: usize,
    pub n_images: usize,
    pub manifest_sha256: String,
}

/// Renders the dataset and writes images plus manifests. Also stores the
/// config that every later command checks against.
pub fn cmd_synth_data(config: &ExperimentConfig) -> Result<SynthSummary> {
    config.validate()?;
    let started = now();
    let layout = RunLayout::new(&config.out_dir);
    std::fs::create_dir_all(&layout.root)?;
    check_config(config)?;
    std::fs::write(layout.config(), config.to_toml()?)?;
    let dataset = generate_dataset(&config.dataset)?;
    let mut records = Vec::with_capacity(dataset.images.len());
    for s in &dataset.images {
        let rel = format!("images/{}.png", s.id());
        write_png16(&layout.dataset().join(&rel), &s.image)?;
        records.push(DatasetRecord {
            image_id: s.id(),
            path: rel,
            label: s.label,
            sample: s.sample,
            split: s.split,
            group: dataset.identity(s.label).map(|i| i.group).unwrap_or(0),
            jitter: s.jitter,
        });
    }
    write_jsonl(&layout.dataset_manifest(), &records)?;
    write_jsonl(&layout.identities(), &dataset.identities)?;
    let summary = SynthSummary {
        n_identities: dataset.identities.len(),
        n_images: records.len(),
        manifest_sha256: file_sha256(&layout.dataset_manifest())?,
    };
    record_run(
        config,
        "synth-data",
        started,
        &[layout.config(), layout.dataset_manifest(), layout.identities()],
        serde_json::to_value(&summary)?,
    )?;
    Ok(summary)
}

/// Reads the dataset back from disk (pixel values are the stored 16-bit ones).
pub fn load_dataset(config: &ExperimentConfig) -> Result<ToyDataset> {
    let layout = RunLayout::new(&config.out_dir);
    if !layout.dataset_manifest().exists() {
        return Err(Error::Data(format!(
            "no dataset at {}; run synth-data first",
            layout.dataset().display()
        )));
    }
    let identities: Vec<SyntheticIdentity> = read_jsonl(&layout.identities())?;
    let records: Vec<DatasetRecord> = read_jsonl(&layout.dataset_manifest())?;
    let images = records
        .into_iter()
        .map(|r| {
            Ok(SampleImage {
                label: r.label,
                sample: r.sample,
                split: r.split,
                jitter: r.jitter,
                image: read_png16(&layout.dataset().join(&r.path))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyDataset {
        config: config.dataset,
        identities,
        images,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainTarget {
    Embedder,
    Denoiser,
    Mad,
}

fn load_ckpt<T>(path: &Path, what: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::Data(format!("missing {what} checkpoint {}", path.display())));
    }
    f(path)
}

/// Models loaded from a run directory.
pub struct Models {
    pub dataset: ToyDataset,
    pub schedule: crate::diffusion::VarianceSchedule,
    pub codec: Codec,
    pub conditioning: ConvEmbedder,
    pub evaluators: Vec<ConvEmbedder>,
    pub denoiser: DenoiserModel,
}

impl Models {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        check_config(config)?;
        let layout = RunLayout::new(&config.out_dir);
        let dataset = load_dataset(config)?;
        let conditioning = load_ckpt(
            &layout.embedder_checkpoint(&config.embedders.conditioning.id),
            "conditioning embedder",
            load_embedder,
        )?;
        let evaluators = config
            .embedders
            .evaluation
            .iter()
            .map(|e| load_ckpt(&layout.embedder_checkpoint(&e.id), "evaluation embedder", load_embedder))
            .collect::<Result<Vec<_>>>()?;
        let denoiser = load_ckpt(&layout.denoiser_checkpoint(), "denoiser", load_denoiser)?;
        let codec = match config.codec.kind {
            CodecKind::Identity => Codec::Identity(IdentityCodec {
                shape: dataset.image_shape(),
            }),
            CodecKind::Autoencoder => Codec::Autoencoder(Box::new(load_ckpt(
                &layout.autoencoder_checkpoint(),
                "autoencoder",
                load_autoencoder,
            )?)),
        };
        Ok(Self {
            schedule: config.schedule.build()?,
            dataset,
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
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct StoredTraining {
    embedders: Option<(crate::toy::EmbedderTrainReport, Vec<crate::toy::EmbedderTrainReport>)>,
    denoiser: Option<crate::toy::DenoiserTrainReport>,
    autoencoder_loss: Option<f64>,
    mad_loss: Option<f64>,
}

/// Trains one stage and writes its checkpoint(s). Stages depend on each
/// other in the order embedder → denoiser → mad.
pub fn cmd_train(config: &ExperimentConfig, target: TrainTarget) -> Result<serde_json::Value> {
    config.validate()?;
    check_config(config)?;
    let started = now();
    let layout = RunLayout::new(&config.out_dir);
    let dataset = load_dataset(config)?;
    let summary_path = layout.training_summary();
    let mut stored: StoredTraining = if summary_path.exists() {
        read_json(&summary_path)?
    } else {
        StoredTraining::default()
    };
    let mut written = Vec::new();
    match target {
        TrainTarget::Embedder => {
            let (cond, cond_report) = train_embedder(&dataset, &config.embedders.conditioning)?;
            let p = layout.embedder_checkpoint(&cond.config.id);
            save_embedder(&p, &cond)?;
            written.push(p);
            let mut reports = Vec::new();
            for cfg in &config.embedders.evaluation {
                let (m, r) = train_embedder(&dataset, cfg)?;
                let p = layout.embedder_checkpoint(&cfg.id);
                save_embedder(&p, &m)?;
                written.push(p);
                reports.push(r);
            }
            stored.embedders = Some((cond_report, reports));
        }
        TrainTarget::Denoiser => {
            let conditioning = load_ckpt(
                &layout.embedder_checkpoint(&config.embedders.conditioning.id),
                "conditioning embedder",
                load_embedder,
            )?;
            let (codec, ae_loss) = build_codec(config, &dataset)?;
            if let Codec::Autoencoder(ae) = &codec {
                save_autoencoder(&layout.autoencoder_checkpoint(), ae)?;
                written.push(layout.autoencoder_checkpoint());
            }
            let schedule = config.schedule.build()?;
            let (model, report) = train_denoiser(&dataset, codec.as_dyn(), &conditioning, &schedule, &config.denoiser)?;
            save_denoiser(&layout.denoiser_checkpoint(), &model)?;
            written.push(layout.denoiser_checkpoint());
            stored.denoiser = Some(report);
            stored.autoencoder_loss = ae_loss;
        }
        TrainTarget::Mad => {
            let models = Models::load(config)?;
            // Attacks come from training-split subjects so the detector never
            // sees the identities used in evaluation morphs.
            let groups = models.dataset.identities.iter().map(|i| i.group).collect::<std::collections::BTreeSet<_>>();
            let per_group = config.mad.train_pairs.div_ceil(groups.len().max(1));
            let (mut pairs, _) = auto_pairs(&models.dataset, &models.conditioning, Split::Train, per_group)?;
            pairs.truncate(config.mad.train_pairs);
            let planned = plan_pairs(
                &models.dataset,
                &models.conditioning,
                &pairs,
                config.morph.defaults.seed,
                config.morph.probes_per_subject,
            )?;
            let sources: Vec<_> = planned.iter().map(PlannedPair::sources).collect();
            let morph_cfg = config.morph.defaults.with_variant(config.mad.train_variant);
            let attacks = generate_all(&sources, &models.engine(), &[morph_cfg])?;
            let attacks: Vec<Array3<f32>> = attacks.iter().map(|m| crate::io::quantize_image(&m.image)).collect();
            let bona: Vec<&Array3<f32>> = models.dataset.images_in(Split::Train).map(|s| &s.image).collect();
            let (det, loss) = train_mad_detector(&bona, &attacks.iter().collect::<Vec<_>>(), &config.mad.detector)?;
            let p = layout.mad_checkpoint(&config.mad.detector.id);
            save_mad(&p, &det)?;
            written.push(p);
            stored.mad_loss = Some(loss);
        }
    }
    write_json(&summary_path, &stored)?;
    written.push(summary_path);
    let metrics = serde_json::to_value(&stored)?;
    let name = match target {
        TrainTarget::Embedder => "train embedder",
        TrainTarget::Denoiser => "train denoiser",
        TrainTarget::Mad => "train mad",
    };
    record_run(config, name, started, &written, metrics.clone())?;
    Ok(metrics)
}

/// Runs every stage in order: synth-data, train (all three), morph,
/// evaluate (both modes).
pub fn cmd_all(config: &ExperimentConfig) -> Result<(VulnerabilityReport, Vec<DetectionRow>)> {
    cmd_synth_data(config)?;
    cmd_train(config, TrainTarget::Embedder)?;
    cmd_train(config, TrainTarget::Denoiser)?;
    cmd_train(config, TrainTarget::Mad)?;
    cmd_morph(config, None)?;
    let v = cmd_evaluate_vulnerability(config)?;
    let d = cmd_evaluate_detectability(config)?;
    Ok((v, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphRecord {
    pub morph_id: String,
    pub variant: MorphVariant,
    pub subject_a: String,
    pub subject_b: String,
    pub source_a: String,
    pub source_b: String,
    pub refs_a: Vec<String>,
    pub refs_b: Vec<String>,
    pub lambda: f32,
    pub omega: f32,
    pub num_inference_steps: usize,
    pub seed: u64,
    pub path: String,
    pub sha256: String,
    pub initial_latent_sha256: String,
    pub config_hash: String,
}

/// Generates the configured variants over explicit subject pairs or, when
/// `pairs` is `None`, the auto-selected top pairs per attribute group.
pub fn cmd_morph(config: &ExperimentConfig, pairs: Option<&[(String, String)]>) -> Result<Vec<MorphRecord>> {
    config.validate()?;
    let started = now();
    let layout = RunLayout::new(&config.out_dir);
    let models = Models::load(config)?;
    let (selected, saturated) = match pairs {
        Some(explicit) => {
            let mut out = Vec::new();
            for (a, b) in explicit {
                for id in [a, b] {
                    let label = parse_subject_id(id)?;
                    if models.dataset.identity(label).is_none() {
                        return Err(Error::Data(format!("unknown subject {id}")));
                    }
                }
                let (a, b) = if a <= b { (a, b) } else { (b, a) };
                out.push(MorphPair {
                    id_a: a.clone(),
                    id_b: b.clone(),
                    group: String::new(),
                    similarity: f64::NAN,
                });
            }
            (out, false)
        }
        None => auto_pairs(&models.dataset, &models.conditioning, Split::Eval, config.morph.pairs_per_group)?,
    };
    if saturated {
        log::warn!("fewer candidate pairs than requested in some group; using all of them");
    }
    let seed = config.morph.defaults.seed;
    let planned = plan_pairs(
        &models.dataset,
        &models.conditioning,
        &selected,
        seed,
        config.morph.probes_per_subject,
    )?;
    let sources: Vec<(MorphSource<'_>, MorphSource<'_>)> = planned.iter().map(PlannedPair::sources).collect();
    let configs: Vec<MorphConfig> = config
        .morph
        .variants
        .iter()
        .map(|&v| config.morph.defaults.with_variant(v))
        .collect();
    let engine = models.engine();
    let morphs = generate_all(&sources, &engine, &configs)?;

    let mut inverted: Vec<(String, crate::diffusion::LatentState)> = Vec::new();
    if configs.iter().any(|c| c.variant.streams().0 == crate::morph::LatentStream::InvertedSlerp) {
        let mut unique: Vec<MorphSource<'_>> = Vec::new();
        for (a, b) in &sources {
            for s in [a, b] {
                if !unique.iter().any(|u| u.id == s.id) {
                    unique.push(*s);
                }
            }
        }
        let z = engine.invert_sources(&unique, config.morph.defaults.num_inference_steps)?;
        inverted = unique.iter().map(|s| s.id.to_owned()).zip(z).collect();
    }

    // A morph command replaces the previous set.
    if layout.morph_manifest().exists() {
        let previous: Vec<MorphRecord> = read_jsonl(&layout.morph_manifest())?;
        for r in previous {
            let path = layout.morphs().join(&r.path);
            if path.exists() {
                std::fs::remove_file(path)?;
            }
        }
        let latents = layout.morphs().join("latents.bin");
        if latents.exists() {
            std::fs::remove_file(latents)?;
        }
    }
    let mut written = Vec::new();
    write_jsonl(&layout.morphs().join("pairs.jsonl"), &selected)?;
    written.push(layout.morphs().join("pairs.jsonl"));
    if !inverted.is_empty() {
        let p = layout.morphs().join("latents.bin");
        write_latents(&p, &inverted)?;
        written.push(p);
    }
    let hash = config.hash();
    let mut records = Vec::with_capacity(morphs.len());
    for (i, m) in morphs.iter().enumerate() {
        let pair = &planned[i / configs.len()];
        let rel = format!("images/{}.png", m.morph_id);
        let path = layout.morphs().join(&rel);
        write_png16(&path, &m.image)?;
        records.push(morph_record(m, pair, rel, file_sha256(&path)?, &hash));
    }
    write_jsonl(&layout.morph_manifest(), &records)?;
    written.push(layout.morph_manifest());
    record_run(
        config,
        "morph",
        started,
        &written,
        serde_json::json!({ "pairs": selected.len(), "morphs": records.len(), "saturated": saturated }),
    )?;
    Ok(records)
}

fn morph_record(m: &MorphResult, pair: &PlannedPair<'_>, path: String, sha256: String, hash: &str) -> MorphRecord {
    let ids = |s: &crate::experiment::SubjectImages<'_>| s.probes.iter().flatten().map(|p| p.id()).collect();
    MorphRecord {
        morph_id: m.morph_id.clone(),
        variant: m.config.variant,
        subject_a: subject_id(pair.a.label),
        subject_b: subject_id(pair.b.label),
        source_a: m.source_a.clone(),
        source_b: m.source_b.clone(),
        refs_a: ids(&pair.a),
        refs_b: ids(&pair.b),
        lambda: m.config.lambda,
        omega: m.config.omega,
        num_inference_steps: m.config.num_inference_steps,
        seed: m.config.seed,
        path,
        sha256,
        initial_latent_sha256: m.provenance.initial_latent_sha256.clone(),
        config_hash: hash.to_owned(),
    }
}

/// A line in a recognition score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScoreRecord {
    Genuine { embedder_id: String, score: f64 },
    Impostor { embedder_id: String, score: f64 },
    Morph { variant: String, record: MorphComparisonRecord },
}

fn load_morphs(config: &ExperimentConfig) -> Result<Vec<(MorphRecord, Array3<f32>)>> {
    let layout = RunLayout::new(&config.out_dir);
    if !layout.morph_manifest().exists() {
        return Err(Error::Data("no morph set; run morph first".into()));
    }
    let records: Vec<MorphRecord> = read_jsonl(&layout.morph_manifest())?;
    if records.is_empty() {
        return Err(Error::Data("the morph set is empty".into()));
    }
    records
        .into_iter()
        .map(|r| {
            let img = read_png16(&layout.morphs().join(&r.path))?;
            Ok((r, img))
        })
        .collect()
}

fn image_index(dataset: &ToyDataset) -> HashMap<String, &Array3<f32>> {
    dataset.images.iter().map(|s| (s.id(), &s.image)).collect()
}

/// A line in an embedding export: one evaluation image under one embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub embedder_id: String,
    pub image_id: String,
    pub label: u32,
    pub values: Vec<f32>,
}

pub fn embedding_file(layout: &RunLayout, embedder_id: &str) -> PathBuf {
    layout.reports().join(format!("embeddings-{embedder_id}.jsonl"))
}

pub fn score_file(layout: &RunLayout, embedder_id: &str) -> PathBuf {
    layout.reports().join(format!("scores-{embedder_id}.jsonl"))
}

/// Vulnerability evaluation with every held-out embedder. Writes score files,
/// `vulnerability.json` and `vulnerability.txt`.
pub fn cmd_evaluate_vulnerability(config: &ExperimentConfig) -> Result<VulnerabilityReport> {
    config.validate()?;
    let started = now();
    let layout = RunLayout::new(&config.out_dir);
    let models = Models::load(config)?;
    let morphs = load_morphs(config)?;
    let index = image_index(&models.dataset);
    let lookup = |ids: &[String]| -> Result<Vec<&Array3<f32>>> {
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("missing reference image {id}")))
            })
            .collect()
    };
    let eval: Vec<&SampleImage> = models.dataset.images_in(Split::Eval).collect();
    let eval_images: Vec<&Array3<f32>> = eval.iter().map(|s| &s.image).collect();
    let mut per_embedder = Vec::new();
    let mut written = Vec::new();
    for emb in &models.evaluators {
        let embedded = embed_all(emb, &eval_images)?;
        let exported: Vec<EmbeddingRecord> = eval
            .iter()
            .zip(&embedded)
            .map(|(s, e)| EmbeddingRecord {
                embedder_id: emb.id().to_owned(),
                image_id: s.id(),
                label: s.label,
                values: e.values.to_vec(),
            })
            .collect();
        let path = embedding_file(&layout, emb.id());
        write_jsonl(&path, &exported)?;
        written.push(path);
        let scores = score_set(&eval.iter().map(|s| s.label).zip(embedded).collect::<Vec<_>>())?;
        let mut records = Vec::with_capacity(morphs.len());
        for (m, img) in &morphs {
            let e = emb.embed_batch(&[img])?.remove(0);
            let sims = |refs: &[&Array3<f32>]| -> Result<Vec<f64>> {
                Ok(emb.embed_batch(refs)?.iter().map(|r| e.cosine(r)).collect())
            };
            let rec = MorphComparisonRecord::from_probes(
                &m.morph_id,
                emb.id(),
                &sims(&lookup(&m.refs_a)?)?,
                &sims(&lookup(&m.refs_b)?)?,
            )?;
            records.push((m.variant.as_str().to_owned(), rec));
        }
        let es = EmbedderScores {
            embedder_id: emb.id().to_owned(),
            scores,
            records,
        };
        let path = score_file(&layout, emb.id());
        write_jsonl(&path, &score_records(&es))?;
        written.push(path);
        per_embedder.push(es);
    }
    let report = vulnerability_from_scores(&per_embedder, config.evaluation.fmr)?;
    let json = layout.reports().join("vulnerability.json");
    let txt = layout.reports().join("vulnerability.txt");
    write_json(&json, &report)?;
    std::fs::write(&txt, report.to_table())?;
    written.extend([json, txt]);
    record_run(config, "evaluate vulnerability", started, &written, serde_json::to_value(&report.rows)?)?;
    Ok(report)
}

fn score_records(es: &EmbedderScores) -> Vec<ScoreRecord> {
    let mut out = Vec::new();
    out.extend(es.scores.genuine.iter().map(|&score| ScoreRecord::Genuine {
        embedder_id: es.embedder_id.clone(),
        score,
    }));
    out.extend(es.scores.impostor.iter().map(|&score| ScoreRecord::Impostor {
        embedder_id: es.embedder_id.clone(),
        score,
    }));
    out.extend(es.records.iter().map(|(variant, record)| ScoreRecord::Morph {
        variant: variant.clone(),
        record: record.clone(),
    }));
    out
}

/// Rebuilds an embedder's scores from its score file.
pub fn read_score_file(path: &Path) -> Result<EmbedderScores> {
    let lines: Vec<ScoreRecord> = read_jsonl(path)?;
    let mut id = None;
    let mut scores = ScoreSet::default();
    let mut records = Vec::new();
    for l in lines {
        match l {
            ScoreRecord::Genuine { embedder_id, score } => {
                id.get_or_insert(embedder_id);
                scores.genuine.push(score);
            }
            ScoreRecord::Impostor { embedder_id, score } => {
                id.get_or_insert(embedder_id);
                scores.impostor.push(score);
            }
            ScoreRecord::Morph { variant, record } => {
                id.get_or_insert(record.embedder_id.clone());
                records.push((variant, record));
            }
        }
    }
    Ok(EmbedderScores {
        embedder_id: id.ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?,
        scores,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub detector_id: String,
    pub attack: String,
    /// Whether the detector saw this attack type during training.
    pub seen: bool,
    pub report: DetectionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadScoreRecord {
    pub detector_id: String,
    pub image_id: String,
    /// `bona_fide` or a morph variant.
    pub class: String,
    pub score: f64,
}

/// Detectability evaluation: bona fide evaluation images against each morph
/// variant. Writes `mad-scores.jsonl`, `detection.json` and `detection.txt`.
pub fn cmd_evaluate_detectability(config: &ExperimentConfig) -> Result<Vec<DetectionRow>> {
    config.validate()?;
    check_config(config)?;
    let started = now();
    let layout = RunLayout::new(&config.out_dir);
    let dataset = load_dataset(config)?;
    let det: MadDetector = load_ckpt(&layout.mad_checkpoint(&config.mad.detector.id), "detector", load_mad)?;
    let morphs = load_morphs(config)?;
    let bona: Vec<&SampleImage> = dataset.images_in(Split::Eval).collect();
    let bona_scores = det.score(&bona.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let mut lines: Vec<MadScoreRecord> = bona
        .iter()
        .zip(&bona_scores)
        .map(|(s, &score)| MadScoreRecord {
            detector_id: det.config.id.clone(),
            image_id: s.id(),
            class: "bona_fide".into(),
            score,
        })
        .collect();
    let mut rows = Vec::new();
    for v in &config.morph.variants {
        let imgs: Vec<(&MorphRecord, &Array3<f32>)> =
            morphs.iter().filter(|(r, _)| r.variant == *v).map(|(r, x)| (r, x)).collect();
        if imgs.is_empty() {
            continue;
        }
        let scores = det.score(&imgs.iter().map(|(_, x)| *x).collect::<Vec<_>>())?;
        lines.extend(imgs.iter().zip(&scores).map(|((r, _), &score)| MadScoreRecord {
            detector_id: det.config.id.clone(),
            image_id: r.morph_id.clone(),
            class: v.as_str().into(),
            score,
        }));
        rows.push(DetectionRow {
            detector_id: det.config.id.clone(),
            attack: v.as_str().into(),
            seen: *v == config.mad.train_variant,
            report: compute_detection_metrics_at(&bona_scores, &scores, &config.evaluation.bpcer_points)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("no morphs of the configured variants".into()));
    }
    let scores_path = layout.reports().join("mad-scores.jsonl");
    write_jsonl(&scores_path, &lines)?;
    let json = layout.reports().join("detection.json");
    let txt = layout.reports().join("detection.txt");
    write_json(&json, &rows)?;
    std::fs::write(&txt, detection_text(&rows))?;
    let metrics: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| serde_json::json!({ "attack": r.attack, "eer": r.report.eer }))
        .collect();
    record_run(config, "evaluate detectability", started, &[scores_path, json.clone(), txt], metrics.into())?;
    Ok(rows)
}

fn detection_text(rows: &[DetectionRow]) -> String {
    let table: Vec<(String, String, DetectionReport)> = rows
        .iter()
        .map(|r| {
            let attack = if r.seen { format!("{} (seen)", r.attack) } else { r.attack.clone() };
            (r.detector_id.clone(), attack, r.report.clone())
        })
        .collect();
    detection_table(&table)
}

/// Human-readable summary of whatever reports exist.
pub fn cmd_report(config: &ExperimentConfig) -> Result<String> {
    let layout = RunLayout::new(&config.out_dir);
    let mut out = String::new();
    let v = layout.reports().join("vulnerability.json");
    if v.exists() {
        let r: VulnerabilityReport = read_json(&v)?;
        out.push_str("Vulnerability (MMPMR)\n");
        out.push_str(&r.to_table());
        out.push('\n');
    }
    let d = layout.reports().join("detection.json");
    if d.exists() {
        let rows: Vec<DetectionRow> = read_json(&d)?;
        out.push_str("Detectability\n");
        out.push_str(&detection_text(&rows));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no reports under {}", layout.reports().display())));
    }
    Ok(out)
}
